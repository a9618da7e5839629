//! `FMAP` binary map files.
//!
//! Layout: the ASCII magic `FMAP`, then `height`, `width`, `channels` as
//! little-endian `u32`, then `height * width * channels` little-endian
//! `f32` values, row-major with channels fastest. Each dimension is limited
//! to `2^16`. Instance label maps use one channel of integer-valued floats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::DenseMap;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const HEADER_LEN: usize = 16;
pub const MAX_DIM: u64 = 1 << 16;

pub fn encode(map: &DenseMap) -> Result<Vec<u8>> {
    for dim in [map.height(), map.width(), map.channels()] {
        check_dim(dim as u64)?;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.data().len());
    out.extend_from_slice(MAGIC);
    for dim in [map.height(), map.width(), map.channels()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<DenseMap> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dim = |k: usize| {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[4 + 4 * k..8 + 4 * k]);
        u32::from_le_bytes(b) as u64
    };
    let (h, w, c) = (dim(0), dim(1), dim(2));
    for d in [h, w, c] {
        check_dim(d)?;
    }
    let count = (h * w * c) as usize;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    DenseMap::new(h as usize, w as usize, c as usize, data)
}

pub fn load_map(path: impl AsRef<Path>) -> Result<DenseMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_map(map: &DenseMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_dim(dim: u64) -> Result<()> {
    if dim > MAX_DIM {
        Err(Error::DimensionOverflow { dim })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_value_encoding() {
        let m = DenseMap::new(1, 1, 1, vec![0.25]).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..], &0x3E80_0000u32.to_le_bytes());
    }

    #[test]
    fn header_dims_read_back() {
        let m = DenseMap::zeros(2, 3, 1);
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (2, 3, 1));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fmap");
        let m = DenseMap::new(2, 2, 1, vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        save_map(&m, &p).unwrap();
        let loaded = load_map(&p).unwrap();
        assert_eq!(loaded, m);
        let original = fs::read(&p).unwrap();
        let q = dir.path().join("n.fmap");
        save_map(&loaded, &q).unwrap();
        assert_eq!(fs::read(&q).unwrap(), original);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&DenseMap::zeros(1, 1, 1)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { found }) if &found == b"XMAP"));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&DenseMap::zeros(2, 2, 1)).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn dimension_overflow() {
        let m = DenseMap::zeros(1, 1 << 17, 1);
        assert!(matches!(
            encode(&m),
            Err(Error::DimensionOverflow { dim }) if dim == 1 << 17
        ));
        let mut bytes = Vec::from(&MAGIC[..]);
        for d in [1u32, 1 << 17, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        assert!(matches!(
            decode(&bytes),
            Err(Error::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_map("/nonexistent/dir/x.fmap"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unwritable_path() {
        let m = DenseMap::zeros(1, 1, 1);
        assert!(matches!(
            save_map(&m, "/nonexistent/dir/x.fmap"),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(h in 0usize..6, w in 0usize..6, c in 1usize..4, seed in any::<u64>()) {
            let n = h * w * c;
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 7) as u32 & 0x7f7f_ffff))
                .collect();
            let m = DenseMap::new(h, w, c, data).unwrap();
            let bytes = encode(&m).unwrap();
            let again = encode(&decode(&bytes).unwrap()).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }
}
