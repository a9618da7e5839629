use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salinst::crf::{crf_refine, CrfConfig, CrfImage};
use salinst::{DenseMap, GrayImage};

/// Direct mean-field: every kernel term is evaluated from its formula.
fn naive_mean_field(prob: &DenseMap, img: &GrayImage, cfg: &CrfConfig) -> Vec<f64> {
    let (h, w, l) = (prob.height(), prob.width(), prob.channels());
    let n = h * w;
    let unary: Vec<f64> = prob.data().iter().map(|&p| p as f64).collect();
    let mut q = unary.clone();
    for _ in 0..cfg.iterations {
        let mut next = vec![0.0; n * l];
        for i in 0..n {
            let mut logits = vec![0.0; l];
            for (lab, z) in logits.iter_mut().enumerate() {
                *z = unary[i * l + lab].ln();
            }
            for j in (0..n).filter(|&j| j != i) {
                let dy = (i / w) as f64 - (j / w) as f64;
                let dx = (i % w) as f64 - (j % w) as f64;
                let di = img.intensity()[i] as f64 - img.intensity()[j] as f64;
                let d2 = dy * dy + dx * dx;
                let k = cfg.w1
                    * (-d2 / (2.0 * cfg.sigma_alpha.powi(2))
                        - di * di / (2.0 * cfg.sigma_beta.powi(2)))
                    .exp()
                    + cfg.w2 * (-d2 / (2.0 * cfg.sigma_gamma.powi(2))).exp();
                for (lab, z) in logits.iter_mut().enumerate() {
                    *z += k * q[j * l + lab];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            for lab in 0..l {
                next[i * l + lab] = (logits[lab] - m).exp() / z;
            }
        }
        q = next;
    }
    q
}

fn random_prob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DenseMap {
    let data = (0..h * w)
        .flat_map(|_| {
            let p: f32 = rng.gen_range(0.02..0.98);
            [1.0 - p, p]
        })
        .collect();
    DenseMap::new(h, w, 2, data).unwrap()
}

#[test]
fn matches_direct_mean_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let configs = [
        CrfConfig::default(),
        CrfConfig {
            w1: 1.5,
            w2: 0.5,
            sigma_alpha: 3.0,
            sigma_beta: 20.0,
            sigma_gamma: 1.0,
            iterations: 3,
        },
    ];
    for cfg in &configs {
        for _ in 0..4 {
            let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
            let img = GrayImage::from_fn(h, w, |_, _| rng.gen_range(0..=255u8));
            let prob = random_prob(&mut rng, h, w);
            let fast = crf_refine(&prob, CrfImage::Gray(&img), cfg).unwrap();
            let slow = naive_mean_field(&prob, &img, cfg);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((*a as f64 - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn flipped_pixel_pulled_to_neighbors() {
    let img = GrayImage::from_fn(6, 6, |_, _| 200);
    let data = (0..36)
        .flat_map(|i| if i == 14 { [0.7f32, 0.3] } else { [0.1, 0.9] })
        .collect();
    let prob = DenseMap::new(6, 6, 2, data).unwrap();
    let out = crf_refine(&prob, CrfImage::Gray(&img), &CrfConfig::default()).unwrap();
    assert!(out.pixel(14)[1] > 0.5);
    let slow = naive_mean_field(&prob, &img, &CrfConfig::default());
    assert!((out.pixel(14)[1] as f64 - slow[29]).abs() <= 1e-6);
}

#[test]
fn intensity_edge_limits_smoothing() {
    // A flipped pixel on the other side of a strong edge gets no appearance
    // support from the opposite region.
    let img = GrayImage::from_fn(6, 6, |_, x| if x < 3 { 0 } else { 255 });
    let data = (0..36)
        .flat_map(|i| if i % 6 < 3 { [0.1f32, 0.9] } else { [0.9, 0.1] })
        .collect();
    let prob = DenseMap::new(6, 6, 2, data).unwrap();
    let cfg = CrfConfig {
        w2: 0.0,
        ..CrfConfig::default()
    };
    let out = crf_refine(&prob, CrfImage::Gray(&img), &cfg).unwrap();
    for i in 0..36 {
        assert_eq!(out.pixel(i)[1] > 0.5, i % 6 < 3);
    }
}
