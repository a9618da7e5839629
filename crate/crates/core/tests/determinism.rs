//! Outputs must not depend on the worker-thread count.

use rayon::ThreadPoolBuilder;
use salinst::attention::{cfm_forward, CfmWeights, FeaturePyramid};
use salinst::crf::{crf_refine, unary_from_saliency, CrfConfig, CrfImage};
use salinst::pipeline::{assemble, PipelineConfig};
use salinst::synth::{generate, textured_image, SceneSpec};
use salinst::DenseMap;

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

fn bits(m: &DenseMap) -> Vec<u32> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn assemble_independent_of_threads() {
    let bundle = generate(&SceneSpec::random(9, 48, 48, 4)).unwrap();
    let run = || {
        assemble(
            &bundle.saliency,
            &bundle.boundary,
            &bundle.offsets,
            &PipelineConfig::default(),
        )
        .unwrap()
    };
    assert_eq!(with_threads(1, run), with_threads(4, run));
}

#[test]
fn crf_independent_of_threads() {
    let img = textured_image(16, 16, 2);
    let sal = DenseMap::from_fn(16, 16, 1, |y, x, _| ((y * 5 + x * 3) % 11) as f32 / 10.0);
    let prob = unary_from_saliency(&sal).unwrap();
    let run = || crf_refine(&prob, CrfImage::Gray(&img), &CrfConfig::default()).unwrap();
    assert_eq!(bits(&with_threads(1, run)), bits(&with_threads(3, run)));
}

#[test]
fn cfm_independent_of_threads() {
    let sizes = [12, 6, 6, 3, 3];
    let channels = [4, 6, 8, 8, 2];
    let levels = sizes
        .iter()
        .zip(channels)
        .map(|(&s, c)| DenseMap::from_fn(s, s, c, |y, x, k| ((y + 2 * x + 3 * k) % 7) as f32 - 3.0))
        .collect();
    let pyr = FeaturePyramid::new(levels).unwrap();
    let w = CfmWeights::seeded_with_width(channels, 16, 5);
    let run = || cfm_forward(&pyr, &w).unwrap();
    let (a, b) = (with_threads(1, run), with_threads(4, run));
    for (x, y) in a.levels().iter().zip(b.levels()) {
        assert_eq!(bits(x), bits(y));
    }
}
