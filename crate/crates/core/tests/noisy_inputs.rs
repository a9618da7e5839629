//! Assembly on degraded versions of synthetic bundles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salinst::eval::{evaluate, AveragingMode, ImageEval};
use salinst::pipeline::{assemble, PipelineConfig};
use salinst::synth::{generate, SceneSpec};
use salinst::{DenseMap, OffsetField};

#[test]
fn tolerates_jittered_offsets_and_soft_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = PipelineConfig::default();
    let mut exact = 0;
    let mut images = Vec::new();
    for seed in 0..40 {
        let b = generate(&SceneSpec::random(seed, 40, 40, 4)).unwrap();
        let (h, w) = (b.saliency.height(), b.saliency.width());
        let vectors = b
            .offsets
            .vectors()
            .iter()
            .map(|v| {
                [
                    v[0] + rng.gen_range(-0.3..0.3),
                    v[1] + rng.gen_range(-0.3..0.3),
                ]
            })
            .collect();
        let offsets = OffsetField::new(h, w, vectors).unwrap();
        let soften = |m: &DenseMap, rng: &mut ChaCha8Rng| {
            let data = m
                .data()
                .iter()
                .map(|&v| (0.1 + 0.8 * v + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0))
                .collect();
            DenseMap::new(h, w, 1, data).unwrap()
        };
        let saliency = soften(&b.saliency, &mut rng);
        let boundary = soften(&b.boundary, &mut rng);
        let out = assemble(&saliency, &boundary, &offsets, &cfg).unwrap();
        if out.count() == b.count.0 {
            exact += 1;
        }
        images.push(ImageEval::from_label_maps(&out.labels, &b.labels, &out.scores).unwrap());
    }
    let report = evaluate(&images, &[0.5, 0.7], AveragingMode::Pooled).unwrap();
    assert!(exact >= 36);
    assert!(report.map_at["0.50"] >= 0.85);
}
