use vos_core::metrics::region_j;
use vos_core::pipeline::{Mode, Model, PipelineConfig};
use vos_core::synth;

fn matching_cfg() -> PipelineConfig {
    PipelineConfig {
        mode: Mode::MatchingOnly,
        clusters: "full".parse().unwrap(),
        ..PipelineConfig::default()
    }
}

#[test]
fn matching_only_tracks_synthetic_squares() {
    for seed in 0..8 {
        let seq = synth::generate(5, 2, seed).unwrap();
        let model = Model::from_config(matching_cfg()).unwrap();
        let preds = model.propagate(&seq.frames, &seq.masks[0]).unwrap();
        assert_eq!(preds[0], seq.masks[0]);
        for (t, (pred, gt)) in preds.iter().zip(&seq.masks).enumerate().skip(1) {
            for obj in 1..=2 {
                let j = region_j(pred, gt, obj).unwrap();
                assert!(j >= 0.9, "seed {seed} frame {t} object {obj}: J = {j}");
            }
        }
    }
}

#[test]
fn full_mode_is_valid_and_deterministic() {
    let seq = synth::generate(5, 2, 1).unwrap();
    let model = Model::from_config(PipelineConfig::default()).unwrap();
    let a = model.propagate(&seq.frames, &seq.masks[0]).unwrap();
    let b = model.propagate(&seq.frames, &seq.masks[0]).unwrap();
    assert_eq!(a, b);
    for m in &a {
        assert!(m.labels().iter().all(|&l| l <= 2));
        assert_eq!(m.num_objects(), 2);
    }
}
