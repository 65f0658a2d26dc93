use std::fs;
use std::path::Path;

use vos_core::dataset::{load_dataset, read_mask, write_image, write_mask, ANNOTATIONS_DIR, FRAMES_DIR};
use vos_core::perturbation::{perturb_dataset, Perturbation, PerturbationSpec};
use vos_core::pipeline::{infer_dataset, Mode, Model, PipelineConfig};
use vos_core::weights::{load_weights, save_weights};
use vos_core::{synth, Image, LabelMask, VosError};

fn write_jpeg(path: &Path, img: &Image) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
        .unwrap()
        .save(path)
        .unwrap();
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn empty_root_has_no_sequences() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
    assert!(matches!(
        load_dataset(&dir.path().join("missing")),
        Err(VosError::Io { .. })
    ));
}

#[test]
fn stems_sort_numerically_across_extensions() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let seq = root.join(FRAMES_DIR).join("s");
    let img = Image::filled(8, 8, [50, 60, 70]);
    write_image(&seq.join("00010.png"), &img).unwrap();
    write_jpeg(&seq.join("00005.jpg"), &img);
    write_image(&seq.join("00000.png"), &img).unwrap();
    let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    write_mask(
        &root.join(ANNOTATIONS_DIR).join("s/00000.png"),
        &LabelMask::from_labels(8, 8, labels).unwrap(),
    )
    .unwrap();
    let recs = load_dataset(root).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].stems, vec!["00000", "00005", "00010"]);
    assert_eq!(recs[0].num_objects, 2);
    assert!(recs[0].annotations[1].is_none());
    assert_eq!(recs[0].load_frames().unwrap().len(), 3);
}

#[test]
fn missing_first_annotation_and_rgb_masks_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let img = Image::filled(8, 8, [0; 3]);
    for s in ["00000", "00001"] {
        write_image(&root.join(FRAMES_DIR).join("q").join(format!("{s}.png")), &img).unwrap();
    }
    match load_dataset(root) {
        Err(VosError::Data(m)) => assert!(m.contains("`q`"), "{m}"),
        other => panic!("{other:?}"),
    }
    write_image(&root.join(ANNOTATIONS_DIR).join("q/00000.png"), &img).unwrap();
    assert!(matches!(load_dataset(root), Err(VosError::Format { .. })));
}

fn synth_root(dir: &Path) {
    let seq = synth::generate(5, 2, 4).unwrap();
    synth::write_dataset(dir, &seq).unwrap();
}

#[test]
fn perturbed_datasets_are_deterministic_and_keep_masks() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    synth_root(&clean);

    let id = dir.path().join("id");
    perturb_dataset(&clean, &PerturbationSpec::new(Perturbation::Identity, 1), &id).unwrap();
    assert_eq!(tree(&clean), tree(&id));

    let spec = PerturbationSpec::new(Perturbation::GaussianNoise { sigma: 30.0 }, 7);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    perturb_dataset(&clean, &spec, &a).unwrap();
    perturb_dataset(&clean, &spec, &b).unwrap();
    assert_eq!(tree(&a), tree(&b));
    let recs_clean = load_dataset(&clean).unwrap();
    let recs_noisy = load_dataset(&a).unwrap();
    for (c, n) in recs_clean[0]
        .load_frames()
        .unwrap()
        .iter()
        .zip(recs_noisy[0].load_frames().unwrap())
    {
        assert_eq!((c.height(), c.width()), (n.height(), n.width()));
        assert_ne!(c, &n);
    }
    for (c, n) in recs_clean[0].annotations.iter().zip(&recs_noisy[0].annotations) {
        assert_eq!(
            fs::read(c.as_ref().unwrap()).unwrap(),
            fs::read(n.as_ref().unwrap()).unwrap()
        );
    }
}

#[test]
fn inference_ignores_later_ground_truth_and_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synth_root(&root);
    let cfg = PipelineConfig {
        mode: Mode::MatchingOnly,
        clusters: "1,16,full".parse().unwrap(),
        ..PipelineConfig::default()
    };
    let model = Model::from_config(cfg).unwrap();
    let out1 = dir.path().join("p1");
    infer_dataset(&load_dataset(&root).unwrap(), &model, &out1).unwrap();

    for t in 1..5 {
        fs::remove_file(root.join(ANNOTATIONS_DIR).join(format!("synth/{t:05}.png"))).unwrap();
    }
    let out2 = dir.path().join("p2");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| infer_dataset(&load_dataset(&root).unwrap(), &model, &out2))
        .unwrap();
    assert_eq!(tree(&out1), tree(&out2));

    let first = read_mask(&out1.join("synth/00000.png")).unwrap();
    assert_eq!(
        first,
        read_mask(&root.join(ANNOTATIONS_DIR).join("synth/00000.png")).unwrap()
    );
}

#[test]
fn weights_round_trip_and_reject_unknown_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let w = cfg.synthesize_weights(3).unwrap();
    let p = dir.path().join("w.toml");
    save_weights(&w, &p).unwrap();
    let back = load_weights(&p, Some(&cfg.param_table())).unwrap();
    assert_eq!(back, w);
    let enc_only = cfg.encoder.param_table();
    match load_weights(&p, Some(&enc_only)) {
        Err(VosError::Config(m)) => assert!(m.contains("proto.") || m.contains("cascade."), "{m}"),
        other => panic!("{other:?}"),
    }
}
