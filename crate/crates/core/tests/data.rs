use eet_core::data::{
    load_dataset, mirror, occurrence_rates, read_image, region_bounds, render, render_labeled, sample_dataset,
    save_dataset, write_image, AuKind, DatasetMeta, GlyphConfig, GlyphSpec,
};
use eet_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
}

fn configs() -> Vec<GlyphConfig> {
    vec![
        GlyphConfig::default(),
        GlyphConfig {
            aus: vec![AuKind::InnerBrowRaise, AuKind::OuterBrowRaise, AuKind::LipPart],
            ..GlyphConfig::default()
        },
    ]
}

#[test]
fn deformation_grows_with_intensity_for_every_au() {
    for cfg in configs() {
        for identity in 1..=cfg.identities {
            for i in 0..cfg.num_aus() {
                let at = |u: f64| {
                    let mut au = vec![1.0; cfg.num_aus()];
                    au[i] = u;
                    render(&GlyphSpec { identity, pose: 2, au }, &cfg).unwrap()
                };
                let base = at(2.0);
                let near = mean_abs_diff(&base, &at(3.0));
                let far = mean_abs_diff(&base, &at(4.0));
                assert!(far > near && near > 0.0, "{} identity {identity}: {near} vs {far}", cfg.aus[i]);
            }
        }
    }
}

#[test]
fn zero_au_vector_renders_neutral_face() {
    let cfg = GlyphConfig::default();
    let neutral = render(&GlyphSpec { identity: 5, pose: 2, au: vec![0.0; 4] }, &cfg).unwrap();
    let again = render(&GlyphSpec { identity: 5, pose: 2, au: vec![0.0; 4] }, &cfg).unwrap();
    assert_eq!(neutral.data(), again.data());
    let other = render(&GlyphSpec { identity: 5, pose: 2, au: vec![0.0, 0.0, 3.0, 0.0] }, &cfg).unwrap();
    assert!(mean_abs_diff(&neutral, &other) > 0.0);
}

#[test]
fn identities_render_differently() {
    let cfg = GlyphConfig::default();
    let faces: Vec<Tensor> =
        (1..=10).map(|d| render(&GlyphSpec { identity: d, pose: 2, au: vec![0.0; 4] }, &cfg).unwrap()).collect();
    for a in 0..faces.len() {
        for b in a + 1..faces.len() {
            assert!(mean_abs_diff(&faces[a], &faces[b]) > 0.01, "identities {} and {}", a + 1, b + 1);
        }
    }
}

#[test]
fn default_archetype_mixture_has_interior_occurrence_rates() {
    let cfg = GlyphConfig::default();
    let ds = sample_dataset(&cfg, 20, 0.3, 0).unwrap();
    let mut all = ds.train.clone();
    all.extend(ds.test.clone());
    let rates = occurrence_rates(&all, cfg.max_level).unwrap();
    let threshold = (cfg.max_level as f64 - 1.0) / 2.0;
    for (i, r) in rates.iter().enumerate() {
        let hits = all.iter().filter(|img| img.au[i] > threshold).count();
        assert_eq!(*r, hits as f64 / all.len() as f64);
        assert!(*r > 0.0 && *r < 1.0, "AU {i}: {r}");
    }
    for img in &all {
        assert!(img.au.iter().all(|u| (0.0..=5.0).contains(u)));
    }
}

#[test]
fn flipped_left_pose_matches_right_pose_render() {
    let cfg = GlyphConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for identity in 1..=10 {
        let au: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..=5.0)).collect();
        let left = render_labeled(&GlyphSpec { identity, pose: 1, au: au.clone() }, &cfg).unwrap();
        let right = render_labeled(&GlyphSpec { identity, pose: 3, au }, &cfg).unwrap();
        let flipped = mirror(&left, 3);
        assert_eq!(flipped.pose, 3);
        assert!(flipped.pixels.max_abs_diff(&right.pixels) <= 1e-12);
    }
}

#[test]
fn image_round_trips_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let zeros = Tensor::zeros(&[1, 1, 8, 8]);
    let ones = Tensor::ones(&[1, 1, 8, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let random = Tensor::new(&[1, 1, 8, 8], (0..64).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let rgb = Tensor::new(&[1, 3, 5, 7], (0..105).map(|_| rng.gen::<f64>()).collect()).unwrap();
    for ext in ["png", "pgm"] {
        for (name, t) in [("zeros", &zeros), ("ones", &ones)] {
            let p = dir.path().join(format!("{name}.{ext}"));
            write_image(&p, t).unwrap();
            assert_eq!(&read_image(&p).unwrap(), t);
        }
        let p = dir.path().join(format!("random.{ext}"));
        write_image(&p, &random).unwrap();
        assert!(read_image(&p).unwrap().max_abs_diff(&random) <= 1.0 / 255.0 + 1e-9);
    }
    for ext in ["png", "ppm"] {
        let p = dir.path().join(format!("rgb.{ext}"));
        write_image(&p, &rgb).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), &[1, 3, 5, 7]);
        assert!(back.max_abs_diff(&rgb) <= 1.0 / 255.0 + 1e-9);
    }
}

#[test]
fn malformed_and_deep_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    assert!(read_image(&junk).is_err());
    let deep = dir.path().join("deep.pgm");
    let mut bytes = b"P5\n2 1\n65535\n".to_vec();
    bytes.extend([0u8, 1, 255, 255]);
    std::fs::write(&deep, bytes).unwrap();
    assert!(read_image(&deep).is_err());
}

#[test]
fn saved_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GlyphConfig::default();
    let ds = sample_dataset(&cfg, 2, 0.3, 9).unwrap();
    let meta = DatasetMeta { config: cfg.clone(), seed: 9, images_per_id: 2, test_fraction: 0.3 };
    save_dataset(dir.path(), &ds, &meta).unwrap();
    let (back, meta_back) = load_dataset(dir.path()).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.train.len(), ds.train.len());
    assert_eq!(back.test.len(), ds.test.len());
    for (a, b) in back.train.iter().zip(&ds.train) {
        assert_eq!((a.identity, a.pose, &a.au), (b.identity, b.pose, &b.au));
        assert!(a.pixels.max_abs_diff(&b.pixels) <= 0.5 / 255.0 + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn changing_one_au_only_touches_its_region(
        identity in 1usize..=10,
        pose in 1usize..=3,
        au in proptest::collection::vec(0.0f64..=5.0, 4),
        which in 0usize..4,
        new_value in 0.0f64..=5.0,
    ) {
        let cfg = GlyphConfig::default();
        let a = render(&GlyphSpec { identity, pose, au: au.clone() }, &cfg).unwrap();
        let mut changed = au.clone();
        changed[which] = new_value;
        let spec = GlyphSpec { identity, pose, au: changed };
        let b = render(&spec, &cfg).unwrap();
        let (r0, r1, c0, c1) = region_bounds(&spec, &cfg, which);
        for row in 0..32 {
            for col in 0..32 {
                let k = row * 32 + col;
                if a.data()[k] != b.data()[k] {
                    prop_assert!((r0..=r1).contains(&row) && (c0..=c1).contains(&col));
                }
            }
        }
    }
}
