use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;

#[test]
fn empty_count_range_gives_background_only() {
    let spec = SceneSpec {
        count_min: 0,
        count_max: 0,
        ..SceneSpec::default()
    };
    let scene = generate_scene(9, &spec).unwrap();
    assert!(scene.dots.is_empty());
    assert_eq!(scene.image.len(), spec.height * spec.width);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SceneSpec::default();
    assert_eq!(generate_scene(123, &spec).unwrap(), generate_scene(123, &spec).unwrap());
    assert_ne!(generate_scene(123, &spec).unwrap(), generate_scene(124, &spec).unwrap());
}

#[test]
fn forced_count_is_exact() {
    let spec = SceneSpec {
        count_min: 50,
        count_max: 50,
        height: 64,
        width: 64,
        ..SceneSpec::default()
    };
    let scene = generate_scene(7, &spec).unwrap();
    assert_eq!(scene.count(), 50);
    for &(r, c) in &scene.dots {
        assert!(r >= 0.0 && r < 64.0 && c >= 0.0 && c < 64.0);
    }
}

#[test]
fn infeasible_spec_is_rejected() {
    let spec = SceneSpec {
        count_min: 5,
        count_max: 2,
        ..SceneSpec::default()
    };
    assert!(generate_scene(0, &spec).is_err());
}

#[test]
fn image_values_stay_in_unit_interval() {
    let spec = SceneSpec {
        count_min: 30,
        count_max: 40,
        noise_level: 0.2,
        ..SceneSpec::default()
    };
    for seed in 0..5 {
        let scene = generate_scene(seed, &spec).unwrap();
        assert!(scene.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn density_of_empty_scene_is_zero() {
    let scene = Scene {
        height: 16,
        width: 16,
        image: vec![0.0; 256],
        dots: vec![],
        gen_seed: 0,
    };
    let d = render_density(&scene, 1.5, 4).unwrap();
    assert!(d.values.iter().all(|v| *v == 0.0));
}

#[test]
fn single_centered_dot_sums_to_one() {
    let scene = Scene {
        height: 32,
        width: 32,
        image: vec![0.0; 1024],
        dots: vec![(16.0, 16.0)],
        gen_seed: 0,
    };
    let d = render_density(&scene, 1.5, 4).unwrap();
    assert!((d.total() - 1.0).abs() < 1e-9, "total {}", d.total());
}

#[test]
fn corner_dots_are_renormalized() {
    // dots hugging the borders lose window mass to clipping; per-dot
    // renormalization must restore an exact total
    let scene = Scene {
        height: 32,
        width: 32,
        image: vec![0.0; 1024],
        dots: vec![
            (0.0, 0.0),
            (0.0, 31.9),
            (31.9, 0.0),
            (31.9, 31.9),
            (16.0, 16.0),
            (0.5, 16.0),
            (31.0, 2.0),
        ],
        gen_seed: 0,
    };
    let d = render_density(&scene, 1.5, 4).unwrap();
    assert!((d.total() - 7.0).abs() < 1e-6, "total {}", d.total());
    assert!(d.values.iter().all(|v| *v >= 0.0));
}

#[test]
fn density_conservation_over_random_scenes() {
    let spec = SceneSpec::default();
    for seed in 0..50 {
        let scene = generate_scene(seed, &spec).unwrap();
        let d = render_density(&scene, 1.5, 4).unwrap();
        assert!(
            (d.total() - scene.count() as f64).abs() < 1e-6,
            "seed {}: total {} vs count {}",
            seed,
            d.total(),
            scene.count()
        );
    }
}

#[test]
fn split_partitions_without_overlap() {
    let spec = SceneSpec::default();
    let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(s, &spec).unwrap()).collect();
    let split = split_dataset(scenes.clone(), 1, 1, 1, 5).unwrap();
    assert_eq!(split.labeled.len(), 1);
    assert_eq!(split.unlabeled.len(), 1);
    assert_eq!(split.test.len(), 1);
    let mut seeds: Vec<u64> = split
        .labeled
        .iter()
        .chain(&split.unlabeled)
        .chain(&split.test)
        .map(|s| s.gen_seed)
        .collect();
    seeds.sort();
    assert_eq!(seeds, vec![0, 1, 2]);

    let again = split_dataset(scenes, 1, 1, 1, 5).unwrap();
    assert_eq!(again.labeled[0].gen_seed, split.labeled[0].gen_seed);

    assert!(split_dataset(vec![], 1, 0, 0, 0).is_err());
}

#[test]
fn split_membership_disjoint_over_trials() {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        count_min: 0,
        count_max: 3,
        ..SceneSpec::default()
    };
    let scenes: Vec<Scene> = (0..12).map(|s| generate_scene(s, &spec).unwrap()).collect();
    for trial in 0..100 {
        let split = split_dataset(scenes.clone(), 4, 5, 3, trial).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in split.labeled.iter().chain(&split.unlabeled).chain(&split.test) {
            assert!(seen.insert(s.gen_seed), "scene in two roles at trial {}", trial);
        }
        assert_eq!(seen.len(), 12);
    }
}

#[test]
fn crop_pyramid_nests_and_counts_decrease() {
    let spec = SceneSpec {
        height: 64,
        width: 64,
        count_min: 30,
        count_max: 60,
        ..SceneSpec::default()
    };
    for seed in 0..10 {
        let scene = generate_scene(seed, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let pyramid = crop_pyramid(&scene, 3, 0.6, 4, &mut rng).unwrap();
        assert_eq!(pyramid.len(), 3);
        assert_eq!(pyramid[0].0.height, 64);
        for window in pyramid.windows(2) {
            let (outer, inner) = (&window[0], &window[1]);
            assert!(outer.0.contains(&inner.0), "{:?} !> {:?}", outer.0, inner.0);
            assert!(inner.1.count() <= outer.1.count());
            assert_eq!(inner.0.height % 4, 0);
            assert_eq!(inner.0.width % 4, 0);
        }
        // brute-force recount of dots inside each rect
        for (rect, crop) in &pyramid {
            let expect = scene
                .dots
                .iter()
                .filter(|(r, c)| {
                    *r >= rect.row as f64
                        && *r < (rect.row + rect.height) as f64
                        && *c >= rect.col as f64
                        && *c < (rect.col + rect.width) as f64
                })
                .count();
            assert_eq!(crop.count(), expect);
        }
    }
}

#[test]
fn crop_pyramid_halving_on_64() {
    let spec = SceneSpec {
        height: 64,
        width: 64,
        ..SceneSpec::default()
    };
    let scene = generate_scene(3, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pyramid = crop_pyramid(&scene, 2, 0.5, 4, &mut rng).unwrap();
    assert_eq!((pyramid[0].0.height, pyramid[0].0.width), (64, 64));
    assert_eq!((pyramid[1].0.height, pyramid[1].0.width), (32, 32));
    assert!(pyramid[0].0.contains(&pyramid[1].0));

    assert!(crop_pyramid(&scene, 1, 0.5, 4, &mut rng).is_err());
    assert!(crop_pyramid(&scene, 4, 0.1, 4, &mut rng).is_err());
}

#[test]
fn augment_identity_at_zero_strength() {
    let scene = generate_scene(5, &SceneSpec::default()).unwrap();
    let out = photometric_augment(&scene, 77, 0.0).unwrap();
    assert_eq!(out, scene);
}

#[test]
fn augment_is_seeded_and_bounded() {
    let scene = generate_scene(6, &SceneSpec::default()).unwrap();
    let a = photometric_augment(&scene, 42, 1.0).unwrap();
    let b = photometric_augment(&scene, 42, 1.0).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.image, scene.image);
    assert_eq!(a.dots, scene.dots);
    assert_eq!((a.height, a.width), (scene.height, scene.width));
    assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(photometric_augment(&scene, 0, -1.0).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempdir().unwrap();
    let spec = SceneSpec::default();
    let scenes: Vec<Scene> = (0..6).map(|s| generate_scene(s, &spec).unwrap()).collect();
    let split = split_dataset(scenes, 2, 2, 2, 1).unwrap();
    write_dataset(&split, &spec, dir.path()).unwrap();

    let (loaded, audit) = read_dataset_roles(dir.path(), RoleSet::ALL).unwrap();
    assert_eq!(loaded.labeled.len(), 2);
    assert!(audit.touched_role("unlabeled"));

    for (orig, back) in split.labeled.iter().zip(&loaded.labeled) {
        assert_eq!(orig.dots, back.dots, "dot lists must survive exactly");
        assert_eq!(orig.gen_seed, back.gen_seed);
        let max_err = orig
            .image
            .iter()
            .zip(&back.image)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 255.0, "quantization error {}", max_err);
    }
}

#[test]
fn labeled_only_read_never_opens_unlabeled() {
    let dir = tempdir().unwrap();
    let spec = SceneSpec::default();
    let scenes: Vec<Scene> = (0..6).map(|s| generate_scene(s, &spec).unwrap()).collect();
    let split = split_dataset(scenes, 2, 2, 2, 1).unwrap();
    write_dataset(&split, &spec, dir.path()).unwrap();

    let (loaded, audit) = read_dataset_roles(dir.path(), RoleSet::LABELED_AND_TEST).unwrap();
    assert_eq!(loaded.labeled.len(), 2);
    assert_eq!(loaded.test.len(), 2);
    assert!(loaded.unlabeled.is_empty());
    assert!(!audit.touched_role("unlabeled"));
}

#[test]
fn missing_sidecar_is_structured_error() {
    let dir = tempdir().unwrap();
    let spec = SceneSpec::default();
    let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(s, &spec).unwrap()).collect();
    let split = split_dataset(scenes, 1, 1, 1, 1).unwrap();
    write_dataset(&split, &spec, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("labeled/scene_00000.json")).unwrap();

    match read_dataset(dir.path()) {
        Err(crate::CoreError::Data(msg)) => assert!(msg.contains("sidecar")),
        other => panic!("expected data error, got {:?}", other.map(|_| ())),
    }
}
