//! Generator determinism, silhouette well-formedness, and identity
//! separation via brute-force pairwise distances.

use qgait_core::synthdata::{generate_dataset, DatasetConfig, SilhouetteSequence};

#[test]
fn identical_seed_and_config_reproduce_byte_identical_data() {
    let cfg = DatasetConfig::default();
    let a = generate_dataset(1234, &cfg).unwrap();
    let b = generate_dataset(1234, &cfg).unwrap();
    assert_eq!(a.train.len(), b.train.len());
    for (x, y) in a.train.iter().zip(&b.train) {
        assert_eq!(x.frames, y.frames);
        assert_eq!(x.covariate, y.covariate);
    }
    for (x, y) in a.probe.iter().zip(&b.probe) {
        assert_eq!(x.frames, y.frames);
    }
    let c = generate_dataset(1235, &cfg).unwrap();
    assert_ne!(a.train[0].frames, c.train[0].frames);
}

#[test]
fn all_pixels_are_binary() {
    let split = generate_dataset(7, &DatasetConfig::default()).unwrap();
    for seq in split.train.iter().chain(&split.gallery).chain(&split.probe) {
        assert!(seq.frames.iter().all(|&p| p == 0 || p == 1));
    }
}

#[test]
fn foreground_fraction_is_sane() {
    let split = generate_dataset(21, &DatasetConfig::default()).unwrap();
    for seq in split.train.iter().chain(&split.gallery).chain(&split.probe) {
        for t in 0..seq.t {
            let frac = seq.foreground_fraction(t);
            assert!(
                (0.05..=0.6).contains(&frac),
                "identity {} seq {} frame {t}: foreground {frac}",
                seq.identity,
                seq.seq_id
            );
        }
    }
}

#[test]
fn split_identities_are_disjoint_and_eval_sides_coincide() {
    let split = generate_dataset(3, &DatasetConfig::default()).unwrap();
    let train_ids: Vec<u32> = split.train.iter().map(|s| s.identity).collect();
    let mut gallery_ids: Vec<u32> = split.gallery.iter().map(|s| s.identity).collect();
    let mut probe_ids: Vec<u32> = split.probe.iter().map(|s| s.identity).collect();
    gallery_ids.sort_unstable();
    gallery_ids.dedup();
    probe_ids.sort_unstable();
    probe_ids.dedup();
    assert_eq!(gallery_ids, probe_ids);
    for id in &gallery_ids {
        assert!(!train_ids.contains(id));
    }
}

/// Mean silhouette of a sequence (average over frames).
fn mean_silhouette(seq: &SilhouetteSequence) -> Vec<f64> {
    let hw = seq.h * seq.w;
    let mut acc = vec![0.0; hw];
    for t in 0..seq.t {
        for (a, &p) in acc.iter_mut().zip(seq.frame(t)) {
            *a += p as f64;
        }
    }
    for a in acc.iter_mut() {
        *a /= seq.t as f64;
    }
    acc
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn between_identity_distance_exceeds_within_identity_distance() {
    // brute force over a 4-id / 4-seq draw
    let cfg = DatasetConfig {
        n_train_ids: 4,
        n_eval_ids: 0,
        seqs_per_id: 4,
        covariate_rate: 0.0,
        ..DatasetConfig::default()
    };
    // n_eval_ids = 0 breaks gallery invariants, so build train-only data
    // through a 4+0 config is invalid; use 4 train + 2 eval and look at
    // the train side.
    let cfg = DatasetConfig {
        n_train_ids: 4,
        n_eval_ids: 2,
        ..cfg
    };
    let split = generate_dataset(11, &cfg).unwrap();
    let means: Vec<(u32, Vec<f64>)> = split
        .train
        .iter()
        .map(|s| (s.identity, mean_silhouette(s)))
        .collect();
    let mut within = Vec::new();
    let mut between = Vec::new();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = l2(&means[i].1, &means[j].1);
            if means[i].0 == means[j].0 {
                within.push(d);
            } else {
                between.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&between) > mean(&within),
        "between {} vs within {}",
        mean(&between),
        mean(&within)
    );
}

#[test]
fn identity_parameter_draws_are_distinct() {
    use qgait_core::synthdata::IdentitySpec;
    let specs: Vec<IdentitySpec> = (0..24).map(|id| IdentitySpec::draw(5, id)).collect();
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            assert_ne!(
                (specs[i].torso_width_ratio, specs[i].base_phase),
                (specs[j].torso_width_ratio, specs[j].base_phase)
            );
        }
    }
}
