mod common;

use bem_core::dataio::EmbeddingTable;
use bem_core::error::BemError;
use bem_core::evalkit::{evaluate_classification, hit_recall, ClassifierSettings, UserQuery};
use bem_core::synthgen::{generate, oracle_error, table_mse, SynthSpec};
use common::{default_truth, synthetic_config, synthetic_run};
use proptest::prelude::*;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        n: 500,
        d_w: 8,
        d_z: 12,
        hidden_dim: 16,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn observation_noise_has_the_requested_scale() {
    let truth = generate(&small(1)).unwrap();
    let resid: Vec<f64> = truth
        .z
        .data()
        .iter()
        .zip(truth.nu.data())
        .map(|(a, b)| a - b)
        .collect();
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd / 0.3 - 1.0).abs() < 0.05, "{sd}");
}

#[test]
fn correction_has_the_requested_scale() {
    let truth = generate(&small(2)).unwrap();
    let d = truth.delta.data();
    let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
    assert!((sd / 0.1 - 1.0).abs() < 0.05, "{sd}");
}

#[test]
fn noise_free_observations_are_the_projection_of_the_prior() {
    let truth = generate(&SynthSpec {
        noise_scale: 0.0,
        delta_scale: 0.0,
        ..small(3)
    })
    .unwrap();
    for i in [0, 17, 499] {
        assert_eq!(
            truth.z.row(i),
            truth.projection.forward(truth.w.row(i)).unwrap().as_slice()
        );
    }
    assert_eq!(truth.z, truth.nu);
}

#[test]
fn prior_rows_are_unit_length_and_labeled_by_cluster() {
    let truth = generate(&small(4)).unwrap();
    for row in truth.w.rows() {
        assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(truth.labels.len(), 500);
    assert_eq!(truth.labels.get("e13").unwrap(), ["c3".to_string()]);
    assert_eq!(truth.attribute_map()["e13"], "c3");
}

#[test]
fn noise_free_clusters_are_classifiable() {
    let truth = generate(&SynthSpec {
        noise_scale: 0.0,
        delta_scale: 0.01,
        ..SynthSpec::default()
    })
    .unwrap();
    let acc = evaluate_classification(
        &truth.nu,
        &truth.labels,
        0.8,
        0,
        ClassifierSettings::default(),
    )
    .unwrap();
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn oracle_error_of_the_observations_is_the_noise_variance() {
    let truth = generate(&small(6)).unwrap();
    let e = oracle_error(&truth.z, &truth).unwrap();
    assert!((e / 0.09 - 1.0).abs() < 0.05, "{e}");
    assert_eq!(oracle_error(&truth.nu, &truth).unwrap(), 0.0);
}

#[test]
fn oracle_error_of_zeros_is_the_mean_square_of_nu() {
    let truth = generate(&small(7)).unwrap();
    let zeros = EmbeddingTable::new(
        truth.nu.ids().to_vec(),
        vec![0.0; truth.nu.data().len()],
        truth.nu.dim(),
    )
    .unwrap();
    let want = truth.nu.data().iter().map(|v| v * v).sum::<f64>() / truth.nu.data().len() as f64;
    assert!((oracle_error(&zeros, &truth).unwrap() - want).abs() < 1e-12);
}

#[test]
fn oracle_error_matches_rows_by_id_and_checks_shape() {
    let truth = generate(&small(8)).unwrap();
    let reversed = truth.z.select(&(0..500).rev().collect::<Vec<_>>());
    assert_eq!(
        oracle_error(&reversed, &truth).unwrap(),
        oracle_error(&truth.z, &truth).unwrap()
    );
    assert!(matches!(
        oracle_error(&truth.w, &truth),
        Err(BemError::Shape(_))
    ));
    let partial = truth.z.select(&[0, 1, 2]);
    assert!(matches!(
        table_mse(&partial, &truth.nu),
        Err(BemError::Alignment(_))
    ));
}

#[test]
fn bad_specs_are_rejected() {
    for spec in [
        SynthSpec { n: 0, ..small(0) },
        SynthSpec {
            n_clusters: 501,
            ..small(0)
        },
        SynthSpec {
            noise_scale: -1.0,
            ..small(0)
        },
        SynthSpec {
            delta_scale: f64::NAN,
            ..small(0)
        },
    ] {
        assert!(matches!(generate(&spec), Err(BemError::Config(_))));
    }
}

#[test]
fn refinement_does_not_hurt_cluster_recall() {
    let truth = default_truth();
    let run = synthetic_run(&truth, &synthetic_config(0));
    let attrs = truth.attribute_map();
    let users: Vec<UserQuery> = truth
        .z
        .ids()
        .iter()
        .map(|id| UserQuery {
            triggers: vec![id.clone()],
            truth: vec![attrs[id].clone()],
        })
        .collect();
    let before = hit_recall(&truth.z, &truth.z, &users, &attrs, 10).unwrap();
    let after = hit_recall(&run.bg_refined, &run.bg_refined, &users, &attrs, 10).unwrap();
    assert!(
        after.recall >= before.recall,
        "{} -> {}",
        before.recall,
        after.recall
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_seed_deterministic(seed in any::<u64>()) {
        let spec = SynthSpec { n: 40, d_w: 3, d_z: 4, hidden_dim: 5, n_clusters: 4, seed, ..SynthSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(&a.z, &b.z);
        prop_assert_eq!(&a.w, &b.w);
        let c = generate(&SynthSpec { seed: seed.wrapping_add(1), ..spec }).unwrap();
        prop_assert_ne!(&a.z, &c.z);
    }
}
