mod common;

use std::collections::HashMap;

use bem_core::dataio::{EmbeddingTable, LabelTable};
use bem_core::evalkit::{
    cluster_ratio, cosine, evaluate_classification, hit_recall, project_with, projection_matrix,
    random_project, similarity_histogram, top_k, train_classifier, ClassifierSettings, EvalSplit,
    UserQuery,
};
use bem_core::rng;
use common::gauss_vec;
use proptest::prelude::*;
use rand::Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("e{i}")).collect()
}

/// `n` points per class around centers `k * gap` on the first axis.
fn blobs(
    classes: usize,
    n: usize,
    d: usize,
    gap: f64,
    spread: f64,
    seed: u64,
) -> (EmbeddingTable, LabelTable) {
    let mut rng = rng::stream(seed, "blobs");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * n {
        let c = i % classes;
        let mut r = gauss_vec(&mut rng, d, spread);
        r[0] += c as f64 * gap;
        rows.push(r);
        labels.push(vec![format!("c{c}")]);
    }
    (
        EmbeddingTable::from_rows(ids(classes * n), &rows).unwrap(),
        LabelTable::new(ids(classes * n), labels).unwrap(),
    )
}

#[test]
fn separable_blobs_are_classified_perfectly() {
    let (t, l) = blobs(3, 60, 4, 20.0, 1.0, 1);
    let acc = evaluate_classification(&t, &l, 0.8, 0, ClassifierSettings::default()).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn random_labels_give_chance_accuracy() {
    let mut rng = rng::stream(2, "chance");
    let n = 2000;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gauss_vec(&mut rng, 10, 1.0)).collect();
    let labels: Vec<Vec<String>> = (0..n)
        .map(|_| vec![format!("c{}", rng.random_range(0..2))])
        .collect();
    let t = EmbeddingTable::from_rows(ids(n), &rows).unwrap();
    let l = LabelTable::new(ids(n), labels).unwrap();
    let acc = evaluate_classification(&t, &l, 0.8, 3, ClassifierSettings::default()).unwrap();
    assert!((acc - 0.5).abs() < 0.1, "{acc}");
}

#[test]
fn stronger_regularization_shrinks_weights() {
    let (t, l) = blobs(2, 50, 5, 2.0, 1.0, 4);
    let split = EvalSplit::new(&t, &l, 0.8, 0).unwrap();
    let norm = |reg: f64| {
        let m = train_classifier(
            &t,
            &l,
            &split.train,
            ClassifierSettings {
                reg,
                ..Default::default()
            },
        )
        .unwrap();
        m.weights.iter().flatten().map(|w| w * w).sum::<f64>()
    };
    let norms: Vec<f64> = [1e-4, 1e-2, 1e-1, 1.0].iter().map(|&r| norm(r)).collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
}

#[test]
fn training_loss_never_increases() {
    let (t, l) = blobs(4, 40, 6, 1.5, 1.0, 5);
    let split = EvalSplit::new(&t, &l, 0.8, 1).unwrap();
    let settings = ClassifierSettings {
        learning_rate: 5.0,
        ..Default::default()
    };
    let m = train_classifier(&t, &l, &split.train, settings).unwrap();
    assert_eq!(m.loss_trace.len(), settings.epochs + 1);
    assert!(m.loss_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn row_order_does_not_change_accuracy() {
    let (t, l) = blobs(3, 40, 4, 2.0, 1.0, 6);
    let perm: Vec<usize> = (0..t.len()).rev().collect();
    let shuffled = t.select(&perm);
    let s = ClassifierSettings::default();
    for seed in 0..3 {
        let a = evaluate_classification(&t, &l, 0.7, seed, s).unwrap();
        let b = evaluate_classification(&shuffled, &l, 0.7, seed, s).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn split_is_disjoint_and_covers_labeled_rows() {
    let (t, l) = blobs(2, 25, 3, 1.0, 1.0, 7);
    let s = EvalSplit::new(&t, &l, 0.8, 9).unwrap();
    assert_eq!(s.train.len(), 40);
    assert_eq!(s.test.len(), 10);
    let mut all: Vec<&String> = s.train.iter().chain(&s.test).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 50);
    assert_eq!(EvalSplit::new(&t, &l, 0.8, 9).unwrap(), s);
    assert_ne!(EvalSplit::new(&t, &l, 0.8, 10).unwrap().test, s.test);
}

#[test]
fn identical_rows_put_all_mass_in_the_top_bin() {
    let t = EmbeddingTable::from_rows(ids(10), &vec![vec![1.0, 2.0, -1.0]; 10]).unwrap();
    let h = similarity_histogram(&t, 1000, 20, &mut rng::stream(1, "h")).unwrap();
    assert_eq!(h.mass[19], 1.0);
    assert!((h.mean - 1.0).abs() < 1e-12);
}

#[test]
fn orthonormal_rows_put_all_mass_in_the_bottom_bin() {
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..8).map(|k| f64::from(u8::from(i == k))).collect())
        .collect();
    let t = EmbeddingTable::from_rows(ids(8), &rows).unwrap();
    let h = similarity_histogram(&t, 1000, 10, &mut rng::stream(1, "h")).unwrap();
    assert_eq!(h.mass[0], 1.0);
    assert_eq!(h.mean, 0.0);
}

#[test]
fn gaussian_rows_have_the_expected_mean_similarity() {
    let d = 100;
    let mut rng = rng::stream(3, "g");
    let rows: Vec<Vec<f64>> = (0..500).map(|_| gauss_vec(&mut rng, d, 1.0)).collect();
    let t = EmbeddingTable::from_rows(ids(500), &rows).unwrap();
    let h = similarity_histogram(&t, 100_000, 20, &mut rng).unwrap();
    let expected = (2.0 / (std::f64::consts::PI * d as f64)).sqrt();
    assert!(
        (h.mean / expected - 1.0).abs() < 0.1,
        "{} vs {expected}",
        h.mean
    );
    assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_rows_are_skipped_and_counted() {
    let t = EmbeddingTable::from_rows(ids(3), &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap();
    let h = similarity_histogram(&t, 600, 4, &mut rng::stream(2, "z")).unwrap();
    assert_eq!(h.counted + h.skipped, 600);
    assert!(h.skipped > 0);
}

#[test]
fn farther_centroids_give_a_lower_cluster_ratio() {
    let (near, l) = blobs(2, 30, 3, 2.0, 0.3, 8);
    let (far, _) = blobs(2, 30, 3, 10.0, 0.3, 8);
    let near = cluster_ratio(&near, &l).unwrap();
    let far = cluster_ratio(&far, &l).unwrap();
    assert_eq!(far.classes, 2);
    assert!(far.ratio < near.ratio, "{} vs {}", far.ratio, near.ratio);
}

#[test]
fn contracting_towards_centroids_lowers_the_ratio() {
    let (t, l) = blobs(3, 30, 4, 3.0, 1.0, 9);
    let d = t.dim();
    let mut centroids = vec![vec![0.0; d]; 3];
    for (i, row) in t.rows().enumerate() {
        for k in 0..d {
            centroids[i % 3][k] += row[k] / 30.0;
        }
    }
    let contracted: Vec<Vec<f64>> = t
        .rows()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .zip(&centroids[i % 3])
                .map(|(x, c)| c + 0.5 * (x - c))
                .collect()
        })
        .collect();
    let c = EmbeddingTable::from_rows(ids(90), &contracted).unwrap();
    assert!(cluster_ratio(&c, &l).unwrap().ratio < cluster_ratio(&t, &l).unwrap().ratio);
}

#[test]
fn coincident_classes_give_infinite_ratio_with_a_diagnostic() {
    let t =
        EmbeddingTable::from_rows(ids(4), &[vec![0.0], vec![1.0], vec![1.0], vec![2.0]]).unwrap();
    let l = LabelTable::new(
        ids(4),
        vec![
            vec!["a".into()],
            vec!["a".into()],
            vec!["b".into()],
            vec!["b".into()],
        ],
    )
    .unwrap();
    let r = cluster_ratio(&t, &l).unwrap();
    assert!(r.ratio.is_infinite());
    assert!(r.diagnostic.unwrap().contains("share a point"));
}

fn self_users(t: &EmbeddingTable, attrs: &HashMap<String, String>) -> Vec<UserQuery> {
    t.ids()
        .iter()
        .map(|id| UserQuery {
            triggers: vec![id.clone()],
            truth: vec![attrs[id].clone()],
        })
        .collect()
}

#[test]
fn recall_is_perfect_when_neighbours_share_attributes() {
    // two tight clusters on orthogonal axes
    let mut rng = rng::stream(10, "r");
    let rows: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let mut r = gauss_vec(&mut rng, 2, 0.01);
            r[i % 2] += 1.0;
            r
        })
        .collect();
    let t = EmbeddingTable::from_rows(ids(20), &rows).unwrap();
    let attrs: HashMap<String, String> = (0..20)
        .map(|i| (format!("e{i}"), format!("a{}", i % 2)))
        .collect();
    let users = self_users(&t, &attrs);
    let r = hit_recall(&t, &t, &users, &attrs, 3).unwrap();
    assert_eq!(r.recall, 1.0);
    assert_eq!(r.total, 20);
}

#[test]
fn k_of_n_minus_one_covers_every_other_attribute() {
    let mut rng = rng::stream(11, "r");
    let n = 15;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gauss_vec(&mut rng, 3, 1.0)).collect();
    let t = EmbeddingTable::from_rows(ids(n), &rows).unwrap();
    let attrs: HashMap<String, String> = (0..n)
        .map(|i| (format!("e{i}"), format!("a{}", i % 4)))
        .collect();
    let users = self_users(&t, &attrs);
    assert_eq!(
        hit_recall(&t, &t, &users, &attrs, n - 1).unwrap().recall,
        1.0
    );
}

#[test]
fn dissimilar_candidates_do_not_change_recall() {
    let mut rng = rng::stream(12, "r");
    let n = 30;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            gauss_vec(&mut rng, 3, 0.3)
                .into_iter()
                .map(|v| v.abs() + 0.1)
                .collect()
        })
        .collect();
    let t = EmbeddingTable::from_rows(ids(n), &rows).unwrap();
    let mut attrs: HashMap<String, String> = (0..n)
        .map(|i| (format!("e{i}"), format!("a{}", i % 5)))
        .collect();
    let users = self_users(&t, &attrs);
    let base = hit_recall(&t, &t, &users, &attrs, 4).unwrap();

    // extra candidates pointing into the negative orthant
    let mut all_ids = t.ids().to_vec();
    let mut all_rows: Vec<Vec<f64>> = t.rows().map(<[f64]>::to_vec).collect();
    for i in 0..10 {
        let id = format!("far{i}");
        all_ids.push(id.clone());
        all_rows.push(vec![-1.0 - i as f64, -1.0, -2.0]);
        attrs.insert(id, "a0".into());
    }
    let cands = EmbeddingTable::from_rows(all_ids, &all_rows).unwrap();
    assert_eq!(hit_recall(&t, &cands, &users, &attrs, 4).unwrap(), base);
}

#[test]
fn top_k_is_sorted_and_excludes() {
    let t = EmbeddingTable::from_rows(
        ids(4),
        &[
            vec![1.0, 0.0],
            vec![1.0, 0.1],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ],
    )
    .unwrap();
    assert_eq!(top_k(&[1.0, 0.0], &t, 3, None), vec![0, 1, 2]);
    assert_eq!(top_k(&[1.0, 0.0], &t, 2, Some(0)), vec![1, 2]);
    assert_eq!(top_k(&[1.0, 0.0], &t, 10, None).len(), 4);
}

#[test]
fn projection_roughly_preserves_distances() {
    let mut rng = rng::stream(13, "p");
    let rows: Vec<Vec<f64>> = (0..20).map(|_| gauss_vec(&mut rng, 150, 1.0)).collect();
    let t = EmbeddingTable::from_rows(ids(20), &rows).unwrap();
    let p = random_project(&t, 50, &mut rng).unwrap();
    assert_eq!(p.dim(), 50);
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for i in 0..20 {
        for j in i + 1..20 {
            let ratio = dist(p.row(i), p.row(j)) / dist(t.row(i), t.row(j));
            assert!((0.5..=2.0).contains(&ratio), "{ratio}");
        }
    }
}

#[test]
fn projection_seeds_give_distinct_matrices() {
    let mats: Vec<Vec<f64>> = (0..10)
        .map(|s| projection_matrix(6, 3, &mut rng::stream(s, "projection")).unwrap())
        .collect();
    for i in 0..10 {
        for j in i + 1..10 {
            assert_ne!(mats[i], mats[j]);
        }
    }
    let t = EmbeddingTable::from_rows(ids(2), &[vec![1.0; 6], vec![0.0; 6]]).unwrap();
    assert!(project_with(&t, &mats[0], 4).is_err());
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-10.0..10.0f64, 5),
        b in prop::collection::vec(-10.0..10.0f64, 5),
        s in 0.01..100.0f64,
    ) {
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        match (cosine(&a, &b), cosine(&scaled, &b)) {
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!(x.abs() <= 1.0 + 1e-12);
            }
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn histogram_is_invariant_to_row_rescaling(seed in any::<u64>(), s in 0.1..10.0f64) {
        let mut rng = rng::stream(seed, "rows");
        let rows: Vec<Vec<f64>> = (0..30).map(|_| gauss_vec(&mut rng, 4, 1.0)).collect();
        let t = EmbeddingTable::from_rows(ids(30), &rows).unwrap();
        let scaled = EmbeddingTable::new(t.ids().to_vec(), t.data().iter().map(|v| v * s).collect(), 4).unwrap();
        let a = similarity_histogram(&t, 500, 10, &mut rng::stream(seed, "h")).unwrap();
        let b = similarity_histogram(&scaled, 500, 10, &mut rng::stream(seed, "h")).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-9);
        for (x, y) in a.mass.iter().zip(&b.mass) {
            // a pair can only move across a bin edge through rounding
            prop_assert!((x - y).abs() <= 2.0 / 500.0);
        }
        prop_assert!((a.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
