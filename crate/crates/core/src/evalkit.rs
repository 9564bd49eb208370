//! Evaluation metrics for embedding tables.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{EmbeddingTable, LabelTable};
use crate::diffcore::dot;
use crate::error::{BemError, Result};
use crate::rng;

/// Train/test partition of the entities that are both labeled and embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub train_fraction: f64,
}

impl EvalSplit {
    pub fn new(
        table: &EmbeddingTable,
        labels: &LabelTable,
        train_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(BemError::eval(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let labeled = labels.to_map();
        let mut ids: Vec<String> = table
            .ids()
            .iter()
            .filter(|id| labeled.get(id.as_str()).is_some_and(|l| !l.is_empty()))
            .cloned()
            .collect();
        if ids.len() < 2 {
            return Err(BemError::eval(format!(
                "only {} entities are both labeled and embedded",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng::stream(seed, rng::EVAL));
        let cut = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
        let test = ids.split_off(cut);
        Ok(EvalSplit {
            train: ids,
            test,
            seed,
            train_fraction,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSettings {
    pub reg: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            reg: 1e-4,
            epochs: 300,
            learning_rate: 0.1,
        }
    }
}

/// One-vs-rest logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub classes: Vec<String>,
    /// One weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Training-set feature means and standard deviations.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Summed training loss before the first and after every epoch.
    pub loss_trace: Vec<f64>,
}

impl ClassifierModel {
    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let x = self.standardize(x);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, &x) + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> &str {
        let scores = self.scores(x);
        let mut best = 0;
        for (c, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = c;
            }
        }
        &self.classes[best]
    }
}

fn rows_for<'a>(table: &'a EmbeddingTable, ids: &[String]) -> Result<Vec<&'a [f64]>> {
    let index = table.index();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| table.row(i))
                .ok_or_else(|| BemError::eval(format!("id `{id}` is not in the table")))
        })
        .collect()
}

fn logistic_loss(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, reg: f64) -> f64 {
    let n = x.len() as f64;
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let t = dot(w, xi) + b;
            // log(1 + exp(t)) - y t, computed stably
            t.max(0.0) + (-t.abs()).exp().ln_1p() - yi * t
        })
        .sum();
    data / n + 0.5 * reg * dot(w, w)
}

pub fn train_classifier(
    table: &EmbeddingTable,
    labels: &LabelTable,
    train_ids: &[String],
    settings: ClassifierSettings,
) -> Result<ClassifierModel> {
    let label_map = labels.to_map();
    let ids: Vec<String> = train_ids
        .iter()
        .filter(|id| label_map.contains_key(id.as_str()))
        .cloned()
        .collect();
    if ids.is_empty() {
        return Err(BemError::eval(
            "no labeled training entities overlap the table",
        ));
    }
    let raw = rows_for(table, &ids)?;
    let mut classes: Vec<String> = ids
        .iter()
        .flat_map(|id| label_map[id.as_str()].iter().cloned())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    classes.sort_unstable();
    if classes.len() < 2 {
        return Err(BemError::eval(format!(
            "training set has {} class(es), need at least 2",
            classes.len()
        )));
    }

    let d = table.dim();
    let n = raw.len() as f64;
    let feature_mean: Vec<f64> = (0..d)
        .map(|k| raw.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect();
    let feature_scale: Vec<f64> = (0..d)
        .map(|k| {
            let var = raw
                .iter()
                .map(|r| (r[k] - feature_mean[k]).powi(2))
                .sum::<f64>()
                / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = ClassifierModel {
        classes,
        weights: Vec::new(),
        bias: Vec::new(),
        feature_mean,
        feature_scale,
        loss_trace: Vec::new(),
    };
    let x: Vec<Vec<f64>> = raw.iter().map(|r| model.standardize(r)).collect();

    let mut traces = Vec::with_capacity(model.classes.len());
    for class in &model.classes {
        let y: Vec<f64> = ids
            .iter()
            .map(|id| f64::from(u8::from(label_map[id.as_str()].contains(class))))
            .collect();
        let (w, b, trace) = fit_binary(&x, &y, settings);
        model.weights.push(w);
        model.bias.push(b);
        traces.push(trace);
    }
    model.loss_trace = (0..=settings.epochs)
        .map(|e| traces.iter().map(|t| t[e]).sum())
        .collect();
    Ok(model)
}

/// Full-batch gradient descent; a step that would raise the loss is rejected
/// and the learning rate halved.
fn fit_binary(
    x: &[Vec<f64>],
    y: &[f64],
    settings: ClassifierSettings,
) -> (Vec<f64>, f64, Vec<f64>) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut lr = settings.learning_rate;
    let mut loss = logistic_loss(x, y, &w, b, settings.reg);
    let mut trace = Vec::with_capacity(settings.epochs + 1);
    trace.push(loss);
    let mut gw = vec![0.0; d];
    for _ in 0..settings.epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (xi, yi) in x.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(dot(&w, xi) + b)).exp());
            let r = (p - yi) / n;
            gb += r;
            for (g, v) in gw.iter_mut().zip(xi) {
                *g += r * v;
            }
        }
        for (g, wk) in gw.iter_mut().zip(&w) {
            *g += settings.reg * wk;
        }
        loop {
            let cand_w: Vec<f64> = w.iter().zip(&gw).map(|(wk, g)| wk - lr * g).collect();
            let cand_b = b - lr * gb;
            let cand_loss = logistic_loss(x, y, &cand_w, cand_b, settings.reg);
            if cand_loss <= loss {
                w = cand_w;
                b = cand_b;
                loss = cand_loss;
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
        trace.push(loss);
    }
    (w, b, trace)
}

/// Fraction of `test_ids` whose argmax class is in their label set.
pub fn classify_accuracy(
    model: &ClassifierModel,
    table: &EmbeddingTable,
    labels: &LabelTable,
    test_ids: &[String],
) -> Result<f64> {
    if test_ids.is_empty() {
        return Err(BemError::eval("empty test set"));
    }
    if table.dim() != model.dim() {
        return Err(BemError::eval(format!(
            "model expects dimension {}, table has {}",
            model.dim(),
            table.dim()
        )));
    }
    let label_map = labels.to_map();
    let rows = rows_for(table, test_ids)?;
    let mut hits = 0usize;
    for (id, row) in test_ids.iter().zip(rows) {
        let truth = label_map
            .get(id.as_str())
            .ok_or_else(|| BemError::eval(format!("test id `{id}` has no label")))?;
        let pred = model.predict(row);
        if truth.iter().any(|l| l == pred) {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_ids.len() as f64)
}

/// Split, train and score in one call.
pub fn evaluate_classification(
    table: &EmbeddingTable,
    labels: &LabelTable,
    train_fraction: f64,
    seed: u64,
    settings: ClassifierSettings,
) -> Result<f64> {
    let split = EvalSplit::new(table, labels, train_fraction, seed)?;
    let model = train_classifier(table, labels, &split.train, settings)?;
    classify_accuracy(&model, table, labels, &split.test)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges spanning [0, 1].
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub counted: usize,
    /// Pairs skipped because a row had zero norm.
    pub skipped: usize,
    pub mean: f64,
    pub variance: f64,
}

impl Histogram {
    /// `(bin_left, bin_right, mass)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.edges
            .windows(2)
            .zip(&self.mass)
            .map(|(e, m)| (e[0], e[1], *m))
    }
}

/// Histogram of |cosine| over `n_pairs` uniformly drawn pairs of distinct rows.
pub fn similarity_histogram<R: Rng + ?Sized>(
    table: &EmbeddingTable,
    n_pairs: usize,
    bins: usize,
    rng: &mut R,
) -> Result<Histogram> {
    if n_pairs == 0 || bins == 0 {
        return Err(BemError::eval("need at least one pair and one bin"));
    }
    let n = table.len();
    if n < 2 {
        return Err(BemError::eval("need at least two rows"));
    }
    let mut counts = vec![0usize; bins];
    let mut values = Vec::with_capacity(n_pairs);
    let mut skipped = 0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        match cosine(table.row(i), table.row(j)) {
            Some(c) => {
                let a = c.abs().min(1.0);
                counts[((a * bins as f64) as usize).min(bins - 1)] += 1;
                values.push(a);
            }
            None => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(BemError::eval(format!(
            "all {skipped} sampled pairs hit zero-norm rows"
        )));
    }
    let counted = values.len();
    let mean = values.iter().sum::<f64>() / counted as f64;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / counted as f64;
    Ok(Histogram {
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        mass: counts.iter().map(|&c| c as f64 / counted as f64).collect(),
        counted,
        skipped,
        mean,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRatio {
    pub ratio: f64,
    pub max_within: f64,
    pub min_between: f64,
    pub classes: usize,
    pub diagnostic: Option<String>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Largest within-class mean distance to the centroid divided by the smallest
/// closest-pair distance between two classes. Each entity counts for its first
/// label; classes with fewer than two embedded members are dropped.
pub fn cluster_ratio(table: &EmbeddingTable, labels: &LabelTable) -> Result<ClusterRatio> {
    let label_map = labels.to_map();
    let mut groups: HashMap<&str, Vec<&[f64]>> = HashMap::new();
    for (i, id) in table.ids().iter().enumerate() {
        if let Some(first) = label_map.get(id.as_str()).and_then(|l| l.first()) {
            groups.entry(first.as_str()).or_default().push(table.row(i));
        }
    }
    let mut groups: Vec<(&str, Vec<&[f64]>)> =
        groups.into_iter().filter(|(_, g)| g.len() >= 2).collect();
    groups.sort_unstable_by(|a, b| a.0.cmp(b.0));
    if groups.len() < 2 {
        return Err(BemError::eval(format!(
            "need at least 2 classes with 2 or more members, found {}",
            groups.len()
        )));
    }

    let d = table.dim();
    let max_within = groups
        .iter()
        .map(|(_, g)| {
            let centroid: Vec<f64> = (0..d)
                .map(|k| g.iter().map(|r| r[k]).sum::<f64>() / g.len() as f64)
                .collect();
            g.iter().map(|r| distance(r, &centroid)).sum::<f64>() / g.len() as f64
        })
        .fold(0.0, f64::max);

    let mut min_between = f64::INFINITY;
    let mut closest = ("", "");
    for (a, (name_a, ga)) in groups.iter().enumerate() {
        for (name_b, gb) in &groups[a + 1..] {
            for x in ga {
                for y in gb {
                    let dist = distance(x, y);
                    if dist < min_between {
                        min_between = dist;
                        closest = (name_a, name_b);
                    }
                }
            }
        }
    }
    let (ratio, diagnostic) = if min_between == 0.0 {
        (
            f64::INFINITY,
            Some(format!(
                "classes `{}` and `{}` share a point; between-class distance is 0",
                closest.0, closest.1
            )),
        )
    } else {
        (max_within / min_between, None)
    };
    Ok(ClusterRatio {
        ratio,
        max_within,
        min_between,
        classes: groups.len(),
        diagnostic,
    })
}

/// One user of the retrieval protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct UserQuery {
    pub triggers: Vec<String>,
    /// Attribute values the user actually interacted with.
    pub truth: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub recall: f64,
    pub hits: usize,
    pub total: usize,
    pub skipped_triggers: usize,
}

/// Indices of the `k` candidates most cosine-similar to `query`, skipping `exclude`.
pub fn top_k(
    query: &[f64],
    candidates: &EmbeddingTable,
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let qn = dot(query, query).sqrt();
    let mut scored: Vec<(f64, usize)> = candidates
        .rows()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, r)| {
            let rn = dot(r, r).sqrt();
            let s = if qn == 0.0 || rn == 0.0 {
                f64::NEG_INFINITY
            } else {
                dot(query, r) / (qn * rn)
            };
            (s, i)
        })
        .collect();
    let by_score = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_score);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_score);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Micro-averaged recall of each user's ground-truth attributes among the
/// attributes of the top-`k` neighbours of their triggers.
pub fn hit_recall(
    queries: &EmbeddingTable,
    candidates: &EmbeddingTable,
    users: &[UserQuery],
    attributes: &HashMap<String, String>,
    k: usize,
) -> Result<RecallReport> {
    if k == 0 {
        return Err(BemError::eval("K must be at least 1"));
    }
    if queries.dim() != candidates.dim() {
        return Err(BemError::eval(format!(
            "query dimension {} differs from candidate dimension {}",
            queries.dim(),
            candidates.dim()
        )));
    }
    let q_index = queries.index();
    let c_index = candidates.index();
    let mut hits = 0;
    let mut total = 0;
    let mut skipped = 0;
    for user in users {
        let mut retrieved: HashSet<&str> = HashSet::new();
        for trigger in &user.triggers {
            let Some(&qi) = q_index.get(trigger.as_str()) else {
                skipped += 1;
                continue;
            };
            let exclude = c_index.get(trigger.as_str()).copied();
            for ci in top_k(queries.row(qi), candidates, k, exclude) {
                if let Some(attr) = attributes.get(&candidates.ids()[ci]) {
                    retrieved.insert(attr);
                }
            }
        }
        let truth: HashSet<&str> = user.truth.iter().map(String::as_str).collect();
        total += truth.len();
        hits += truth.iter().filter(|t| retrieved.contains(*t)).count();
    }
    if total == 0 {
        return Err(BemError::eval("no ground-truth attributes to recall"));
    }
    Ok(RecallReport {
        recall: hits as f64 / total as f64,
        hits,
        total,
        skipped_triggers: skipped,
    })
}

/// A `d x k` row-major matrix with i.i.d. N(0, 1/k) entries.
pub fn projection_matrix<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(BemError::config("projection dimension must be at least 1"));
    }
    let normal = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("positive std");
    Ok((0..d * k).map(|_| normal.sample(rng)).collect())
}

pub fn project_with(table: &EmbeddingTable, matrix: &[f64], k: usize) -> Result<EmbeddingTable> {
    let d = table.dim();
    if k == 0 || matrix.len() != d * k {
        return Err(BemError::shape(format!(
            "projection matrix has {} entries, expected {d} x {k}",
            matrix.len()
        )));
    }
    let mut data = Vec::with_capacity(table.len() * k);
    for row in table.rows() {
        let mut out = vec![0.0; k];
        for (x, m_row) in row.iter().zip(matrix.chunks_exact(k)) {
            for (o, m) in out.iter_mut().zip(m_row) {
                *o += x * m;
            }
        }
        data.extend(out);
    }
    EmbeddingTable::new(table.ids().to_vec(), data, k)
}

pub fn random_project<R: Rng + ?Sized>(
    table: &EmbeddingTable,
    k: usize,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    let matrix = projection_matrix(table.dim(), k, rng)?;
    project_with(table, &matrix, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pairs: &[(&str, &[&str])]) -> LabelTable {
        LabelTable::new(
            pairs.iter().map(|(id, _)| id.to_string()).collect(),
            pairs
                .iter()
                .map(|(_, l)| l.iter().map(|s| s.to_string()).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn multi_label_hit_rule() {
        let model = ClassifierModel {
            classes: vec!["A".into(), "B".into()],
            weights: vec![vec![-1.0], vec![1.0]],
            bias: vec![0.0, 0.0],
            feature_mean: vec![0.0],
            feature_scale: vec![1.0],
            loss_trace: vec![],
        };
        let table = EmbeddingTable::from_rows(vec!["x".into()], &[vec![2.0]]).unwrap();
        let lab = labels(&[("x", &["A", "B"])]);
        assert_eq!(
            classify_accuracy(&model, &table, &lab, &["x".into()]).unwrap(),
            1.0
        );
        assert!(classify_accuracy(&model, &table, &lab, &[]).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        let table =
            EmbeddingTable::from_rows(vec!["a".into(), "b".into()], &[vec![1.0], vec![2.0]])
                .unwrap();
        let lab = labels(&[("a", &["A"]), ("b", &["A"])]);
        let err = train_classifier(
            &table,
            &lab,
            &["a".into(), "b".into()],
            ClassifierSettings::default(),
        );
        assert!(matches!(err, Err(BemError::Eval(_))));
    }

    #[test]
    fn identical_rows_fill_the_top_bin() {
        let table = EmbeddingTable::from_rows(
            (0..5).map(|i| format!("e{i}")).collect(),
            &vec![vec![0.3, -0.4]; 5],
        )
        .unwrap();
        let h = similarity_histogram(&table, 100, 10, &mut rng::stream(0, "h")).unwrap();
        assert_eq!(h.mass[9], 1.0);
    }

    #[test]
    fn zero_rows_are_skipped() {
        let table = EmbeddingTable::from_rows(
            vec!["a".into(), "b".into(), "c".into()],
            &[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let h = similarity_histogram(&table, 300, 4, &mut rng::stream(0, "h")).unwrap();
        assert!(h.skipped > 0);
        assert_eq!(h.counted + h.skipped, 300);
        assert_eq!(h.mass[0], 1.0);
    }

    #[test]
    fn overlapping_classes_give_infinite_ratio() {
        let table = EmbeddingTable::from_rows(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            &[vec![0.0], vec![0.0], vec![0.0], vec![1.0]],
        )
        .unwrap();
        let lab = labels(&[("a", &["A"]), ("b", &["A"]), ("c", &["B"]), ("d", &["B"])]);
        let r = cluster_ratio(&table, &lab).unwrap();
        assert!(r.ratio.is_infinite());
        assert!(r.diagnostic.is_some());
    }

    #[test]
    fn identity_projection_is_a_no_op() {
        let table = EmbeddingTable::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![1.0, 2.0], vec![-3.0, 0.5]],
        )
        .unwrap();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(project_with(&table, &eye, 2).unwrap(), table);
        assert!(random_project(&table, 0, &mut rng::stream(0, "p")).is_err());
    }

    #[test]
    fn top_k_excludes_the_trigger() {
        let table = EmbeddingTable::from_rows(
            vec!["a".into(), "b".into(), "c".into()],
            &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(top_k(table.row(0), &table, 1, Some(0)), vec![1]);
        assert_eq!(top_k(table.row(0), &table, 5, Some(0)), vec![1, 2]);
    }
}
