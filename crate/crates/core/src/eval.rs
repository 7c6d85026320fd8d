//! Downstream evaluation of frozen embeddings.

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackLoss;
use crate::diff::{Matrix, Tape, Var};
use crate::encoder::{gcn_forward, Adjacency, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::AttributedGraph;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegConfig {
    pub l2: f64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            iters: 1000,
            lr: 0.1,
        }
    }
}

/// Multinomial logistic regression `softmax(Z·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogReg {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LogReg {
    /// Full-batch gradient descent on mean cross-entropy plus `½·l2·‖W‖²`.
    pub fn fit(z: &Matrix, y: &[usize], num_classes: usize, cfg: &LogRegConfig) -> Result<Self> {
        if z.rows() != y.len() {
            return Err(Error::shape(
                "logreg labels",
                format!("{:?}", (z.rows(), 1)),
                format!("{:?}", (y.len(), 1)),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} >= {num_classes} classes"
            )));
        }
        let distinct: HashSet<usize> = y.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::InvalidArgument(
                "logistic regression needs at least two classes in the training set".into(),
            ));
        }
        let (n, d) = (z.rows(), z.cols());
        let mut model = LogReg {
            weights: Matrix::zeros(d, num_classes),
            bias: vec![0.0; num_classes],
        };
        for _ in 0..cfg.iters {
            let mut g = model.probabilities(z);
            for (i, &c) in y.iter().enumerate() {
                g[(i, c)] -= 1.0;
            }
            let g = g.scale(1.0 / n as f64);
            let mut gw = z.transpose().matmul(&g);
            gw.axpy(cfg.l2, &model.weights);
            model.weights.axpy(-cfg.lr, &gw);
            for c in 0..num_classes {
                let gb: f64 = (0..n).map(|i| g[(i, c)]).sum();
                model.bias[c] -= cfg.lr * gb;
            }
        }
        Ok(model)
    }

    pub fn probabilities(&self, z: &Matrix) -> Matrix {
        let mut logits = z.matmul(&self.weights);
        for i in 0..logits.rows() {
            let row = logits.row_mut(i);
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        logits
    }

    pub fn predict(&self, z: &Matrix) -> Result<Vec<usize>> {
        if z.cols() != self.weights.rows() {
            return Err(Error::shape(
                "logreg predict",
                format!("{:?}", (z.rows(), self.weights.rows())),
                format!("{:?}", (z.rows(), z.cols())),
            ));
        }
        Ok(self.probabilities(z).argmax_rows())
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Fits on the training embeddings and returns test accuracy.
pub fn logreg_classify(
    z_train: &Matrix,
    y_train: &[usize],
    z_test: &Matrix,
    y_test: &[usize],
    cfg: &LogRegConfig,
) -> Result<f64> {
    if z_test.rows() != y_test.len() {
        return Err(Error::shape(
            "logreg test labels",
            format!("{:?}", (z_test.rows(), 1)),
            format!("{:?}", (y_test.len(), 1)),
        ));
    }
    let classes = y_train.iter().chain(y_test).max().map_or(0, |m| m + 1);
    let model = LogReg::fit(z_train, y_train, classes, cfg)?;
    Ok(accuracy(&model.predict(z_test)?, y_test))
}

/// ROC-AUC via the Mann–Whitney statistic with mid-ranks, so ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{:?}", (scores.len(), 1)),
            format!("{:?}", (labels.len(), 1)),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("auc scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "auc needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Held-out edge split with sampled non-edges on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSplit {
    pub train_pos: Vec<(usize, usize)>,
    pub train_neg: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
}

pub fn split_edges(graph: &AttributedGraph, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    let m = graph.num_edges();
    if m < 10 {
        return Err(Error::InvalidGraph(format!(
            "link prediction needs >= 10 edges, got {m}"
        )));
    }
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_frac {test_frac} outside (0, 1)"
        )));
    }
    let n = graph.num_nodes();
    let non_edges = n * (n - 1) / 2 - m;
    if non_edges < m {
        return Err(Error::InvalidGraph(
            "too few non-edges to sample negatives".into(),
        ));
    }
    let mut rng = stream(seed, Stream::Eval, 0);
    let mut edges = graph.edges().to_vec();
    edges.shuffle(&mut rng);
    let n_test = ((m as f64 * test_frac).round() as usize).clamp(1, m - 1);
    let test_pos = edges[..n_test].to_vec();
    let train_pos = edges[n_test..].to_vec();

    let mut seen = HashSet::new();
    let mut sample = |count: usize| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            let e = (u.min(v), u.max(v));
            if u != v && !graph.has_edge(u, v) && seen.insert(e) {
                out.push(e);
            }
        }
        out
    };
    let test_neg = sample(test_pos.len());
    let train_neg = sample(train_pos.len());
    Ok(EdgeSplit {
        train_pos,
        train_neg,
        test_pos,
        test_neg,
    })
}

fn hadamard_features(z: &Matrix, pairs: &[&[(usize, usize)]]) -> Matrix {
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .flat_map(|p| p.iter())
        .map(|&(u, v)| z.row(u).iter().zip(z.row(v)).map(|(a, b)| a * b).collect())
        .collect();
    Matrix::from_rows(&rows).expect("rows share the embedding width")
}

/// Edge-existence AUC from a logistic regression on Hadamard edge features.
pub fn link_prediction(
    z: &Matrix,
    graph: &AttributedGraph,
    test_frac: f64,
    seed: u64,
    cfg: &LogRegConfig,
) -> Result<f64> {
    if z.rows() != graph.num_nodes() {
        return Err(Error::shape(
            "link prediction",
            format!("{:?}", (graph.num_nodes(), z.cols())),
            format!("{:?}", (z.rows(), z.cols())),
        ));
    }
    let s = split_edges(graph, test_frac, seed)?;
    let x_train = hadamard_features(z, &[&s.train_pos, &s.train_neg]);
    let y_train: Vec<usize> = std::iter::repeat_n(1, s.train_pos.len())
        .chain(std::iter::repeat_n(0, s.train_neg.len()))
        .collect();
    let model = LogReg::fit(&x_train, &y_train, 2, cfg)?;
    let x_test = hadamard_features(z, &[&s.test_pos, &s.test_neg]);
    let p = model.probabilities(&x_test);
    let scores: Vec<f64> = (0..p.rows()).map(|i| p[(i, 1)]).collect();
    let labels: Vec<bool> = (0..p.rows()).map(|i| i < s.test_pos.len()).collect();
    auc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(z: &Matrix, k: usize, rng: &mut impl Rng, max_iters: usize) -> KMeans {
    let n = z.rows();
    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = vec![z.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(z.row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), &centers[centers.len() - 1]));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&p, &q| {
                    sq_dist(z.row(i), &centers[p]).total_cmp(&sq_dist(z.row(i), &centers[q]))
                })
                .unwrap_or(0);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; z.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(z.row(i), &centers[a]))
        .sum();
    KMeans {
        assignments,
        centroids: Matrix::from_rows(&centers).expect("centroids share the embedding width"),
        inertia,
    }
}

/// Lloyd's k-means with k-means++ seeding, best of `restarts` by inertia.
pub fn kmeans(z: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "k-means needs k >= 2, got {k}"
        )));
    }
    if k > z.rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} points",
            z.rows()
        )));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = stream(seed, Stream::Eval, 1000 + r as u64);
        let run = kmeans_once(z, k, &mut rng, 300);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI with arithmetic-mean normalisation. Two single-cluster labellings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "nmi",
            format!("{:?}", (a.len(), 1)),
            format!("{:?}", (b.len(), 1)),
        ));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("nmi of empty labellings".into()));
    }
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let (ha, hb) = (
        entropy(ca.iter().copied(), n),
        entropy(cb.iter().copied(), n),
    );
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Clusters `z` into `k` groups and scores the assignment against `labels`.
pub fn kmeans_nmi(
    z: &Matrix,
    labels: &[usize],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<f64> {
    if z.rows() != labels.len() {
        return Err(Error::shape(
            "kmeans_nmi",
            format!("{:?}", (z.rows(), 1)),
            format!("{:?}", (labels.len(), 1)),
        ));
    }
    nmi(&kmeans(z, k, restarts, seed)?.assignments, labels)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random train/val/test split of `0..n`; the test set takes the remainder.
pub fn random_split(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<NodeSplit> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions {train_frac}/{val_frac} leave no test set"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Split, 0));
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = (n as f64 * val_frac).round() as usize;
    Ok(NodeSplit {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// Which embeddings train the downstream classifier under attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Train on benign embeddings, test on adversarial ones.
    #[default]
    Evasion,
    /// Train and test on adversarial embeddings.
    Retrain,
}

/// Node-classification accuracy on `split.test`. `adversarial` defaults to
/// the benign embeddings.
pub fn node_classification(
    benign: &Matrix,
    adversarial: Option<&Matrix>,
    labels: &[usize],
    split: &NodeSplit,
    protocol: Protocol,
    cfg: &LogRegConfig,
) -> Result<f64> {
    let test_src = adversarial.unwrap_or(benign);
    let train_src = match protocol {
        Protocol::Evasion => benign,
        Protocol::Retrain => test_src,
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    logreg_classify(
        &train_src.select_rows(&split.train),
        &pick(&split.train),
        &test_src.select_rows(&split.test),
        &pick(&split.test),
        cfg,
    )
}

/// Attack objective against `classifier ∘ encoder`: the negative mean
/// cross-entropy on `nodes`. Remembers which nodes were misclassified at any
/// point it was evaluated.
pub struct ClassifierAttack<'a> {
    params: &'a EncoderParams,
    weights: Matrix,
    bias: Matrix,
    nodes: Arc<Vec<usize>>,
    onehot: Matrix,
    labels: Vec<usize>,
    fooled: RefCell<Vec<bool>>,
}

impl<'a> ClassifierAttack<'a> {
    /// `labels[i]` is the label of `nodes[i]`.
    pub fn new(
        classifier: &LogReg,
        params: &'a EncoderParams,
        nodes: &[usize],
        labels: &[usize],
    ) -> Result<Self> {
        let classes = classifier.bias.len();
        if nodes.len() != labels.len() {
            return Err(Error::shape("classifier attack", nodes.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside classifier range"
            )));
        }
        if classifier.weights.rows() != params.embed_dim() {
            return Err(Error::shape(
                "classifier attack",
                params.embed_dim(),
                classifier.weights.rows(),
            ));
        }
        Ok(Self {
            params,
            weights: classifier.weights.clone(),
            bias: Matrix::from_vec(1, classes, classifier.bias.clone())?,
            nodes: Arc::new(nodes.to_vec()),
            onehot: Matrix::from_fn(nodes.len(), classes, |i, c| (labels[i] == c) as u8 as f64),
            labels: labels.to_vec(),
            fooled: RefCell::new(vec![false; nodes.len()]),
        })
    }

    pub fn fooled(&self) -> Vec<bool> {
        self.fooled.borrow().clone()
    }
}

impl AttackLoss for ClassifierAttack<'_> {
    /// Negative mean cross-entropy on the evaluated nodes. Records which nodes
    /// are misclassified at every point the attacker visits.
    fn record(&self, tape: &mut Tape, adj: &Adjacency, x: Var) -> Result<Var> {
        let p = self.params.record(tape, false);
        let out = gcn_forward(tape, &p, adj, x)?;
        let mu = tape.select_rows(out.mu, Arc::clone(&self.nodes))?;
        let w = tape.constant(self.weights.clone());
        let b = tape.constant(self.bias.clone());
        let bb = tape.broadcast_rows(b, self.nodes.len())?;
        let lin = tape.matmul(mu, w)?;
        let logits = tape.add(lin, bb)?;

        let values = tape.value(logits).clone();
        let pred = values.argmax_rows();
        let mut fooled = self.fooled.borrow_mut();
        for (i, (&p, &y)) in pred.iter().zip(&self.labels).enumerate() {
            fooled[i] |= p != y;
        }

        let shift = Matrix::from_fn(values.rows(), values.cols(), |i, _| {
            values
                .row(i)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let shift = tape.constant(shift);
        let centered = tape.sub(logits, shift)?;
        let e = tape.exp(centered);
        let s = tape.row_sum(e);
        let lse = tape.ln(s);
        let onehot = tape.constant(self.onehot.clone());
        let picked_all = tape.mul(centered, onehot)?;
        let picked = tape.row_sum(picked_all);
        let ce = tape.sub(lse, picked)?;
        let ce = tape.mean(ce)?;
        Ok(tape.scale(ce, -1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Benign,
    Adversarial,
}

/// One aggregated metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub condition: Condition,
    pub attack_json: String,
}

pub const REPORT_HEADER: [&str; 7] = [
    "task",
    "metric",
    "value",
    "std",
    "n_seeds",
    "condition",
    "attack_json",
];

impl EvalReport {
    /// Mean and sample standard deviation over per-seed values.
    pub fn aggregate(
        task: &str,
        metric: &str,
        values: &[f64],
        condition: Condition,
        attack_json: String,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no values for {task}/{metric}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{task}/{metric} values {values:?}"
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            task: task.into(),
            metric: metric.into(),
            value: mean,
            std,
            n_seeds: values.len(),
            condition,
            attack_json,
        })
    }
}

/// Appends rows to `path`, writing the header first when the file is new or empty.
pub fn append_reports(path: &Path, rows: &[EvalReport]) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if fresh {
        w.write_record(REPORT_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_reference_cases() {
        let l = [true, true, false, false];
        assert_eq!(auc(&[1.0, 1.0, 0.0, 0.0], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &l).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 4], &l).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = stream(4, Stream::Eval, 9);
        for n in [5usize, 37, 200] {
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..10) as f64) / 3.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc(&scores, &labels).unwrap();
            assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            assert!((auc(&t, &labels).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn nmi_reference_cases() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let relabelled = [2, 2, 0, 0, 1, 1];
        assert!((nmi(&a, &relabelled).unwrap() - 1.0).abs() < 1e-12);
        let b = [0, 1, 0, 1, 1, 0];
        assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn logreg_separates_blobs_and_requires_two_classes() {
        let z = Matrix::from_rows(&[
            vec![-2.0, 0.1],
            vec![-1.5, -0.2],
            vec![1.7, 0.0],
            vec![2.2, 0.3],
        ])
        .unwrap();
        let y = [0, 0, 1, 1];
        assert_eq!(
            logreg_classify(&z, &y, &z, &y, &LogRegConfig::default()).unwrap(),
            1.0
        );
        assert!(matches!(
            logreg_classify(&z, &[1, 1, 1, 1], &z, &y, &LogRegConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let z = Matrix::zeros(3, 2);
        assert!(kmeans(&z, 1, 1, 0).is_err());
        assert!(kmeans(&z, 4, 1, 0).is_err());
    }

    #[test]
    fn split_partitions_nodes() {
        let s = random_split(100, 0.1, 0.1, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 10, 80));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let r = EvalReport::aggregate(
            "node",
            "accuracy",
            &[0.5, 0.7],
            Condition::Benign,
            "{}".into(),
        )
        .unwrap();
        assert!((r.value - 0.6).abs() < 1e-15);
        assert!((r.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(EvalReport::aggregate(
            "node",
            "accuracy",
            &[f64::NAN],
            Condition::Benign,
            "{}".into()
        )
        .is_err());
    }
}
