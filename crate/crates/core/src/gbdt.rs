//! Multiclass gradient-boosted regression trees under the softmax objective.
//!
//! Each round fits one regression tree per class to the second-order
//! expansion of the multiclass log-loss: gradient `p_c - [y = c]`, hessian
//! `p_c (1 - p_c)`. Splits are exact (every distinct value of every feature
//! is a candidate) and grown depth-wise; leaf values are Newton steps
//! `-G / (H + eps)` shrunk by the learning rate.
//!
//! Training is deterministic. Rows are first put into a canonical order
//! (lexicographic on feature values, then label) so the fitted model does not
//! depend on row order, and every parallel reduction is joined in a fixed
//! order so it does not depend on thread count either.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stage_rng;

/// Guards leaf values against zero hessian sums.
pub const HESSIAN_EPS: f64 = 1e-9;

pub const MODEL_FORMAT: &str = "urfc-gbdt";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Minimum loss reduction required to split a node. Zero admits
    /// zero-gain splits, which parity problems such as XOR need at the root.
    pub min_gain: f64,
    /// Fraction of rows drawn without replacement for each round.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_rounds: 100,
            learning_rate: 0.1,
            max_depth: 4,
            min_samples_leaf: 5,
            min_gain: 1e-6,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_rounds == 0 {
            return Err(Error::Invalid("n_rounds must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Invalid(format!("learning_rate {} not in (0, 1]", self.learning_rate)));
        }
        if self.max_depth == 0 {
            return Err(Error::Invalid("max_depth must be at least 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Invalid("min_samples_leaf must be at least 1".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Invalid(format!("subsample {} not in (0, 1]", self.subsample)));
        }
        if !self.min_gain.is_finite() {
            return Err(Error::Invalid("min_gain must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn check(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Format("empty tree".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Split { feature, threshold, left, right } => {
                    if feature >= n_features {
                        return Err(Error::Format(format!("split on feature {feature} >= {n_features}")));
                    }
                    // children always follow their parent, which rules out cycles
                    if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() {
                        return Err(Error::Format(format!("node {i} has invalid children")));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::Format(format!("node {i} has non-finite threshold")));
                    }
                }
                Node::Leaf { value } => {
                    if !value.is_finite() {
                        return Err(Error::Format(format!("node {i} has non-finite leaf value")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    n_classes: usize,
    n_features: usize,
    params: GbdtParams,
    base_scores: Vec<f64>,
    /// `rounds[r][c]` is the tree for class `c` in round `r`.
    rounds: Vec<Vec<Tree>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile<T> {
    format: String,
    version: u32,
    model: T,
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Multiclass log-loss `-log softmax(scores)[label]`.
pub fn log_loss(scores: &[f64], label: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores[label]
}

/// Per-class gradient and diagonal hessian of [`log_loss`] with respect to
/// the scores.
pub fn softmax_grad_hess(scores: &[f64], label: usize) -> (Vec<f64>, Vec<f64>) {
    let p = softmax(scores);
    let g = p.iter().enumerate().map(|(c, &pc)| pc - if c == label { 1.0 } else { 0.0 }).collect();
    let h = p.iter().map(|&pc| pc * (1.0 - pc)).collect();
    (g, h)
}

impl GbdtModel {
    /// A model with no trees: every input maps to `softmax(base_scores)`.
    pub fn constant(n_classes: usize, n_features: usize) -> Self {
        GbdtModel {
            n_classes,
            n_features,
            params: GbdtParams::default(),
            base_scores: vec![0.0; n_classes],
            rounds: Vec::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn params(&self) -> &GbdtParams {
        &self.params
    }

    pub fn trees(&self) -> impl Iterator<Item = &Tree> {
        self.rounds.iter().flatten()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Dimension { expected: self.n_features, actual: x.len() });
        }
        Ok(())
    }

    /// Raw scores using only the first `rounds` boosting rounds.
    pub fn predict_scores_upto(&self, x: &[f64], rounds: usize) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut scores = self.base_scores.clone();
        for round in self.rounds.iter().take(rounds) {
            for (s, tree) in scores.iter_mut().zip(round) {
                *s += tree.predict(x);
            }
        }
        Ok(scores)
    }

    pub fn predict_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict_scores_upto(x, self.rounds.len())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.predict_scores(x)?))
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Format("model has no classes".into()));
        }
        if self.base_scores.len() != self.n_classes {
            return Err(Error::Format("base score count does not match class count".into()));
        }
        for round in &self.rounds {
            if round.len() != self.n_classes {
                return Err(Error::Format("round tree count does not match class count".into()));
            }
            for tree in round {
                tree.check(self.n_features)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile { format: MODEL_FORMAT.to_owned(), version: MODEL_VERSION, model: self };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| Error::Format(format!("not a model file: {e}")))?;
        if header.format != MODEL_FORMAT {
            return Err(Error::Format(format!("expected format {MODEL_FORMAT:?}, found {:?}", header.format)));
        }
        if header.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", header.version)));
        }
        let file: ModelFile<GbdtModel> = serde_json::from_str(text)?;
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        GbdtModel::from_json(&text).map_err(|e| Error::file(path, e))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Column-major training data in canonical row order.
struct Columns {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    cols: Vec<Vec<f64>>,
    /// Per feature, row indices sorted by value (then row index).
    sorted: Vec<Vec<u32>>,
    /// Features with at least two distinct values.
    splittable: Vec<usize>,
}

impl Columns {
    fn new(x: &[Vec<f64>], y: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| cmp_rows(&x[a], &x[b]).then(y[a].cmp(&y[b])));
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let labels: Vec<usize> = order.iter().map(|&i| y[i]).collect();
        let d = rows.first().map_or(0, Vec::len);
        let cols: Vec<Vec<f64>> = (0..d).map(|f| rows.iter().map(|r| r[f]).collect()).collect();
        let sorted: Vec<Vec<u32>> = cols
            .par_iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        let splittable = (0..d)
            .filter(|&f| {
                let s = &sorted[f];
                cols[f][s[0] as usize] != cols[f][s[s.len() - 1] as usize]
            })
            .collect();
        Columns { rows, labels, cols, sorted, splittable }
    }
}

#[derive(Clone, Copy, Default)]
struct Totals {
    g: f64,
    h: f64,
    n: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Clone, Copy, Default)]
struct ScanState {
    g: f64,
    h: f64,
    n: usize,
    last: f64,
}

fn score(g: f64, h: f64) -> f64 {
    g * g / (h + HESSIAN_EPS)
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid < hi {
        mid
    } else {
        lo
    }
}

const NO_NODE: u32 = u32::MAX;

/// Best split of every frontier node on one feature. `slot_of[i]` maps row
/// `i` to its frontier slot (or `NO_NODE`).
fn scan_feature(
    data: &Columns,
    feature: usize,
    slot_of: &[u32],
    totals: &[Totals],
    g: &[f64],
    h: &[f64],
    params: &GbdtParams,
) -> Vec<Option<Candidate>> {
    let col = &data.cols[feature];
    let mut state = vec![ScanState::default(); totals.len()];
    let mut best: Vec<Option<Candidate>> = vec![None; totals.len()];
    let msl = params.min_samples_leaf;
    for &i in &data.sorted[feature] {
        let i = i as usize;
        let slot = slot_of[i];
        if slot == NO_NODE {
            continue;
        }
        let slot = slot as usize;
        let x = col[i];
        let st = &mut state[slot];
        if st.n > 0 && x != st.last {
            let tot = totals[slot];
            let nr = tot.n - st.n;
            if st.n >= msl && nr >= msl {
                let (gr, hr) = (tot.g - st.g, tot.h - st.h);
                let gain = score(st.g, st.h) + score(gr, hr) - score(tot.g, tot.h);
                if best[slot].is_none_or(|b| gain > b.gain) {
                    best[slot] = Some(Candidate { gain, feature, threshold: midpoint(st.last, x) });
                }
            }
        }
        st.g += g[i];
        st.h += h[i];
        st.n += 1;
        st.last = x;
    }
    best
}

fn grow_tree(data: &Columns, g: &[f64], h: &[f64], in_sample: &[bool], params: &GbdtParams) -> Tree {
    let n = data.rows.len();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut node_of: Vec<u32> = (0..n).map(|i| if in_sample[i] { 0 } else { NO_NODE }).collect();
    let mut frontier = vec![0usize];
    let leaf_value = |t: Totals| -t.g / (t.h + HESSIAN_EPS) * params.learning_rate;

    let node_totals = |node_of: &[u32], ids: &[usize]| -> Vec<Totals> {
        let mut totals = vec![Totals::default(); ids.len()];
        for i in 0..n {
            if let Some(slot) = ids.iter().position(|&id| id as u32 == node_of[i]) {
                totals[slot].g += g[i];
                totals[slot].h += h[i];
                totals[slot].n += 1;
            }
        }
        totals
    };
    let mut totals = node_totals(&node_of, &frontier);

    for _ in 0..params.max_depth {
        // frontier slot per node id; nodes too small to split are left out
        let mut slot_of_node = vec![NO_NODE; nodes.len()];
        let mut active = Vec::new();
        let mut active_totals = Vec::new();
        for (k, &id) in frontier.iter().enumerate() {
            if totals[k].n >= 2 * params.min_samples_leaf {
                slot_of_node[id] = active.len() as u32;
                active.push(id);
                active_totals.push(totals[k]);
            }
        }
        if active.is_empty() {
            break;
        }
        let slot_of: Vec<u32> =
            node_of.iter().map(|&id| if id == NO_NODE { NO_NODE } else { slot_of_node[id as usize] }).collect();

        let per_feature: Vec<Vec<Option<Candidate>>> = data
            .splittable
            .par_iter()
            .map(|&f| scan_feature(data, f, &slot_of, &active_totals, g, h, params))
            .collect();
        let mut best: Vec<Option<Candidate>> = vec![None; active.len()];
        for cands in &per_feature {
            for (b, c) in best.iter_mut().zip(cands) {
                if let Some(c) = c {
                    if b.is_none_or(|b| c.gain > b.gain) {
                        *b = Some(*c);
                    }
                }
            }
        }

        let mut split_of_node: Vec<Option<(usize, f64, usize, usize)>> = vec![None; nodes.len()];
        let mut next_frontier = Vec::new();
        for (slot, &id) in active.iter().enumerate() {
            let Some(c) = best[slot] else { continue };
            if c.gain < params.min_gain {
                continue;
            }
            let left = nodes.len();
            let right = left + 1;
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[id] = Node::Split { feature: c.feature, threshold: c.threshold, left, right };
            split_of_node.resize(nodes.len(), None);
            split_of_node[id] = Some((c.feature, c.threshold, left, right));
            next_frontier.push(left);
            next_frontier.push(right);
        }
        // frontier nodes that did not split become leaves now
        for (k, &id) in frontier.iter().enumerate() {
            if split_of_node[id].is_none() {
                nodes[id] = Node::Leaf { value: leaf_value(totals[k]) };
            }
        }
        if next_frontier.is_empty() {
            return Tree { nodes };
        }
        for (i, id) in node_of.iter_mut().enumerate() {
            if *id == NO_NODE {
                continue;
            }
            if let Some((f, thr, left, right)) = split_of_node[*id as usize] {
                *id = if data.cols[f][i] <= thr { left as u32 } else { right as u32 };
            }
        }
        frontier = next_frontier;
        totals = node_totals(&node_of, &frontier);
    }
    for (k, &id) in frontier.iter().enumerate() {
        nodes[id] = Node::Leaf { value: leaf_value(totals[k]) };
    }
    Tree { nodes }
}

/// Fits a `n_classes`-way softmax boosting model on rows `x` with labels `y`.
pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    if x.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("{} rows but {} labels", x.len(), y.len())));
    }
    if n_classes == 0 {
        return Err(Error::Invalid("n_classes must be at least 1".into()));
    }
    let d = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Dimension { expected: d, actual: row.len() });
        }
        if let Some(f) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value at row {i}, feature {f}")));
        }
        if y[i] >= n_classes {
            return Err(Error::Invalid(format!("label {} at row {i} >= n_classes {n_classes}", y[i])));
        }
    }

    let data = Columns::new(x, y);
    let n = data.rows.len();
    let mut model = GbdtModel {
        n_classes,
        n_features: d,
        params: params.clone(),
        base_scores: vec![0.0; n_classes],
        rounds: Vec::with_capacity(params.n_rounds),
    };
    let mut scores: Vec<Vec<f64>> = vec![model.base_scores.clone(); n];
    let mut rng = stage_rng(params.seed, "gbdt-subsample");
    let sample_size = ((params.subsample * n as f64).round() as usize).clamp(1, n);

    for _ in 0..params.n_rounds {
        let mut in_sample = vec![sample_size == n; n];
        if sample_size < n {
            for i in sample(&mut rng, n, sample_size) {
                in_sample[i] = true;
            }
        }
        let mut grads = vec![vec![0.0; n]; n_classes];
        let mut hess = vec![vec![0.0; n]; n_classes];
        for i in 0..n {
            let (gi, hi) = softmax_grad_hess(&scores[i], data.labels[i]);
            for c in 0..n_classes {
                grads[c][i] = gi[c];
                hess[c][i] = hi[c];
            }
        }
        let trees: Vec<Tree> =
            (0..n_classes).into_par_iter().map(|c| grow_tree(&data, &grads[c], &hess[c], &in_sample, params)).collect();
        for (row, s) in data.rows.iter().zip(scores.iter_mut()) {
            for (sc, tree) in s.iter_mut().zip(&trees) {
                *sc += tree.predict(row);
            }
        }
        model.rounds.push(trees);
    }
    Ok(model)
}
