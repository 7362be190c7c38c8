//! Gradient-boosted regression trees on histogram-binned features with a
//! weighted squared loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::regress::{weighted_mean, Matrix, Predictor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostingParams {
    pub trees: usize,
    pub depth: usize,
    pub learning_rate: f64,
    /// Maximum number of histogram bins per feature.
    pub bins: usize,
    /// Minimum number of training rows in a leaf.
    pub min_leaf: usize,
}

impl Default for BoostingParams {
    fn default() -> Self {
        Self { trees: 200, depth: 4, learning_rate: 0.05, bins: 32, min_leaf: 10 }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf(f64),
}

#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoostedTrees {
    init: f64,
    trees: Vec<Tree>,
}

/// Per-feature bin edges: a row goes to bin `b` when `x <= edges[b]`, with
/// the last bin open-ended.
fn bin_edges(x: &Matrix, feature: usize, bins: usize) -> Vec<f64> {
    let mut values: Vec<f64> = (0..x.rows()).map(|i| x.row(i)[feature]).collect();
    values.sort_unstable_by(f64::total_cmp);
    values.dedup();
    if values.len() <= bins {
        // Midpoints between consecutive distinct values.
        return values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let mut edges: Vec<f64> = (1..bins)
        .map(|b| {
            let pos = b * (values.len() - 1) / bins;
            0.5 * (values[pos] + values[pos + 1])
        })
        .collect();
    edges.dedup();
    edges
}

impl BoostedTrees {
    pub fn fit(x: &Matrix, y: &[f64], w: &[f64], params: &BoostingParams) -> Result<Self> {
        if params.depth == 0 || params.bins < 2 || !(params.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("boosting needs depth ≥ 1, bins ≥ 2, learning_rate > 0".into()));
        }
        let n = x.rows();
        let p = x.cols();
        let edges: Vec<Vec<f64>> = (0..p).map(|j| bin_edges(x, j, params.bins)).collect();
        let codes: Vec<Vec<u8>> = (0..p)
            .map(|j| (0..n).map(|i| edges[j].partition_point(|&e| e < x.row(i)[j]) as u8).collect())
            .collect();
        let init = weighted_mean(y, w);
        let mut fitted = vec![init; n];
        let mut residual = vec![0.0; n];
        let mut trees = Vec::with_capacity(params.trees);
        for _ in 0..params.trees {
            for i in 0..n {
                residual[i] = y[i] - fitted[i];
            }
            let tree = grow(&codes, &edges, &residual, w, params);
            for i in 0..n {
                fitted[i] += tree.predict(x.row(i));
            }
            trees.push(tree);
        }
        Ok(Self { init, trees })
    }
}

fn grow(codes: &[Vec<u8>], edges: &[Vec<f64>], r: &[f64], w: &[f64], params: &BoostingParams) -> Tree {
    let mut nodes = Vec::new();
    let all: Vec<usize> = (0..r.len()).collect();
    build(&mut nodes, all, 0, codes, edges, r, w, params);
    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn build(
    nodes: &mut Vec<Node>,
    rows: Vec<usize>,
    depth: usize,
    codes: &[Vec<u8>],
    edges: &[Vec<f64>],
    r: &[f64],
    w: &[f64],
    params: &BoostingParams,
) -> usize {
    let (sw, swr) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + w[i], b + w[i] * r[i]));
    let leaf = params.learning_rate * if sw > 0.0 { swr / sw } else { 0.0 };
    let id = nodes.len();
    nodes.push(Node::Leaf(leaf));
    if depth >= params.depth || rows.len() < 2 * params.min_leaf || sw <= 0.0 {
        return id;
    }
    let parent_score = swr * swr / sw;
    let mut best: Option<(f64, usize, usize)> = None;
    for (j, col) in codes.iter().enumerate() {
        let nb = edges[j].len() + 1;
        if nb < 2 {
            continue;
        }
        let mut hw = vec![0.0; nb];
        let mut hr = vec![0.0; nb];
        let mut hc = vec![0usize; nb];
        for &i in &rows {
            let b = col[i] as usize;
            hw[b] += w[i];
            hr[b] += w[i] * r[i];
            hc[b] += 1;
        }
        let (mut lw, mut lr, mut lc) = (0.0, 0.0, 0usize);
        for b in 0..nb - 1 {
            lw += hw[b];
            lr += hr[b];
            lc += hc[b];
            let rc = rows.len() - lc;
            if lc < params.min_leaf || rc < params.min_leaf {
                continue;
            }
            let rw = sw - lw;
            if lw <= 0.0 || rw <= 0.0 {
                continue;
            }
            let gain = lr * lr / lw + (swr - lr) * (swr - lr) / rw - parent_score;
            if gain > 1e-12 * parent_score.abs().max(1e-300) && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, j, b));
            }
        }
    }
    let Some((_, feature, bin)) = best else {
        return id;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.into_iter().partition(|&i| (codes[feature][i] as usize) <= bin);
    let left = build(nodes, left_rows, depth + 1, codes, edges, r, w, params);
    let right = build(nodes, right_rows, depth + 1, codes, edges, r, w, params);
    nodes[id] = Node::Split { feature, threshold: edges[feature][bin], left, right };
    id
}

impl Predictor for BoostedTrees {
    fn predict_row(&self, row: &[f64]) -> f64 {
        self.init + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }
}
