//! Joint feature/spatial kNN graph over segments and score propagation.
//!
//! Edge weights are `max(0, z_i·z_j)^γ · exp(−σ‖x_i − x_j‖^q)` on the union
//! of every node's `k` nearest neighbours, where `z` are unit mean embeddings
//! and `x` are centroids scaled into `[0, 1]`. Propagation solves
//! `(I − αÂ)Ỹ = (1 − α)Ŷ` with `Â = D^{-1/2} A D^{-1/2}`, either by
//! conjugate gradients or by the contraction `Ỹ ← αÂỸ + (1 − α)Ŷ`.
//!
//! That system is the stationarity condition of
//! `‖Ỹ − Ŷ‖² + λ·tr(Ỹᵀ(I − Â)Ỹ)` with `λ = α/(1 − α)`, the degree-normalised
//! smoothness objective. [`objective_value`] evaluates the unnormalised
//! `‖Ỹ − Ŷ‖² + λ Σ A_ij ‖Ỹ_i − Ỹ_j‖²` for comparison; its minimiser is a
//! different (unnormalised Laplacian) system.

use std::io::Write;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::classify::INACTIVE_SCORE;
use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::probe::argmax_lowest;
use crate::superpixel::SuperpixelPartition;
use crate::tensorio::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    FixedPoint,
    Direct,
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_point" => Ok(Self::FixedPoint),
            "direct" => Ok(Self::Direct),
            other => Err(invalid(format!("unknown solver {other:?}"))),
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FixedPoint => "fixed_point",
            Self::Direct => "direct",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub gamma: f64,
    pub sigma: f64,
    /// Exponent of the spatial kernel.
    pub spatial_exponent: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_prop_iters: usize,
    pub solver: Solver,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 100,
            gamma: 1.0,
            sigma: 1.0,
            spatial_exponent: 2.0,
            alpha: 0.5,
            tol: 1e-6,
            max_prop_iters: 1000,
            solver: Solver::FixedPoint,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if !pos(self.gamma) || !pos(self.sigma) || !pos(self.spatial_exponent) {
            return Err(invalid(
                "gamma, sigma and the spatial exponent must be positive",
            ));
        }
        check_alpha(self.alpha)?;
        if !pos(self.tol) {
            return Err(invalid("tol must be positive"));
        }
        Ok(())
    }

    /// `λ = α / (1 − α)`.
    pub fn lambda(&self) -> f64 {
        self.alpha / (1.0 - self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid(format!("alpha {alpha} outside [0, 1)")));
    }
    Ok(())
}

/// Symmetric sparse affinity matrix in CSR form with its normalised twin.
#[derive(Clone, Debug)]
pub struct AffinityGraph {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    normalized: Vec<f64>,
    degrees: Vec<f64>,
    /// Set when the requested `k` exceeded `N − 1`.
    pub k_clamped: bool,
}

impl AffinityGraph {
    /// Builds from undirected `(i, j, w)` triples; duplicates keep the
    /// largest weight, self-loops and non-positive weights are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut directed: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * edges.len());
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(invalid(format!(
                    "edge weight {w} is not a finite non-negative number"
                )));
            }
            if i != j && w > 0.0 {
                directed.push((i, j, w));
                directed.push((j, i, w));
            }
        }
        directed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(b.2.total_cmp(&a.2)));
        directed.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);

        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _, _) in &directed {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let cols: Vec<usize> = directed.iter().map(|e| e.1).collect();
        let weights: Vec<f64> = directed.iter().map(|e| e.2).collect();
        let degrees: Vec<f64> = (0..n)
            .map(|i| weights[row_ptr[i]..row_ptr[i + 1]].iter().sum())
            .collect();
        let mut normalized = vec![0.0; weights.len()];
        for i in 0..n {
            for e in row_ptr[i]..row_ptr[i + 1] {
                let j = cols[e];
                let d = degrees[i] * degrees[j];
                normalized[e] = if d > 0.0 { weights[e] / d.sqrt() } else { 0.0 };
            }
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            weights,
            normalized,
            degrees,
            k_clamped: false,
        })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degrees[i]
    }

    /// `(neighbour, A_ij, Â_ij)` for node `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.weights[r.clone()])
            .zip(&self.normalized[r])
            .map(|((&j, &w), &nw)| (j, w, nw))
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.weights[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn normalized_weight(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.normalized[r.start + p],
            Err(_) => 0.0,
        }
    }

    /// Undirected edges `(i, j, A_ij)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.row(i)
                .filter(move |&(j, _, _)| j > i)
                .map(move |(j, w, _)| (i, j, w))
        })
    }

    /// `out = Â·y` for row-major `N×C` blocks.
    pub fn normalized_matmul(&self, y: &[f64], classes: usize, out: &mut [f64]) {
        out.par_chunks_mut(classes)
            .enumerate()
            .for_each(|(i, row)| {
                row.iter_mut().for_each(|x| *x = 0.0);
                for (j, _, nw) in self.row(i) {
                    for (o, &v) in row.iter_mut().zip(&y[j * classes..(j + 1) * classes]) {
                        *o += nw * v;
                    }
                }
            });
    }

    /// Tab-free `i j weight` lines, one per undirected edge.
    pub fn write_edge_list(&self, mut out: impl Write) -> std::io::Result<()> {
        for (i, j, w) in self.edges() {
            writeln!(out, "{i} {j} {w:.9e}")?;
        }
        Ok(())
    }
}

/// `max(0, z_i·z_j)^γ · exp(−σ‖x_i − x_j‖^q)`.
pub fn edge_weight(
    zi: &[f64],
    zj: &[f64],
    xi: [f64; 2],
    xj: [f64; 2],
    gamma: f64,
    sigma: f64,
    q: f64,
) -> f64 {
    let sim: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
    let dist = ((xi[0] - xj[0]).powi(2) + (xi[1] - xj[1]).powi(2)).sqrt();
    sim.max(0.0).powf(gamma) * (-sigma * dist.powf(q)).exp()
}

/// Builds the graph from unit embeddings (`N×dim`) and normalised coordinates.
pub fn build_graph_from_nodes(
    embeddings: &[f64],
    dim: usize,
    coords: &[[f64; 2]],
    cfg: &GraphConfig,
) -> Result<AffinityGraph> {
    cfg.validate()?;
    let n = coords.len();
    if embeddings.len() != n * dim {
        return Err(dim_mismatch("embedding buffer does not match node count"));
    }
    if n < 2 {
        return Err(invalid("graph needs at least two nodes"));
    }
    let k_clamped = cfg.k > n - 1;
    if k_clamped {
        warn!("k={} exceeds N-1={}, clamping", cfg.k, n - 1);
    }
    let k = cfg.k.min(n - 1);
    let z = |i: usize| &embeddings[i * dim..(i + 1) * dim];

    let edges: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let df: f64 = z(i).iter().zip(z(j)).map(|(a, b)| (a - b).powi(2)).sum();
                    let dx = (coords[i][0] - coords[j][0]).powi(2)
                        + (coords[i][1] - coords[j][1]).powi(2);
                    (df + dx, j)
                })
                .collect();
            let by_dist =
                |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_dist);
                cand.truncate(k);
            }
            cand.into_iter()
                .map(move |(_, j)| {
                    (
                        i,
                        j,
                        edge_weight(
                            z(i),
                            z(j),
                            coords[i],
                            coords[j],
                            cfg.gamma,
                            cfg.sigma,
                            cfg.spatial_exponent,
                        ),
                    )
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut graph = AffinityGraph::from_edges(n, &edges)?;
    graph.k_clamped = k_clamped;
    Ok(graph)
}

/// Scales pixel coordinates into `[0, 1]` by `max(H, W) − 1`.
pub fn normalized_coords(part: &SuperpixelPartition) -> Vec<[f64; 2]> {
    let span = (part.segmentation.height().max(part.segmentation.width()) as f64 - 1.0).max(1.0);
    part.centroids
        .iter()
        .map(|c| [c[0] / span, c[1] / span])
        .collect()
}

pub fn build_graph(part: &SuperpixelPartition, cfg: &GraphConfig) -> Result<AffinityGraph> {
    build_graph_from_nodes(
        &part.embeddings,
        part.feature_dim,
        &normalized_coords(part),
        cfg,
    )
}

fn check_scores(graph: &AffinityGraph, y: &[f64], classes: usize) -> Result<()> {
    if classes == 0 || y.len() != graph.n * classes {
        return Err(dim_mismatch(format!(
            "score block of {} values for {} nodes × {classes} classes",
            y.len(),
            graph.n
        )));
    }
    Ok(())
}

/// `‖(I − αÂ)Ỹ − (1 − α)Ŷ‖_∞`.
pub fn residual_inf(
    graph: &AffinityGraph,
    y_tilde: &[f64],
    y_hat: &[f64],
    classes: usize,
    alpha: f64,
) -> f64 {
    let mut ay = vec![0.0; y_tilde.len()];
    graph.normalized_matmul(y_tilde, classes, &mut ay);
    y_tilde
        .iter()
        .zip(&ay)
        .zip(y_hat)
        .map(|((t, a), h)| (t - alpha * a - (1.0 - alpha) * h).abs())
        .fold(0.0, f64::max)
}

/// Conjugate gradients on `I − αÂ`, one right-hand side per class column.
pub fn propagate_direct(
    graph: &AffinityGraph,
    y_hat: &[f64],
    classes: usize,
    alpha: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_scores(graph, y_hat, classes)?;
    let n = graph.n;
    // internal target sits well below tol so the returned certificate holds
    let target = tol * 1e-2;
    let budget = max_iters.max(n + 1);
    let apply = |x: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let mut s = 0.0;
            for (j, _, nw) in graph.row(i) {
                s += nw * x[j];
            }
            out[i] = x[i] - alpha * s;
        }
    };
    let columns: Vec<Result<Vec<f64>>> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let b: Vec<f64> = (0..n)
                .map(|i| (1.0 - alpha) * y_hat[i * classes + c])
                .collect();
            let mut x = b.clone();
            let mut ax = vec![0.0; n];
            apply(&x, &mut ax);
            let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let mut p = r.clone();
            let mut rr: f64 = r.iter().map(|v| v * v).sum();
            let mut ap = vec![0.0; n];
            let mut iters = 0;
            while r.iter().fold(0.0f64, |m, v| m.max(v.abs())) >= target {
                if iters == budget {
                    let res = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    return Err(Error::NotConverged {
                        iterations: iters,
                        residual: res,
                    });
                }
                apply(&p, &mut ap);
                let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
                if pap <= 0.0 {
                    break;
                }
                let step = rr / pap;
                for i in 0..n {
                    x[i] += step * p[i];
                    r[i] -= step * ap[i];
                }
                let rr_new: f64 = r.iter().map(|v| v * v).sum();
                let beta = rr_new / rr;
                rr = rr_new;
                for i in 0..n {
                    p[i] = r[i] + beta * p[i];
                }
                iters += 1;
            }
            Ok(x)
        })
        .collect();
    let mut out = vec![0.0; n * classes];
    for (c, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            out[i * classes + c] = v;
        }
    }
    let residual = residual_inf(graph, &out, y_hat, classes, alpha);
    if residual >= tol {
        return Err(Error::NotConverged {
            iterations: budget,
            residual,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FixedPointRun {
    pub scores: Vec<f64>,
    pub iterations: usize,
    /// `‖Ỹ^{t+1} − Ỹ^t‖_∞` per iteration.
    pub diffs: Vec<f64>,
    /// Frobenius norm of the same differences.
    pub diffs_fro: Vec<f64>,
}

/// Iterates `Ỹ ← αÂỸ + (1 − α)Ŷ` from `Ŷ` until successive iterates differ
/// by less than `tol` in the max norm.
pub fn propagate_fixed_point(
    graph: &AffinityGraph,
    y_hat: &[f64],
    classes: usize,
    alpha: f64,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointRun> {
    check_alpha(alpha)?;
    check_scores(graph, y_hat, classes)?;
    let mut current = y_hat.to_vec();
    let mut next = vec![0.0; y_hat.len()];
    let mut diffs = Vec::new();
    let mut diffs_fro = Vec::new();
    for it in 1..=max_iters {
        graph.normalized_matmul(&current, classes, &mut next);
        let mut diff = 0.0f64;
        let mut fro = 0.0f64;
        for ((nx, &h), &cur) in next.iter_mut().zip(y_hat).zip(&current) {
            *nx = alpha * *nx + (1.0 - alpha) * h;
            let d = (*nx - cur).abs();
            diff = diff.max(d);
            fro += d * d;
        }
        diffs.push(diff);
        diffs_fro.push(fro.sqrt());
        std::mem::swap(&mut current, &mut next);
        if diff < tol {
            return Ok(FixedPointRun {
                scores: current,
                iterations: it,
                diffs,
                diffs_fro,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        residual: diffs.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// `‖Ỹ − Ŷ‖²_F + λ Σ_{i<j} A_ij ‖Ỹ_i − Ỹ_j‖²`.
pub fn objective_value(
    graph: &AffinityGraph,
    y_hat: &[f64],
    y_tilde: &[f64],
    classes: usize,
    lambda: f64,
) -> f64 {
    let fidelity: f64 = y_tilde
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let smooth: f64 = graph
        .edges()
        .map(|(i, j, w)| {
            let d: f64 = (0..classes)
                .map(|c| (y_tilde[i * classes + c] - y_tilde[j * classes + c]).powi(2))
                .sum();
            w * d
        })
        .sum();
    fidelity + lambda * smooth
}

/// `‖Ỹ − Ŷ‖²_F + λ·tr(Ỹᵀ(I − Â)Ỹ)`, minimised exactly by the propagation
/// system.
pub fn normalized_objective_value(
    graph: &AffinityGraph,
    y_hat: &[f64],
    y_tilde: &[f64],
    classes: usize,
    lambda: f64,
) -> f64 {
    let fidelity: f64 = y_tilde
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let mut ay = vec![0.0; y_tilde.len()];
    graph.normalized_matmul(y_tilde, classes, &mut ay);
    let quad: f64 = y_tilde.iter().zip(&ay).map(|(y, a)| y * (y - a)).sum();
    fidelity + lambda * quad
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub labels: LabelMap,
    /// Refined `N×C` segment scores.
    pub scores: Vec<f64>,
    pub segment_labels: Vec<u8>,
}

/// Propagates segment scores, takes each segment's argmax and paints it back
/// onto the member pixels. Columns of inactive classes are left at the
/// sentinel and never propagated.
pub fn refine_labels(
    part: &SuperpixelPartition,
    graph: &AffinityGraph,
    cfg: &GraphConfig,
) -> Result<Refinement> {
    cfg.validate()?;
    let (n, classes) = (part.nodes(), part.classes);
    if graph.nodes() != n {
        return Err(dim_mismatch("graph and partition node counts differ"));
    }
    let threshold = INACTIVE_SCORE as f64 * 0.1;
    let active: Vec<usize> = (0..classes)
        .filter(|&c| (0..n).all(|i| part.scores(i)[c] > threshold))
        .collect();
    let mut scores = vec![INACTIVE_SCORE as f64; n * classes];
    if !active.is_empty() {
        let ca = active.len();
        let mut y_hat = vec![0.0; n * ca];
        for i in 0..n {
            for (k, &c) in active.iter().enumerate() {
                y_hat[i * ca + k] = part.scores(i)[c];
            }
        }
        let refined = match cfg.solver {
            Solver::Direct => {
                propagate_direct(graph, &y_hat, ca, cfg.alpha, cfg.tol, cfg.max_prop_iters)?
            }
            Solver::FixedPoint => {
                propagate_fixed_point(graph, &y_hat, ca, cfg.alpha, cfg.tol, cfg.max_prop_iters)?
                    .scores
            }
        };
        for i in 0..n {
            for (k, &c) in active.iter().enumerate() {
                scores[i * classes + c] = refined[i * ca + k];
            }
        }
    }
    let segment_labels: Vec<u8> = scores
        .chunks_exact(classes)
        .map(|row| argmax_lowest(row) as u8)
        .collect();
    let seg = &part.segmentation;
    let pixels = seg
        .labels()
        .iter()
        .map(|&s| segment_labels[s as usize])
        .collect();
    let labels = LabelMap::new(classes, seg.height(), seg.width(), pixels)?;
    Ok(Refinement {
        labels,
        scores,
        segment_labels,
    })
}
