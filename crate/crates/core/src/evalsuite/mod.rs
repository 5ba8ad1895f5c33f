//! Metrics, oracle scoring against synthetic ground truth, and exports.

mod export;
mod matching;
mod report;

pub use export::{export_dag, export_samples, read_samples, DagFormat, SampleBlock, SAMPLE_SOURCES};
pub use matching::{hungarian_max, match_latents, pearson, MatchResult};
pub use report::{
    evaluate, regime_codes, write_metrics_csv, write_oracle_json, EvalOptions, EvalReport, MetricsRow, OracleReport, DEFAULT_TAUS,
    METRICS_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::causal::InterventionCode;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::objective::{mmd2_value, MmdConfig};
use crate::scmsynth::Dag;

pub const DEFAULT_N_DEG: usize = 20;
pub const DEFAULT_TAU: f64 = 0.1;

/// Features whose mean moves most under one intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegSet {
    pub label: String,
    /// Sorted by descending score, ties by lower index.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

fn col_stats(x: &Tensor, c: usize) -> (f64, f64) {
    let n = x.rows() as f64;
    let m = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
    let ss = (0..x.rows()).map(|r| (x.get(r, c) - m).powi(2)).sum::<f64>();
    (m, ss)
}

/// Top `n_deg` features by `|mean_k − mean_0| / (pooled std + 1e-8)`.
pub fn select_degs(label: &str, d0: &Tensor, dk: &Tensor, n_deg: usize) -> Result<DegSet> {
    let d = d0.cols();
    if dk.cols() != d {
        return Err(Error::dim("select_degs", d0.shape(), dk.shape()));
    }
    if n_deg > d || n_deg == 0 {
        return Err(Error::Parameter(format!("n_deg must lie in 1..={d}, got {n_deg}")));
    }
    if d0.rows() < 2 || dk.rows() < 2 {
        return Err(Error::Data(format!("{label}: at least two rows per side are needed for DEG scores")));
    }
    let dof = (d0.rows() + dk.rows() - 2) as f64;
    let scores: Vec<f64> = (0..d)
        .map(|c| {
            let (m0, s0) = col_stats(d0, c);
            let (mk, sk) = col_stats(dk, c);
            (mk - m0).abs() / (((s0 + sk) / dof).sqrt() + 1e-8)
        })
        .collect();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n_deg);
    Ok(DegSet {
        label: label.to_string(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
        indices: idx,
    })
}

/// Mean-profile agreement on the DEG columns. `r2` is `None` when the real
/// profile has no spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetrics {
    pub r2: Option<f64>,
    pub rmse: f64,
}

pub fn profile_metrics(gen: &Tensor, real: &Tensor, degs: &DegSet) -> Result<ProfileMetrics> {
    if degs.indices.is_empty() {
        return Err(Error::Parameter("empty DEG set".into()));
    }
    if gen.cols() != real.cols() || gen.rows() == 0 || real.rows() == 0 {
        return Err(Error::dim("profile_metrics", gen.shape(), real.shape()));
    }
    let mu_hat: Vec<f64> = degs.indices.iter().map(|&c| col_stats(gen, c).0).collect();
    let mu: Vec<f64> = degs.indices.iter().map(|&c| col_stats(real, c).0).collect();
    let k = mu.len() as f64;
    let mbar = mu.iter().sum::<f64>() / k;
    let sse: f64 = mu_hat.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
    let sst: f64 = mu.iter().map(|m| (m - mbar).powi(2)).sum();
    Ok(ProfileMetrics {
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        rmse: (sse / k).sqrt(),
    })
}

/// MMD² on the DEG columns.
pub fn mmd_eval(gen: &Tensor, real: &Tensor, degs: &DegSet, cfg: &MmdConfig) -> Result<f64> {
    mmd2_value(&gen.select_cols(&degs.indices), &real.select_cols(&degs.indices), cfg)
}

/// Edges of the thresholded learned graph, relabeled into true latent indices.
pub fn matched_edges(m: &Tensor, tau: f64, perm: &[usize]) -> Result<Vec<(usize, usize)>> {
    let p = perm.len();
    if m.dims() != (p, p) {
        return Err(Error::dim("matched_edges", m.shape(), &[p, p]));
    }
    let mut edges = Vec::new();
    for i in 0..p {
        for j in 0..p {
            if i != j && m.get(i, j).abs() > tau {
                edges.push((perm[i], perm[j]));
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Structural Hamming distance between an edge list and a DAG: each node
/// pair whose edge state differs (missing, extra or reversed) counts once.
pub fn shd(p: usize, edges: &[(usize, usize)], truth: &Dag) -> usize {
    let mut adj = vec![false; p * p];
    for &(i, j) in edges {
        adj[i * p + j] = true;
    }
    let mut count = 0;
    for i in 0..p {
        for j in i + 1..p {
            let a = (adj[i * p + j], adj[j * p + i]);
            let b = (truth.has_edge(i, j), truth.has_edge(j, i));
            if a != b {
                count += 1;
            }
        }
    }
    count
}

pub fn shd_matched(m: &Tensor, tau: f64, truth: &Dag, perm: &[usize]) -> Result<usize> {
    if truth.p() != perm.len() {
        return Err(Error::dim("shd_matched", &[truth.p()], &[perm.len()]));
    }
    Ok(shd(truth.p(), &matched_edges(m, tau, perm)?, truth))
}

/// Fraction of interventions whose strongest target maps to the true one.
pub fn target_accuracy(codes: &[InterventionCode], targets: &[usize], perm: &[usize]) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::Parameter("target accuracy needs at least one intervention".into()));
    }
    if codes.len() != targets.len() {
        return Err(Error::dim("target_accuracy", &[codes.len()], &[targets.len()]));
    }
    let hits = codes
        .iter()
        .zip(targets)
        .filter(|(c, &t)| perm.get(c.target()) == Some(&t))
        .count();
    Ok(hits as f64 / codes.len() as f64)
}
