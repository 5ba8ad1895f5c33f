//! Synthetic latent SCM benchmarks with known ground truth, plus numeric
//! checks of the identifiability assumptions.

mod bundle;
mod checks;
mod dataset;

pub use bundle::{read_bundle, write_bundle, Bundle, Manifest};
pub use checks::{
    check_faithfulness, check_total_separation, permutation_mmd_test, uniform_grid, FaithfulnessCheck,
    FaithfulnessOptions, FaithfulnessReport, SeparationReport, TestOutcome,
};
pub use dataset::{write_regime, write_table, CsvTable, Regime, RegimeDataset};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hetnet::HeteroGraph;
use crate::rng::{normal, stream};

const STREAM_DAG: u64 = 1;
const STREAM_SHIFTS: u64 = 2;
const STREAM_MIXING: u64 = 3;
const STREAM_CONTEXT: u64 = 4;
const STREAM_DOUBLES: u64 = 5;
const STREAM_REGIME: u64 = 100;

/// Strictly upper-triangular adjacency: `has_edge(i, j)` means `i → j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<u8>>", try_from = "Vec<Vec<u8>>")]
pub struct Dag {
    p: usize,
    adj: Vec<bool>,
}

impl Dag {
    pub fn empty(p: usize) -> Self {
        Self {
            p,
            adj: vec![false; p * p],
        }
    }

    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(p);
        for &(i, j) in edges {
            if i >= j || j >= p {
                return Err(Error::Parameter(format!(
                    "edge {i}->{j} is not strictly upper-triangular in {p} nodes"
                )));
            }
            g.adj[i * p + j] = true;
        }
        Ok(g)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.p + j]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.p {
            for j in i + 1..self.p {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&e| e).count()
    }

    pub fn parents(&self, j: usize) -> Vec<usize> {
        (0..j).filter(|&i| self.has_edge(i, j)).collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (i + 1..self.p).filter(|&j| self.has_edge(i, j)).collect()
    }

    /// Strict descendants (excluding `i`).
    pub fn descendants(&self, i: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = self.children(i);
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.children(v));
            }
        }
        out
    }
}

impl From<Dag> for Vec<Vec<u8>> {
    fn from(g: Dag) -> Self {
        (0..g.p)
            .map(|i| (0..g.p).map(|j| g.has_edge(i, j) as u8).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<u8>>> for Dag {
    type Error = String;

    fn try_from(rows: Vec<Vec<u8>>) -> std::result::Result<Self, String> {
        let p = rows.len();
        let mut g = Dag::empty(p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err("adjacency must be square".into());
            }
            for (j, &v) in row.iter().enumerate() {
                match (v, i < j) {
                    (0, _) => {}
                    (1, true) => g.adj[i * p + j] = true,
                    (1, false) => return Err(format!("entry ({i}, {j}) must be zero")),
                    _ => return Err(format!("entry ({i}, {j}) must be 0 or 1")),
                }
            }
        }
        Ok(g)
    }
}

/// Each upper-triangular entry is present independently with `edge_prob`.
pub fn sample_dag(p: usize, edge_prob: f64, seed: u64) -> Result<Dag> {
    if p == 0 {
        return Err(Error::Parameter("latent dimension must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::Parameter(format!("edge_prob must lie in [0, 1], got {edge_prob}")));
    }
    let mut rng = stream(seed, STREAM_DAG);
    let mut g = Dag::empty(p);
    for i in 0..p {
        for j in i + 1..p {
            g.adj[i * p + j] = rng.random::<f64>() < edge_prob;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingKind {
    Linear,
    Poly2,
    Mlp,
}

impl fmt::Display for MixingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixingKind::Linear => "linear",
            MixingKind::Poly2 => "poly2",
            MixingKind::Mlp => "mlp",
        })
    }
}

impl FromStr for MixingKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "poly2" | "polynomial" => Ok(Self::Poly2),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown mixing '{other}' (linear, poly2, mlp)")),
        }
    }
}

/// Map from latents to observations.
///
/// `linear` is `p × d`. Degree-2 mixing adds `quadratic`, one row per monomial
/// `u_a·u_b` with `a ≤ b`. The mlp kind is `tanh(u·hidden)·output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    pub kind: MixingKind,
    pub p: usize,
    pub d: usize,
    pub seed: u64,
    pub linear: Vec<Vec<f64>>,
    #[serde(default)]
    pub quadratic: Vec<Vec<f64>>,
    #[serde(default)]
    pub hidden: Vec<Vec<f64>>,
    #[serde(default)]
    pub output: Vec<Vec<f64>>,
}

fn matrix_rank(rows: &[Vec<f64>]) -> usize {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return 0;
    }
    let m = DMatrix::from_fn(r, c, |i, j| rows[i][j]);
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s / top > 1e-8).count()
}

fn gaussian_rows(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| scale * normal(rng)).collect()).collect()
}

impl MixingSpec {
    /// Linear mixing with the given `p × d` loadings; rejects rank < p.
    pub fn from_linear(loadings: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let p = loadings.len();
        let d = loadings.first().map_or(0, Vec::len);
        let spec = Self {
            kind: MixingKind::Linear,
            p,
            d,
            seed,
            linear: loadings,
            quadratic: vec![],
            hidden: vec![],
            output: vec![],
        };
        spec.validate()?;
        Ok(spec)
    }

    fn monomials(p: usize) -> Vec<(usize, usize)> {
        (0..p).flat_map(|a| (a..p).map(move |b| (a, b))).collect()
    }

    /// Checks shapes and that the latent-to-feature coefficient block has
    /// row rank `p`. Degree-2 mixings with enough columns must also have full
    /// row rank over the whole monomial basis.
    pub fn validate(&self) -> Result<()> {
        let (p, d) = (self.p, self.d);
        if p == 0 || d < p {
            return Err(Error::Construction(format!("mixing needs 1 <= p <= d, got p={p}, d={d}")));
        }
        if self.linear.len() != p || self.linear.iter().any(|r| r.len() != d) {
            return Err(Error::Construction("linear block must be p x d".into()));
        }
        let rank = matrix_rank(&self.loadings());
        if rank < p {
            return Err(Error::Construction(format!("mixing has row rank {rank} < {p}")));
        }
        if self.kind == MixingKind::Poly2 {
            let mut full = self.linear.clone();
            full.extend(self.quadratic.iter().cloned());
            if self.quadratic.len() != Self::monomials(p).len() {
                return Err(Error::Construction("quadratic block has the wrong row count".into()));
            }
            if full.len() <= d && matrix_rank(&full) < full.len() {
                return Err(Error::Construction("monomial coefficient matrix is rank deficient".into()));
            }
        }
        Ok(())
    }

    /// Jacobian of the mixing at the origin, `p × d`.
    pub fn loadings(&self) -> Vec<Vec<f64>> {
        match self.kind {
            MixingKind::Linear | MixingKind::Poly2 => self.linear.clone(),
            MixingKind::Mlp => (0..self.p)
                .map(|a| {
                    (0..self.d)
                        .map(|f| (0..self.hidden[a].len()).map(|h| self.hidden[a][h] * self.output[h][f]).sum())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn apply_row(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        match self.kind {
            MixingKind::Linear | MixingKind::Poly2 => {
                for (a, ua) in u.iter().enumerate() {
                    for (o, l) in out.iter_mut().zip(&self.linear[a]) {
                        *o += ua * l;
                    }
                }
                if self.kind == MixingKind::Poly2 {
                    for (row, (a, b)) in self.quadratic.iter().zip(Self::monomials(self.p)) {
                        let m = u[a] * u[b];
                        for (o, q) in out.iter_mut().zip(row) {
                            *o += m * q;
                        }
                    }
                }
            }
            MixingKind::Mlp => {
                let width = self.output.len();
                for h in 0..width {
                    let pre: f64 = (0..self.p).map(|a| u[a] * self.hidden[a][h]).sum();
                    let act = pre.tanh();
                    for (o, w) in out.iter_mut().zip(&self.output[h]) {
                        *o += act * w;
                    }
                }
            }
        }
    }

    pub fn apply(&self, u: &Tensor) -> Tensor {
        let n = u.rows();
        let mut x = Tensor::zeros(&[n, self.d]);
        for i in 0..n {
            let mut row = vec![0.0; self.d];
            self.apply_row(u.row_slice(i), &mut row);
            x.data_mut()[i * self.d..(i + 1) * self.d].copy_from_slice(&row);
        }
        x
    }
}

/// Draws standard-normal coefficients and verifies rank, resampling up to 10
/// times.
pub fn make_mixing(p: usize, d: usize, kind: MixingKind, seed: u64) -> Result<MixingSpec> {
    if p == 0 || d < p {
        return Err(Error::Parameter(format!("mixing needs 1 <= p <= d, got p={p}, d={d}")));
    }
    let mut rng = stream(seed, STREAM_MIXING);
    let mut last = None;
    for _ in 0..10 {
        let mut spec = MixingSpec {
            kind,
            p,
            d,
            seed,
            linear: gaussian_rows(&mut rng, p, d, 1.0),
            quadratic: vec![],
            hidden: vec![],
            output: vec![],
        };
        match kind {
            MixingKind::Linear => {}
            MixingKind::Poly2 => {
                spec.quadratic = gaussian_rows(&mut rng, MixingSpec::monomials(p).len(), d, 1.0);
            }
            MixingKind::Mlp => {
                spec.hidden = gaussian_rows(&mut rng, p, d, 1.0 / (p as f64).sqrt());
                spec.output = gaussian_rows(&mut rng, d, d, 1.0);
            }
        }
        match spec.validate() {
            Ok(()) => return Ok(spec),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub label: String,
    pub target: usize,
    pub shift: f64,
}

/// Linear Gaussian latent SCM with shift interventions and a mixing.
///
/// `weights[j][i]` is the coefficient of `U_j` in the mechanism of `U_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p: usize,
    pub graph: Dag,
    pub weights: Vec<Vec<f64>>,
    pub noise_scales: Vec<f64>,
    pub interventions: Vec<Intervention>,
    /// Pairs of single interventions applied jointly, by index.
    #[serde(default)]
    pub doubles: Vec<(usize, usize)>,
    pub mixing: MixingSpec,
    pub seed: u64,
}

impl GroundTruth {
    pub fn new(
        graph: Dag,
        weights: Vec<Vec<f64>>,
        noise_scales: Vec<f64>,
        interventions: Vec<Intervention>,
        mixing: MixingSpec,
        seed: u64,
    ) -> Result<Self> {
        let gt = Self {
            p: graph.p(),
            graph,
            weights,
            noise_scales,
            interventions,
            doubles: vec![],
            mixing,
            seed,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p;
        if self.graph.p() != p || self.weights.len() != p || self.weights.iter().any(|r| r.len() != p) {
            return Err(Error::Data("weights must be p x p".into()));
        }
        for j in 0..p {
            for i in 0..p {
                let w = self.weights[j][i];
                if !w.is_finite() || (w != 0.0 && !self.graph.has_edge(j, i)) {
                    return Err(Error::Data(format!("weight ({j}, {i}) lies off the graph")));
                }
            }
        }
        if self.noise_scales.len() != p || self.noise_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Data("noise scales must be p positive reals".into()));
        }
        if self.mixing.p != p {
            return Err(Error::Data("mixing latent dimension differs from the SCM".into()));
        }
        for iv in &self.interventions {
            if iv.target >= p || !iv.shift.is_finite() {
                return Err(Error::Data(format!("intervention {} is invalid", iv.label)));
            }
        }
        for &(a, b) in &self.doubles {
            let k = self.interventions.len();
            if a >= k || b >= k || a == b {
                return Err(Error::Data(format!("double ({a}, {b}) is invalid")));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.mixing.d
    }

    /// Pushes standardized noise through the mechanisms, adding the shifts of
    /// the listed interventions at their targets.
    pub fn propagate(&self, noise: &Tensor, interventions: &[usize]) -> Result<Tensor> {
        let p = self.p;
        if noise.cols() != p {
            return Err(Error::dim("propagate", noise.shape(), &[noise.rows(), p]));
        }
        let mut shift = vec![0.0; p];
        for &k in interventions {
            let iv = self
                .interventions
                .get(k)
                .ok_or_else(|| Error::Contract(format!("intervention {k} out of range")))?;
            shift[iv.target] += iv.shift;
        }
        let n = noise.rows();
        let mut u = Tensor::zeros(&[n, p]);
        for r in 0..n {
            let e = noise.row_slice(r);
            let mut row = vec![0.0; p];
            for i in 0..p {
                let mut v = self.noise_scales[i] * e[i] + shift[i];
                for j in 0..i {
                    v += self.weights[j][i] * row[j];
                }
                row[i] = v;
            }
            u.data_mut()[r * p..(r + 1) * p].copy_from_slice(&row);
        }
        Ok(u)
    }

    /// `effects[i][j]`: change in `U_j` from a unit shift at `i`.
    pub fn total_effects(&self) -> Vec<Vec<f64>> {
        let p = self.p;
        (0..p)
            .map(|i| {
                let mut row = vec![0.0; p];
                row[i] = 1.0;
                for j in i + 1..p {
                    row[j] = (i..j).map(|l| self.weights[l][j] * row[l]).sum();
                }
                row
            })
            .collect()
    }
}

/// Samples `n` rows from the observational regime or under intervention `k`.
pub fn ancestral_sample(gt: &GroundTruth, n: usize, intervention: Option<usize>, seed: u64) -> Result<(Tensor, Tensor)> {
    let ks: Vec<usize> = intervention.into_iter().collect();
    ancestral_sample_joint(gt, n, &ks, &mut stream(seed, STREAM_REGIME))
}

/// Samples with several interventions applied at once.
pub fn ancestral_sample_joint(gt: &GroundTruth, n: usize, interventions: &[usize], rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let noise = Tensor::matrix(n, gt.p, crate::rng::normals(rng, n * gt.p));
    let u = gt.propagate(&noise, interventions)?;
    let x = gt.mixing.apply(&u);
    Ok((u, x))
}

/// Typed context network derived from the mixing loadings.
///
/// One H node per latent. Each feature links to its top-q latents by absolute
/// loading (q = ⌈p/4⌉), features sharing a top latent form a clique, and H–H
/// edges follow the skeleton of the latent graph. Each edge is then replaced,
/// with probability `1 − informativeness`, by a uniformly random absent edge
/// of the same type.
pub fn make_context_network(gt: &GroundTruth, mixing: &MixingSpec, informativeness: f64, seed: u64) -> Result<HeteroGraph> {
    if !(0.0..=1.0).contains(&informativeness) {
        return Err(Error::Parameter(format!(
            "informativeness must lie in [0, 1], got {informativeness}"
        )));
    }
    let (p, d) = (mixing.p, mixing.d);
    let load = mixing.loadings();
    let q = ((p as f64) * 0.25).ceil().max(1.0) as usize;
    let mut xh = Vec::new();
    let mut groups = vec![Vec::new(); p];
    for f in 0..d {
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| load[b][f].abs().total_cmp(&load[a][f].abs()).then(a.cmp(&b)));
        for &l in &order[..q.min(p)] {
            xh.push((f, l));
            groups[l].push(f);
        }
    }
    let mut xx = BTreeSet::new();
    for g in &groups {
        for (a, &fa) in g.iter().enumerate() {
            for &fb in &g[a + 1..] {
                xx.insert((fa.min(fb), fa.max(fb)));
            }
        }
    }
    let hh = gt.graph.edges();

    let mut rng = stream(seed, STREAM_CONTEXT);
    let xx = rewire(xx.into_iter().collect(), informativeness, &mut rng, |r| {
        let (a, b) = (r.random_range(0..d), r.random_range(0..d));
        (a != b).then(|| (a.min(b), a.max(b)))
    }, d * (d - 1) / 2);
    let xh = rewire(xh, informativeness, &mut rng, |r| Some((r.random_range(0..d), r.random_range(0..p))), d * p);
    let hh = rewire(hh, informativeness, &mut rng, |r| {
        let (a, b) = (r.random_range(0..p), r.random_range(0..p));
        (a != b).then(|| (a.min(b), a.max(b)))
    }, p * (p.saturating_sub(1)) / 2);
    HeteroGraph::new(d, p, xx, xh, hh)
}

fn rewire<R: Rng>(
    edges: Vec<(usize, usize)>,
    informativeness: f64,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Option<(usize, usize)>,
    capacity: usize,
) -> Vec<(usize, usize)> {
    let flags: Vec<bool> = edges.iter().map(|_| rng.random::<f64>() >= informativeness).collect();
    let mut out: BTreeSet<(usize, usize)> = edges
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| !f)
        .map(|(e, _)| *e)
        .collect();
    for (e, _) in edges.iter().zip(&flags).filter(|(_, &f)| f) {
        let mut placed = false;
        if out.len() < capacity {
            for _ in 0..10_000 {
                if let Some(c) = draw(rng) {
                    if out.insert(c) {
                        placed = true;
                        break;
                    }
                }
            }
        }
        if !placed {
            out.insert(*e);
        }
    }
    out.into_iter().collect()
}

/// Benchmark generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub p: usize,
    pub d: usize,
    pub n_obs: usize,
    pub n_per_intervention: usize,
    pub edge_prob: f64,
    pub shift_scale: f64,
    pub mixing: MixingKind,
    pub informativeness: f64,
    /// Number of two-target regimes built from disjoint single interventions.
    #[serde(default)]
    pub doubles: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            p: 4,
            d: 20,
            n_obs: 2000,
            n_per_intervention: 2000,
            edge_prob: 0.5,
            shift_scale: 2.0,
            mixing: MixingKind::Linear,
            informativeness: 0.9,
            doubles: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub truth: GroundTruth,
    pub data: RegimeDataset,
    pub context: HeteroGraph,
}

pub fn intervention_label(k: usize) -> String {
    format!("int{k}")
}

/// Full-coverage benchmark: one shift intervention per latent node, in node
/// order, optional double regimes, and a derived context network.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let BenchmarkSpec { p, d, seed, .. } = *spec;
    if spec.n_obs == 0 || spec.n_per_intervention == 0 {
        return Err(Error::Parameter("sample counts must be positive".into()));
    }
    if !(spec.shift_scale >= 0.0) {
        return Err(Error::Parameter("shift_scale must be nonnegative".into()));
    }
    let graph = sample_dag(p, spec.edge_prob, seed)?;
    let mut rng = stream(seed, STREAM_DAG + 1000);
    let mut weights = vec![vec![0.0; p]; p];
    for (i, j) in graph.edges() {
        let mag = rng.random_range(0.25..=1.0);
        weights[i][j] = if rng.random::<bool>() { mag } else { -mag };
    }
    let mut rng = stream(seed, STREAM_SHIFTS);
    let interventions = (0..p)
        .map(|i| {
            let mag = spec.shift_scale * (1.0 + normal(&mut rng).abs());
            let shift = if rng.random::<bool>() { mag } else { -mag };
            Intervention {
                label: intervention_label(i),
                target: i,
                shift,
            }
        })
        .collect();
    let mixing = make_mixing(p, d, spec.mixing, seed)?;
    let mut truth = GroundTruth::new(graph, weights, vec![1.0; p], interventions, mixing, seed)?;

    let max_pairs = p * (p - 1) / 2;
    if spec.doubles > max_pairs {
        return Err(Error::Parameter(format!("at most {max_pairs} doubles exist for p = {p}")));
    }
    let mut rng = stream(seed, STREAM_DOUBLES);
    let all_pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (a + 1..p).map(move |b| (a, b))).collect();
    let mut picked: Vec<usize> = sample(&mut rng, max_pairs, spec.doubles).into_vec();
    picked.sort_unstable();
    truth.doubles = picked.into_iter().map(|i| all_pairs[i]).collect();

    let features: Vec<String> = (0..d).map(|f| format!("x{f}")).collect();
    let vocab: Vec<String> = truth.interventions.iter().map(|iv| iv.label.clone()).collect();
    let (u0, x0) = ancestral_sample_joint(&truth, spec.n_obs, &[], &mut stream(seed, STREAM_REGIME))?;
    let obs = Regime::new("ctrl".into(), vec![], x0, Some(u0), "obs");
    let mut regimes = Vec::new();
    let mut sets: Vec<Vec<usize>> = (0..p).map(|k| vec![k]).collect();
    sets.extend(truth.doubles.iter().map(|&(a, b)| vec![a, b]));
    for (r, set) in sets.into_iter().enumerate() {
        let mut rng = stream(seed, STREAM_REGIME + 1 + r as u64);
        let (u, x) = ancestral_sample_joint(&truth, spec.n_per_intervention, &set, &mut rng)?;
        let label = set.iter().map(|&k| vocab[k].clone()).collect::<Vec<_>>().join("+");
        regimes.push(Regime::new(label, set, x, Some(u), &format!("int{r}")));
    }
    let data = RegimeDataset::new(features, vocab, obs, regimes)?;
    let context = make_context_network(&truth, &truth.mixing, spec.informativeness, seed)?;
    Ok(Benchmark {
        spec: spec.clone(),
        truth,
        data,
        context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{mmd2_value, MmdConfig};

    fn chain(w: f64, shift: f64) -> GroundTruth {
        let mut weights = vec![vec![0.0; 2]; 2];
        weights[0][1] = w;
        let mixing = MixingSpec::from_linear(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
        GroundTruth::new(
            Dag::from_edges(2, &[(0, 1)]).unwrap(),
            weights,
            vec![1.0, 1.0],
            vec![Intervention {
                label: "int0".into(),
                target: 0,
                shift,
            }],
            mixing,
            0,
        )
        .unwrap()
    }

    fn col(t: &Tensor, c: usize) -> Vec<f64> {
        (0..t.rows()).map(|r| t.get(r, c)).collect()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn dag_extremes() {
        assert_eq!(sample_dag(5, 0.0, 1).unwrap().edge_count(), 0);
        assert_eq!(sample_dag(4, 1.0, 1).unwrap().edge_count(), 6);
        assert!(sample_dag(3, 1.5, 0).is_err());
    }

    #[test]
    fn dag_edge_count_is_binomial() {
        let counts: Vec<f64> = (0..10_000).map(|s| sample_dag(6, 0.5, s).unwrap().edge_count() as f64).collect();
        let m = mean(&counts);
        // 15 Bernoulli(0.5) entries: variance 3.75.
        let se = (3.75f64 / counts.len() as f64).sqrt();
        assert!((m - 7.5).abs() < 3.0 * se, "{m}");
    }

    #[test]
    fn descendants_are_strict_and_transitive() {
        let g = Dag::from_edges(4, &[(0, 1), (1, 2), (0, 3)]).unwrap();
        assert_eq!(g.descendants(0).into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(g.descendants(2).is_empty());
        assert_eq!(g.parents(2), vec![1]);
        assert!(Dag::from_edges(3, &[(2, 1)]).is_err());
    }

    #[test]
    fn empty_graph_has_identity_covariance() {
        let mixing = MixingSpec::from_linear(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], 0).unwrap();
        let gt = GroundTruth::new(Dag::empty(3), vec![vec![0.0; 3]; 3], vec![1.0; 3], vec![], mixing, 0).unwrap();
        let (u, x) = ancestral_sample(&gt, 10_000, None, 3).unwrap();
        assert_eq!(u, x);
        let n = u.rows() as f64;
        let means = u.col_means();
        let mut fro = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let c: f64 = (0..u.rows()).map(|r| (u.get(r, a) - means[a]) * (u.get(r, b) - means[b])).sum::<f64>() / n;
                let target = if a == b { 1.0 } else { 0.0 };
                fro += (c - target).powi(2);
            }
        }
        assert!(fro.sqrt() < 0.05, "{}", fro.sqrt());
    }

    #[test]
    fn chain_covariance_and_shift() {
        let w = 0.7;
        let gt = chain(w, 1.5);
        let n = 10_000;
        let (u, _) = ancestral_sample(&gt, n, None, 11).unwrap();
        let (a, b) = (col(&u, 0), col(&u, 1));
        let (ma, mb) = (mean(&a), mean(&b));
        let prods: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).collect();
        let cov = mean(&prods);
        let sd = (prods.iter().map(|v| (v - cov).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((cov - w).abs() < 3.0 * sd / (n as f64).sqrt(), "{cov}");

        let (ui, _) = ancestral_sample(&gt, n, Some(0), 12).unwrap();
        let diff = mean(&col(&ui, 1)) - mb;
        // Var(U2) = w² + 1 in both regimes.
        let se = (2.0 * (w * w + 1.0) / n as f64).sqrt();
        assert!((diff - w * 1.5).abs() < 3.0 * se, "{diff}");
    }

    #[test]
    fn intervention_only_touches_target_and_descendants() {
        let gt = generate_benchmark(&BenchmarkSpec {
            p: 5,
            d: 8,
            n_obs: 10,
            n_per_intervention: 10,
            seed: 4,
            ..BenchmarkSpec::default()
        })
        .unwrap()
        .truth;
        let mut rng = stream(9, 0);
        let noise = Tensor::matrix(50, 5, crate::rng::normals(&mut rng, 250));
        let base = gt.propagate(&noise, &[]).unwrap();
        for k in 0..5 {
            let iv = gt.propagate(&noise, &[k]).unwrap();
            let t = gt.interventions[k].target;
            let affected: BTreeSet<usize> = gt.graph.descendants(t).into_iter().chain([t]).collect();
            for c in 0..5 {
                if !affected.contains(&c) {
                    assert_eq!(col(&base, c), col(&iv, c));
                }
            }
        }
    }

    #[test]
    fn interventional_mean_follows_total_effects() {
        let gt = generate_benchmark(&BenchmarkSpec {
            p: 4,
            d: 6,
            n_obs: 10,
            n_per_intervention: 10,
            edge_prob: 0.8,
            seed: 21,
            ..BenchmarkSpec::default()
        })
        .unwrap()
        .truth;
        // Oracle: (I − Wᵀ)⁻¹ via dense inversion.
        let p = gt.p;
        let iw = DMatrix::from_fn(p, p, |r, c| if r == c { 1.0 } else { 0.0 } - gt.weights[c][r]);
        let inv = iw.try_inverse().unwrap();
        let te = gt.total_effects();
        for i in 0..p {
            for j in 0..p {
                assert!((te[i][j] - inv[(j, i)]).abs() < 1e-12);
            }
        }
        let n = 10_000;
        let (u0, _) = ancestral_sample(&gt, n, None, 1).unwrap();
        for k in 0..p {
            let (uk, _) = ancestral_sample(&gt, n, Some(k), 2 + k as u64).unwrap();
            let t = gt.interventions[k].target;
            for j in 0..p {
                let (c0, ck) = (col(&u0, j), col(&uk, j));
                let var = |v: &[f64]| {
                    let m = mean(v);
                    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
                };
                let se = ((var(&c0) + var(&ck)) / n as f64).sqrt();
                let expect = gt.interventions[k].shift * te[t][j];
                assert!((mean(&ck) - mean(&c0) - expect).abs() < 3.0 * se + 1e-12);
            }
        }
    }

    #[test]
    fn mixing_rank_checks() {
        let id = MixingSpec::from_linear(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
        let u = Tensor::from_rows(&[vec![0.3, -2.0], vec![1.0, 4.0]]);
        assert_eq!(id.apply(&u), u);
        let dup = MixingSpec::from_linear(vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]], 0);
        assert!(matches!(dup, Err(Error::Construction(_))));

        let m = make_mixing(4, 20, MixingKind::Linear, 7).unwrap();
        let a = DMatrix::from_fn(4, 20, |i, j| m.linear[i][j]);
        let sv = a.svd(false, false).singular_values;
        assert!(sv.iter().all(|&s| s > 1e-6));
        for kind in [MixingKind::Poly2, MixingKind::Mlp] {
            let m = make_mixing(3, 12, kind, 2).unwrap();
            assert_eq!(m.apply(&Tensor::zeros(&[2, 3])).dims(), (2, 12));
        }
        assert!(make_mixing(5, 3, MixingKind::Linear, 0).is_err());
    }

    #[test]
    fn context_from_known_loadings() {
        let loadings = vec![vec![0.0, 0.0, 0.0, 1.0, 2.0], vec![1.0, -2.0, 0.5, 0.0, 0.0]];
        let mixing = MixingSpec::from_linear(loadings, 0).unwrap();
        let gt = GroundTruth::new(Dag::empty(2), vec![vec![0.0; 2]; 2], vec![1.0; 2], vec![], mixing.clone(), 0).unwrap();
        let g = make_context_network(&gt, &mixing, 1.0, 3).unwrap();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!(g.edges_xx().contains(&(a, b)));
        }
        for f in 0..3 {
            assert!(g.edges_xh().contains(&(f, 1)));
        }
        assert_eq!(g, make_context_network(&gt, &mixing, 1.0, 3).unwrap());
    }

    #[test]
    fn zero_informativeness_preserves_counts() {
        let b = generate_benchmark(&BenchmarkSpec {
            n_obs: 5,
            n_per_intervention: 5,
            seed: 3,
            ..BenchmarkSpec::default()
        })
        .unwrap();
        let kept = make_context_network(&b.truth, &b.truth.mixing, 1.0, 8).unwrap();
        let random = make_context_network(&b.truth, &b.truth.mixing, 0.0, 8).unwrap();
        assert_eq!(kept.counts(), random.counts());
        assert_ne!(kept.edges_xx(), random.edges_xx());
    }

    #[test]
    fn benchmark_has_full_coverage() {
        let b = generate_benchmark(&BenchmarkSpec {
            n_obs: 20,
            n_per_intervention: 20,
            doubles: 2,
            seed: 5,
            ..BenchmarkSpec::default()
        })
        .unwrap();
        let targets: BTreeSet<usize> = b.truth.interventions.iter().map(|iv| iv.target).collect();
        assert_eq!(targets.len(), 4);
        assert_eq!(b.truth.interventions.len(), 4);
        assert!(b.truth.interventions.iter().all(|iv| iv.shift.abs() >= 2.0));
        assert_eq!(b.data.interventional.len(), 6);
        assert_eq!(b.data.interventional[4].targets.len(), 2);
        assert!(b.data.interventional[4].label.contains('+'));
    }

    #[test]
    fn zero_shift_regimes_match_observational() {
        let mut accepted = 0;
        for s in 0..100 {
            let b = generate_benchmark(&BenchmarkSpec {
                p: 3,
                d: 6,
                n_obs: 150,
                n_per_intervention: 150,
                shift_scale: 0.0,
                seed: s,
                ..BenchmarkSpec::default()
            })
            .unwrap();
            let out = permutation_mmd_test(&b.data.obs.x, &b.data.interventional[0].x, 200, &mut stream(s, 77)).unwrap();
            accepted += (out.p_value > 0.05) as usize;
        }
        assert!(accepted >= 95, "{accepted}");
    }

    #[test]
    fn generation_is_seeded() {
        let spec = BenchmarkSpec {
            n_obs: 30,
            n_per_intervention: 30,
            seed: 12,
            ..BenchmarkSpec::default()
        };
        let a = generate_benchmark(&spec).unwrap();
        let b = generate_benchmark(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&BenchmarkSpec { seed: 13, ..spec }).unwrap();
        assert_ne!(a.data.obs.x, c.data.obs.x);
        let cfg = MmdConfig::default();
        assert!(mmd2_value(&a.data.obs.x, &a.data.obs.x, &cfg).unwrap().abs() < 1e-9);
    }
}
