//! Numeric checks of interventional faithfulness and total separation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{ancestral_sample_joint, GroundTruth};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::objective::median_sq_distance;
use crate::rng::{normal, normals, stream};

/// Random Fourier frequencies used by [`permutation_mmd_test`].
const N_FREQUENCIES: usize = 64;
/// Rows per side used for the median-distance bandwidth.
const BANDWIDTH_ROWS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub bandwidth: f64,
}

/// Two-sample permutation test on the squared MMD of a Gaussian kernel with
/// median-distance bandwidth, approximated by random Fourier features so the
/// statistic costs O(n) per permutation. The p-value is `(1 + #{T* ≥ T}) /
/// (1 + n_perm)`, which is exact under exchangeability.
pub fn permutation_mmd_test(a: &Tensor, b: &Tensor, n_perm: usize, rng: &mut impl Rng) -> Result<TestOutcome> {
    if a.cols() != b.cols() {
        return Err(Error::dim("permutation_mmd_test", a.shape(), b.shape()));
    }
    let (na, nb, dim) = (a.rows(), b.rows(), a.cols());
    if na < 2 || nb < 2 {
        return Err(Error::Contract("two-sample test needs at least two rows per side".into()));
    }
    let head = |t: &Tensor| t.select_rows(&(0..t.rows().min(BANDWIDTH_ROWS)).collect::<Vec<_>>());
    let bandwidth = median_sq_distance(&head(a), &head(b));
    // exp(−‖x−y‖²/b) has spectral density N(0, 2/b · I).
    let scale = (2.0 / bandwidth).sqrt();
    let freqs: Vec<f64> = normals(rng, N_FREQUENCIES * dim).into_iter().map(|w| w * scale).collect();
    let width = 2 * N_FREQUENCIES;
    let n = na + nb;
    let mut phi = vec![0.0; n * width];
    for r in 0..n {
        let x = if r < na { a.row_slice(r) } else { b.row_slice(r - na) };
        let out = &mut phi[r * width..(r + 1) * width];
        for f in 0..N_FREQUENCIES {
            let w = &freqs[f * dim..(f + 1) * dim];
            let proj: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
            out[2 * f] = proj.cos();
            out[2 * f + 1] = proj.sin();
        }
    }
    let mut total = vec![0.0; width];
    for r in 0..n {
        for (t, v) in total.iter_mut().zip(&phi[r * width..(r + 1) * width]) {
            *t += v;
        }
    }
    let stat = |first: &[usize]| -> f64 {
        let mut sa = vec![0.0; width];
        for &r in first {
            for (s, v) in sa.iter_mut().zip(&phi[r * width..(r + 1) * width]) {
                *s += v;
            }
        }
        sa.iter()
            .zip(&total)
            .map(|(s, t)| {
                let diff = s / na as f64 - (t - s) / nb as f64;
                diff * diff
            })
            .sum::<f64>()
            / N_FREQUENCIES as f64
    };
    let mut idx: Vec<usize> = (0..n).collect();
    let observed = stat(&idx[..na]);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        idx.shuffle(rng);
        if stat(&idx[..na]) >= observed {
            exceed += 1;
        }
    }
    Ok(TestOutcome {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
        bandwidth,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaithfulnessOptions {
    /// Samples per regime.
    pub n: usize,
    /// Random coefficient vectors per eligible node.
    pub n_c_draws: usize,
    pub alpha: f64,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for FaithfulnessOptions {
    fn default() -> Self {
        Self {
            n: 5000,
            n_c_draws: 1,
            alpha: 0.05,
            n_perm: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CDraw {
    pub c: Vec<f64>,
    pub outcome: TestOutcome,
    pub reject: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaithfulnessCheck {
    pub j: usize,
    /// False when a parent of `j` descends from the target; no test is run.
    pub eligible: bool,
    /// Nodes projected alongside `U_j`.
    pub others: Vec<usize>,
    pub draws: Vec<CDraw>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaithfulnessReport {
    pub intervention: usize,
    pub target: usize,
    pub checks: Vec<FaithfulnessCheck>,
    /// Every eligible node rejected the null for every drawn coefficient.
    pub faithful: bool,
}

/// Tests `P(U_j + U_S·C) ≠ Pᴵ(U_j + U_S·C)` for the target `i` of intervention
/// `k` and each child `j`, with `S = [p] ∖ ({j} ∪ de(i))` and random `C`.
pub fn check_faithfulness(gt: &GroundTruth, k: usize, opts: &FaithfulnessOptions) -> Result<FaithfulnessReport> {
    let iv = gt
        .interventions
        .get(k)
        .ok_or_else(|| Error::Contract(format!("intervention {k} out of range")))?;
    let i = iv.target;
    let de = gt.graph.descendants(i);
    let (u0, _) = ancestral_sample_joint(gt, opts.n, &[], &mut stream(opts.seed, 1))?;
    let (uk, _) = ancestral_sample_joint(gt, opts.n, &[k], &mut stream(opts.seed, 2))?;
    let mut c_rng = stream(opts.seed, 3);
    let mut test_rng = stream(opts.seed, 4);

    let candidates = std::iter::once(i).chain(gt.graph.children(i));
    let mut checks = Vec::new();
    for j in candidates {
        let eligible = gt.graph.parents(j).iter().all(|pa| !de.contains(pa));
        let others: Vec<usize> = (0..gt.p).filter(|&s| s != j && !de.contains(&s)).collect();
        let mut draws = Vec::new();
        if eligible {
            for _ in 0..opts.n_c_draws {
                let c: Vec<f64> = others.iter().map(|_| normal(&mut c_rng)).collect();
                let project = |u: &Tensor| {
                    let v = (0..u.rows())
                        .map(|r| u.get(r, j) + others.iter().zip(&c).map(|(&s, cs)| cs * u.get(r, s)).sum::<f64>())
                        .collect();
                    Tensor::matrix(u.rows(), 1, v)
                };
                let outcome = permutation_mmd_test(&project(&u0), &project(&uk), opts.n_perm, &mut test_rng)?;
                draws.push(CDraw {
                    c,
                    reject: outcome.p_value <= opts.alpha,
                    outcome,
                });
            }
        }
        checks.push(FaithfulnessCheck {
            j,
            eligible,
            others,
            draws,
        });
    }
    let faithful = checks.iter().all(|c| c.draws.iter().all(|d| d.reject));
    Ok(FaithfulnessReport {
        intervention: k,
        target: i,
        checks,
        faithful,
    })
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|t| lo + (hi - lo) * t as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub edge: (usize, usize),
    /// Parents of `j` that descend from `i`; each gets its own constant.
    pub mediators: Vec<usize>,
    pub min_abs_partial_corr: f64,
    /// `(c_j, c_k...)` at the minimum.
    pub argmin: Vec<f64>,
    pub points: usize,
    pub holds: bool,
}

/// Latent covariance `(I − Wᵀ)⁻¹ D (I − Wᵀ)⁻ᵀ`.
pub fn latent_covariance(gt: &GroundTruth) -> DMatrix<f64> {
    let p = gt.p;
    let iw = DMatrix::from_fn(p, p, |r, c| if r == c { 1.0 } else { 0.0 } - gt.weights[c][r]);
    let a = iw.try_inverse().expect("unit lower-triangular matrices are invertible");
    let d = DMatrix::from_diagonal(&DVector::from_iterator(p, gt.noise_scales.iter().map(|s| s * s)));
    &a * d * a.transpose()
}

fn partial_corr(cov: &DMatrix<f64>, x: &[f64], y: &[f64], z: &[Vec<f64>]) -> f64 {
    let p = cov.nrows();
    let mut rows = vec![x.to_vec(), y.to_vec()];
    rows.extend(z.iter().cloned());
    let v = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
    let c = &v * cov * v.transpose();
    let mut r = c.view((0, 0), (2, 2)).into_owned();
    if !z.is_empty() {
        let m = z.len();
        let czz = c.view((2, 2), (m, m)).into_owned();
        let c1z = c.view((0, 2), (2, m)).into_owned();
        let solved = czz
            .lu()
            .solve(&c1z.transpose())
            .expect("conditioning covariance is nonsingular");
        r -= &c1z * solved;
    }
    let denom = (r[(0, 0)] * r[(1, 1)]).sqrt();
    if denom <= 1e-300 {
        0.0
    } else {
        r[(0, 1)] / denom
    }
}

/// For edge `i → j`, scans constants `(c_j, c_k for k ∈ S)` over the product
/// grid and reports the smallest `|pcorr(U_i, U_j + c_j U_i | Z)|`, where
/// `S = pa(j) ∩ de(i)` and `Z` holds the other parents of `j` and
/// `U_k + c_k U_i` for `k ∈ S`. The assumption "holds" on the grid when that
/// minimum exceeds `tol`.
pub fn check_total_separation(gt: &GroundTruth, edge: (usize, usize), grid: &[f64], tol: f64) -> Result<SeparationReport> {
    let (i, j) = edge;
    if i >= gt.p || j >= gt.p || !gt.graph.has_edge(i, j) || gt.weights[i][j] == 0.0 {
        return Err(Error::Contract(format!("{i}->{j} is not an edge of the ground truth")));
    }
    if grid.is_empty() {
        return Err(Error::Parameter("empty constant grid".into()));
    }
    let p = gt.p;
    let cov = latent_covariance(gt);
    let de = gt.graph.descendants(i);
    let parents = gt.graph.parents(j);
    let mediators: Vec<usize> = parents.iter().copied().filter(|k| de.contains(k)).collect();
    let fixed: Vec<usize> = parents.iter().copied().filter(|&l| l != i && !de.contains(&l)).collect();
    let unit = |a: usize| {
        let mut v = vec![0.0; p];
        v[a] = 1.0;
        v
    };
    let axes = 1 + mediators.len();
    let mut at = vec![0usize; axes];
    let mut best = (f64::INFINITY, vec![]);
    let mut points = 0;
    loop {
        let cs: Vec<f64> = at.iter().map(|&t| grid[t]).collect();
        let mut y = unit(j);
        y[i] += cs[0];
        let mut z: Vec<Vec<f64>> = fixed.iter().map(|&l| unit(l)).collect();
        for (m, &k) in mediators.iter().enumerate() {
            let mut v = unit(k);
            v[i] += cs[1 + m];
            z.push(v);
        }
        let r = partial_corr(&cov, &unit(i), &y, &z).abs();
        points += 1;
        if r < best.0 {
            best = (r, cs);
        }
        let mut ax = 0;
        loop {
            if ax == axes {
                return Ok(SeparationReport {
                    edge,
                    mediators,
                    min_abs_partial_corr: best.0,
                    argmin: best.1,
                    points,
                    holds: best.0 > tol,
                });
            }
            at[ax] += 1;
            if at[ax] < grid.len() {
                break;
            }
            at[ax] = 0;
            ax += 1;
        }
    }
}
