//! Latent matching up to permutation, scale and offset.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Maximum-weight perfect assignment on a square matrix.
///
/// Returns `assign` with `assign[row] = col`. Shortest augmenting paths with
/// potentials, `O(n³)`.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if weights.iter().any(|r| r.len() != n) {
        return Err(Error::Parameter("assignment matrix must be square".into()));
    }
    if weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("assignment weights must be finite".into()));
    }
    // 1-based arrays; column 0 is a virtual source.
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    Ok(assign)
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.get(r, c)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Learned-to-true latent correspondence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `perm[i]` is the true latent matched to learned latent `i`.
    pub perm: Vec<usize>,
    /// Least-squares fit `learned_i ≈ scale_i · true_perm[i] + offset_i`.
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub abs_corr: Vec<f64>,
    pub mean_abs_corr: f64,
    /// Learned latents with zero variance (matched with correlation 0).
    pub degenerate: Vec<usize>,
}

/// Matches learned latent columns to true ones by maximum total |corr|.
pub fn match_latents(u_hat: &Tensor, u_true: &Tensor) -> Result<MatchResult> {
    let (n, p) = u_hat.dims();
    if u_true.dims() != (n, p) {
        return Err(Error::dim("match_latents", u_hat.shape(), u_true.shape()));
    }
    if p == 0 || n < 10 * p {
        return Err(Error::Parameter(format!("matching needs at least 10 rows per latent, got {n} rows for {p}")));
    }
    let hat: Vec<Vec<f64>> = (0..p).map(|c| column(u_hat, c)).collect();
    let tru: Vec<Vec<f64>> = (0..p).map(|c| column(u_true, c)).collect();
    let corr: Vec<Vec<f64>> = hat
        .iter()
        .map(|h| tru.iter().map(|t| pearson(h, t).map_or(0.0, f64::abs)).collect())
        .collect();
    let perm = hungarian_max(&corr)?;
    let mut scale = Vec::with_capacity(p);
    let mut offset = Vec::with_capacity(p);
    let mut abs_corr = Vec::with_capacity(p);
    let mut degenerate = Vec::new();
    for i in 0..p {
        let (h, t) = (&hat[i], &tru[perm[i]]);
        let (mh, mt) = (mean(h), mean(t));
        let cov: f64 = h.iter().zip(t).map(|(a, b)| (a - mh) * (b - mt)).sum();
        let var: f64 = t.iter().map(|b| (b - mt) * (b - mt)).sum();
        let lam = if var > 0.0 { cov / var } else { 0.0 };
        scale.push(lam);
        offset.push(mh - lam * mt);
        abs_corr.push(corr[i][perm[i]]);
        if h.iter().all(|&x| x == h[0]) {
            degenerate.push(i);
        }
    }
    Ok(MatchResult {
        mean_abs_corr: mean(&abs_corr),
        perm,
        scale,
        offset,
        abs_corr,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::randn;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive(w: &[Vec<f64>]) -> f64 {
        fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == w.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for c in 0..w.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.max(w[row][c] + go(w, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(w, 0, &mut vec![false; w.len()])
    }

    #[test]
    fn hungarian_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let n = rng.random_range(1..=6);
            let w: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let a = hungarian_max(&w).unwrap();
            let mut sorted = a.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            let got: f64 = a.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
            assert!((got - exhaustive(&w)).abs() < 1e-12);
        }
    }

    fn affine_permuted(p: usize, seed: u64) -> (Tensor, Tensor, Vec<usize>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = randn(&mut rng, &[200, p]);
        let mut perm: Vec<usize> = (0..p).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let scales: Vec<f64> = (0..p)
            .map(|_| {
                let s = rng.random_range(0.2..3.0);
                if rng.random_bool(0.5) { -s } else { s }
            })
            .collect();
        let mut hat = Tensor::zeros(&[200, p]);
        for r in 0..200 {
            for i in 0..p {
                hat.set(r, i, scales[i] * truth.get(r, perm[i]) + i as f64 - 1.0);
            }
        }
        (hat, truth, perm, scales)
    }

    #[test]
    fn affine_permutations_are_recovered_exactly() {
        let truth = randn(&mut ChaCha8Rng::seed_from_u64(1), &[100, 3]);
        let perm = [2, 0, 1];
        let lam = [-2.0, 3.0, 0.5];
        let mut hat = Tensor::zeros(&[100, 3]);
        for r in 0..100 {
            for i in 0..3 {
                hat.set(r, i, lam[i] * truth.get(r, perm[i]) + 7.0);
            }
        }
        let m = match_latents(&hat, &truth).unwrap();
        assert_eq!(m.perm, perm);
        assert!((m.mean_abs_corr - 1.0).abs() < 1e-9);
        for i in 0..3 {
            assert!((m.scale[i] - lam[i]).abs() < 1e-9);
            assert!((m.offset[i] - 7.0).abs() < 1e-9);
        }
        for p in [2, 4, 8] {
            let (hat, truth, perm, scales) = affine_permuted(p, p as u64);
            let m = match_latents(&hat, &truth).unwrap();
            assert_eq!(m.perm, perm);
            assert!((m.mean_abs_corr - 1.0).abs() < 1e-9);
            assert!(m.scale.iter().zip(&scales).all(|(a, b)| a.signum() == b.signum()));
        }
    }

    #[test]
    fn single_latent_fit() {
        let truth = randn(&mut ChaCha8Rng::seed_from_u64(2), &[30, 1]);
        let noise = randn(&mut ChaCha8Rng::seed_from_u64(3), &[30, 1]);
        let hat = Tensor::matrix(30, 1, (0..30).map(|r| 2.0 * truth.get(r, 0) + 0.1 * noise.get(r, 0)).collect());
        let m = match_latents(&hat, &truth).unwrap();
        let t = column(&truth, 0);
        let h = column(&hat, 0);
        let (mt, mh) = (mean(&t), mean(&h));
        let cov: f64 = t.iter().zip(&h).map(|(a, b)| (a - mt) * (b - mh)).sum::<f64>();
        let var: f64 = t.iter().map(|a| (a - mt).powi(2)).sum::<f64>();
        assert_eq!(m.perm, vec![0]);
        assert!((m.scale[0] - cov / var).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_scores_low() {
        let mut low = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = randn(&mut rng, &[1000, 4]);
            let b = randn(&mut rng, &[1000, 4]);
            if match_latents(&a, &b).unwrap().mean_abs_corr < 0.25 {
                low += 1;
            }
        }
        assert!(low >= 95, "{low}");
    }

    #[test]
    fn degenerate_columns_are_flagged() {
        let truth = randn(&mut ChaCha8Rng::seed_from_u64(4), &[40, 2]);
        let mut hat = truth.clone();
        for r in 0..40 {
            hat.set(r, 1, 3.0);
        }
        let m = match_latents(&hat, &truth).unwrap();
        assert_eq!(m.degenerate, vec![1]);
        assert_eq!(m.abs_corr[1], 0.0);
        assert!(match_latents(&Tensor::zeros(&[5, 2]), &Tensor::zeros(&[5, 2])).is_err());
    }

    proptest! {
        #[test]
        fn matching_ignores_affine_column_transforms(seed in 0u64..500, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = randn(&mut rng, &[60, p]);
            let hat = randn(&mut rng, &[60, p]);
            let base = match_latents(&hat, &truth).unwrap();
            let mut moved = hat.clone();
            for c in 0..p {
                let s = rng.random_range(0.5..4.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                let o = rng.random_range(-5.0..5.0);
                for r in 0..60 {
                    moved.set(r, c, s * hat.get(r, c) + o);
                }
            }
            let m = match_latents(&moved, &truth).unwrap();
            prop_assert_eq!(m.perm, base.perm);
            prop_assert!((m.mean_abs_corr - base.mean_abs_corr).abs() < 1e-9);
        }
    }
}
