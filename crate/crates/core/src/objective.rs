//! Loss terms and coefficient schedules.

use std::f64::consts::PI;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Dyadic Gaussian-kernel ladder: bandwidths `sigma · 2^k`, `k < kernel_num`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub sigma: f64,
    pub kernel_num: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            sigma: 1000.0,
            kernel_num: 10,
        }
    }
}

impl MmdConfig {
    pub fn new(sigma: f64, kernel_num: usize) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Parameter(format!("mmd bandwidth must be positive, got {sigma}")));
        }
        if kernel_num == 0 {
            return Err(Error::Parameter("kernel_num must be at least 1".into()));
        }
        Ok(Self { sigma, kernel_num })
    }

    /// One kernel of bandwidth `b`.
    pub fn single(b: f64) -> Result<Self> {
        Self::new(b, 1)
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        (0..self.kernel_num)
            .map(|k| self.sigma * 2f64.powi(k as i32))
            .collect()
    }
}

/// Unit-variance Gaussian negative log-likelihood, averaged over rows.
pub fn recon_nll(tape: &mut Tape, x: Var, xhat: Var) -> Result<Var> {
    let (n, d) = tape.value(x).dims();
    let r = tape.sub(x, xhat)?;
    let sq = tape.square(r);
    let s = tape.sum(sq);
    let per_row = tape.scale(s, 0.5 / n as f64);
    Ok(tape.add_scalar(per_row, 0.5 * d as f64 * (2.0 * PI).ln()))
}

/// Batch mean of `½ Σ (exp(logvar) + mu² − 1 − logvar)`.
pub fn kl_diag_gaussian(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.value(mu).rows();
    let e = tape.exp(logvar);
    let m2 = tape.square(mu);
    let a = tape.add(e, m2)?;
    let b = tape.sub(a, logvar)?;
    let b = tape.add_scalar(b, -1.0);
    let s = tape.sum(b);
    Ok(tape.scale(s, 0.5 / n as f64))
}

/// Biased (V-statistic) squared MMD over the bandwidth ladder.
pub fn mmd2(tape: &mut Tape, a: Var, b: Var, cfg: &MmdConfig) -> Result<Var> {
    let bw: Rc<[f64]> = Rc::from(cfg.bandwidths());
    let daa = tape.pairwise_sqdist(a, a)?;
    let dbb = tape.pairwise_sqdist(b, b)?;
    let dab = tape.pairwise_sqdist(a, b)?;
    let kaa = tape.kernel_mean(daa, bw.clone())?;
    let kbb = tape.kernel_mean(dbb, bw.clone())?;
    let kab = tape.kernel_mean(dab, bw)?;
    let s = tape.add(kaa, kbb)?;
    let cross = tape.scale(kab, 2.0);
    tape.sub(s, cross)
}

pub fn recon_nll_value(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::dim("recon_nll", x.shape(), xhat.shape()));
    }
    let (n, d) = x.dims();
    let sq: f64 = x.data().iter().zip(xhat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * sq / n as f64 + 0.5 * d as f64 * (2.0 * PI).ln())
}

pub fn kl_value(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::dim("kl_diag_gaussian", mu.shape(), logvar.shape()));
    }
    let n = mu.rows();
    let s: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum();
    Ok(0.5 * s / n as f64)
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_mean_value(a: &Tensor, b: &Tensor, bw: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let d = sqdist(a.row_slice(i), b.row_slice(j));
            s += bw.iter().map(|w| (-d / w).exp()).sum::<f64>();
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// [`mmd2`] on plain matrices, without recording gradients.
pub fn mmd2_value(a: &Tensor, b: &Tensor, cfg: &MmdConfig) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim("mmd2", a.shape(), b.shape()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Contract("mmd2 needs at least one row on each side".into()));
    }
    let bw = cfg.bandwidths();
    Ok(kernel_mean_value(a, a, &bw) + kernel_mean_value(b, b, &bw) - 2.0 * kernel_mean_value(a, b, &bw))
}

/// Median of pairwise squared distances over the pooled rows; a data-driven
/// single bandwidth for two-sample testing.
pub fn median_sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row_slice(i))
        .chain((0..b.rows()).map(|i| b.row_slice(i)))
        .collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sqdist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Alpha,
    Beta,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            other => Err(Error::Parameter(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Warm-up ramps. Alpha is zero before epoch 5 and rises linearly to its
/// maximum at `5 + total/2`; beta is zero before epoch 10 and reaches its
/// maximum at `total/2`.
pub fn schedule(kind: ScheduleKind, epoch: usize, total_epochs: usize, max_value: f64) -> f64 {
    let (start, end) = match kind {
        ScheduleKind::Alpha => (5.0, 5.0 + total_epochs as f64 / 2.0),
        ScheduleKind::Beta => (10.0, total_epochs as f64 / 2.0),
    };
    let e = epoch as f64;
    if e < start {
        0.0
    } else if e >= end {
        max_value
    } else {
        max_value * (e - start) / (end - start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_max: f64,
    pub beta_max: f64,
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_max: 8.0,
            beta_max: 2.0,
            lambda: 1e-4,
            epochs: 100,
        }
    }
}

/// Tape handles for one batch group.
pub struct LossInputs<'a> {
    /// Observational rows and their reconstruction; `None` when the group has
    /// no observational rows.
    pub obs: Option<ObsTerms>,
    /// `(real, generated)` per intervention present in the group.
    pub aligned: &'a [(Var, Var)],
    /// Free DAG entries; `None` when there are none (single latent).
    pub dag_entries: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ObsTerms {
    pub x: Var,
    pub xhat: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Unweighted loss terms plus the coefficients applied to them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub kl: f64,
    pub mmd: f64,
    pub l1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn weighted_sum(&self) -> f64 {
        self.recon + self.beta * self.kl + self.alpha * self.mmd + self.lambda * self.l1
    }
}

/// `recon + β·kl + α·Σ_k mmd2 + λ·‖M‖₁`.
pub fn total_loss(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    mmd_cfg: &MmdConfig,
    epoch: usize,
) -> Result<(Var, LossTerms)> {
    if inputs.obs.is_none() && inputs.aligned.is_empty() {
        return Err(Error::Contract("empty batch group".into()));
    }
    let alpha = schedule(ScheduleKind::Alpha, epoch, weights.epochs, weights.alpha_max);
    let beta = schedule(ScheduleKind::Beta, epoch, weights.epochs, weights.beta_max);
    let mut terms = LossTerms {
        alpha,
        beta,
        lambda: weights.lambda,
        ..LossTerms::default()
    };
    let mut parts = Vec::new();
    if let Some(o) = inputs.obs {
        let recon = recon_nll(tape, o.x, o.xhat)?;
        let kl = kl_diag_gaussian(tape, o.mu, o.logvar)?;
        terms.recon = tape.value(recon).item();
        terms.kl = tape.value(kl).item();
        parts.push(recon);
        parts.push(tape.scale(kl, beta));
    }
    if !inputs.aligned.is_empty() {
        let mut acc: Option<Var> = None;
        for &(real, gen) in inputs.aligned {
            let m = mmd2(tape, real, gen, mmd_cfg)?;
            acc = Some(match acc {
                None => m,
                Some(a) => tape.add(a, m)?,
            });
        }
        let acc = acc.expect("non-empty");
        terms.mmd = tape.value(acc).item();
        parts.push(tape.scale(acc, alpha));
    }
    if let Some(m) = inputs.dag_entries {
        let a = tape.abs(m);
        let l1 = tape.sum(a);
        terms.l1 = tape.value(l1).item();
        parts.push(tape.scale(l1, weights.lambda));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    terms.total = tape.value(total).item();
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, randn};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval1(f: impl Fn(&mut Tape, Var, Var) -> Result<Var>, a: &Tensor, b: &Tensor) -> f64 {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let out = f(&mut t, va, vb).unwrap();
        t.value(out).item()
    }

    #[test]
    fn recon_closed_forms() {
        let x = Tensor::from_rows(&[vec![0.3, -1.0]]);
        let v = eval1(recon_nll, &x, &x);
        assert!((v - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v - 1.8379).abs() < 1e-4);
        let v = eval1(recon_nll, &Tensor::from_rows(&[vec![2.0]]), &Tensor::from_rows(&[vec![0.0]]));
        assert!((v - (2.0 + 0.5 * (2.0 * PI).ln())).abs() < 1e-12);
        assert!((v - 2.9189).abs() < 1e-4);
    }

    #[test]
    fn recon_matches_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[7, 4]);
        let xh = randn(&mut rng, &[7, 4]);
        // −log of the product of univariate normal densities, per row.
        let mut total = 0.0;
        for i in 0..7 {
            let mut log_p = 0.0;
            for j in 0..4 {
                let r = x.get(i, j) - xh.get(i, j);
                log_p += (1.0 / (2.0 * PI).sqrt() * (-r * r / 2.0).exp()).ln();
            }
            total -= log_p;
        }
        let v = eval1(recon_nll, &x, &xh);
        assert!((v - total / 7.0).abs() < 1e-10);
        assert!((recon_nll_value(&x, &xh).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        let k = |mu: f64, lv: f64| eval1(kl_diag_gaussian, &Tensor::from_rows(&[vec![mu]]), &Tensor::from_rows(&[vec![lv]]));
        assert_eq!(k(0.0, 0.0), 0.0);
        assert!((k(1.0, 0.0) - 0.5).abs() < 1e-12);
        let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((k(0.0, 4f64.ln()) - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn mmd_closed_forms() {
        let cfg = MmdConfig::single(3.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let y = Tensor::from_rows(&[vec![2.0, 0.0]]);
        let v = eval1(|t, a, b| mmd2(t, a, b, &cfg), &x, &y);
        let expect = 2.0 - 2.0 * (-5.0f64 / 3.0).exp();
        assert!((v - expect).abs() < 1e-12);
        assert!((mmd2_value(&x, &y, &cfg).unwrap() - expect).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[9, 3]);
        let b = randn(&mut rng, &[6, 3]);
        let cfg = MmdConfig::new(0.7, 4).unwrap();
        let ab = eval1(|t, a, b| mmd2(t, a, b, &cfg), &a, &b);
        let ba = eval1(|t, a, b| mmd2(t, a, b, &cfg), &b, &a);
        assert!((ab - ba).abs() < 1e-12);
        assert!((mmd2_value(&a, &b, &cfg).unwrap() - ab).abs() < 1e-12);
        assert!(eval1(|t, a, b| mmd2(t, a, b, &cfg), &a, &a).abs() < 1e-9);
    }

    #[test]
    fn mmd_grows_with_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[40, 3]);
        let cfg = MmdConfig::new(1.0, 5).unwrap();
        let vals: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&c| mmd2_value(&a, &a.map(|x| x + c), &cfg).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
    }

    #[test]
    fn bandwidths_follow_ladder() {
        let cfg = MmdConfig::default();
        let bw = cfg.bandwidths();
        assert_eq!(bw.len(), 10);
        assert_eq!(bw[0], 1000.0);
        assert_eq!(bw[9], 512_000.0);
        assert!(bw.windows(2).all(|w| w[1] > w[0]));
        assert!(MmdConfig::new(0.0, 3).is_err());
    }

    #[test]
    fn schedule_table() {
        use ScheduleKind::*;
        assert_eq!(schedule(Alpha, 4, 100, 8.0), 0.0);
        assert_eq!(schedule(Alpha, 5, 100, 8.0), 0.0);
        assert_eq!(schedule(Alpha, 30, 100, 8.0), 4.0);
        assert_eq!(schedule(Alpha, 55, 100, 8.0), 8.0);
        assert_eq!(schedule(Alpha, 100, 100, 8.0), 8.0);
        assert_eq!(schedule(Beta, 9, 100, 2.0), 0.0);
        assert_eq!(schedule(Beta, 30, 100, 2.0), 1.0);
        assert_eq!(schedule(Beta, 50, 100, 2.0), 2.0);
        assert!("gamma".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn early_epochs_reduce_to_recon_plus_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(randn(&mut rng, &[4, 3]));
        let xhat = t.constant(randn(&mut rng, &[4, 3]));
        let mu = t.constant(randn(&mut rng, &[4, 2]));
        let logvar = t.constant(randn(&mut rng, &[4, 2]));
        let real = t.constant(randn(&mut rng, &[4, 3]));
        let gen = t.constant(randn(&mut rng, &[4, 3]));
        let m = t.constant(Tensor::row(vec![0.5, -0.25, 1.0]));
        let aligned = [(real, gen)];
        let inputs = LossInputs {
            obs: Some(ObsTerms { x, xhat, mu, logvar }),
            aligned: &aligned,
            dag_entries: Some(m),
        };
        let w = LossWeights::default();
        let (_, terms) = total_loss(&mut t, &inputs, &w, &MmdConfig::default(), 3).unwrap();
        assert_eq!(terms.total, terms.recon + 1e-4 * 1.75);
        let (_, terms) = total_loss(&mut t, &inputs, &w, &MmdConfig::default(), 40).unwrap();
        assert!((terms.weighted_sum() - terms.total).abs() < 1e-12);

        let zero = t.constant(Tensor::row(vec![0.0; 3]));
        let inputs = LossInputs {
            obs: None,
            aligned: &aligned,
            dag_entries: Some(zero),
        };
        let (_, terms) = total_loss(&mut t, &inputs, &w, &MmdConfig::default(), 40).unwrap();
        assert_eq!(terms.l1, 0.0);
        let empty = LossInputs {
            obs: None,
            aligned: &[],
            dag_entries: None,
        };
        assert!(total_loss(&mut t, &empty, &w, &MmdConfig::default(), 0).is_err());
    }

    #[test]
    fn total_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = vec![
            randn(&mut rng, &[5, 3]),
            randn(&mut rng, &[5, 3]),
            randn(&mut rng, &[5, 2]),
            randn(&mut rng, &[5, 2]).map(|x| 0.5 * x),
            randn(&mut rng, &[4, 3]),
            Tensor::row(vec![0.4, -0.3, 0.8]),
        ];
        let err = grad_check(
            |t, v| {
                let aligned = [(v[4], v[1])];
                let inputs = LossInputs {
                    obs: Some(ObsTerms {
                        x: v[0],
                        xhat: v[1],
                        mu: v[2],
                        logvar: v[3],
                    }),
                    aligned: &aligned,
                    dag_entries: Some(v[5]),
                };
                let cfg = MmdConfig::new(0.5, 3)?;
                Ok(total_loss(t, &inputs, &LossWeights::default(), &cfg, 40)?.0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 6), lv in prop::collection::vec(-8.0f64..8.0, 6)) {
            let v = kl_value(&Tensor::matrix(2, 3, mu), &Tensor::matrix(2, 3, lv)).unwrap();
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn schedules_clamp_and_stay_in_range(epoch in 0usize..=100, max in 0.0f64..10.0) {
            for kind in [ScheduleKind::Alpha, ScheduleKind::Beta] {
                let v = schedule(kind, epoch, 100, max);
                prop_assert!((0.0..=max).contains(&v));
                if epoch >= 55 {
                    prop_assert_eq!(v, max);
                }
                if epoch < 5 {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }
}
