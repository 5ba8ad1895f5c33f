//! Intervention encoder, latent SCM decoder and mixer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{init_uniform, Activation, Bound, Mlp, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const MECHANISM_WIDTH: usize = 32;
const SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Linear,
    Mlp,
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MechanismKind::Linear => "linear",
            MechanismKind::Mlp => "mlp",
        })
    }
}

impl FromStr for MechanismKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown mechanism '{other}' (linear, mlp)")),
        }
    }
}

/// `t = 1` for the first half of training, then linear up to `temp_max` at the last epoch.
pub fn temperature_schedule(epoch: usize, total_epochs: usize, temp_max: f64) -> f64 {
    let half = total_epochs as f64 / 2.0;
    let e = epoch as f64;
    if e < half || total_epochs == 0 {
        return 1.0;
    }
    let frac = ((e - half) / (total_epochs as f64 - half)).min(1.0);
    1.0 + (temp_max - 1.0) * frac
}

/// Plain-value target selection and shift for one intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionCode {
    pub a: Vec<f64>,
    pub eta: f64,
}

impl InterventionCode {
    pub fn new(a: Vec<f64>, eta: f64) -> Result<Self> {
        let s: f64 = a.iter().sum();
        if a.is_empty() || a.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("target weights must lie on the simplex, got {a:?}")));
        }
        Ok(Self { a, eta })
    }

    /// Index of the largest weight; ties go to the lower index.
    pub fn target(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.a.iter().enumerate() {
            if v > self.a[best] {
                best = i;
            }
        }
        best
    }

    /// Same shift with `a` replaced by the one-hot of its argmax.
    pub fn hardened(&self) -> Self {
        let mut a = vec![0.0; self.a.len()];
        a[self.target()] = 1.0;
        Self { a, eta: self.eta }
    }

    pub fn shift(&self) -> Vec<f64> {
        self.a.iter().map(|v| v * self.eta).collect()
    }
}

/// Tape handles for a code: `a` is `1 × p`, `eta` is `1 × 1`.
#[derive(Clone, Copy, Debug)]
pub struct CodeVars {
    pub a: Var,
    pub eta: Var,
}

impl CodeVars {
    pub fn constant(tape: &mut Tape, code: &InterventionCode) -> Self {
        Self {
            a: tape.constant(Tensor::row(code.a.clone())),
            eta: tape.constant(Tensor::matrix(1, 1, vec![code.eta])),
        }
    }

    pub fn value(&self, tape: &Tape) -> InterventionCode {
        InterventionCode {
            a: tape.value(self.a).data().to_vec(),
            eta: tape.value(self.eta).item(),
        }
    }
}

/// Linear heads from a K-hot indicator to target logits and a scalar shift.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionEncoder {
    pub k: usize,
    pub p: usize,
    pub logits: ParamId,
    pub eta: ParamId,
}

impl InterventionEncoder {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, k: usize, p: usize) -> Self {
        let logits = params.add("intervention.logits", init_uniform(rng, &[k, p], k));
        let eta = params.add("intervention.eta", init_uniform(rng, &[k, 1], k));
        Self { k, p, logits, eta }
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, indicator: &[f64], t: f64) -> Result<CodeVars> {
        if indicator.len() != self.k {
            return Err(Error::dim("intervention indicator", &[1, indicator.len()], &[1, self.k]));
        }
        if indicator.iter().all(|&v| v == 0.0) {
            return Err(Error::Contract("intervention indicator has no active entry".into()));
        }
        let ind = tape.constant(Tensor::row(indicator.to_vec()));
        let logits = tape.matmul(ind, bound.var(self.logits))?;
        let a = tape.softmax_rows(logits, t)?;
        let eta = tape.matmul(ind, bound.var(self.eta))?;
        Ok(CodeVars { a, eta })
    }

    pub fn encode_values(&self, params: &ParamSet, indicator: &[f64], t: f64) -> Result<InterventionCode> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        Ok(self.encode(&mut tape, &bound, indicator, t)?.value(&tape))
    }
}

/// Latent SCM with a strictly upper-triangular weighted adjacency.
///
/// Only the `p(p−1)/2` entries above the diagonal exist as parameters, so
/// node `i` can only read nodes `j < i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmDecoder {
    pub p: usize,
    pub kind: MechanismKind,
    pub entries: Option<ParamId>,
    /// Per-node networks for the mlp mechanism; node 0 has none.
    pub mechanisms: Vec<Option<Mlp>>,
}

impl ScmDecoder {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, p: usize, kind: MechanismKind) -> Self {
        let n_entries = p * p.saturating_sub(1) / 2;
        let entries = (n_entries > 0).then(|| params.add("scm.entries", Tensor::zeros(&[1, n_entries])));
        let mechanisms = (0..p)
            .map(|i| {
                (kind == MechanismKind::Mlp && i > 0).then(|| {
                    Mlp::new(
                        params,
                        rng,
                        &format!("scm.node{i}"),
                        &[i, MECHANISM_WIDTH, 1],
                        Activation::LeakyRelu(SLOPE),
                    )
                })
            })
            .collect();
        Self {
            p,
            kind,
            entries,
            mechanisms,
        }
    }

    /// Dense `p × p` view of the adjacency.
    pub fn dag_matrix(&self, params: &ParamSet) -> Tensor {
        let mut m = Tensor::zeros(&[self.p, self.p]);
        if let Some(id) = self.entries {
            let e = params.get(id).data();
            let mut k = 0;
            for i in 0..self.p {
                for j in i + 1..self.p {
                    m.set(i, j, e[k]);
                    k += 1;
                }
            }
        }
        m
    }

    pub fn matrix_var(&self, tape: &mut Tape, bound: &Bound) -> Result<Option<Var>> {
        match self.entries {
            Some(id) => Ok(Some(tape.upper_triangular(bound.var(id), self.p)?)),
            None => Ok(None),
        }
    }

    /// `U` from exogenous `z` (`n × p`), with an optional `1 × p` additive shift.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, shift: Option<Var>) -> Result<Var> {
        let p = self.p;
        if tape.shape(z).len() != 2 || tape.shape(z)[1] != p {
            return Err(Error::dim("scm forward", tape.shape(z), &[0, p]));
        }
        let base = match shift {
            Some(s) => tape.add_row(z, s)?,
            None => z,
        };
        let Some(m) = self.matrix_var(tape, bound)? else {
            return Ok(base);
        };
        match self.kind {
            MechanismKind::Linear => {
                // M is nilpotent, so p − 1 sweeps reach the fixed point U = base + U·M.
                let mut u = base;
                for _ in 1..p {
                    let parents = tape.matmul(u, m)?;
                    u = tape.add(base, parents)?;
                }
                Ok(u)
            }
            MechanismKind::Mlp => {
                let mut cols = vec![tape.slice_cols(base, 0, 1)?];
                for i in 1..p {
                    let parents = tape.concat_cols(&cols)?;
                    let col = tape.slice_cols(m, i, i + 1)?;
                    let row = tape.reshape(col, &[1, p])?;
                    let mask = tape.slice_cols(row, 0, i)?;
                    let masked = tape.mul_row(parents, mask)?;
                    let mech = self.mechanisms[i].as_ref().expect("mlp nodes past the first carry a network");
                    let out = mech.forward(tape, bound, masked)?;
                    let own = tape.slice_cols(base, i, i + 1)?;
                    cols.push(tape.add(out, own)?);
                }
                tape.concat_cols(&cols)
            }
        }
    }
}

/// Shared map from latents to observations, `p → hidden → hidden → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixer {
    pub net: Mlp,
}

impl Mixer {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, p: usize, hidden: usize, d: usize) -> Self {
        Self {
            net: Mlp::new(params, rng, "mixer", &[p, hidden, hidden, d], Activation::LeakyRelu(SLOPE)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, u: Var) -> Result<Var> {
        self.net.forward(tape, bound, u)
    }
}

/// Sum of `eta_k · a_k` over the codes, as a `1 × p` row; `None` when empty.
pub fn combined_shift(tape: &mut Tape, codes: &[CodeVars]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for c in codes {
        let s = tape.matmul(c.eta, c.a)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc)
}

/// Latents and observations for `z` under the given codes; every code's shift
/// is applied within one SCM pass.
pub fn generate(
    tape: &mut Tape,
    bound: &Bound,
    scm: &ScmDecoder,
    mixer: &Mixer,
    z: Var,
    codes: &[CodeVars],
) -> Result<(Var, Var)> {
    let shift = combined_shift(tape, codes)?;
    let u = scm.forward(tape, bound, z, shift)?;
    let x = mixer.forward(tape, bound, u)?;
    Ok((u, x))
}

/// Value-level [`generate`].
pub fn generate_values(
    params: &ParamSet,
    scm: &ScmDecoder,
    mixer: &Mixer,
    z: &Tensor,
    codes: &[InterventionCode],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let zv = tape.constant(z.clone());
    let cv: Vec<CodeVars> = codes.iter().map(|c| CodeVars::constant(&mut tape, c)).collect();
    let (u, x) = generate(&mut tape, &bound, scm, mixer, zv, &cv)?;
    Ok((tape.value(u).clone(), tape.value(x).clone()))
}
