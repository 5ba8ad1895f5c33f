//! The full variational model: graph encoder, intervention encoder, latent
//! SCM and mixer sharing one parameter set.

use crate::causal::{generate, CodeVars, InterventionCode, InterventionEncoder, MechanismKind, Mixer, ScmDecoder};
use crate::diffcore::{grad_check, Activation, Bound, ParamSet, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, GnnKind, GnnVariant};
use crate::error::{Error, Result};
use crate::hetnet::{init_h_features, HFeatures, HeteroGraph, MergedGraph};
use crate::objective::{total_loss, LossInputs, LossTerms, LossWeights, MmdConfig, ObsTerms};
use crate::rng;

const INIT_STREAM: u16 = 0x10;
const H_FEATURE_STREAM: u64 = 0x11;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub m: usize,
    pub p: usize,
    /// Number of single interventions.
    pub k: usize,
    pub variant: GnnVariant,
    pub embed: usize,
    pub hidden: usize,
    pub mechanism: MechanismKind,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub intervention: InterventionEncoder,
    pub scm: ScmDecoder,
    pub mixer: Mixer,
}

/// Rows for one optimization step.
///
/// `obs` rows are encoded and reconstructed; when `paired` is set, the same
/// latents are pushed through that regime's code and aligned with its real rows.
#[derive(Clone, Debug)]
pub struct BatchGroup {
    pub obs: Tensor,
    pub noise: Tensor,
    pub paired: Option<Paired>,
}

#[derive(Clone, Debug)]
pub struct Paired {
    pub indicator: Vec<f64>,
    pub real: Tensor,
}

/// Fixed standard-normal H features for a model seed.
pub fn h_features(m: usize, seed: u64) -> Result<HFeatures> {
    if m == 0 {
        return Ok(HFeatures {
            values: Tensor::zeros(&[0, 1]),
            seed,
        });
    }
    init_h_features(m, 1, seed ^ H_FEATURE_STREAM)
}

impl Model {
    pub fn new(cfg: ModelConfig, graph: &MergedGraph, seed: u64) -> Result<Self> {
        if cfg.p == 0 || cfg.d == 0 {
            return Err(Error::Parameter(format!("latent and feature dimensions must be positive, got p={} d={}", cfg.p, cfg.d)));
        }
        if cfg.k == 0 {
            return Err(Error::Parameter("at least one intervention is required".into()));
        }
        let h = h_features(cfg.m, seed)?;
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, rng::stream_id(INIT_STREAM, 0, 0));
        let encoder = Encoder::new(
            EncoderConfig {
                d: cfg.d,
                m: cfg.m,
                p: cfg.p,
                variant: cfg.variant,
                embed: cfg.embed,
                hidden: cfg.hidden,
                activation: Activation::LeakyRelu(0.01),
            },
            graph,
            &h,
            &mut params,
            &mut rng,
        )?;
        let intervention = InterventionEncoder::new(&mut params, &mut rng, cfg.k, cfg.p);
        let scm = ScmDecoder::new(&mut params, &mut rng, cfg.p, cfg.mechanism);
        let mixer = Mixer::new(&mut params, &mut rng, cfg.p, cfg.hidden, cfg.d);
        Ok(Self {
            cfg,
            params,
            encoder,
            intervention,
            scm,
            mixer,
        })
    }

    /// Loss for one batch group on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        group: &BatchGroup,
        epoch: usize,
        temperature: f64,
        weights: &LossWeights,
        mmd: &MmdConfig,
    ) -> Result<(Var, LossTerms)> {
        let e = self.encoder.encode(tape, bound, &group.obs, &group.noise)?;
        let (_, xhat) = generate(tape, bound, &self.scm, &self.mixer, e.z, &[])?;
        let x = tape.constant(group.obs.clone());
        let mut aligned = Vec::new();
        if let Some(p) = &group.paired {
            let code = self.intervention.encode(tape, bound, &p.indicator, temperature)?;
            let (_, cf) = generate(tape, bound, &self.scm, &self.mixer, e.z, &[code])?;
            let real = tape.constant(p.real.clone());
            aligned.push((real, cf));
        }
        let inputs = LossInputs {
            obs: Some(ObsTerms {
                x,
                xhat,
                mu: e.mu,
                logvar: e.logvar,
            }),
            aligned: &aligned,
            dag_entries: self.scm.entries.map(|id| bound.var(id)),
        };
        total_loss(tape, &inputs, weights, mmd, epoch)
    }

    /// Learned code for an indicator at temperature `t`.
    pub fn code(&self, indicator: &[f64], t: f64) -> Result<InterventionCode> {
        self.intervention.encode_values(&self.params, indicator, t)
    }

    /// Posterior means.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let zeros = Tensor::zeros(&[x.rows(), self.cfg.p]);
        Ok(self.encoder.encode_values(&self.params, x, &zeros)?.0)
    }

    /// Latent causal variables implied by the posterior means, with no shift.
    pub fn latents(&self, x: &Tensor) -> Result<Tensor> {
        let mu = self.encode_mean(x)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let z = tape.constant(mu);
        let u = self.scm.forward(&mut tape, &bound, z, None)?;
        Ok(tape.value(u).clone())
    }

    /// Counterfactual observations: encode `x_obs` with `noise`, apply every
    /// code in one SCM pass, mix.
    pub fn generate(&self, x_obs: &Tensor, noise: &Tensor, codes: &[InterventionCode]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let e = self.encoder.encode(&mut tape, &bound, x_obs, noise)?;
        let cv: Vec<CodeVars> = codes.iter().map(|c| CodeVars::constant(&mut tape, c)).collect();
        let (_, x) = generate(&mut tape, &bound, &self.scm, &self.mixer, e.z, &cv)?;
        Ok(tape.value(x).clone())
    }

    /// Dense learned adjacency.
    pub fn dag_matrix(&self) -> Tensor {
        self.scm.dag_matrix(&self.params)
    }
}

fn gradcheck_config(mechanism: MechanismKind, kind: GnnKind, hidden: usize) -> ModelConfig {
    ModelConfig {
        d: 6,
        m: 3,
        p: 3,
        k: 3,
        variant: GnnVariant::new(kind, 1).expect("one layer is valid"),
        embed: 4,
        hidden,
        mechanism,
    }
}

/// Largest relative gradient error of the full training loss on a small
/// model (p = 3, d = 6, hidden 16, batch 8) with random DAG entries.
///
/// Batches are redrawn until every kink input lies at least `2·eps` from its
/// kink, since a central difference straddling one measures nothing useful.
pub fn composite_gradcheck(mechanism: MechanismKind, kind: GnnKind, eps: f64, seed: u64) -> Result<f64> {
    let g = HeteroGraph::new(6, 3, vec![(0, 1), (2, 3)], vec![(0, 0), (4, 1), (5, 2)], vec![(0, 1)])?;
    let mut model = Model::new(gradcheck_config(mechanism, kind, 16), &g.merged_neighbors(), seed)?;
    let weights = LossWeights::default();
    let mmd = MmdConfig::new(2.0, 3)?;
    for attempt in 0..256 {
        let mut r = rng::stream(seed, attempt);
        let mut normals = |rows: usize, cols: usize| Tensor::matrix(rows, cols, rng::normals(&mut r, rows * cols));
        if let Some(id) = model.scm.entries {
            model.params.set(id, normals(1, 3));
        }
        let group = BatchGroup {
            obs: normals(8, 6),
            noise: normals(8, 3),
            paired: Some(Paired {
                indicator: vec![0.0, 1.0, 0.0],
                real: normals(8, 6),
            }),
        };
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        model.loss(&mut tape, &bound, &group, 60, 2.0, &weights, &mmd)?;
        if tape.kink_margin() < 2.0 * eps {
            continue;
        }
        return grad_check(
            |t, vars| {
                let b = Bound::from_vars(vars.to_vec());
                Ok(model.loss(t, &b, &group, 60, 2.0, &weights, &mmd)?.0)
            },
            model.params.values(),
            eps,
        );
    }
    Err(Error::Numeric(format!("no evaluation point clear of activation kinks at step {eps}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(mechanism: MechanismKind, hidden: usize) -> Model {
        let g = HeteroGraph::new(6, 3, vec![(0, 1), (2, 3)], vec![(0, 0), (4, 1), (5, 2)], vec![(0, 1)]).unwrap();
        Model::new(gradcheck_config(mechanism, GnnKind::Sage, hidden), &g.merged_neighbors(), 3).unwrap()
    }

    #[test]
    fn composite_loss_gradients_match_finite_differences() {
        for mech in [MechanismKind::Linear, MechanismKind::Mlp] {
            for kind in [GnnKind::Sage, GnnKind::Gcn, GnnKind::Gat] {
                let worst = composite_gradcheck(mech, kind, 1e-5, 1).unwrap();
                assert!(worst < 1e-4, "{mech} {kind}: {worst}");
            }
        }
    }

    #[test]
    fn every_parameter_is_reached() {
        let model = tiny(MechanismKind::Mlp, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let group = BatchGroup {
            obs: randn(&mut rng, &[4, 6]),
            noise: randn(&mut rng, &[4, 3]),
            paired: Some(Paired {
                indicator: vec![1.0, 0.0, 0.0],
                real: randn(&mut rng, &[4, 6]),
            }),
        };
        let mut t = Tape::new();
        let b = model.params.bind(&mut t);
        let (loss, _) = model
            .loss(&mut t, &b, &group, 50, 1.0, &LossWeights::default(), &MmdConfig::default())
            .unwrap();
        let g = t.backward(loss).unwrap();
        for id in model.params.ids() {
            assert!(g.reached(b.var(id)), "{}", model.params.name(id));
        }
    }

    #[test]
    fn generation_with_no_codes_reconstructs() {
        let model = tiny(MechanismKind::Linear, 8);
        let x = randn(&mut ChaCha8Rng::seed_from_u64(3), &[5, 6]);
        let z = Tensor::zeros(&[5, 3]);
        let a = model.generate(&x, &z, &[]).unwrap();
        let b = model.generate(&x, &z, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (5, 6));
        // Zero adjacency: latents equal posterior means.
        assert_eq!(model.latents(&x).unwrap(), model.encode_mean(&x).unwrap());
    }
}
