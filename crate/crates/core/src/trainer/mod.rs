//! Dataset splits, batching, Adam and the training loop.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{TrainConfig, KEYS, SEED_ENV};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};

use crate::causal::temperature_schedule;
use crate::diffcore::{ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::hetnet::HeteroGraph;
use crate::model::{BatchGroup, Model, ModelConfig, Paired};
use crate::objective::LossTerms;
use crate::rng;
use crate::scmsynth::{Regime, RegimeDataset};

const SPLIT_STREAM: u16 = 0x20;
const BATCH_STREAM: u16 = 0x21;
const NOISE_STREAM: u16 = 0x22;

pub const LOG_HEADER: &str = "epoch,recon,kl,mmd,l1,alpha,beta,temp,total";

/// Train, validation and test parts of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: RegimeDataset,
    pub val: RegimeDataset,
    pub test: RegimeDataset,
}

/// Labels of regimes with more than one target.
pub fn multi_target_labels(ds: &RegimeDataset) -> Vec<String> {
    ds.interventional
        .iter()
        .filter(|r| r.targets.len() > 1)
        .map(|r| r.label.clone())
        .collect()
}

/// The split used by training and evaluation: `cfg.split` stratified by
/// regime, with every multi-target regime held out for testing.
pub fn standard_splits(cfg: &TrainConfig, ds: &RegimeDataset) -> Result<Splits> {
    split_dataset(ds, cfg.split, cfg.seed, &multi_target_labels(ds))
}

/// Temperature of the last training epoch, used to read codes at evaluation.
pub fn final_temperature(cfg: &TrainConfig) -> f64 {
    temperature_schedule(cfg.epochs.saturating_sub(1), cfg.epochs, cfg.temp_max)
}

fn split_sizes(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let val = (n as f64 * fractions[1]).round() as usize;
    let test = (n as f64 * fractions[2]).round() as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    (n - val - test, val, test)
}

/// Per-regime stratified split. Regimes listed in `reserved` go to the test
/// part whole and are absent from train and validation.
pub fn split_dataset(ds: &RegimeDataset, fractions: [f64; 3], seed: u64, reserved: &[String]) -> Result<Splits> {
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Parameter(format!("split fractions must be nonnegative and sum to 1, got {fractions:?}")));
    }
    for r in reserved {
        if ds.regime(r).is_none() {
            return Err(Error::Data(format!("reserved regime '{r}' is not in the dataset")));
        }
    }
    let split_one = |r: &Regime, id: u64| -> Result<[Regime; 3]> {
        let (a, b, c) = split_sizes(r.n(), fractions);
        for (size, f, name) in [(a, fractions[0], "train"), (b, fractions[1], "validation"), (c, fractions[2], "test")] {
            if f > 0.0 && size == 0 {
                return Err(Error::Data(format!(
                    "regime {} has {} samples, too few for a nonempty {name} split",
                    r.label,
                    r.n()
                )));
            }
        }
        let mut idx: Vec<usize> = (0..r.n()).collect();
        idx.shuffle(&mut rng::stream(seed, rng::stream_id(SPLIT_STREAM, id, 0)));
        let mut parts = [idx[..a].to_vec(), idx[a..a + b].to_vec(), idx[a + b..].to_vec()];
        for p in &mut parts {
            p.sort_unstable();
        }
        Ok(parts.map(|p| r.subset(&p)))
    };
    let [obs_tr, obs_va, obs_te] = split_one(&ds.obs, 0)?;
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (k, r) in ds.interventional.iter().enumerate() {
        if reserved.contains(&r.label) {
            te.push(r.clone());
            continue;
        }
        let [a, b, c] = split_one(r, k as u64 + 1)?;
        tr.push(a);
        va.push(b);
        te.push(c);
    }
    let make = |obs, ints| RegimeDataset::new(ds.features.clone(), ds.vocab.clone(), obs, ints);
    Ok(Splits {
        train: make(obs_tr, tr)?,
        val: make(obs_va, va)?,
        test: make(obs_te, te)?,
    })
}

/// Row indices for one optimization step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Batch {
    /// Observational rows only.
    Obs(Vec<usize>),
    /// Rows of interventional regime `regime` with an equal number of
    /// observational source rows.
    Paired { regime: usize, rows: Vec<usize>, obs: Vec<usize> },
}

/// Batch order for one epoch: every regime is covered once, paired batches
/// draw fresh observational sources, and the whole list is shuffled.
pub fn make_batches(train: &RegimeDataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Parameter(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut rng = rng::stream(seed, rng::stream_id(BATCH_STREAM, epoch as u64, 0));
    let n_obs = train.obs.n();
    if n_obs == 0 {
        return Err(Error::Data("training split has no observational rows".into()));
    }
    let mut batches = Vec::new();
    let mut perm: Vec<usize> = (0..n_obs).collect();
    perm.shuffle(&mut rng);
    batches.extend(perm.chunks(batch_size).map(|c| Batch::Obs(c.to_vec())));
    for (k, r) in train.interventional.iter().enumerate() {
        let mut perm: Vec<usize> = (0..r.n()).collect();
        perm.shuffle(&mut rng);
        for c in perm.chunks(batch_size) {
            if c.len() > n_obs {
                return Err(Error::Data(format!(
                    "regime {} needs {} observational source rows, only {n_obs} available",
                    r.label,
                    c.len()
                )));
            }
            let obs = index::sample(&mut rng, n_obs, c.len()).into_vec();
            batches.push(Batch::Paired {
                regime: k,
                rows: c.to_vec(),
                obs,
            });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Adam with the conventional moment constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self::restore(lr, 0, zeros.clone(), zeros)
    }

    pub fn restore(lr: f64, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            first,
            second,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Epoch-averaged loss terms. `mmd` averages over paired batches only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub mmd: f64,
    pub l1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temp: f64,
    pub total: f64,
}

impl EpochLog {
    pub fn values(&self) -> [f64; 9] {
        [
            self.epoch as f64,
            self.recon,
            self.kl,
            self.mmd,
            self.l1,
            self.alpha,
            self.beta,
            self.temp,
            self.total,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            epoch: v[0] as usize,
            recon: v[1],
            kl: v[2],
            mmd: v[3],
            l1: v[4],
            alpha: v[5],
            beta: v[6],
            temp: v[7],
            total: v[8],
        }
    }

    pub fn csv_row(&self) -> String {
        let v = self.values();
        let mut s = self.epoch.to_string();
        for x in &v[1..] {
            let _ = write!(s, ",{x:?}");
        }
        s
    }
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs; the next epoch to run has this index.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn model_config(cfg: &TrainConfig, train: &RegimeDataset, context: &HeteroGraph) -> Result<ModelConfig> {
    if context.d() != train.d() {
        return Err(Error::Data(format!(
            "context network has {} feature nodes, data has {} features",
            context.d(),
            train.d()
        )));
    }
    Ok(ModelConfig {
        d: train.d(),
        m: context.m(),
        p: cfg.latent_dim.unwrap_or(train.k()),
        k: train.k(),
        variant: cfg.variant()?,
        embed: cfg.embed,
        hidden: cfg.hidden,
        mechanism: cfg.mechanism,
    })
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, train: &RegimeDataset, context: &HeteroGraph) -> Result<Self> {
        let mcfg = model_config(cfg, train, context)?;
        let model = Model::new(mcfg, &context.merge_untyped(cfg.edge_mask), cfg.seed)?;
        let adam = Adam::new(cfg.lr, &model.params);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            epoch: self.epoch,
            params: self.model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: self.adam.clone(),
            log: self.log.clone(),
        }
    }

    /// Rebuilds the model from `cfg` and fills it from `ckpt`.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: &TrainConfig, train: &RegimeDataset, context: &HeteroGraph) -> Result<Self> {
        let mut state = Self::new(cfg, train, context)?;
        let params = &mut state.model.params;
        if ckpt.params.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameter tensors, model has {}",
                ckpt.params.len(),
                params.len()
            )));
        }
        for (id, (name, t)) in params.ids().collect::<Vec<_>>().into_iter().zip(ckpt.params) {
            if params.name(id) != name || params.get(id).shape() != t.shape() {
                return Err(Error::Data(format!("checkpoint parameter '{name}' does not fit the model")));
            }
            params.set(id, t);
        }
        state.adam = ckpt.adam;
        state.adam.lr = cfg.lr;
        state.epoch = ckpt.epoch;
        state.log = ckpt.log;
        Ok(state)
    }
}

/// Fills a batch group with its rows and the epoch/batch noise stream.
pub fn batch_group(train: &RegimeDataset, batch: &Batch, p: usize, seed: u64, epoch: usize, index: usize) -> BatchGroup {
    let (obs_rows, paired) = match batch {
        Batch::Obs(rows) => (rows, None),
        Batch::Paired { regime, rows, obs } => {
            let r = &train.interventional[*regime];
            (
                obs,
                Some(Paired {
                    indicator: train.indicator(r),
                    real: r.x.select_rows(rows),
                }),
            )
        }
    };
    let mut rng = rng::stream(seed, rng::stream_id(NOISE_STREAM, epoch as u64, index as u64));
    BatchGroup {
        obs: train.obs.x.select_rows(obs_rows),
        noise: Tensor::matrix(obs_rows.len(), p, rng::normals(&mut rng, obs_rows.len() * p)),
        paired,
    }
}

fn check_finite(terms: &LossTerms, epoch: usize, batch: usize) -> Result<()> {
    for (name, v) in [
        ("recon", terms.recon),
        ("kl", terms.kl),
        ("mmd", terms.mmd),
        ("l1", terms.l1),
        ("total", terms.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v} at epoch {epoch}, batch {batch}")));
        }
    }
    Ok(())
}

/// One pass over the training split.
pub fn train_epoch(state: &mut TrainState, train: &RegimeDataset, cfg: &TrainConfig) -> Result<EpochLog> {
    let epoch = state.epoch;
    let temp = temperature_schedule(epoch, cfg.epochs, cfg.temp_max);
    let weights = cfg.loss_weights();
    let mmd_cfg = cfg.mmd()?;
    let batches = make_batches(train, cfg.batch_size, cfg.seed, epoch)?;
    let p = state.model.cfg.p;
    let mut sums = LossTerms::default();
    let mut n_paired = 0usize;
    for (j, b) in batches.iter().enumerate() {
        let group = batch_group(train, b, p, cfg.seed, epoch, j);
        let mut tape = Tape::new();
        let bound = state.model.params.bind(&mut tape);
        let (loss, terms) = state
            .model
            .loss(&mut tape, &bound, &group, epoch, temp, &weights, &mmd_cfg)?;
        check_finite(&terms, epoch, j)?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        if let Some(bad) = g.iter().position(|t| !t.all_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of {} is not finite at epoch {epoch}, batch {j}",
                state.model.params.name(state.model.params.ids().nth(bad).expect("index in range"))
            )));
        }
        state.adam.update(&mut state.model.params, &g);
        sums.recon += terms.recon;
        sums.kl += terms.kl;
        sums.l1 += terms.l1;
        sums.total += terms.total;
        if group.paired.is_some() {
            sums.mmd += terms.mmd;
            n_paired += 1;
        }
        sums.alpha = terms.alpha;
        sums.beta = terms.beta;
    }
    let n = batches.len() as f64;
    let row = EpochLog {
        epoch,
        recon: sums.recon / n,
        kl: sums.kl / n,
        mmd: if n_paired > 0 { sums.mmd / n_paired as f64 } else { 0.0 },
        l1: sums.l1 / n,
        alpha: sums.alpha,
        beta: sums.beta,
        temp,
        total: sums.total / n,
    };
    state.epoch += 1;
    state.log.push(row);
    Ok(row)
}

/// Trains until `until` epochs are complete (capped at `cfg.epochs`).
pub fn train_until(
    state: &mut TrainState,
    train: &RegimeDataset,
    cfg: &TrainConfig,
    until: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    while state.epoch < until.min(cfg.epochs) {
        let row = train_epoch(state, train, cfg)?;
        on_epoch(&row);
    }
    Ok(())
}
