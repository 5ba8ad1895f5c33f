use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Samples from one regime. `targets` index the dataset's intervention
/// vocabulary; empty for the observational regime.
#[derive(Clone, Debug, PartialEq)]
pub struct Regime {
    pub label: String,
    pub targets: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub x: Tensor,
    /// Latent values, when known (synthetic data only).
    pub u: Option<Tensor>,
}

impl Regime {
    pub fn new(label: String, targets: Vec<usize>, x: Tensor, u: Option<Tensor>, id_prefix: &str) -> Self {
        let sample_ids = (0..x.rows()).map(|i| format!("{id_prefix}_{i}")).collect();
        Self {
            label,
            targets,
            sample_ids,
            x,
            u,
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn is_observational(&self) -> bool {
        self.targets.is_empty()
    }

    /// Rows `idx` of this regime.
    pub fn subset(&self, idx: &[usize]) -> Regime {
        Regime {
            label: self.label.clone(),
            targets: self.targets.clone(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            x: self.x.select_rows(idx),
            u: self.u.as_ref().map(|u| u.select_rows(idx)),
        }
    }
}

/// Observational plus interventional regimes over a shared feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeDataset {
    pub features: Vec<String>,
    /// Single-intervention labels; position is the indicator index.
    pub vocab: Vec<String>,
    pub obs: Regime,
    pub interventional: Vec<Regime>,
}

impl RegimeDataset {
    pub fn new(features: Vec<String>, vocab: Vec<String>, obs: Regime, interventional: Vec<Regime>) -> Result<Self> {
        let d = features.len();
        let latent = obs.u.as_ref().map(Tensor::cols);
        for r in std::iter::once(&obs).chain(&interventional) {
            if r.x.cols() != d && r.n() > 0 {
                return Err(Error::Data(format!("regime {} has {} columns, expected {d}", r.label, r.x.cols())));
            }
            if r.u.as_ref().map(Tensor::cols) != latent {
                return Err(Error::Data(format!("regime {} has inconsistent latents", r.label)));
            }
            if r.targets.iter().any(|&t| t >= vocab.len()) {
                return Err(Error::Data(format!("regime {} targets an unknown intervention", r.label)));
            }
        }
        if !obs.is_observational() {
            return Err(Error::Data("observational regime must have no targets".into()));
        }
        Ok(Self {
            features,
            vocab,
            obs,
            interventional,
        })
    }

    pub fn d(&self) -> usize {
        self.features.len()
    }

    /// Number of distinct single interventions.
    pub fn k(&self) -> usize {
        self.vocab.len()
    }

    pub fn regime(&self, label: &str) -> Option<&Regime> {
        self.interventional.iter().find(|r| r.label == label)
    }

    /// K-hot indicator of a regime's targets.
    pub fn indicator(&self, r: &Regime) -> Vec<f64> {
        let mut v = vec![0.0; self.k()];
        for &t in &r.targets {
            v[t] = 1.0;
        }
        v
    }

    /// Builds a dataset from CSV tables; the vocabulary lists intervention
    /// atoms in order of first appearance.
    pub fn from_tables(obs: CsvTable, interventional: Vec<CsvTable>) -> Result<Self> {
        let features = obs.columns.clone();
        let obs_regime = obs.into_regime(&[])?;
        if obs_regime.label != "ctrl" {
            return Err(Error::Data(format!("observational file has label '{}', expected ctrl", obs_regime.label)));
        }
        let mut vocab: Vec<String> = Vec::new();
        let mut regimes = Vec::new();
        for t in interventional {
            if t.columns != features {
                return Err(Error::Data(format!("{}: feature columns differ from the observational file", t.source)));
            }
            let label = t.single_label()?;
            let mut targets = Vec::new();
            for atom in label.split('+') {
                let pos = match vocab.iter().position(|v| v == atom) {
                    Some(p) => p,
                    None => {
                        vocab.push(atom.to_string());
                        vocab.len() - 1
                    }
                };
                targets.push(pos);
            }
            regimes.push(t.into_regime(&targets)?);
        }
        Self::new(features, vocab, obs_regime, regimes)
    }
}

/// Parsed `sample_id,intervention,<columns...>` file.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub source: String,
    pub columns: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub values: Tensor,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let head: Vec<&str> = header.split(',').map(str::trim).collect();
        if head.len() < 2 || head[0] != "sample_id" || head[1] != "intervention" {
            return Err(err(1, "header must start with sample_id,intervention".into()));
        }
        let columns: Vec<String> = head[2..].iter().map(|s| s.to_string()).collect();
        let w = columns.len();
        let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != w + 2 {
                return Err(err(i + 1, format!("expected {} fields, found {}", w + 2, fields.len())));
            }
            ids.push(fields[0].trim().to_string());
            labels.push(fields[1].trim().to_string());
            for (c, f) in fields[2..].iter().enumerate() {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| err(i + 1, format!("column {} is not a number: '{f}'", columns[c])))?;
                data.push(v);
            }
        }
        let values = Tensor::matrix(ids.len(), w, data);
        Ok(Self {
            source: source.to_string(),
            columns,
            ids,
            labels,
            values,
        })
    }

    fn single_label(&self) -> Result<String> {
        let first = self
            .labels
            .first()
            .ok_or_else(|| Error::Data(format!("{}: no samples", self.source)))?;
        if let Some(other) = self.labels.iter().find(|l| *l != first) {
            return Err(Error::Data(format!(
                "{}: mixed intervention labels '{first}' and '{other}'",
                self.source
            )));
        }
        Ok(first.clone())
    }

    fn into_regime(self, targets: &[usize]) -> Result<Regime> {
        let label = self.single_label()?;
        Ok(Regime {
            label,
            targets: targets.to_vec(),
            sample_ids: self.ids,
            x: self.values,
            u: None,
        })
    }
}

/// Writes rows as `sample_id,intervention,<columns...>` with round-trip exact
/// number formatting.
pub fn write_table(path: &Path, columns: &[String], ids: &[String], labels: &[&str], values: &Tensor) -> Result<()> {
    let mut s = String::from("sample_id,intervention");
    for c in columns {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for r in 0..values.rows() {
        s.push_str(&ids[r]);
        s.push(',');
        s.push_str(labels[r]);
        for v in values.row_slice(r) {
            write!(s, ",{v:?}").expect("writing to a String");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_regime(path: &Path, columns: &[String], r: &Regime, values: &Tensor) -> Result<()> {
    let labels = vec![r.label.as_str(); values.rows()];
    write_table(path, columns, &r.sample_ids, &labels, values)
}
