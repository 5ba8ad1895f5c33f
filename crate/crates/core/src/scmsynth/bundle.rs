//! Benchmark bundle directory layout.
//!
//! ```text
//! ground_truth.json    SCM, interventions, mixing, seed (synthetic only)
//! manifest.json        counts, dimensions, generator version
//! data_obs.csv         observational samples
//! data_int_<k>.csv     one file per interventional regime
//! latent_obs.csv       latent values behind data_obs.csv (synthetic only)
//! latent_int_<k>.csv   latent values behind data_int_<k>.csv
//! context_edges.tsv    typed edge list
//! x_nodes.txt          feature vocabulary
//! h_nodes.txt          group-node vocabulary
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{write_regime, CsvTable};
use super::{Benchmark, BenchmarkSpec, GroundTruth, RegimeDataset};
use crate::error::{Error, Result};
use crate::hetnet::{load_edge_files, HeteroGraph, UnknownIdPolicy, Vocabulary};

pub const GENERATOR_VERSION: &str = concat!("grace-scmsynth/", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub p: usize,
    pub d: usize,
    pub k: usize,
    pub regimes: Vec<String>,
    pub n_obs: usize,
    pub n_per_regime: Vec<usize>,
    pub context_edges: (usize, usize, usize),
    pub spec: Option<BenchmarkSpec>,
}

/// A loaded bundle; `truth` is present for synthetic data only.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub data: RegimeDataset,
    pub context: HeteroGraph,
    pub x_vocab: Vocabulary,
    pub h_vocab: Vocabulary,
    pub truth: Option<GroundTruth>,
    pub manifest: Option<Manifest>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

pub fn write_bundle(b: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = &b.data;
    let latent_cols: Vec<String> = (0..b.truth.p).map(|i| format!("u{i}")).collect();
    write_json(&dir.join("ground_truth.json"), &b.truth)?;
    write_regime(&dir.join("data_obs.csv"), &data.features, &data.obs, &data.obs.x)?;
    if let Some(u) = &data.obs.u {
        write_regime(&dir.join("latent_obs.csv"), &latent_cols, &data.obs, u)?;
    }
    for (k, r) in data.interventional.iter().enumerate() {
        write_regime(&dir.join(format!("data_int_{k}.csv")), &data.features, r, &r.x)?;
        if let Some(u) = &r.u {
            write_regime(&dir.join(format!("latent_int_{k}.csv")), &latent_cols, r, u)?;
        }
    }
    let x_vocab = Vocabulary::new(data.features.clone())?;
    let h_vocab = Vocabulary::numbered("h", b.context.m());
    let edges = dir.join("context_edges.tsv");
    let mut f = fs::File::create(&edges).map_err(|e| Error::io(&edges, e))?;
    b.context
        .write_edge_list(&mut f, &x_vocab, &h_vocab)
        .map_err(|e| Error::io(&edges, e))?;
    x_vocab.write(&dir.join("x_nodes.txt"))?;
    h_vocab.write(&dir.join("h_nodes.txt"))?;
    write_json(&dir.join("manifest.json"), &manifest(b))
}

fn manifest(b: &Benchmark) -> Manifest {
    let data = &b.data;
    Manifest {
        generator_version: GENERATOR_VERSION.into(),
        p: b.truth.p,
        d: data.d(),
        k: data.k(),
        regimes: data.interventional.iter().map(|r| r.label.clone()).collect(),
        n_obs: data.obs.n(),
        n_per_regime: data.interventional.iter().map(|r| r.n()).collect(),
        context_edges: b.context.counts(),
        spec: Some(b.spec.clone()),
    }
}

impl Bundle {
    /// The bundle `write_bundle` followed by `read_bundle` would produce.
    pub fn from_benchmark(b: Benchmark) -> Result<Self> {
        let manifest = manifest(&b);
        Ok(Self {
            x_vocab: Vocabulary::new(b.data.features.clone())?,
            h_vocab: Vocabulary::numbered("h", b.context.m()),
            truth: Some(b.truth),
            data: b.data,
            context: b.context,
            manifest: Some(manifest),
        })
    }
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("bundle directory {} does not exist", dir.display())));
    }
    let obs = CsvTable::read(&dir.join("data_obs.csv"))?;
    let mut ints = Vec::new();
    let mut latents = Vec::new();
    for k in 0.. {
        let p = dir.join(format!("data_int_{k}.csv"));
        if !p.exists() {
            break;
        }
        ints.push(CsvTable::read(&p)?);
        let lp = dir.join(format!("latent_int_{k}.csv"));
        latents.push(if lp.exists() { Some(CsvTable::read(&lp)?) } else { None });
    }
    let latent_obs = {
        let lp = dir.join("latent_obs.csv");
        if lp.exists() {
            Some(CsvTable::read(&lp)?)
        } else {
            None
        }
    };
    let mut data = RegimeDataset::from_tables(obs, ints)?;
    let attach = |r: &mut super::Regime, t: Option<CsvTable>| -> Result<()> {
        if let Some(t) = t {
            if t.ids != r.sample_ids {
                return Err(Error::Data(format!("{}: sample ids differ from the data file", t.source)));
            }
            r.u = Some(t.values);
        }
        Ok(())
    };
    attach(&mut data.obs, latent_obs)?;
    for (r, t) in data.interventional.iter_mut().zip(latents) {
        attach(r, t)?;
    }

    let x_vocab = Vocabulary::read(&dir.join("x_nodes.txt"))?;
    if x_vocab.ids() != data.features.as_slice() {
        return Err(Error::Data("x_nodes.txt does not match the data columns".into()));
    }
    let h_vocab = Vocabulary::read(&dir.join("h_nodes.txt"))?;
    let edges = dir.join("context_edges.tsv");
    let (context, _) = load_edge_files(&[edges.as_path()], &x_vocab, &h_vocab, UnknownIdPolicy::Reject)?;

    let gt_path = dir.join("ground_truth.json");
    let truth: Option<GroundTruth> = if gt_path.exists() { Some(read_json(&gt_path)?) } else { None };
    if let Some(gt) = &truth {
        gt.validate()?;
        let labels: Vec<&str> = gt.interventions.iter().map(|iv| iv.label.as_str()).collect();
        if data.vocab.iter().map(String::as_str).ne(labels.iter().copied()) {
            return Err(Error::Data("intervention labels differ from ground_truth.json".into()));
        }
    }
    let mp = dir.join("manifest.json");
    let manifest = if mp.exists() { Some(read_json(&mp)?) } else { None };
    Ok(Bundle {
        data,
        context,
        x_vocab,
        h_vocab,
        truth,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::super::generate_benchmark;
    use super::*;

    #[test]
    fn bundle_round_trip_is_bit_identical() {
        let b = generate_benchmark(&BenchmarkSpec {
            n_obs: 40,
            n_per_intervention: 25,
            doubles: 1,
            seed: 6,
            ..BenchmarkSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.data, b.data);
        assert_eq!(back.context, b.context);
        assert_eq!(back.truth.as_ref(), Some(&b.truth));
        assert_eq!(back.manifest.as_ref().unwrap().regimes.len(), 5);
        assert_eq!(Bundle::from_benchmark(b).unwrap(), back);
    }

    #[test]
    fn missing_bundle_is_a_data_error() {
        let e = read_bundle(Path::new("/nonexistent/bundle")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
