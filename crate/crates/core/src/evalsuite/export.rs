//! DAG and sample exports.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DagFormat {
    Dot,
    Json,
}

impl FromStr for DagFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown DAG format '{other}' (dot, json)")),
        }
    }
}

#[derive(Serialize)]
struct JsonEdge<'a> {
    source: &'a str,
    target: &'a str,
    weight: f64,
    label: String,
}

#[derive(Serialize)]
struct JsonDag<'a> {
    nodes: &'a [String],
    tau: f64,
    edges: Vec<JsonEdge<'a>>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Edges with `|M[i][j]| > tau`, ordered by `(i, j)`, weighted by `|M[i][j]|`
/// rounded to four decimals.
pub fn export_dag(m: &Tensor, tau: f64, labels: &[String], format: DagFormat) -> Result<String> {
    let p = labels.len();
    if m.dims() != (p, p) {
        return Err(Error::dim("export_dag", m.shape(), &[p, p]));
    }
    let mut edges = Vec::new();
    for i in 0..p {
        for j in 0..p {
            let w = m.get(i, j).abs();
            if i != j && w > tau {
                edges.push((i, j, (w * 1e4).round() / 1e4));
            }
        }
    }
    Ok(match format {
        DagFormat::Dot => {
            let mut s = String::from("digraph latent {\n");
            for l in labels {
                let _ = writeln!(s, "  \"{}\";", escape(l));
            }
            for &(i, j, w) in &edges {
                let _ = writeln!(
                    s,
                    "  \"{}\" -> \"{}\" [weight={w:.4}, label=\"{w:.4}\"];",
                    escape(&labels[i]),
                    escape(&labels[j])
                );
            }
            s.push_str("}\n");
            s
        }
        DagFormat::Json => {
            let doc = JsonDag {
                nodes: labels,
                tau,
                edges: edges
                    .iter()
                    .map(|&(i, j, w)| JsonEdge {
                        source: &labels[i],
                        target: &labels[j],
                        weight: w,
                        label: format!("{w:.4}"),
                    })
                    .collect(),
            };
            serde_json::to_string_pretty(&doc).expect("plain data serializes") + "\n"
        }
    })
}

pub const SAMPLE_SOURCES: [&str; 3] = ["actual", "generated", "ctrl"];

/// Rows of one source/intervention pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBlock {
    pub source: String,
    pub intervention: String,
    pub values: Tensor,
}

/// Writes `source,intervention,<features...>` with 17 significant digits.
pub fn export_samples(blocks: &[SampleBlock], features: &[String], path: &Path) -> Result<()> {
    let mut s = String::from("source,intervention");
    for f in features {
        s.push(',');
        s.push_str(f);
    }
    s.push('\n');
    for b in blocks {
        if !SAMPLE_SOURCES.contains(&b.source.as_str()) {
            return Err(Error::Parameter(format!("unknown sample source '{}'", b.source)));
        }
        if b.values.rows() > 0 && b.values.cols() != features.len() {
            return Err(Error::dim("export_samples", b.values.shape(), &[b.values.rows(), features.len()]));
        }
        for r in 0..b.values.rows() {
            let _ = write!(s, "{},{}", b.source, b.intervention);
            for v in b.values.row_slice(r) {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads an export back as consecutive blocks.
pub fn read_samples(path: &Path) -> Result<(Vec<String>, Vec<SampleBlock>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let src = path.display().to_string();
    let perr = |line: usize, msg: String| Error::Parse {
        path: src.clone(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "source" || cols[1] != "intervention" {
        return Err(perr(1, "header must start with source,intervention".into()));
    }
    let features: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut blocks: Vec<(String, String, Vec<f64>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(perr(i + 2, format!("expected {} fields, got {}", cols.len(), f.len())));
        }
        let vals = f[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| perr(i + 2, format!("bad number '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        match blocks.last_mut() {
            Some(b) if b.0 == f[0] && b.1 == f[1] => b.2.extend(vals),
            _ => blocks.push((f[0].to_string(), f[1].to_string(), vals)),
        }
    }
    let d = features.len();
    let blocks = blocks
        .into_iter()
        .map(|(source, intervention, data)| SampleBlock {
            source,
            intervention,
            values: Tensor::matrix(data.len().checked_div(d).unwrap_or(0), d, data),
        })
        .collect();
    Ok((features, blocks))
}
