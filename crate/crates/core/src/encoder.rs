//! Graph-aware variational encoder.
//!
//! Every sample becomes one copy of the merged context graph: X node `v`
//! carries the scalar `x_v`, H nodes carry fixed standard-normal scalars. A
//! few message-passing layers of width `embed` run over each copy, a per-node
//! scalar readout turns the X nodes back into a `d`-vector, and an MLP maps
//! that vector to `(mu, logvar)`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    init_uniform, reparameterize, Activation, Bound, Dense, Mlp, NeighborSets, ParamId, ParamSet, Propagation, Tape,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::hetnet::{HFeatures, MergedGraph};

pub const LOGVAR_LIMIT: f64 = 10.0;
const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Sage,
    Gcn,
    Gat,
}

impl fmt::Display for GnnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GnnKind::Sage => "sage",
            GnnKind::Gcn => "gcn",
            GnnKind::Gat => "gat",
        })
    }
}

impl FromStr for GnnKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sage" | "graphsage" => Ok(Self::Sage),
            "gcn" => Ok(Self::Gcn),
            "gat" => Ok(Self::Gat),
            other => Err(format!("unknown gnn '{other}' (sage, gcn, gat)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnVariant {
    pub kind: GnnKind,
    pub layers: usize,
}

impl GnnVariant {
    pub fn new(kind: GnnKind, layers: usize) -> Result<Self> {
        if layers != 1 && layers != 3 {
            return Err(Error::Parameter(format!("gnn layers must be 1 or 3, got {layers}")));
        }
        Ok(Self { kind, layers })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub m: usize,
    pub p: usize,
    pub variant: GnnVariant,
    pub embed: usize,
    pub hidden: usize,
    /// Nonlinearity after each message-passing layer.
    pub activation: Activation,
}

/// Fixed propagation operators derived from the merged graph.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    pub n_nodes: usize,
    /// Mean over neighbors; zero rows for isolated nodes.
    pub mean: Rc<Propagation>,
    /// Symmetric-normalized sum over the neighborhood plus self.
    pub gcn: Rc<Propagation>,
    /// Neighborhood plus self, for attention.
    pub attention: Rc<NeighborSets>,
}

impl GraphOperators {
    pub fn new(g: &MergedGraph) -> Self {
        let n = g.n_nodes();
        let mean = (0..n)
            .map(|v| {
                let ns = g.neighbors(v);
                let w = 1.0 / ns.len().max(1) as f64;
                ns.iter().map(|&u| (u, w)).collect()
            })
            .collect::<Vec<_>>();
        let gcn = (0..n)
            .map(|v| {
                let dv = (g.degree(v) + 1) as f64;
                std::iter::once(v)
                    .chain(g.neighbors(v).iter().copied())
                    .map(|u| (u, 1.0 / (dv * (g.degree(u) + 1) as f64).sqrt()))
                    .collect()
            })
            .collect::<Vec<_>>();
        let att = (0..n)
            .map(|v| std::iter::once(v).chain(g.neighbors(v).iter().copied()).collect())
            .collect::<Vec<Vec<usize>>>();
        Self {
            n_nodes: n,
            mean: Rc::new(Propagation::from_lists(&mean)),
            gcn: Rc::new(Propagation::from_lists(&gcn)),
            attention: Rc::new(NeighborSets::from_lists(&att)),
        }
    }
}

/// Weights of one message-passing layer. `w_self` is unused by gcn and gat.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    pub kind: GnnKind,
    pub w_self: Option<ParamId>,
    pub w_nbr: ParamId,
    pub bias: ParamId,
    pub att_src: Option<ParamId>,
    pub att_dst: Option<ParamId>,
}

impl GnnLayer {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, kind: GnnKind, w_in: usize, w_out: usize) -> Self {
        let w_self = (kind == GnnKind::Sage).then(|| params.add(format!("{name}.w_self"), init_uniform(rng, &[w_in, w_out], w_in)));
        let w_nbr = params.add(format!("{name}.w_nbr"), init_uniform(rng, &[w_in, w_out], w_in));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[1, w_out]));
        let (att_src, att_dst) = if kind == GnnKind::Gat {
            (
                Some(params.add(format!("{name}.att_src"), init_uniform(rng, &[w_out, 1], w_out))),
                Some(params.add(format!("{name}.att_dst"), init_uniform(rng, &[w_out, 1], w_out))),
            )
        } else {
            (None, None)
        };
        Self {
            kind,
            w_self,
            w_nbr,
            bias,
            att_src,
            att_dst,
        }
    }
}

/// One message-passing layer over `blocks × n_nodes` rows.
///
/// sage: `σ(h_v·W_self + mean_{u∈N(v)} h_u·W_nbr + b)`; gcn: `σ(Σ_{u∈N(v)∪{v}}
/// h_u·W / √((deg v+1)(deg u+1)) + b)`; gat: single-head attention over
/// `N(v)∪{v}` with leaky-relu logits.
pub fn gnn_layer(tape: &mut Tape, bound: &Bound, h: Var, layer: &GnnLayer, ops: &GraphOperators, act: Activation) -> Result<Var> {
    let w = bound.var(layer.w_nbr);
    let out = match layer.kind {
        GnnKind::Sage => {
            let w_self = bound.var(layer.w_self.expect("sage layers carry a self weight"));
            let own = tape.matmul(h, w_self)?;
            let agg = tape.propagate(h, ops.mean.clone())?;
            let nbr = tape.matmul(agg, w)?;
            tape.add(own, nbr)?
        }
        GnnKind::Gcn => {
            let agg = tape.propagate(h, ops.gcn.clone())?;
            tape.matmul(agg, w)?
        }
        GnnKind::Gat => {
            let wh = tape.matmul(h, w)?;
            let src = tape.matmul(wh, bound.var(layer.att_src.expect("gat layers carry attention vectors")))?;
            let dst = tape.matmul(wh, bound.var(layer.att_dst.expect("gat layers carry attention vectors")))?;
            tape.attention(wh, src, dst, ops.attention.clone(), ATTENTION_SLOPE)?
        }
    };
    let out = tape.add_row(out, bound.var(layer.bias))?;
    Ok(tape.activate(out, act))
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<GnnLayer>,
    pub readout: Dense,
    pub mlp: Mlp,
    ops: GraphOperators,
    h_values: Vec<f64>,
}

/// Tape handles produced by [`Encoder::encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub embedding: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, graph: &MergedGraph, h: &HFeatures, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        if graph.n_nodes() != cfg.d + cfg.m || graph.d() != cfg.d {
            return Err(Error::Dimension {
                op: "encoder graph",
                lhs: vec![graph.d(), graph.n_nodes()],
                rhs: vec![cfg.d, cfg.d + cfg.m],
            });
        }
        if h.values.rows() != cfg.m || (cfg.m > 0 && h.values.cols() != 1) {
            return Err(Error::dim("encoder H features", h.values.shape(), &[cfg.m, 1]));
        }
        let mut layers = Vec::new();
        let mut w_in = 1;
        for l in 0..cfg.variant.layers {
            layers.push(GnnLayer::new(params, rng, &format!("encoder.gnn{l}"), cfg.variant.kind, w_in, cfg.embed));
            w_in = cfg.embed;
        }
        let readout = Dense::new(params, rng, "encoder.readout", cfg.embed, 1);
        let mlp = Mlp::new(
            params,
            rng,
            "encoder.mlp",
            &[cfg.d, cfg.hidden, cfg.hidden, 2 * cfg.p],
            Activation::LeakyRelu(0.01),
        );
        Ok(Self {
            ops: GraphOperators::new(graph),
            h_values: h.values.data().to_vec(),
            cfg,
            layers,
            readout,
            mlp,
        })
    }

    /// Node-feature matrix with one `(d+m) × 1` block per sample.
    pub fn node_features(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims();
        if d != self.cfg.d {
            return Err(Error::dim("encode", x.shape(), &[n, self.cfg.d]));
        }
        let nodes = self.ops.n_nodes;
        let mut data = Vec::with_capacity(n * nodes);
        for r in 0..n {
            data.extend_from_slice(x.row_slice(r));
            data.extend_from_slice(&self.h_values);
        }
        Ok(Tensor::matrix(n * nodes, 1, data))
    }

    /// Structure-aware `n × d` embedding of the X nodes.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
        let n = x.rows();
        let mut h = tape.constant(self.node_features(x)?);
        for layer in &self.layers {
            h = gnn_layer(tape, bound, h, layer, &self.ops, self.cfg.activation)?;
        }
        let s = self.readout.forward(tape, bound, h)?;
        let nodes = self.ops.n_nodes;
        let idx: Rc<[usize]> = (0..n).flat_map(|r| (0..self.cfg.d).map(move |v| r * nodes + v)).collect();
        let xs = tape.gather_rows(s, idx)?;
        tape.reshape(xs, &[n, self.cfg.d])
    }

    /// `(mu, logvar, z)` with `z = mu + exp(logvar/2)·noise`; logvar is
    /// clamped to `[−10, 10]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, noise: &Tensor) -> Result<Encoded> {
        let p = self.cfg.p;
        if noise.dims() != (x.rows(), p) {
            return Err(Error::dim("encode noise", noise.shape(), &[x.rows(), p]));
        }
        let embedding = self.embed(tape, bound, x)?;
        let out = self.mlp.forward(tape, bound, embedding)?;
        let mu = tape.slice_cols(out, 0, p)?;
        let raw = tape.slice_cols(out, p, 2 * p)?;
        let logvar = tape.clamp(raw, -LOGVAR_LIMIT, LOGVAR_LIMIT);
        let eps = tape.constant(noise.clone());
        let z = reparameterize(tape, mu, logvar, eps)?;
        Ok(Encoded {
            embedding,
            mu,
            logvar,
            z,
        })
    }

    /// Plain-value convenience: returns `(mu, logvar, z)`.
    pub fn encode_values(&self, params: &ParamSet, x: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let e = self.encode(&mut tape, &bound, x, noise)?;
        Ok((tape.value(e.mu).clone(), tape.value(e.logvar).clone(), tape.value(e.z).clone()))
    }
}
