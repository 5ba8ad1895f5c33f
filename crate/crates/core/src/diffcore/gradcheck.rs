use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-parameter worst relative error between analytic and central-difference gradients.
pub fn grad_check_detailed<F>(f: F, params: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut work = params.to_vec();
    let mut worst = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let g = grads.get(*var);
        let mut w = 0.0f64;
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = g.data()[k];
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient of parameter {pi}[{k}] is not finite"
                )));
            }
            let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            w = w.max(err);
        }
        worst.push(w);
    }
    Ok(worst)
}

/// Max relative error `|a − n| / max(1, |a|, |n|)` over every coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_detailed(f, params, eps)?
        .into_iter()
        .fold(0.0, f64::max))
}

pub(crate) fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Draws values with |x| ≥ `margin` so kinks at zero stay out of reach.
fn randn_away_from_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor {
    randn(rng, shape).map(|x| if x.abs() < margin { x.signum() * margin + x } else { x })
}

type Check = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);

/// Gradient checks for every differentiable primitive, at random points.
/// Returns `(name, max relative error)` pairs.
pub fn op_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let nbrs = std::rc::Rc::new(super::NeighborSets::from_lists(&[
        vec![0, 1],
        vec![1, 0, 2],
        vec![2, 1],
    ]));
    let prop = std::rc::Rc::new(super::Propagation::from_lists(&[
        vec![(1, 0.5), (2, 0.5)],
        vec![(0, 1.0)],
        vec![],
    ]));
    let checks: Vec<Check> = vec![
        (
            "matmul",
            Box::new(|t, v| {
                let m = t.matmul(v[0], v[1])?;
                let s = t.square(m);
                Ok(t.sum(s))
            }),
            vec![randn(r, &[4, 3]), randn(r, &[3, 2])],
        ),
        (
            "leaky_relu",
            Box::new(|t, v| {
                let a = t.activate(v[0], Activation::LeakyRelu(0.01));
                let w = t.constant(Tensor::row(vec![1.0, -2.0, 0.5, 3.0]));
                let a = t.mul_row(a, w)?;
                Ok(t.sum(a))
            }),
            vec![randn_away_from_zero(r, &[3, 4], 1e-3)],
        ),
        (
            "sigmoid_tanh",
            Box::new(|t, v| {
                let a = t.activate(v[0], Activation::Sigmoid);
                let b = t.activate(v[0], Activation::Tanh);
                let c = t.mul(a, b)?;
                Ok(t.sum(c))
            }),
            vec![randn(r, &[2, 5])],
        ),
        (
            "softmax",
            Box::new(|t, v| {
                let s = t.softmax_rows(v[0], 2.5)?;
                let w = t.constant(Tensor::from_rows(&[vec![1.0, -1.0, 2.0], vec![0.3, 0.2, -0.7]]));
                let p = t.mul(s, w)?;
                Ok(t.sum(p))
            }),
            vec![randn(r, &[2, 3])],
        ),
        (
            "reparameterize",
            Box::new(|t, v| {
                let z = super::reparameterize(t, v[0], v[1], v[2])?;
                let s = t.square(z);
                Ok(t.mean(s))
            }),
            vec![randn(r, &[3, 2]), randn(r, &[3, 2]), randn(r, &[3, 2])],
        ),
        (
            "exp_abs_clamp",
            Box::new(|t, v| {
                let e = t.exp(v[0]);
                let a = t.abs(v[1]);
                let c = t.clamp(v[0], -0.5, 0.5);
                let s = t.add(e, a)?;
                let s = t.add(s, c)?;
                Ok(t.sum(s))
            }),
            vec![
                randn(r, &[2, 2]).map(|x| if (x.abs() - 0.5).abs() < 1e-2 { x + 0.1 } else { x }),
                randn_away_from_zero(r, &[2, 2], 1e-3),
            ],
        ),
        (
            "slice_concat_gather",
            Box::new(|t, v| {
                let a = t.slice_cols(v[0], 1, 3)?;
                let b = t.concat_cols(&[a, v[0]])?;
                let g = t.gather_rows(b, std::rc::Rc::from(vec![2usize, 0, 2]))?;
                let g = t.reshape(g, &[3 * 6])?;
                let s = t.square(g);
                Ok(t.sum(s))
            }),
            vec![randn(r, &[3, 4])],
        ),
        (
            "upper_triangular",
            Box::new(|t, v| {
                let m = t.upper_triangular(v[0], 3)?;
                let p = t.matmul(v[1], m)?;
                let s = t.square(p);
                Ok(t.sum(s))
            }),
            vec![randn(r, &[3]), randn(r, &[2, 3])],
        ),
        (
            "rbf_kernel",
            Box::new(|t, v| {
                let d = t.pairwise_sqdist(v[0], v[1])?;
                t.kernel_mean(d, std::rc::Rc::from(vec![0.5, 1.0, 4.0]))
            }),
            vec![randn(r, &[4, 3]), randn(r, &[5, 3])],
        ),
        (
            "propagate",
            Box::new(move |t, v| {
                let p = t.propagate(v[0], prop.clone())?;
                let q = t.mul(p, v[0])?;
                Ok(t.sum(q))
            }),
            vec![randn(r, &[6, 2])],
        ),
        (
            "attention",
            Box::new(move |t, v| {
                let a = t.attention(v[0], v[1], v[2], nbrs.clone(), 0.2)?;
                let s = t.square(a);
                Ok(t.sum(s))
            }),
            vec![randn(r, &[6, 2]), randn(r, &[6, 1]), randn(r, &[6, 1])],
        ),
    ];
    checks
        .into_iter()
        .map(|(name, f, params)| Ok((name, grad_check(f, &params, eps)?)))
        .collect()
}
