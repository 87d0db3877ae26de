use rand::Rng;

use super::{Bound, ParamId, ParamSet, Result, TensorError, Var};

/// Biases start slightly off zero so no unit sits exactly on the ReLU kink
/// for an all-zero input.
const BIAS_STD: f64 = 0.01;

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (inp + out) as f64).sqrt();
        let weight = params.insert_normal(format!("{name}.weight"), &[inp, out], std, rng);
        let bias = Some(params.insert_normal(format!("{name}.bias"), &[out], BIAS_STD, rng));
        Self { weight, bias, inp, out }
    }

    pub fn zeros(params: &mut ParamSet, name: &str, inp: usize, out: usize) -> Self {
        let weight = params.insert_zeros(format!("{name}.weight"), &[inp, out]);
        let bias = Some(params.insert_zeros(format!("{name}.bias"), &[out]));
        Self { weight, bias, inp, out }
    }

    /// Bias-free projection.
    pub fn projection(params: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (inp + out) as f64).sqrt();
        let weight = params.insert_normal(format!("{name}.weight"), &[inp, out], std, rng);
        Self { weight, bias: None, inp, out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p[self.weight])?;
        match self.bias {
            Some(b) => y.add_row(p[b]),
            None => Ok(y),
        }
    }
}

/// Stack of [`Linear`] layers with ReLU between them and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let width = x.shape().last().copied().unwrap_or(0);
        if let Some(first) = self.layers.first() {
            if first.inp != width {
                return Err(TensorError::Dim {
                    op: "mlp_forward",
                    lhs: x.shape(),
                    rhs: vec![first.inp, first.out],
                });
            }
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }
}

/// Scaled dot-product attention `softmax(q · kᵀ · scale) · v` on rank-2
/// inputs: `q` is `n × d`, `k` is `m × d`, `v` is `m × e`.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(TensorError::Dim {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let scores = q.matmul(k.transpose()?)?.scale(scale)?;
    scores.softmax(1)?.matmul(v)
}
