//! Heading standardization, Gaussian-mixture trajectory head, and the
//! trajectory losses.

use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use rand::Rng;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::scene::{Point, Prediction};
use crate::tensor::{Bound, Linear, Mlp, ParamId, ParamSet, Tensor, TensorError, Var};

/// Lower bound on predicted standard deviations.
pub const SIGMA_MIN: f64 = 1e-3;

/// Row-major 2×2 rotation `[a, b, c, d]` taking `heading` to `(0, 1)`.
pub fn make_rotation(heading: Point) -> Result<[f64; 4]> {
    let n = (heading[0].powi(2) + heading[1].powi(2)).sqrt();
    if !((n - 1.0).abs() <= 1e-6) {
        return Err(Error::Contract(format!("heading {heading:?} is not a unit vector")));
    }
    let [hx, hy] = heading;
    Ok([hy, -hx, hx, hy])
}

pub fn apply_rotation(r: &[f64; 4], v: Point) -> Point {
    [r[0] * v[0] + r[1] * v[1], r[2] * v[0] + r[3] * v[1]]
}

/// Mixture parameters for `n` agents, all on the tape.
#[derive(Debug, Clone, Copy)]
pub struct GmmVars<'t> {
    /// `[n, M]` mode logits.
    pub logits: Var<'t>,
    /// `[n, M]` mode probabilities.
    pub rho: Var<'t>,
    /// `[n, M·T_f·2]` means in the ego frame.
    pub mu: Var<'t>,
    /// `[n, M·T_f·2]` per-axis standard deviations.
    pub sigma: Var<'t>,
}

impl GmmVars<'_> {
    /// Plain-value predictions, one per agent.
    pub fn predictions(&self, modes: usize, t_future: usize) -> Vec<Prediction> {
        let (rho, mu, sigma) = (self.rho.value(), self.mu.value(), self.sigma.value());
        let n = rho.shape()[0];
        let per = modes * t_future * 2;
        let pairs = |d: &[f64], i: usize| -> Vec<Vec<Point>> {
            (0..modes)
                .map(|m| {
                    (0..t_future)
                        .map(|t| {
                            let o = i * per + (m * t_future + t) * 2;
                            [d[o], d[o + 1]]
                        })
                        .collect()
                })
                .collect()
        };
        (0..n)
            .map(|i| Prediction {
                rho: rho.data()[i * modes..(i + 1) * modes].to_vec(),
                mu: pairs(mu.data(), i),
                sigma: pairs(sigma.data(), i),
            })
            .collect()
    }

    /// Means of each agent's most probable mode (lowest index on ties).
    pub fn top_mode_means(&self, modes: usize, t_future: usize) -> Vec<Vec<Point>> {
        let (rho, mu) = (self.rho.value(), self.mu.value());
        let n = rho.shape()[0];
        let per = modes * t_future * 2;
        (0..n)
            .map(|i| {
                let r = &rho.data()[i * modes..(i + 1) * modes];
                let best = argmax(r);
                (0..t_future)
                    .map(|t| {
                        let o = i * per + (best * t_future + t) * 2;
                        [mu.data()[o], mu.data()[o + 1]]
                    })
                    .collect()
            })
            .collect()
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Rotation-conditioned transform followed by the mixture heads.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub modes: usize,
    pub t_future: usize,
    /// `[z ; flatten(R)] → d_s`, added back onto `z`.
    pub transform: Mlp,
    pub trunk: Linear,
    pub rho: Linear,
    pub disp: Linear,
    pub log_sigma: Linear,
}

impl Decoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_s: usize,
        hidden: usize,
        modes: usize,
        t_future: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        let out = modes * t_future * 2;
        Self {
            modes,
            t_future,
            transform: Mlp::new(params, &n("transform"), &[d_s + 4, hidden, d_s], rng),
            trunk: Linear::new(params, &n("trunk"), d_s, hidden, rng),
            rho: Linear::new(params, &n("rho"), hidden, modes, rng),
            disp: Linear::new(params, &n("disp"), hidden, out, rng),
            log_sigma: Linear::new(params, &n("log_sigma"), hidden, out, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.transform.params();
        for l in [&self.trunk, &self.rho, &self.disp, &self.log_sigma] {
            ids.push(l.weight);
            ids.extend(l.bias);
        }
        ids
    }

    /// `MLP([z ; flatten(R)]) + z`.
    pub fn transform_feature<'t>(&self, p: &Bound<'t>, z: Var<'t>, rotations: &[[f64; 4]]) -> Result<Var<'t>> {
        let n = z.shape()[0];
        if rotations.len() != n {
            return Err(Error::Contract("one rotation per agent is required".into()));
        }
        let flat = Tensor::new(vec![n, 4], rotations.iter().flatten().copied().collect())?;
        let input = Var::concat(&[z, z.tape().constant(flat)], 1)?;
        Ok(self.transform.forward(p, input)?.add(z)?)
    }

    /// Mixture from aligned features: means are cumulative displacements in
    /// the agent frame, rotated back by `Rᵀ` and offset by `p^T`.
    pub fn decode<'t>(
        &self,
        p: &Bound<'t>,
        z_aligned: Var<'t>,
        rotations: &Arc<Vec<[f64; 4]>>,
        positions: &Tensor,
    ) -> Result<GmmVars<'t>> {
        let (m, tf) = (self.modes, self.t_future);
        let n = z_aligned.shape()[0];
        if positions.shape() != [n, 2] {
            return Err(TensorError::Dim {
                op: "decode",
                lhs: z_aligned.shape(),
                rhs: positions.shape().to_vec(),
            }
            .into());
        }
        let h = self.trunk.forward(p, z_aligned)?.relu()?;
        let logits = self.rho.forward(p, h)?;
        let rho = logits.softmax(1)?;
        let steps = self.disp.forward(p, h)?.reshape(&[n * m, tf, 2])?;
        let aligned = steps.cumsum(1)?.reshape(&[n, m * tf * 2])?;
        let ego = aligned.rotate_pairs(Arc::clone(rotations), true)?;
        let tiled = tile_pairs(positions, m * tf);
        let mu = ego.add(z_aligned.tape().constant(tiled))?;
        let sigma = self.log_sigma.forward(p, h)?.exp()?.clamp_min(SIGMA_MIN)?;
        Ok(GmmVars { logits, rho, mu, sigma })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        rotations: &Arc<Vec<[f64; 4]>>,
        positions: &Tensor,
    ) -> Result<GmmVars<'t>> {
        let aligned = self.transform_feature(p, z, rotations)?;
        self.decode(p, aligned, rotations, positions)
    }
}

/// Repeats each row's `(x, y)` pair `times` times: `[n, 2] → [n, 2·times]`.
pub fn tile_pairs(pairs: &Tensor, times: usize) -> Tensor {
    let n = pairs.shape()[0];
    let d = pairs.data();
    let data = (0..n)
        .flat_map(|i| (0..times).flat_map(move |_| [d[2 * i], d[2 * i + 1]]))
        .collect();
    Tensor::new(vec![n, 2 * times], data).expect("tiled shape matches")
}

/// Mixture density of a `T_f` trajectory under a diagonal-Gaussian mixture,
/// evaluated in log space.
pub fn gmm_log_density(pred: &Prediction, u: &[Point]) -> Result<f64> {
    let m = pred.rho.len();
    if pred.mu.len() != m || pred.sigma.len() != m || pred.mu.iter().any(|x| x.len() != u.len()) {
        return Err(Error::Contract("prediction and trajectory shapes disagree".into()));
    }
    let terms: Vec<f64> = (0..m)
        .map(|k| {
            let mut lp = pred.rho[k].ln();
            for (t, ut) in u.iter().enumerate() {
                for a in 0..2 {
                    let s = pred.sigma[k][t][a];
                    let e = (ut[a] - pred.mu[k][t][a]) / s;
                    lp += -0.5 * e * e - s.ln() - 0.5 * (2.0 * PI).ln();
                }
            }
            lp
        })
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Ok(top);
    }
    Ok(top + terms.iter().map(|x| (x - top).exp()).sum::<f64>().ln())
}

pub fn gmm_density(pred: &Prediction, u: &[Point]) -> Result<f64> {
    Ok(gmm_log_density(pred, u)?.exp())
}

/// Mixture NLL of the ground truth `y` (`[n, T_f·2]`), averaged over agents:
/// `½ log 2 + log b − mean_i log Σ_m ρ_m exp(−SSE_m / (2b²))`. With
/// `literal` the exponent is `−SSE_m / 2`. `b` is a scalar on the tape.
pub fn traj_nll<'t>(
    logits: Var<'t>,
    mu: Var<'t>,
    y: &Tensor,
    b: Var<'t>,
    literal: bool,
) -> Result<Var<'t>> {
    let tape = logits.tape();
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    let per = y.shape().get(1).copied().unwrap_or(0);
    if n == 0 || y.shape() != [n, per] || mu.shape() != [n, m * per] {
        return Err(TensorError::Dim {
            op: "traj_nll",
            lhs: mu.shape(),
            rhs: y.shape().to_vec(),
        }
        .into());
    }
    let lse = logits.logsumexp(1)?.reshape(&[n, 1])?;
    let ones = tape.constant(Tensor::filled(&[1, m], 1.0));
    let log_rho = logits.sub(lse.matmul(ones)?)?;
    let target = tape.constant(tile_rows(y, m));
    let sse = mu
        .sub(target)?
        .square()?
        .reshape(&[n, m, per])?
        .sum_axis(2)?;
    let expo = if literal {
        sse.scale(0.5)?
    } else {
        let inv = tape
            .constant(Tensor::scalar(1.0))
            .div(b.square()?.scale(2.0)?)?;
        sse.scale_by(inv)?
    };
    let ll = log_rho.sub(expo)?.logsumexp(1)?;
    let norm = b.ln()?.add_scalar(0.5 * LN_2)?;
    Ok(ll.mean()?.neg()?.add(norm)?)
}

/// Repeats each row `times` times along the columns: `[n, c] → [n, c·times]`.
pub fn tile_rows(x: &Tensor, times: usize) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let data = (0..n)
        .flat_map(|i| (0..times).flat_map(move |_| d[i * c..(i + 1) * c].iter().copied()))
        .collect();
    Tensor::new(vec![n, c * times], data).expect("tiled shape matches")
}

/// `L_traj + λ_aux · mean(aux) + λ_cl · L_cl`.
pub fn total_loss<'t>(main: Var<'t>, aux: &[Var<'t>], cl: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    let mut total = main;
    if !aux.is_empty() {
        let mut s = aux[0];
        for a in &aux[1..] {
            s = s.add(*a)?;
        }
        total = total.add(s.scale(cfg.lambda_aux / aux.len() as f64)?)?;
    }
    Ok(total.add(cl.scale(cfg.lambda_cl)?)?)
}

#[cfg(test)]
mod tests;
