use crate::config::{Config, LossConfig};
use crate::error::Result;
use crate::guidance::GuidanceConfig;
use crate::model::{Batch, Model};
use crate::par::{self, Exec};
use crate::tensor::{ParamSet, Tape};

/// Perturbation used by the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences of a loss `L` carry roundoff near `ε·|L|/h`, about
/// 1e-9 for the losses seen here, so derivatives much smaller than this floor
/// cannot be resolved in relative terms.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst disagreement within one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// Analytic and numeric values at the worst scalar.
    pub worst_pair: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst: String,
    pub scalars: usize,
    /// Analytic and numeric derivative of the loss in the NLL scale `b`.
    pub b_analytic: f64,
    pub b_numeric: f64,
    /// `dL/db` minus its data-independent part `(1 + λ_aux) / b` from the
    /// normalizer; zero exactly when `b` never enters the exponent.
    pub b_data_grad: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Tiny configuration for full-loss gradient checks: two agents, an 8×8
/// grid, and `d_s = 8`.
pub fn gradcheck_config() -> Config {
    let mut c = Config::default();
    c.data.t_future = 4;
    c.data.grid_h = 8;
    c.data.grid_w = 8;
    let m = &mut c.train.model;
    m.d_s = 8;
    m.d_pe = 4;
    m.d_interact = 4;
    m.d_v = 4;
    m.d_w = 8;
    m.hidden = 8;
    m.heads = 2;
    m.offsets = 2;
    m.modes = 3;
    m.n_blocks = 2;
    c
}

fn loss_value(model: &Model, params: &ParamSet, batch: &Batch, loss: &LossConfig, g: &GuidanceConfig, step: usize) -> Result<f64> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    Ok(model.loss(&p, batch, step, loss, g)?.1.total.item())
}

/// Compares the analytic gradient of the full loss with central differences
/// for every parameter scalar.
pub fn grad_check(
    model: &Model,
    batch: &Batch,
    loss: &LossConfig,
    guidance: &GuidanceConfig,
    step: usize,
    tolerance: f64,
    exec: Exec,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let (_, out) = model.loss(&p, batch, step, loss, guidance)?;
    let grads = tape.backward(out.total)?;
    let b_analytic = grads.get_or_zeros(out.b)[0];
    let mut analytic = model.params.clone();
    analytic.zero_grad();
    analytic.accumulate(&p, &grads);

    let ids: Vec<_> = model.params.ids().collect();
    let coords: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .flat_map(|(slot, &id)| (0..model.params.get(id).len()).map(move |j| (slot, j)))
        .collect();
    let numeric = par::try_map_range(exec, coords.len(), |c| -> Result<f64> {
        let (slot, j) = coords[c];
        let id = ids[slot];
        let mut shifted = model.params.clone();
        let base = model.params.get(id).data()[j];
        shifted.value_mut(id)[j] = base + FD_STEP;
        let up = loss_value(model, &shifted, batch, loss, guidance, step)?;
        shifted.value_mut(id)[j] = base - FD_STEP;
        let down = loss_value(model, &shifted, batch, loss, guidance, step)?;
        Ok((up - down) / (2.0 * FD_STEP))
    })?;

    let mut checks: Vec<ParamCheck> = ids
        .iter()
        .map(|&id| ParamCheck {
            name: model.params.name(id).to_string(),
            numel: model.params.get(id).len(),
            max_rel_err: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
            worst_pair: (0.0, 0.0),
        })
        .collect();
    for (&(slot, j), &n) in coords.iter().zip(&numeric) {
        let a = analytic.grad(ids[slot])[j];
        let c = &mut checks[slot];
        let e = rel_err(a, n);
        if e > c.max_rel_err {
            c.max_rel_err = e;
            c.worst_pair = (a, n);
        }
        c.max_abs_analytic = c.max_abs_analytic.max(a.abs());
        c.max_abs_numeric = c.max_abs_numeric.max(n.abs());
    }
    let (max_rel_err, worst) = checks
        .iter()
        .fold((0.0f64, String::new()), |(m, w), c| {
            if c.max_rel_err > m {
                (c.max_rel_err, c.name.clone())
            } else {
                (m, w)
            }
        });

    let b_numeric = {
        let mut up = loss.clone();
        up.b += FD_STEP;
        let mut down = loss.clone();
        down.b -= FD_STEP;
        (loss_value(model, &model.params, batch, &up, guidance, step)?
            - loss_value(model, &model.params, batch, &down, guidance, step)?)
            / (2.0 * FD_STEP)
    };
    let n_aux = if model.blocks.is_empty() { 0.0 } else { loss.lambda_aux };
    let b_data_grad = b_analytic - (1.0 + n_aux) / loss.b;

    Ok(GradCheckReport {
        params: checks,
        max_rel_err,
        worst,
        scalars: coords.len(),
        b_analytic,
        b_numeric,
        b_data_grad,
        tolerance,
    })
}

/// Grad check on the tiny configuration using scene `scene_id` of a
/// two-agent dataset drawn with `seed`.
pub fn default_grad_check(cfg: &Config, seed: u64, scene_id: u64, tolerance: f64, exec: Exec) -> Result<GradCheckReport> {
    let scene = crate::scene::generate_scene(seed, scene_id, 2, &cfg.data)?;
    let batch = Batch::new(&[&scene])?;
    let model = Model::new(&cfg.train, &cfg.data)?;
    grad_check(&model, &batch, &cfg.train.loss, &cfg.train.guidance, 0, tolerance, exec)
}

/// Scalar loss of `model` on `batch`, for callers that need plain values.
pub fn eval_loss(model: &Model, batch: &Batch, loss: &LossConfig, guidance: &GuidanceConfig, step: usize) -> Result<f64> {
    loss_value(model, &model.params, batch, loss, guidance, step)
}
