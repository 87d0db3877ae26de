use std::io::Write;

use super::optim::Optim;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::guidance::Mining;
use crate::model::{Batch, Model};
use crate::scene::{Scene, SynthConfig};
use crate::tensor::{Tape, TensorError, Var};

/// Loss components logged after every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub l_traj: f64,
    pub l_aux: f64,
    pub l_cl: f64,
    pub total: f64,
}

pub const CURVE_HEADER: &str = "step,l_traj,l_aux,l_cl,total";

pub fn write_curve(out: &mut impl Write, rows: &[CurveRow]) -> Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:?},{:?},{:?},{:?}", r.step, r.l_traj, r.l_aux, r.l_cl, r.total)?;
    }
    Ok(())
}

/// What an observer sees after each optimizer step.
pub struct StepInfo<'a> {
    pub row: CurveRow,
    pub batch: &'a Batch,
    pub mining: Option<&'a Mining>,
}

/// Training scenes: those outside the validation split.
pub fn train_split(dataset: &[Scene]) -> Vec<&Scene> {
    dataset.iter().filter(|s| !s.is_validation()).collect()
}

/// Scenes used at `step`: a fixed cyclic walk over the training split.
pub fn batch_indices(step: usize, batch_scenes: usize, n_train: usize) -> Vec<usize> {
    let b = batch_scenes.min(n_train);
    (0..b).map(|j| (step * b + j) % n_train).collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurveRow>,
}

/// Trains a freshly initialized model on the training split of `dataset`.
pub fn train(dataset: &[Scene], data: &SynthConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(dataset, data, cfg, &mut |_| {})
}

pub fn train_observed(
    dataset: &[Scene],
    data: &SynthConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg, data)?;
    let curve = train_model(&mut model, dataset, cfg, observer)?;
    Ok(TrainOutcome { model, curve })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn non_finite(step: usize, term: &'static str) -> Error {
    Error::NonFinite { step, term }
}

fn checked(v: Var<'_>, step: usize, term: &'static str) -> Result<f64> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(non_finite(step, term))
    }
}

/// Continues training `model` for `cfg.steps` steps.
pub fn train_model(
    model: &mut Model,
    dataset: &[Scene],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    let scenes = train_split(dataset);
    if scenes.is_empty() {
        return Err(Error::Config("dataset has no training scenes".into()));
    }
    let b = cfg.batch_scenes.min(scenes.len());
    let period = scenes.len() / gcd(scenes.len(), b);
    let batches = (0..period.min(cfg.steps.max(1)))
        .map(|s| {
            let idx = batch_indices(s, cfg.batch_scenes, scenes.len());
            Batch::new(&idx.iter().map(|&i| scenes[i]).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut optim = Optim::new(cfg, &model.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = &batches[step % batches.len()];
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let (_, out) = model
            .loss(&p, batch, step, &cfg.loss, &cfg.guidance)
            .map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => non_finite(step, "forward"),
                other => other,
            })?;
        let row = CurveRow {
            step,
            l_traj: checked(out.traj, step, "l_traj")?,
            l_aux: checked(out.aux, step, "l_aux")?,
            l_cl: checked(out.cl, step, "l_cl")?,
            total: checked(out.total, step, "total")?,
        };
        let grads = tape.backward(out.total).map_err(|_| non_finite(step, "gradient"))?;
        model.params.zero_grad();
        model.params.accumulate(&p, &grads);
        if model.params.ids().any(|id| model.params.grad(id).iter().any(|g| !g.is_finite())) {
            return Err(non_finite(step, "gradient"));
        }
        drop(p);
        optim.step(&mut model.params);
        curve.push(row);
        observer(&StepInfo {
            row,
            batch,
            mining: out.mining.as_ref(),
        });
    }
    Ok(curve)
}
