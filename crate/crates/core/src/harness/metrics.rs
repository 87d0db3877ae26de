use std::io::Write;

use crate::error::{config_err, Result};
use crate::model::{Batch, Model};
use crate::par::{self, Exec};
use crate::scene::{AgentType, Point, Prediction, Scene};

/// Final-point error (m) beyond which an agent counts as missed.
pub const MISS_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMetrics {
    pub k: usize,
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub n_agents: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub overall: Vec<KMetrics>,
    /// Types with at least one agent, in declaration order.
    pub per_type: Vec<(AgentType, Vec<KMetrics>)>,
    pub n_agents: usize,
}

pub const METRICS_HEADER: &str = "k,ade,fde,mr,n_agents";

impl MetricReport {
    pub fn get(&self, k: usize) -> Option<&KMetrics> {
        self.overall.iter().find(|m| m.k == k)
    }

    /// Overall rows labeled by `k`, then per-type rows labeled `k:type`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        let row = |out: &mut dyn Write, label: String, m: &KMetrics| {
            writeln!(out, "{label},{:?},{:?},{:?},{}", m.ade, m.fde, m.mr, m.n_agents)
        };
        for m in &self.overall {
            row(out, m.k.to_string(), m)?;
        }
        for (t, ms) in &self.per_type {
            for m in ms {
                row(out, format!("{}:{}", m.k, t.name()), m)?;
            }
        }
        Ok(())
    }
}

/// Indices of the `k` most probable modes; ties go to the lower index.
pub fn top_k_modes(rho: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rho.len()).collect();
    idx.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `(ADE_k, FDE_k)` of one agent: each is minimized over the top-`k` modes
/// independently.
pub fn agent_errors(pred: &Prediction, truth: &[Point], k: usize) -> (f64, f64) {
    let mut ade = f64::INFINITY;
    let mut fde = f64::INFINITY;
    for m in top_k_modes(&pred.rho, k) {
        let mu = &pred.mu[m];
        let mean = mu.iter().zip(truth).map(|(a, b)| dist(*a, *b)).sum::<f64>() / truth.len() as f64;
        ade = ade.min(mean);
        fde = fde.min(dist(mu[mu.len() - 1], truth[truth.len() - 1]));
    }
    (ade, fde)
}

/// One evaluated agent.
#[derive(Debug, Clone)]
pub struct Scored<'a> {
    pub agent_type: AgentType,
    pub prediction: &'a Prediction,
    pub truth: &'a [Point],
}

fn summarize(agents: &[&Scored<'_>], k: usize) -> KMetrics {
    let n = agents.len();
    let (mut ade, mut fde, mut missed) = (0.0, 0.0, 0usize);
    for a in agents {
        let (x, y) = agent_errors(a.prediction, a.truth, k);
        ade += x;
        fde += y;
        missed += usize::from(y > MISS_THRESHOLD);
    }
    let d = n.max(1) as f64;
    KMetrics {
        k,
        ade: ade / d,
        fde: fde / d,
        mr: missed as f64 / d,
        n_agents: n,
    }
}

/// Metrics over scored agents for every requested `k`.
pub fn report(agents: &[Scored<'_>], ks: &[usize], modes: usize) -> Result<MetricReport> {
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > modes) {
        return Err(config_err(format!("k = {bad} is outside 1..={modes}")));
    }
    let all: Vec<&Scored<'_>> = agents.iter().collect();
    let overall = ks.iter().map(|&k| summarize(&all, k)).collect();
    let per_type = AgentType::ALL
        .into_iter()
        .filter_map(|t| {
            let sub: Vec<&Scored<'_>> = agents.iter().filter(|a| a.agent_type == t).collect();
            (!sub.is_empty()).then(|| (t, ks.iter().map(|&k| summarize(&sub, k)).collect()))
        })
        .collect();
    Ok(MetricReport {
        overall,
        per_type,
        n_agents: agents.len(),
    })
}

/// Predictions for every agent of every scene, one vector per scene.
pub fn predict_scenes(model: &Model, scenes: &[Scene], exec: Exec) -> Result<Vec<Vec<Prediction>>> {
    par::try_map_range(exec, scenes.len(), |i| model.predict(&Batch::new(&[&scenes[i]])?))
}

/// Evaluates `model` on `scenes`, one scene per forward pass.
pub fn evaluate(model: &Model, scenes: &[Scene], ks: &[usize]) -> Result<MetricReport> {
    evaluate_with(model, scenes, ks, Exec::default())
}

pub fn evaluate_with(model: &Model, scenes: &[Scene], ks: &[usize], exec: Exec) -> Result<MetricReport> {
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > model.cfg.modes) {
        return Err(config_err(format!("k = {bad} is outside 1..={}", model.cfg.modes)));
    }
    let preds = predict_scenes(model, scenes, exec)?;
    let scored: Vec<Scored<'_>> = scenes
        .iter()
        .zip(&preds)
        .flat_map(|(s, ps)| {
            s.agents.iter().zip(ps).map(|(a, p)| Scored {
                agent_type: a.agent_type,
                prediction: p,
                truth: &a.future,
            })
        })
        .collect();
    report(&scored, ks, model.cfg.modes)
}
