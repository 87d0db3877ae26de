//! Per-agent state encoding, temporal attention with a summary token, and
//! agent-agent interaction in the shared ego frame.

use rand::Rng;

use crate::scene::{AgentType, Point};
use crate::tensor::{Bound, Linear, Mlp, ParamId, ParamSet, Result, Tensor, TensorError, Var};

/// Large negative logit that removes a key from a softmax.
pub const MASKED: f64 = -1e30;

/// Per-step displacements of an observed track; the first one is zero.
pub fn displacements(observed: &[Point]) -> Vec<Point> {
    let mut out = Vec::with_capacity(observed.len());
    for (t, p) in observed.iter().enumerate() {
        let prev = if t == 0 { *p } else { observed[t - 1] };
        out.push([p[0] - prev[0], p[1] - prev[1]]);
    }
    out
}

/// One single-head scaled dot-product attention layer with residual.
#[derive(Debug, Clone)]
pub struct AttnLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl AttnLayer {
    fn new(params: &mut ParamSet, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::projection(params, &format!("{name}.wq"), d, d, rng),
            wk: Linear::projection(params, &format!("{name}.wk"), d, d, rng),
            wv: Linear::projection(params, &format!("{name}.wv"), d, d, rng),
        }
    }

    /// Projects a `[n, l, d]` token block row-wise.
    fn project<'t>(p: &Bound<'t>, lin: &Linear, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let flat = x.reshape(&[s[0] * s[1], s[2]])?;
        lin.forward(p, flat)?.reshape(&[s[0], s[1], lin.out])
    }

    /// Tokens `x` (`[n, l, d]`) attended by queries `q_src` (`[n, m, d]`);
    /// returns `q_src + attention`.
    fn forward<'t>(&self, p: &Bound<'t>, q_src: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let d = x.shape()[2];
        let q = Self::project(p, &self.wq, q_src)?;
        let k = Self::project(p, &self.wk, x)?;
        let v = Self::project(p, &self.wv, x)?;
        let att = q.bmm(k, true)?.scale(1.0 / (d as f64).sqrt())?.softmax(2)?;
        q_src.add(att.bmm(v, false)?)
    }
}

/// Cross-attention among agents: `z + W_O · softmax(QKᵀ/√d + mask) · V`.
#[derive(Debug, Clone)]
pub struct Interaction {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Debug, Clone)]
pub struct StateEncoder {
    pub d_s: usize,
    pub t_obs: usize,
    pub position_scale: f64,
    pub f_geometric: Mlp,
    /// `|types| × d_s` embedding table.
    pub f_type: ParamId,
    pub f_pe: Mlp,
    /// `(T+1) × d_pe` learned positional rows; the last row is the summary
    /// slot.
    pub pos_table: ParamId,
    /// `1 × d_s` learnable summary token.
    pub summary: ParamId,
    pub temporal: Vec<AttnLayer>,
    pub f_loc: Mlp,
    pub interaction: Interaction,
}

pub struct EncoderDims {
    pub t_obs: usize,
    pub d_s: usize,
    pub d_pe: usize,
    pub d_interact: usize,
    pub hidden: usize,
    pub temporal_layers: usize,
    pub position_scale: f64,
}

impl StateEncoder {
    pub fn new(params: &mut ParamSet, name: &str, dims: &EncoderDims, rng: &mut impl Rng) -> Self {
        let EncoderDims {
            t_obs,
            d_s,
            d_pe,
            d_interact,
            hidden,
            temporal_layers,
            position_scale,
        } = *dims;
        let n = |s: &str| format!("{name}.{s}");
        let f_geometric = Mlp::new(params, &n("f_geometric"), &[2, hidden, d_s], rng);
        let f_type = params.insert_normal(n("f_type"), &[AgentType::ALL.len(), d_s], 0.5, rng);
        let f_pe = Mlp::new(params, &n("f_pe"), &[d_pe, hidden, d_s], rng);
        let pos_table = params.insert_normal(n("pos_table"), &[t_obs + 1, d_pe], 1.0, rng);
        let summary = params.insert_normal(n("summary"), &[1, d_s], 0.5, rng);
        let temporal = (0..temporal_layers)
            .map(|l| AttnLayer::new(params, &n(&format!("temporal.{l}")), d_s, rng))
            .collect();
        let f_loc = Mlp::new(params, &n("f_loc"), &[2, hidden, d_s], rng);
        let interaction = Interaction {
            wq: Linear::projection(params, &n("interact.wq"), d_s, d_interact, rng),
            wk: Linear::projection(params, &n("interact.wk"), d_s, d_interact, rng),
            wv: Linear::projection(params, &n("interact.wv"), d_s, d_interact, rng),
            wo: Linear::projection(params, &n("interact.wo"), d_interact, d_s, rng),
        };
        Self {
            d_s,
            t_obs,
            position_scale,
            f_geometric,
            f_type,
            f_pe,
            pos_table,
            summary,
            temporal,
            f_loc,
            interaction,
        }
    }

    /// State embeddings `s_i^t` for `n` agents as an `[n·T, d_s]` block, agent
    /// major. `disp` is the matching `[n·T, 2]` block of displacements.
    pub fn encode_states<'t>(&self, p: &Bound<'t>, disp: Var<'t>, types: &[usize]) -> Result<Var<'t>> {
        let t_obs = self.t_obs;
        let rows = disp.shape()[0];
        if rows != types.len() * t_obs {
            return Err(TensorError::Dim {
                op: "encode_states",
                lhs: disp.shape(),
                rhs: vec![types.len(), t_obs],
            });
        }
        if let Some(&bad) = types.iter().find(|&&t| t >= AgentType::ALL.len()) {
            return Err(TensorError::Contract(format!("unknown agent type index {bad}")));
        }
        let geo = self.f_geometric.forward(p, disp)?;
        let type_rows: Vec<usize> = types.iter().flat_map(|&t| std::iter::repeat_n(t, t_obs)).collect();
        let ty = p[self.f_type].gather_rows(&type_rows)?;
        let pe_all = self.f_pe.forward(p, p[self.pos_table])?;
        let step_rows: Vec<usize> = (0..rows).map(|r| r % t_obs).collect();
        let pe = pe_all.gather_rows(&step_rows)?;
        geo.add(ty)?.add(pe)
    }

    /// Summary-slot output `s'_i` (`[n, d_s]`) of the temporal attention
    /// stack over each agent's states plus the summary token.
    pub fn temporal_encode<'t>(&self, p: &Bound<'t>, states: Var<'t>, n: usize) -> Result<Var<'t>> {
        let (t_obs, d) = (self.t_obs, self.d_s);
        if n == 0 || states.shape() != [n * t_obs, d] {
            return Err(TensorError::Dim {
                op: "temporal_encode",
                lhs: states.shape(),
                rhs: vec![n * t_obs, d],
            });
        }
        let pe_all = self.f_pe.forward(p, p[self.pos_table])?;
        let slot = p[self.summary].add(pe_all.slice(0, t_obs, 1)?)?;
        let slot = slot.gather_rows(&vec![0; n])?.reshape(&[n, 1, d])?;
        let mut tokens = Var::concat(&[states.reshape(&[n, t_obs, d])?, slot], 1)?;
        let last = self.temporal.len().saturating_sub(1);
        for (l, layer) in self.temporal.iter().enumerate() {
            if l < last {
                tokens = layer.forward(p, tokens, tokens)?;
            } else {
                let query = tokens.slice(1, t_obs, 1)?;
                return layer.forward(p, query, tokens)?.reshape(&[n, d]);
            }
        }
        tokens.slice(1, t_obs, 1)?.reshape(&[n, d])
    }

    /// `z_i = s'_i + f_loc(p_i^T)` followed by one round of masked
    /// cross-attention among agents with residual. `mask` is an additive
    /// `[n, n]` logit mask (use [`MASKED`] to block a pair).
    pub fn interact<'t>(
        &self,
        p: &Bound<'t>,
        s: Var<'t>,
        positions: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let n = s.shape()[0];
        if positions.shape() != [n, 2] {
            return Err(TensorError::Dim {
                op: "interact",
                lhs: s.shape(),
                rhs: positions.shape(),
            });
        }
        let loc = self.f_loc.forward(p, positions.scale(1.0 / self.position_scale)?)?;
        let z = s.add(loc)?;
        let it = &self.interaction;
        let q = it.wq.forward(p, z)?;
        let k = it.wk.forward(p, z)?;
        let v = it.wv.forward(p, z)?;
        let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (it.wq.out as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let mixed = scores.softmax(1)?.matmul(v)?;
        z.add(it.wo.forward(p, mixed)?)
    }

    /// Full encoder: states, temporal summary, interaction.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        disp: Var<'t>,
        types: &[usize],
        positions: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let states = self.encode_states(p, disp, types)?;
        let s = self.temporal_encode(p, states, types.len())?;
        self.interact(p, s, positions, mask)
    }
}

/// Block-diagonal additive mask letting agents attend only within their own
/// scene.
pub fn scene_mask(scene_of: &[usize]) -> Tensor {
    let n = scene_of.len();
    let data = (0..n * n)
        .map(|k| if scene_of[k / n] == scene_of[k % n] { 0.0 } else { MASKED })
        .collect();
    Tensor::new(vec![n, n], data).expect("mask shape matches")
}
