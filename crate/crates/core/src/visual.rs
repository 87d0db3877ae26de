//! Deformable cross-attention from agents into the composite BEV grid,
//! with reference points refined block by block by auxiliary decoders.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::decoder::{argmax, Decoder, GmmVars};
use crate::error::{Error, Result};
use crate::scene::{world_to_grid, Point};
use crate::tensor::{Bound, Linear, ParamSet, Tensor, Var};

/// Composite `h × w × d` grid of one scene and the meters it spans per side.
#[derive(Debug, Clone)]
pub struct SceneGrid {
    pub grid: Tensor,
    pub extent: f64,
}

impl SceneGrid {
    pub fn to_grid(&self, p: Point) -> Point {
        let s = self.grid.shape();
        world_to_grid(p, self.extent, s[0], s[1])
    }
}

#[derive(Debug, Clone)]
pub struct Deformable {
    pub heads: usize,
    pub offsets: usize,
    pub t_future: usize,
    /// Grid channels.
    pub d_grid: usize,
    /// `d_s → H·T_f·O·2` sampling offsets in grid cells; starts at zero.
    pub offset_net: Linear,
    /// `d_s → H·T_f·O` attention logits; starts at zero.
    pub weight_net: Linear,
    /// Per head `d_grid → d_v`.
    pub value_proj: Vec<Linear>,
    /// Per head `d_v → d_s`.
    pub out_proj: Vec<Linear>,
}

pub struct DeformableDims {
    pub d_s: usize,
    pub d_v: usize,
    pub d_grid: usize,
    pub heads: usize,
    pub offsets: usize,
    pub t_future: usize,
}

impl Deformable {
    pub fn new(params: &mut ParamSet, name: &str, dims: &DeformableDims, rng: &mut impl Rng) -> Self {
        let DeformableDims {
            d_s,
            d_v,
            d_grid,
            heads,
            offsets,
            t_future,
        } = *dims;
        let samples = heads * t_future * offsets;
        let n = |s: &str| format!("{name}.{s}");
        Self {
            heads,
            offsets,
            t_future,
            d_grid,
            offset_net: Linear::zeros(params, &n("offset_net"), d_s, samples * 2),
            weight_net: Linear::zeros(params, &n("weight_net"), d_s, samples),
            value_proj: (0..heads)
                .map(|h| Linear::projection(params, &n(&format!("value_proj.{h}")), d_grid, d_v, rng))
                .collect(),
            out_proj: (0..heads)
                .map(|h| Linear::projection(params, &n(&format!("out_proj.{h}")), d_v, d_s, rng))
                .collect(),
        }
    }

    /// Samples per agent; independent of the grid size.
    pub fn samples_per_agent(&self) -> usize {
        self.heads * self.t_future * self.offsets
    }

    /// `z + Σ_h W_h Σ_{t,o} α_hto W'_h B(u_t + Δu_hto)` for every agent.
    /// `reference` is `[n, T_f·2]` in ego meters; agents in `scenes[s]`
    /// sample `grids[s]`.
    pub fn attend<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        reference: Var<'t>,
        grids: &[SceneGrid],
        scenes: &[Range<usize>],
    ) -> Result<Var<'t>> {
        let n = z.shape()[0];
        let (hh, tf, oo, d) = (self.heads, self.t_future, self.offsets, self.d_grid);
        let per = self.samples_per_agent();
        if reference.shape() != [n, tf * 2] {
            return Err(Error::Contract(format!(
                "deformable attention needs {tf} reference points for each of {n} agents, got {:?}",
                reference.shape()
            )));
        }
        if grids.len() != scenes.len() || scenes.last().map_or(0, |r| r.end) != n {
            return Err(Error::Contract("scene ranges do not cover the agents".into()));
        }
        let tape = z.tape();
        let offsets = self.offset_net.forward(p, z)?.reshape(&[n * per, 2])?;

        // Row of the reference point behind each (agent, head, step, offset).
        let expand = |len: usize| -> Vec<usize> {
            let mut rows = Vec::with_capacity(len * per);
            for i in 0..len {
                for _ in 0..hh {
                    for t in 0..tf {
                        rows.extend(std::iter::repeat_n(i * tf + t, oo));
                    }
                }
            }
            rows
        };
        let mut sampled = Vec::with_capacity(scenes.len());
        for (s, range) in scenes.iter().enumerate() {
            if range.is_empty() {
                continue;
            }
            let g = &grids[s];
            let shape = g.grid.shape();
            if shape.len() != 3 || shape[2] != d {
                return Err(Error::Contract(format!("grid {s} has shape {shape:?}, expected depth {d}")));
            }
            let (gh, gw) = ((shape[0] - 1) as f64, (shape[1] - 1) as f64);
            let to_grid_scale = tape.constant(Tensor::vector(vec![gw / g.extent, gh / g.extent]));
            let to_grid_shift = tape.constant(Tensor::vector(vec![gw / 2.0, gh / 2.0]));
            let anchors = reference
                .slice(0, range.start, range.len())?
                .reshape(&[range.len() * tf, 2])?
                .mul_row(to_grid_scale)?
                .add_row(to_grid_shift)?
                .gather_rows(&expand(range.len()))?;
            let pts = offsets
                .slice(0, range.start * per, range.len() * per)?
                .add(anchors)?;
            let grid = tape.constant(g.grid.clone());
            sampled.push(grid.bilinear_sample(pts)?);
        }
        let samples = if sampled.len() == 1 {
            sampled[0]
        } else {
            Var::concat(&sampled, 0)?
        };
        let samples = samples.reshape(&[n * hh, tf * oo, d])?;
        let alpha = self
            .weight_net
            .forward(p, z)?
            .reshape(&[n * hh, tf * oo])?
            .softmax(1)?
            .reshape(&[n * hh, 1, tf * oo])?;
        let pooled = alpha.bmm(samples, false)?.reshape(&[n, hh * d])?;

        let mut out = z;
        for h in 0..hh {
            let head = pooled.slice(1, h * d, d)?;
            let v = self.value_proj[h].forward(p, head)?;
            out = out.add(self.out_proj[h].forward(p, v)?)?;
        }
        Ok(out)
    }
}

/// One refinement block: an auxiliary decoder proposes reference
/// trajectories, then deformable attention updates the embedding.
#[derive(Debug, Clone)]
pub struct RefineBlock {
    pub aux: Decoder,
    pub attend: Deformable,
}

/// Geometry shared by every block of a forward pass.
pub struct BlockInputs<'a> {
    pub rotations: &'a Arc<Vec<[f64; 4]>>,
    pub positions: &'a Tensor,
    pub grids: &'a [SceneGrid],
    pub scenes: &'a [Range<usize>],
}

/// Reference trajectory of each agent (`[n, T_f·2]`, ego meters): the means
/// of its most probable mode, lowest index on ties. The mode choice is
/// piecewise constant; gradients flow through the chosen means.
pub fn predict_reference<'t>(
    p: &Bound<'t>,
    aux: &Decoder,
    z: Var<'t>,
    inputs: &BlockInputs<'_>,
) -> Result<(Var<'t>, GmmVars<'t>)> {
    let gmm = aux.forward(p, z, inputs.rotations, inputs.positions)?;
    let (m, tf) = (aux.modes, aux.t_future);
    let n = z.shape()[0];
    let rho = gmm.rho.value();
    let rows: Vec<usize> = (0..n)
        .map(|i| i * m + argmax(&rho.data()[i * m..(i + 1) * m]))
        .collect();
    let reference = gmm.mu.reshape(&[n * m, tf * 2])?.gather_rows(&rows)?;
    Ok((reference, gmm))
}

/// Runs every block in order, returning the final embedding and each
/// block's auxiliary mixture.
pub fn refine_blocks<'t>(
    p: &Bound<'t>,
    blocks: &[RefineBlock],
    z: Var<'t>,
    inputs: &BlockInputs<'_>,
) -> Result<(Var<'t>, Vec<GmmVars<'t>>)> {
    let mut z = z;
    let mut aux = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (reference, gmm) = predict_reference(p, &b.aux, z, inputs)?;
        z = b.attend.attend(p, z, reference, inputs.grids, inputs.scenes)?;
        aux.push(gmm);
    }
    Ok((z, aux))
}
