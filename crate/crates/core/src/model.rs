//! The full predictor: state encoder, refinement blocks over the BEV grid,
//! caption guidance, and the main mixture decoder.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, ModelConfig, TrainConfig};
use crate::decoder::{make_rotation, total_loss, traj_nll, Decoder, GmmVars};
use crate::encoder::{displacements, scene_mask, EncoderDims, StateEncoder};
use crate::error::{Error, Result};
use crate::guidance::{
    caption_index, contrast_groups, guidance_loss, mine_batch, GuidanceConfig, Mining, SentencePooler,
    WordTable,
};
use crate::scene::{compose_bev, Maneuver, Prediction, Scene, SynthConfig, BEV_IMAGE_CHANNELS, BEV_MAP_CHANNELS};
use crate::tensor::{Bound, ParamSet, Tape, Tensor, Var};
use crate::visual::{refine_blocks, BlockInputs, Deformable, DeformableDims, RefineBlock, SceneGrid};

/// Agents of one or more scenes, stacked scene by scene.
#[derive(Debug, Clone)]
pub struct Batch {
    pub scene_ids: Vec<u64>,
    /// Agent rows of each scene.
    pub scenes: Vec<Range<usize>>,
    pub scene_of: Vec<usize>,
    pub types: Vec<usize>,
    pub maneuvers: Vec<Maneuver>,
    /// `[n·T, 2]` displacements.
    pub disp: Tensor,
    /// `[n, 2]` positions at the last observed step.
    pub positions: Tensor,
    pub rotations: Arc<Vec<[f64; 4]>>,
    /// `[n, T_f·2]` ground-truth futures.
    pub futures: Tensor,
    pub grids: Vec<SceneGrid>,
    pub captions: Vec<Vec<String>>,
    /// Additive logit mask keeping interaction inside each scene.
    pub mask: Tensor,
}

impl Batch {
    pub fn new(scenes: &[&Scene]) -> Result<Self> {
        let Some(first) = scenes.first() else {
            return Err(Error::Contract("empty batch".into()));
        };
        let t_obs = first.agents[0].observed.len();
        let t_f = first.agents[0].future.len();
        let mut b = Batch {
            scene_ids: Vec::new(),
            scenes: Vec::new(),
            scene_of: Vec::new(),
            types: Vec::new(),
            maneuvers: Vec::new(),
            disp: Tensor::scalar(0.0),
            positions: Tensor::scalar(0.0),
            rotations: Arc::new(Vec::new()),
            futures: Tensor::scalar(0.0),
            grids: Vec::new(),
            captions: Vec::new(),
            mask: Tensor::scalar(0.0),
        };
        let (mut disp, mut pos, mut rot, mut fut) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (s, scene) in scenes.iter().enumerate() {
            scene.validate()?;
            let start = b.types.len();
            for a in &scene.agents {
                if a.observed.len() != t_obs || a.future.len() != t_f {
                    return Err(Error::Contract("scenes in a batch disagree on track lengths".into()));
                }
                disp.extend(displacements(&a.observed).into_iter().flatten());
                pos.extend(a.current());
                rot.push(make_rotation(a.heading)?);
                fut.extend(a.future.iter().flatten());
                b.types.push(a.agent_type.index());
                b.maneuvers.push(a.maneuver);
                b.captions.push(a.captions.clone());
                b.scene_of.push(s);
            }
            b.scenes.push(start..b.types.len());
            b.scene_ids.push(scene.scene_id);
            b.grids.push(SceneGrid {
                grid: compose_bev(scene)?,
                extent: scene.grid_extent,
            });
        }
        let n = b.types.len();
        b.disp = Tensor::new(vec![n * t_obs, 2], disp)?;
        b.positions = Tensor::new(vec![n, 2], pos)?;
        b.rotations = Arc::new(rot);
        b.futures = Tensor::new(vec![n, t_f * 2], fut)?;
        b.mask = scene_mask(&b.scene_of);
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

/// Intermediate and final outputs of one forward pass.
pub struct Forward<'t> {
    pub z_interact: Var<'t>,
    pub z_scene: Var<'t>,
    pub main: GmmVars<'t>,
    pub aux: Vec<GmmVars<'t>>,
}

/// Loss terms of one step. `cl` is a constant zero when guidance is off.
pub struct LossOutput<'t> {
    pub traj: Var<'t>,
    pub aux: Var<'t>,
    pub cl: Var<'t>,
    pub total: Var<'t>,
    /// The NLL scale `b`, kept on the tape so its gradient can be read.
    pub b: Var<'t>,
    pub mining: Option<Mining>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub t_obs: usize,
    pub t_future: usize,
    pub d_grid: usize,
    pub params: ParamSet,
    pub encoder: StateEncoder,
    pub blocks: Vec<RefineBlock>,
    pub decoder: Decoder,
    pub pooler: SentencePooler,
    pub words: WordTable,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `train.seed`.
    pub fn new(train: &TrainConfig, data: &SynthConfig) -> Result<Self> {
        train.validate()?;
        data.validate()?;
        let m = train.model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut params = ParamSet::new();
        let d_grid = BEV_IMAGE_CHANNELS + BEV_MAP_CHANNELS;
        let encoder = StateEncoder::new(
            &mut params,
            "encoder",
            &EncoderDims {
                t_obs: data.t_obs,
                d_s: m.d_s,
                d_pe: m.d_pe,
                d_interact: m.d_interact,
                hidden: m.hidden,
                temporal_layers: m.temporal_layers,
                position_scale: m.position_scale,
            },
            &mut rng,
        );
        let blocks = (0..m.n_blocks)
            .map(|i| RefineBlock {
                aux: Decoder::new(
                    &mut params,
                    &format!("block.{i}.aux"),
                    m.d_s,
                    m.hidden,
                    m.modes,
                    data.t_future,
                    &mut rng,
                ),
                attend: Deformable::new(
                    &mut params,
                    &format!("block.{i}.attend"),
                    &DeformableDims {
                        d_s: m.d_s,
                        d_v: m.d_v,
                        d_grid,
                        heads: m.heads,
                        offsets: m.offsets,
                        t_future: data.t_future,
                    },
                    &mut rng,
                ),
            })
            .collect();
        let decoder = Decoder::new(&mut params, "decoder", m.d_s, m.hidden, m.modes, data.t_future, &mut rng);
        let pooler = SentencePooler::new(&mut params, "guidance.pool", m.d_w, m.d_s, &mut rng);
        Ok(Self {
            cfg: m.clone(),
            t_obs: data.t_obs,
            t_future: data.t_future,
            d_grid,
            params,
            encoder,
            blocks,
            decoder,
            pooler,
            words: WordTable::new(m.d_w),
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, batch: &Batch) -> Result<Forward<'t>> {
        let tape = p.var(self.encoder.summary).tape();
        let disp = tape.constant(batch.disp.clone());
        let positions = tape.constant(batch.positions.clone());
        let mask = (batch.scenes.len() > 1).then(|| tape.constant(batch.mask.clone()));
        let z_interact = self.encoder.forward(p, disp, &batch.types, positions, mask)?;
        let inputs = BlockInputs {
            rotations: &batch.rotations,
            positions: &batch.positions,
            grids: &batch.grids,
            scenes: &batch.scenes,
        };
        let (z_scene, aux) = refine_blocks(p, &self.blocks, z_interact, &inputs)?;
        let main = self.decoder.forward(p, z_scene, &batch.rotations, &batch.positions)?;
        Ok(Forward {
            z_interact,
            z_scene,
            main,
            aux,
        })
    }

    /// All loss terms for `batch` at training step `step` (which selects the
    /// captions).
    pub fn loss<'t>(
        &self,
        p: &Bound<'t>,
        batch: &Batch,
        step: usize,
        loss_cfg: &LossConfig,
        guidance: &GuidanceConfig,
    ) -> Result<(Forward<'t>, LossOutput<'t>)> {
        let fwd = self.forward(p, batch)?;
        let tape = fwd.z_scene.tape();
        let b = tape.variable(Tensor::scalar(loss_cfg.b));
        let nll = |g: &GmmVars<'t>| traj_nll(g.logits, g.mu, &batch.futures, b, loss_cfg.literal_nll);
        let traj = nll(&fwd.main)?;
        let aux_terms = fwd.aux.iter().map(nll).collect::<Result<Vec<_>>>()?;
        let aux = match aux_terms.split_first() {
            None => tape.constant(Tensor::scalar(0.0)),
            Some((first, rest)) => {
                let mut s = *first;
                for a in rest {
                    s = s.add(*a)?;
                }
                s.scale(1.0 / aux_terms.len() as f64)?
            }
        };
        let (cl, mining) = if loss_cfg.lambda_cl > 0.0 {
            let captions: Vec<&str> = batch
                .captions
                .iter()
                .enumerate()
                .map(|(i, c)| c[caption_index(step, i) % c.len()].as_str())
                .collect();
            let sentences = self.pooler.encode(p, &self.words, &captions)?;
            let groups = contrast_groups(&batch.scenes, guidance.cross_scene);
            let mining = mine_batch(&sentences.value(), &groups, guidance)?;
            let cl = guidance_loss(fwd.z_scene, sentences, &groups, &mining, guidance)?;
            (cl, Some(mining))
        } else {
            (tape.constant(Tensor::scalar(0.0)), None)
        };
        let total = total_loss(traj, &aux_terms, cl, loss_cfg)?;
        Ok((
            fwd,
            LossOutput {
                traj,
                aux,
                cl,
                total,
                b,
                mining,
            },
        ))
    }

    /// Mixture predictions for every agent of `batch`, in ego coordinates.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let fwd = self.forward(&p, batch)?;
        Ok(fwd.main.predictions(self.cfg.modes, self.t_future))
    }

    /// Scene embeddings `z_scene` of every agent, row per agent.
    pub fn scene_embeddings(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        Ok(self.forward(&p, batch)?.z_scene.value())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.params.write_checkpoint(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Loads parameters saved by [`Model::save`]; every name and shape must
    /// match this model.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = ParamSet::read_checkpoint(BufReader::new(File::open(path)?))?;
        if loaded.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len(),
                self.params.len()
            )));
        }
        self.params.load_from(&loaded)?;
        Ok(())
    }
}
