//! Caption-driven contrastive guidance.
//!
//! Captions are tokenized, embedded with a frozen hash-seeded word table,
//! pooled into sentence embeddings by a learned query, and contrasted against
//! the agents' scene embeddings with false-negative filtering.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::tensor::{attention, Bound, Linear, ParamId, ParamSet, Tape, Tensor, Var};

/// Loss and mining ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Symmetric batch-softmax loss with no mining.
    A,
    /// Default loss plus the mirrored text-to-agent direction.
    B,
    /// No similarity filter before sorting and truncation.
    C,
    /// Filter only; every surviving candidate is kept in index order.
    D,
    /// Filter, ascending sort, truncate to `k`, one-directional loss.
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
            Self::E => "E",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown guidance variant `{s}` (expected A-E)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Candidates at or above this cosine similarity are never negatives.
    pub theta_th: f64,
    /// Maximum negatives per anchor.
    pub k: usize,
    /// Softmax temperature.
    pub tau: f64,
    pub variant: Variant,
    /// Leave the positive pair out of the softmax denominator.
    pub literal_denominator: bool,
    /// Mine negatives across the whole batch instead of within a scene.
    pub cross_scene: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            theta_th: 0.8,
            k: 8,
            tau: 0.1,
            variant: Variant::E,
            literal_denominator: false,
            cross_scene: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err("guidance.tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.theta_th) {
            return Err(config_err("guidance.theta_th must lie in [0, 1]"));
        }
        if self.k == 0 {
            return Err(config_err("guidance.k must be at least 1"));
        }
        Ok(())
    }
}

/// Lowercase word tokens split on whitespace and punctuation.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Frozen token embeddings: each token seeds its own generator through a
/// stable 64-bit FNV-1a hash, so vectors never depend on vocabulary order.
#[derive(Debug, Clone)]
pub struct WordTable {
    dim: usize,
}

impl WordTable {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// `n_tokens × dim` embedding matrix of a caption.
    pub fn embed_caption(&self, caption: &str) -> Result<Tensor> {
        let tokens = tokenize(caption);
        if tokens.is_empty() {
            return Err(Error::Contract(format!("caption `{caption}` has no tokens")));
        }
        let data = tokens.iter().flat_map(|t| self.embed(t)).collect();
        Ok(Tensor::new(vec![tokens.len(), self.dim], data)?)
    }
}

/// Learned-query attention pooling followed by a projection to the agent
/// embedding width.
#[derive(Debug, Clone)]
pub struct SentencePooler {
    pub query: ParamId,
    pub key: Linear,
    pub out: Linear,
    pub d_w: usize,
}

impl SentencePooler {
    pub fn new(params: &mut ParamSet, name: &str, d_w: usize, d_s: usize, rng: &mut impl Rng) -> Self {
        let query = params.insert_normal(format!("{name}.query"), &[1, d_w], 1.0 / (d_w as f64).sqrt(), rng);
        let key = Linear::projection(params, &format!("{name}.key"), d_w, d_w, rng);
        let out = Linear::new(params, &format!("{name}.out"), d_w, d_s, rng);
        Self { query, key, out, d_w }
    }

    /// Pooled `1 × d_w` sentence vector before projection.
    pub fn pool_words<'t>(&self, p: &Bound<'t>, words: Var<'t>) -> Result<Var<'t>> {
        let k = self.key.forward(p, words)?;
        Ok(attention(p[self.query], k, words, 1.0 / (self.d_w as f64).sqrt())?)
    }

    /// Sentence embeddings (`n × d_s`) for a list of captions. Repeated
    /// captions are pooled once.
    pub fn encode<'t>(&self, p: &Bound<'t>, table: &WordTable, captions: &[&str]) -> Result<Var<'t>> {
        if captions.is_empty() {
            return Err(Error::Contract("no captions to encode".into()));
        }
        let tape = p.var(self.query).tape();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let mut pooled = Vec::new();
        let mut index = Vec::with_capacity(captions.len());
        for &c in captions {
            let next = slot.len();
            let s = *slot.entry(c).or_insert(next);
            if s == pooled.len() {
                let words = tape.constant(table.embed_caption(c)?);
                pooled.push(self.pool_words(p, words)?);
            }
            index.push(s);
        }
        let stacked = Var::concat(&pooled, 0)?;
        let sentences = self.out.forward(p, stacked)?;
        Ok(sentences.gather_rows(&index)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.query, self.key.weight];
        ids.extend([self.out.weight]);
        ids.extend(self.out.bias);
        ids
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract("cosine_sim on vectors of different length".into()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine_sim of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities of the rows of an `n × d` tensor.
pub fn similarity_matrix(rows: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    let r = rows.data();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = cosine_sim(&r[i * d..(i + 1) * d], &r[j * d..(j + 1) * d])?;
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    Ok(out)
}

/// Negatives for `anchor` among `candidates`, given the anchor's similarity
/// to every agent (`sims[j]`). Ties in the ascending sort break by index.
pub fn select_negatives(anchor: usize, sims: &[f64], candidates: &[usize], cfg: &GuidanceConfig) -> Vec<usize> {
    let filter = cfg.variant != Variant::C;
    let mut picked: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&j| j != anchor && (!filter || sims[j] < cfg.theta_th))
        .collect();
    if cfg.variant == Variant::D {
        picked.sort_unstable();
        return picked;
    }
    picked.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    picked.truncate(cfg.k);
    picked
}

/// Negatives for `anchor` among all other sentence embeddings.
pub fn mine_negatives(anchor: usize, sentences: &[Vec<f64>], cfg: &GuidanceConfig) -> Result<Vec<usize>> {
    let a = sentences
        .get(anchor)
        .ok_or_else(|| Error::Contract("anchor index out of range".into()))?;
    let sims = sentences
        .iter()
        .map(|s| cosine_sim(a, s))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..sentences.len()).collect();
    Ok(select_negatives(anchor, &sims, &all, cfg))
}

/// Mined negatives of every anchor, plus the similarity matrix they came
/// from. `groups` lists the agent ranges that may contrast with each other.
#[derive(Debug, Clone, PartialEq)]
pub struct Mining {
    pub sims: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<usize>>,
}

pub fn mine_batch(sentences: &Tensor, groups: &[Vec<usize>], cfg: &GuidanceConfig) -> Result<Mining> {
    let sims = similarity_matrix(sentences)?;
    let mut negatives = vec![Vec::new(); sims.len()];
    for g in groups {
        for &i in g {
            negatives[i] = select_negatives(i, &sims[i], g, cfg);
        }
    }
    Ok(Mining { sims, negatives })
}

/// Contrastive loss between scene embeddings `z` (`n × d`) and sentence
/// embeddings `t` (`n × d`). Anchors without negatives contribute nothing;
/// with no contributing anchor the loss is exactly zero.
pub fn guidance_loss<'t>(
    z: Var<'t>,
    t: Var<'t>,
    groups: &[Vec<usize>],
    mining: &Mining,
    cfg: &GuidanceConfig,
) -> Result<Var<'t>> {
    let n = z.shape()[0];
    let tape = z.tape();
    let logits = z
        .normalize_rows()?
        .matmul(t.normalize_rows()?.transpose()?)?
        .scale(1.0 / cfg.tau)?
        .reshape(&[n * n, 1])?;
    let term = |pos: usize, negs: Vec<usize>| -> Result<Var<'t>> {
        let p = logits.gather_rows(&[pos])?.reshape(&[])?;
        let denom: Vec<usize> = if cfg.literal_denominator {
            negs
        } else {
            std::iter::once(pos).chain(negs).collect()
        };
        let lse = logits.gather_rows(&denom)?.reshape(&[denom.len()])?.logsumexp(0)?;
        Ok(lse.sub(p)?)
    };
    let mut terms = Vec::new();
    if cfg.variant == Variant::A {
        for g in groups.iter().filter(|g| g.len() >= 2) {
            for &i in g {
                let others = |f: &dyn Fn(usize) -> usize| g.iter().filter(|&&j| j != i).map(|&j| f(j)).collect();
                let row = term(i * n + i, others(&|j| i * n + j))?;
                let col = term(i * n + i, others(&|j| j * n + i))?;
                terms.push(row.add(col)?.scale(0.5)?);
            }
        }
    } else {
        for (i, negs) in mining.negatives.iter().enumerate() {
            if negs.is_empty() {
                continue;
            }
            let fwd = term(i * n + i, negs.iter().map(|&j| i * n + j).collect())?;
            if cfg.variant == Variant::B {
                let back = term(i * n + i, negs.iter().map(|&j| j * n + i).collect())?;
                terms.push(fwd.add(back)?.scale(0.5)?);
            } else {
                terms.push(fwd);
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let count = terms.len() as f64;
    let stacked = Var::concat(
        &terms
            .iter()
            .map(|v| v.reshape(&[1]))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        0,
    )?;
    Ok(stacked.sum()?.scale(1.0 / count)?)
}

/// Caption chosen for an agent at a training step.
pub fn caption_index(step: usize, agent: usize) -> usize {
    (step + agent) % 3
}

/// Agents allowed to contrast with each other: one group per scene, or a
/// single batch-wide group.
pub fn contrast_groups(scene_ranges: &[std::ops::Range<usize>], cross_scene: bool) -> Vec<Vec<usize>> {
    if cross_scene {
        let n = scene_ranges.last().map_or(0, |r| r.end);
        vec![(0..n).collect()]
    } else {
        scene_ranges.iter().map(|r| r.clone().collect()).collect()
    }
}

/// Convenience for tests and tooling: sentence embeddings of `captions` as a
/// plain tensor.
pub fn encode_values(pooler: &SentencePooler, params: &ParamSet, table: &WordTable, captions: &[&str]) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    Ok(pooler.encode(&p, table, captions)?.value())
}
