use crate::error::Result;
use crate::guidance::cosine_sim;
use crate::model::{Batch, Model};
use crate::par::{self, Exec};
use crate::scene::{Maneuver, Scene};

/// Mean cosine similarity of `z_scene` embeddings over agent pairs with the
/// same maneuver and over pairs with different maneuvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterReport {
    pub intra: f64,
    pub inter: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

impl ClusterReport {
    pub fn gap(&self) -> f64 {
        self.intra - self.inter
    }
}

pub fn maneuver_clustering(model: &Model, scenes: &[Scene], exec: Exec) -> Result<ClusterReport> {
    let per_scene = par::try_map_range(exec, scenes.len(), |i| -> Result<Vec<(Maneuver, Vec<f64>)>> {
        let batch = Batch::new(&[&scenes[i]])?;
        let z = model.scene_embeddings(&batch)?;
        let d = z.shape()[1];
        Ok(batch
            .maneuvers
            .iter()
            .enumerate()
            .map(|(r, m)| (*m, z.data()[r * d..(r + 1) * d].to_vec()))
            .collect())
    })?;
    let rows: Vec<(Maneuver, Vec<f64>)> = per_scene.into_iter().flatten().collect();
    let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s = cosine_sim(&rows[i].1, &rows[j].1)?;
            if rows[i].0 == rows[j].0 {
                intra += s;
                ni += 1;
            } else {
                inter += s;
                nx += 1;
            }
        }
    }
    Ok(ClusterReport {
        intra: intra / ni.max(1) as f64,
        inter: inter / nx.max(1) as f64,
        intra_pairs: ni,
        inter_pairs: nx,
    })
}
