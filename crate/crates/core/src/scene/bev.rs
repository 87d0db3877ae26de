use rand::Rng;

use super::{grid_to_world, Agent, Grid, Maneuver, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Occupancy plus one signal channel per maneuver.
pub const BEV_IMAGE_CHANNELS: usize = 1 + Maneuver::ALL.len();
/// Drivable corridor and crosswalk band.
pub const BEV_MAP_CHANNELS: usize = 2;

/// Renders the image stand-in: a Gaussian blob at every agent's current
/// position on the occupancy channel and on the channel of its maneuver.
pub(super) fn render_image(agents: &[Agent], h: usize, w: usize, extent: f64) -> Grid {
    let mut grid = Grid::zeros(h, w, BEV_IMAGE_CHANNELS);
    let cell = extent / (w.max(h) - 1) as f64;
    let reach = 3.0 * cell;
    for a in agents {
        let c = a.current();
        for row in 0..h {
            for col in 0..w {
                let p = grid_to_world([col as f64, row as f64], extent, h, w);
                let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                if d2 > reach * reach {
                    continue;
                }
                let v = (-d2 / (2.0 * cell * cell)).exp();
                for ch in [0, 1 + a.maneuver.index()] {
                    if v > grid.get(row, col, ch) {
                        grid.set(row, col, ch, v);
                    }
                }
            }
        }
    }
    grid
}

/// Renders the map stand-in: a road corridor along the ego heading and a
/// crosswalk band at a random distance ahead.
pub(super) fn render_map(rng: &mut impl Rng, h: usize, w: usize, extent: f64) -> Grid {
    let mut grid = Grid::zeros(h, w, BEV_MAP_CHANNELS);
    let road_half_width = 7.0;
    let crosswalk_at: f64 = rng.random_range(10.0..25.0);
    for row in 0..h {
        for col in 0..w {
            let p = grid_to_world([col as f64, row as f64], extent, h, w);
            if p[0].abs() <= road_half_width {
                grid.set(row, col, 0, 1.0);
            }
            if (p[1] - crosswalk_at).abs() <= 2.0 {
                grid.set(row, col, 1, 1.0);
            }
        }
    }
    grid
}

/// Channel-wise concatenation `[B_image ; B_map]` of a scene's rasters.
pub fn compose_bev(scene: &Scene) -> Result<Tensor> {
    let (img, map) = (&scene.bev_image, &scene.bev_map);
    if img.height() != map.height() || img.width() != map.width() {
        return Err(Error::Tensor(crate::tensor::TensorError::Dim {
            op: "compose_bev",
            lhs: img.shape.to_vec(),
            rhs: map.shape.to_vec(),
        }));
    }
    let (di, dm) = (img.depth(), map.depth());
    let cells = img.height() * img.width();
    let mut data = Vec::with_capacity(cells * (di + dm));
    for c in 0..cells {
        data.extend_from_slice(&img.data[c * di..(c + 1) * di]);
        data.extend_from_slice(&map.data[c * dm..(c + 1) * dm]);
    }
    Ok(Tensor::new(vec![img.height(), img.width(), di + dm], data)?)
}
