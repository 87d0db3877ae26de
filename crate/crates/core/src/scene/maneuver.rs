use super::{Maneuver, Point};

/// Decision thresholds of the rule-based maneuver labeler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManeuverThresholds {
    /// Total displacement (m) below which an agent is stationary.
    pub eps_stationary: f64,
    /// Heading change (rad) beyond which an agent is turning.
    pub theta_turn: f64,
    /// Lateral offset (m) beyond which an agent changed lanes.
    pub d_lane: f64,
}

impl Default for ManeuverThresholds {
    fn default() -> Self {
        Self {
            eps_stationary: 0.5,
            theta_turn: 30f64.to_radians(),
            d_lane: 2.5,
        }
    }
}

/// Segments spanned by the start and end heading chords.
const CHORD_SPAN: usize = 3;

fn unit(v: Point) -> Option<Point> {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    (n > 1e-9).then(|| [v[0] / n, v[1] / n])
}

/// Labels a full (observed + future) track.
///
/// Headings are estimated from chords over the first and last few segments;
/// `heading_t` stands in when the opening chord is degenerate. Left is
/// counterclockwise.
pub fn classify_maneuver(track: &[Point], heading_t: Point, th: &ManeuverThresholds) -> Maneuver {
    if track.len() < 2 {
        return Maneuver::Stationary;
    }
    let first = track[0];
    let last = track[track.len() - 1];
    let total = [last[0] - first[0], last[1] - first[1]];
    if (total[0].powi(2) + total[1].powi(2)).sqrt() < th.eps_stationary {
        return Maneuver::Stationary;
    }
    let span = CHORD_SPAN.min(track.len() - 1);
    let p = track[span];
    let h0 = unit([p[0] - first[0], p[1] - first[1]])
        .or_else(|| unit(heading_t))
        .unwrap_or([0.0, 1.0]);
    let q = track[track.len() - 1 - span];
    let h1 = unit([last[0] - q[0], last[1] - q[1]]).unwrap_or(h0);

    let cross = h0[0] * h1[1] - h0[1] * h1[0];
    let dot = h0[0] * h1[0] + h0[1] * h1[1];
    let dtheta = cross.atan2(dot);
    if dtheta > th.theta_turn {
        return Maneuver::TurnLeft;
    }
    if dtheta < -th.theta_turn {
        return Maneuver::TurnRight;
    }
    let left = [-h0[1], h0[0]];
    let lateral = total[0] * left[0] + total[1] * left[1];
    if lateral > th.d_lane {
        Maneuver::LaneChangeLeft
    } else if lateral < -th.d_lane {
        Maneuver::LaneChangeRight
    } else {
        Maneuver::Straight
    }
}
