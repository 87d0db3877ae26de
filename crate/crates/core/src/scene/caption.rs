use super::{Agent, AgentType, Maneuver};

const LEADS: [&str; 3] = ["the", "a", "this"];

fn action(m: Maneuver) -> &'static str {
    match m {
        Maneuver::Stationary => "is waiting and stays stationary",
        Maneuver::Straight => "keeps moving straight ahead in its lane",
        Maneuver::TurnLeft => "is turning left with its left turn signal on",
        Maneuver::TurnRight => "is turning right with its right turn signal on",
        Maneuver::LaneChangeLeft => "is changing lanes into the left lane",
        Maneuver::LaneChangeRight => "is changing lanes into the right lane",
    }
}

fn rationales(m: Maneuver) -> [&'static str; 3] {
    match m {
        Maneuver::Stationary => [
            "because the road ahead is blocked",
            "until the crossing traffic clears",
            "since it has no reason to move yet",
        ],
        Maneuver::Straight => [
            "because the road ahead is clear",
            "following the flow of traffic",
            "with no intention to turn",
        ],
        Maneuver::TurnLeft => [
            "to enter the street on the left",
            "at the upcoming intersection",
            "following its planned route to the left",
        ],
        Maneuver::TurnRight => [
            "to enter the street on the right",
            "at the upcoming intersection",
            "following its planned route to the right",
        ],
        Maneuver::LaneChangeLeft => [
            "to pass a slower vehicle",
            "to prepare for an exit on the left",
            "because its current lane is ending",
        ],
        Maneuver::LaneChangeRight => [
            "to let faster traffic pass",
            "to prepare for an exit on the right",
            "because its current lane is ending",
        ],
    }
}

/// The three captions shared by every agent of this type and maneuver.
/// Each names the agent type, its action, and a rationale.
pub fn template_pool(agent_type: AgentType, maneuver: Maneuver) -> [String; 3] {
    let r = rationales(maneuver);
    std::array::from_fn(|j| {
        format!(
            "{} {} {} {}",
            LEADS[j],
            agent_type.name(),
            action(maneuver),
            r[j]
        )
    })
}

pub fn render_caption(agent: &Agent) -> [String; 3] {
    template_pool(agent.agent_type, agent.maneuver)
}
