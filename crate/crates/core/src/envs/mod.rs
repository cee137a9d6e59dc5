//! Four deterministic-dynamics, seeded-reset 2D pushing tasks with absorbing
//! failure semantics, plus the scripted controllers used to manufacture
//! demonstration corpora.
//!
//! All tasks share a `[0,1]^2` workspace, a disk agent that pushes a disk
//! object quasi-statically, and a binary constraint cost that fires exactly on
//! the step that produces an irreversible failure:
//!
//! * `bounded-push` / `bounded-soccer`: object disk crossing the workspace
//!   boundary,
//! * `fragile-push-wall`: object disk overlapping the wall segment,
//! * `obstructed-push`: agent or object disk overlapping the vase.

pub mod scripted;
pub mod vec2;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{FarlError, Result};
use vec2::{add, dist, dist_point_segment, normalize, scale, sub, Vec2};

pub const DT: f64 = 0.05;
pub const AGENT_RADIUS: f64 = 0.03;
pub const OBJECT_RADIUS: f64 = 0.03;
pub const GOAL_RADIUS: f64 = 0.05;
pub const HORIZON: u32 = 100;
pub const SUCCESS_BONUS: f64 = 10.0;
pub const SOCCER_FRICTION: f64 = 0.95;
pub const SOCCER_KICK_GAIN: f64 = 1.5;
/// Observation layout: agent(2), object(2), object_vel(2), goal(2), goal-object(2).
pub const OBS_DIM: usize = 10;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    BoundedPush,
    BoundedSoccer,
    FragilePushWall,
    ObstructedPush,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::BoundedPush,
        TaskId::BoundedSoccer,
        TaskId::FragilePushWall,
        TaskId::ObstructedPush,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::BoundedPush => "bounded-push",
            TaskId::BoundedSoccer => "bounded-soccer",
            TaskId::FragilePushWall => "fragile-push-wall",
            TaskId::ObstructedPush => "obstructed-push",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "bounded-push" => Ok(TaskId::BoundedPush),
            "bounded-soccer" => Ok(TaskId::BoundedSoccer),
            "fragile-push-wall" => Ok(TaskId::FragilePushWall),
            "obstructed-push" => Ok(TaskId::ObstructedPush),
            other => Err(FarlError::InvalidConfig(format!("unknown task id {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static geometry of one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGeometry {
    /// Axis-aligned workspace; all tasks use the unit square.
    pub bounds_min: Vec2,
    pub bounds_max: Vec2,
    /// Wall segment endpoints (fragile-push-wall only).
    pub wall: Option<(Vec2, Vec2)>,
    /// Fragile vase as (center, radius) (obstructed-push only).
    pub vase: Option<(Vec2, f64)>,
    /// Per-step multiplicative velocity decay (soccer only, 1.0 elsewhere).
    pub friction: f64,
    /// Whether the boundary itself is failure geometry for the object.
    pub boundary_is_failure: bool,
}

pub fn geometry(task: TaskId) -> TaskGeometry {
    let base = TaskGeometry {
        bounds_min: [0.0, 0.0],
        bounds_max: [1.0, 1.0],
        wall: None,
        vase: None,
        friction: 1.0,
        boundary_is_failure: false,
    };
    match task {
        TaskId::BoundedPush => TaskGeometry {
            boundary_is_failure: true,
            ..base
        },
        TaskId::BoundedSoccer => TaskGeometry {
            boundary_is_failure: true,
            friction: SOCCER_FRICTION,
            ..base
        },
        TaskId::FragilePushWall => TaskGeometry {
            wall: Some(([0.0, 0.55], [0.6, 0.55])),
            ..base
        },
        TaskId::ObstructedPush => TaskGeometry {
            vase: Some(([0.5, 0.5], 0.07)),
            ..base
        },
    }
}

/// One environment state. `done` is bookkeeping, not part of the observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_pos: Vec2,
    pub object_pos: Vec2,
    pub object_vel: Vec2,
    pub goal_pos: Vec2,
    pub step_index: u32,
    pub done: bool,
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.agent_pos[0],
            self.agent_pos[1],
            self.object_pos[0],
            self.object_pos[1],
            self.object_vel[0],
            self.object_vel[1],
            self.goal_pos[0],
            self.goal_pos[1],
            self.goal_pos[0] - self.object_pos[0],
            self.goal_pos[1] - self.object_pos[1],
        ]
    }
}

/// Velocity command, each component clamped to [-1, 1] before dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub velocity: Vec2,
}

impl ActionCommand {
    pub fn new(velocity: Vec2) -> Self {
        Self { velocity }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != ACTION_DIM {
            return Err(FarlError::ShapeMismatch(format!(
                "action length {} != {ACTION_DIM}",
                v.len()
            )));
        }
        Ok(Self {
            velocity: [v[0], v[1]],
        })
    }

    fn clamped(&self) -> Vec2 {
        vec2::clamp_components(self.velocity, -1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub cost: u8,
    pub terminated: bool,
    pub failed: bool,
}

/// Signed distance from the task's failure geometry; failure occurs exactly
/// when this becomes negative (ties at zero are not failures).
pub fn failure_distance(task: TaskId, state: &EnvState) -> f64 {
    let geo = geometry(task);
    let o = state.object_pos;
    let mut d = f64::INFINITY;
    if geo.boundary_is_failure {
        let to_edges = [
            o[0] - geo.bounds_min[0],
            geo.bounds_max[0] - o[0],
            o[1] - geo.bounds_min[1],
            geo.bounds_max[1] - o[1],
        ];
        for e in to_edges {
            d = d.min(e - OBJECT_RADIUS);
        }
    }
    if let Some((a, b)) = geo.wall {
        d = d.min(dist_point_segment(o, a, b) - OBJECT_RADIUS);
    }
    if let Some((c, r)) = geo.vase {
        d = d.min(dist(o, c) - (r + OBJECT_RADIUS));
        d = d.min(dist(state.agent_pos, c) - (r + AGENT_RADIUS));
    }
    d
}

/// Binary constraint cost of the transition `state -> next_state`: 1 iff the
/// step produced an irreversible failure.
pub fn constraint_cost(task: TaskId, _state: &EnvState, next_state: &EnvState) -> u8 {
    if failure_distance(task, next_state) < 0.0 {
        1
    } else {
        0
    }
}

/// Deterministic per-seed reset. Object and goal coordinates are uniform in
/// the documented per-task ranges; the agent is uniform in [0.05, 0.95]^2
/// conditioned on not overlapping the object or the vase.
pub fn env_reset(task: TaskId, rng: &mut ChaCha8Rng) -> EnvState {
    let (object_range, goal_range): ([[f64; 2]; 2], [[f64; 2]; 2]) = match task {
        TaskId::BoundedPush | TaskId::BoundedSoccer => {
            ([[0.3, 0.7], [0.3, 0.7]], [[0.25, 0.75], [0.25, 0.75]])
        }
        TaskId::FragilePushWall => ([[0.15, 0.45], [0.15, 0.40]], [[0.10, 0.40], [0.70, 0.90]]),
        TaskId::ObstructedPush => ([[0.20, 0.80], [0.10, 0.25]], [[0.20, 0.80], [0.75, 0.90]]),
    };
    let object_pos = [
        rng.gen_range(object_range[0][0]..object_range[0][1]),
        rng.gen_range(object_range[1][0]..object_range[1][1]),
    ];
    let goal_pos = [
        rng.gen_range(goal_range[0][0]..goal_range[0][1]),
        rng.gen_range(goal_range[1][0]..goal_range[1][1]),
    ];
    let geo = geometry(task);
    let agent_pos = loop {
        let p = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        if dist(p, object_pos) <= AGENT_RADIUS + OBJECT_RADIUS {
            continue;
        }
        if let Some((c, r)) = geo.vase {
            if dist(p, c) <= r + AGENT_RADIUS + 0.02 {
                continue;
            }
        }
        break p;
    };
    EnvState {
        agent_pos,
        object_pos,
        object_vel: [0.0, 0.0],
        goal_pos,
        step_index: 0,
        done: false,
    }
}

/// Kinematic step. The agent moves by its clamped velocity times `DT`
/// (confined to the workspace); overlapping the object displaces it along the
/// agent's motion direction by the overlap amount; in soccer the kick instead
/// transfers agent velocity to the ball, which then rolls with friction.
pub fn env_step(task: TaskId, state: &EnvState, action: &ActionCommand) -> Result<StepOutcome> {
    if state.done {
        return Err(FarlError::ContractViolation(
            "env_step on a terminated state".into(),
        ));
    }
    let geo = geometry(task);
    let v = action.clamped();
    let old_agent = state.agent_pos;
    let mut agent = add(old_agent, scale(v, DT));
    agent[0] = agent[0].clamp(AGENT_RADIUS, 1.0 - AGENT_RADIUS);
    agent[1] = agent[1].clamp(AGENT_RADIUS, 1.0 - AGENT_RADIUS);
    let motion = sub(agent, old_agent);
    let motion_dir = normalize(motion);

    let mut object = state.object_pos;
    let mut object_vel = state.object_vel;
    let contact_dist = AGENT_RADIUS + OBJECT_RADIUS;

    if task == TaskId::BoundedSoccer {
        let d = dist(agent, object);
        if d < contact_dist {
            // Kick: transfer agent velocity, scaled up, and resolve overlap.
            object_vel = scale(v, SOCCER_KICK_GAIN);
            let overlap = contact_dist - d;
            object = add(object, scale(motion_dir, overlap));
        }
        object = add(object, scale(object_vel, DT));
        object_vel = scale(object_vel, geo.friction);
    } else {
        let d = dist(agent, object);
        if d < contact_dist && vec2::norm(motion) > 0.0 {
            let overlap = contact_dist - d;
            object = add(object, scale(motion_dir, overlap));
        }
    }

    let mut next = EnvState {
        agent_pos: agent,
        object_pos: object,
        object_vel,
        goal_pos: state.goal_pos,
        step_index: state.step_index + 1,
        done: false,
    };

    let cost = constraint_cost(task, state, &next);
    let failed = cost == 1;
    let goal_dist = dist(next.object_pos, next.goal_pos);
    let success = !failed && goal_dist < GOAL_RADIUS;
    let timeout = next.step_index >= HORIZON;
    let terminated = failed || success || timeout;
    next.done = terminated;
    let reward = -goal_dist + if success { SUCCESS_BONUS } else { 0.0 };

    Ok(StepOutcome {
        next_state: next,
        reward,
        cost,
        terminated,
        failed,
    })
}
