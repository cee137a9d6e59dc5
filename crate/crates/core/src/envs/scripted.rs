//! Scripted controllers: a potential-field expert used to collect task
//! demonstrations, and a recovery controller that steers the object away from
//! the nearest failure geometry. Both are the data-generation oracles for the
//! learned policies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::vec2::{add, dist, dist_point_segment, dot, norm, normalize, perp, scale, sub, Vec2};
use super::{
    env_step, failure_distance, geometry, ActionCommand, EnvState, TaskId, AGENT_RADIUS, DT,
    OBJECT_RADIUS,
};

const CONTACT: f64 = AGENT_RADIUS + OBJECT_RADIUS;
/// Distance-to-failure below which the recovery controller acts.
pub const RECOVERY_MARGIN: f64 = 0.08;
/// Near-failure band used when sampling recovery-demo start states.
pub const NEAR_FAILURE_MARGIN: f64 = 0.05;

/// Move toward the push point behind the object. When the straight line would
/// plow through the object from the wrong side, orbit around it instead.
fn approach(
    agent: Vec2,
    object: Vec2,
    push_point: Vec2,
    extra: &[(Vec2, f64)],
    safe_r: f64,
) -> Vec2 {
    let behind = normalize(sub(push_point, object));
    let rel_v = sub(agent, object);
    let d_obj = norm(rel_v);
    let rel = normalize(rel_v);
    let to_pp = sub(push_point, agent);
    let d_pp = norm(to_pp);
    if d_pp < 1e-9 {
        return [0.0, 0.0];
    }

    // Where does the straight path come nearest to the object?
    let seg = to_pp;
    let t_near = (dot(sub(object, agent), seg) / dot(seg, seg).max(1e-24)).clamp(0.0, 1.0);
    let d_near = dist(object, add(agent, scale(seg, t_near)));
    let straight_ok = dot(rel, behind) > 0.7 || d_near >= safe_r - 0.02 || t_near >= 0.9;

    let mut dir;
    let speed;
    if straight_ok {
        dir = normalize(to_pp);
        speed = (d_pp / DT).min(1.0);
    } else {
        // Orbit the object toward its push side, holding a safe radius.
        let cross = rel[0] * behind[1] - rel[1] * behind[0];
        let tang = if cross >= 0.0 {
            perp(rel)
        } else {
            scale(perp(rel), -1.0)
        };
        let err = safe_r - d_obj;
        dir = normalize(add(tang, scale(rel, err * 12.0)));
        speed = 1.0;
    }

    // Repulsion from additional obstacles (the vase).
    for &(c, radius) in extra {
        let to_obs = sub(c, agent);
        let d = norm(to_obs);
        let influence = radius + 0.08;
        if d < influence && dot(dir, normalize(to_obs)) > 0.0 {
            let away = normalize(scale(to_obs, -1.0));
            let t1 = perp(away);
            let t2 = scale(t1, -1.0);
            let tang = if dot(t1, dir) >= dot(t2, dir) { t1 } else { t2 };
            let w = ((influence - d) / 0.08).clamp(0.0, 1.0);
            dir = normalize(add(scale(tang, w), scale(dir, 1.0 - w)));
            if d < radius + 0.01 {
                dir = normalize(add(dir, away));
            }
        }
    }
    scale(dir, speed)
}

/// Waypoint the object should currently head to, detouring around failure
/// geometry where the straight line to the goal is blocked.
fn object_subgoal(task: TaskId, object: Vec2, goal: Vec2) -> Vec2 {
    match task {
        TaskId::BoundedPush | TaskId::BoundedSoccer => goal,
        TaskId::FragilePushWall => {
            // Wall spans x in [0, 0.6] at y = 0.55; route around its free end.
            if object[1] > 0.66 {
                goal
            } else if object[0] < 0.70 {
                [0.80, 0.35]
            } else {
                [0.80, 0.72]
            }
        }
        TaskId::ObstructedPush => {
            let (c, r) = geometry(task).vase.unwrap();
            let clear = r + OBJECT_RADIUS + 0.06;
            if super::vec2::segment_clears_disk(object, goal, c, clear) {
                goal
            } else {
                let dir_goal = normalize(sub(goal, object));
                let p = perp(dir_goal);
                let side = if dot(sub(object, c), p) >= 0.0 { 1.0 } else { -1.0 };
                add(c, scale(p, side * (clear + 0.06)))
            }
        }
    }
}

fn extra_obstacles(task: TaskId) -> Vec<(Vec2, f64)> {
    match geometry(task).vase {
        Some((c, r)) => vec![(c, r + AGENT_RADIUS + 0.02)],
        None => Vec::new(),
    }
}

/// Potential-field expert: line up behind the object relative to its current
/// subgoal, then push. `noise_scale` adds Gaussian action noise to produce
/// medium-quality demonstrations.
pub fn scripted_expert_action(
    task: TaskId,
    state: &EnvState,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> ActionCommand {
    // In soccer, aim at where the rolling ball will come to rest, not where it
    // is now; friction 0.95/step means it rolls ~0.95*vel further.
    let object = if task == TaskId::BoundedSoccer {
        let rest = add(state.object_pos, scale(state.object_vel, 0.95));
        super::vec2::clamp_components(rest, OBJECT_RADIUS, 1.0 - OBJECT_RADIUS)
    } else {
        state.object_pos
    };
    let safe_r = if task == TaskId::BoundedSoccer {
        CONTACT + 0.06
    } else {
        CONTACT + 0.03
    };
    let subgoal = object_subgoal(task, object, state.goal_pos);
    let u = normalize(sub(subgoal, object));
    let push_point = sub(object, scale(u, CONTACT - 0.005));
    let mut v = if dist(state.agent_pos, push_point) > 0.02 {
        approach(
            state.agent_pos,
            object,
            push_point,
            &extra_obstacles(task),
            safe_r,
        )
    } else {
        // In position: push toward the subgoal, easing off near the goal so a
        // single step does not overshoot it.
        let remaining = dist(object, state.goal_pos);
        let speed = (remaining / DT).clamp(0.3, 1.0);
        scale(u, speed)
    };
    if task == TaskId::BoundedSoccer {
        v = cap_kick_speed(state, v);
    }
    v = guard_velocity(task, state, super::vec2::clamp_components(v, -1.0, 1.0));
    if noise_scale > 0.0 {
        // The controller re-plans every step, so white action noise alone is
        // mostly corrected away; amplify it so the nominal scale of 0.3 yields
        // genuinely medium-quality behaviour.
        let eff = 5.0 * noise_scale;
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        v = add(v, [eff * nx, eff * ny]);
    }
    ActionCommand::new(super::vec2::clamp_components(v, -1.0, 1.0))
}

/// Nearest failure geometry to the object: signed clearance and the direction
/// that increases it.
fn object_hazard(task: TaskId, state: &EnvState) -> (f64, Vec2) {
    let geo = geometry(task);
    let o = state.object_pos;
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    let mut consider = |d: f64, away: Vec2| {
        if d < best.0 {
            best = (d, away);
        }
    };
    if geo.boundary_is_failure {
        consider(o[0] - geo.bounds_min[0] - OBJECT_RADIUS, [1.0, 0.0]);
        consider(geo.bounds_max[0] - o[0] - OBJECT_RADIUS, [-1.0, 0.0]);
        consider(o[1] - geo.bounds_min[1] - OBJECT_RADIUS, [0.0, 1.0]);
        consider(geo.bounds_max[1] - o[1] - OBJECT_RADIUS, [0.0, -1.0]);
    }
    if let Some((a, b)) = geo.wall {
        let d = dist_point_segment(o, a, b) - OBJECT_RADIUS;
        let ab = sub(b, a);
        let t = (dot(sub(o, a), ab) / dot(ab, ab).max(1e-24)).clamp(0.0, 1.0);
        let closest = add(a, scale(ab, t));
        consider(d, normalize(sub(o, closest)));
    }
    if let Some((c, r)) = geo.vase {
        consider(dist(o, c) - (r + OBJECT_RADIUS), normalize(sub(o, c)));
    }
    best
}

/// A kick transfers 1.5x the agent velocity to the ball, which then rolls
/// roughly `1.5 * speed` workspace units before friction stops it. Near the
/// ball, limit speed so the roll-out distance matches the remaining distance
/// to the goal.
fn cap_kick_speed(state: &EnvState, v: Vec2) -> Vec2 {
    let d_ball = dist(state.agent_pos, state.object_pos);
    let toward_ball = dot(v, sub(state.object_pos, state.agent_pos)) > 0.0;
    if d_ball >= CONTACT + 0.06 || !toward_ball {
        return v;
    }
    let remaining = dist(state.object_pos, state.goal_pos);
    let cap = (remaining / 1.5).clamp(0.05, 0.25);
    if norm(v) > cap {
        scale(normalize(v), cap)
    } else {
        v
    }
}

/// One-step lookahead guard: if the proposed velocity would shrink the
/// clearance to failure geometry while already close, pick the rotation of it
/// that keeps the most clearance instead.
fn guard_velocity(task: TaskId, state: &EnvState, v: Vec2) -> Vec2 {
    let d_now = failure_distance(task, state);
    let clearance_after = |vel: Vec2| -> f64 {
        match env_step(task, state, &ActionCommand::new(vel)) {
            Ok(out) => {
                let mut d = failure_distance(task, &out.next_state);
                // In soccer the ball keeps rolling; account for the roll-out.
                if task == TaskId::BoundedSoccer && !out.terminated {
                    let mut s = out.next_state;
                    for _ in 0..40 {
                        if norm(s.object_vel) < 1e-3 {
                            break;
                        }
                        match env_step(task, &s, &ActionCommand::new([0.0, 0.0])) {
                            Ok(o) => {
                                d = d.min(failure_distance(task, &o.next_state));
                                if o.terminated {
                                    break;
                                }
                                s = o.next_state;
                            }
                            Err(_) => break,
                        }
                    }
                }
                d
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let d_v = clearance_after(v);
    if d_v >= d_now.min(RECOVERY_MARGIN) || d_v >= d_now - 1e-9 {
        return v;
    }
    let rot = |vel: Vec2, ang: f64| -> Vec2 {
        let (s, c) = ang.sin_cos();
        [vel[0] * c - vel[1] * s, vel[0] * s + vel[1] * c]
    };
    let mut best = (v, d_v);
    for cand in [
        [0.0, 0.0],
        rot(v, std::f64::consts::FRAC_PI_4),
        rot(v, -std::f64::consts::FRAC_PI_4),
        rot(v, std::f64::consts::FRAC_PI_2),
        rot(v, -std::f64::consts::FRAC_PI_2),
        scale(v, 0.3),
    ] {
        let d = clearance_after(cand);
        if d > best.1 {
            best = (cand, d);
        }
    }
    best.0
}

/// Contact displaces the object along the agent's motion direction, so any
/// velocity with a non-negative component along `away` cannot push the object
/// toward the hazard. Bend `v` into that half-space (with margin) whenever the
/// agent is within one step of contact. The half-space is convex, so a
/// regressor averaging such labels stays inside it — this keeps the cloned
/// recovery policy hazard-safe even where its fit is sloppy.
fn safe_cone(v: Vec2, away: Vec2, agent: Vec2, object: Vec2) -> Vec2 {
    const REACH: f64 = 0.10;
    if dist(agent, object) >= REACH {
        return v;
    }
    let vc = dot(v, away);
    let need = 0.2 * norm(v);
    if vc < need {
        add(v, scale(away, need - vc))
    } else {
        v
    }
}

/// Press field: head at a point slightly hazard-away of the object center,
/// side-biased toward the agent's current flank. En-route contact then moves
/// along a direction with a non-negative `away` component (after the cone), so
/// the object is only ever pressed away from or parallel to the hazard — no
/// orbit-behind maneuver, and the label is a smooth function of the state.
fn press_field(state: &EnvState, away: Vec2) -> Vec2 {
    let rel = sub(state.agent_pos, state.object_pos);
    let mut lat = perp(away);
    if dot(rel, lat) < 0.0 {
        lat = scale(lat, -1.0);
    }
    let target = add(state.object_pos, add(scale(away, 0.02), scale(lat, 0.03)));
    let to_t = sub(target, state.agent_pos);
    let d_t = norm(to_t);
    if d_t < 1e-9 {
        return scale(away, 0.4);
    }
    let mut speed = (d_t / DT).min(1.0);
    // Slow down near the object so one step cannot jump from outside the
    // cone's reach straight into contact.
    if norm(rel) < 0.12 {
        speed = speed.min(0.4);
    }
    scale(normalize(to_t), speed)
}

/// Recovery controller: if any failure geometry is within [`RECOVERY_MARGIN`]
/// of the object (or of the agent, for the vase), push/steer away from it;
/// otherwise do nothing.
pub fn scripted_recovery_action(task: TaskId, state: &EnvState) -> ActionCommand {
    // The vase task needs its own strategy: the spot directly behind the
    // object sits inside the vase margin, so pushing from behind is unsafe.
    if task == TaskId::ObstructedPush {
        return obstructed_recovery(state);
    }
    let (d, away) = object_hazard(task, state);
    if d > RECOVERY_MARGIN {
        return ActionCommand::new([0.0, 0.0]);
    }
    let v = press_field(state, away);
    // Gentle taps only in soccer: a hard inward kick can roll the ball across
    // the workspace into the opposite boundary.
    let v = if task == TaskId::BoundedSoccer && dist(state.agent_pos, state.object_pos) < CONTACT + 0.06
    {
        let cap = 0.2;
        if norm(v) > cap {
            scale(normalize(v), cap)
        } else {
            v
        }
    } else {
        v
    };
    let v = safe_cone(v, away, state.agent_pos, state.object_pos);
    let v = guard_velocity(task, state, super::vec2::clamp_components(v, -1.0, 1.0));
    ActionCommand::new(super::vec2::clamp_components(v, -1.0, 1.0))
}

/// Vase recovery. Pushing the object straight away from the vase would put
/// the agent inside the vase margin, so the controller engages from the side
/// and shoves diagonally outward; once the object is clear it retreats the
/// agent out of the hazard band too (agent proximity is also a failure).
fn obstructed_recovery(state: &EnvState) -> ActionCommand {
    let task = TaskId::ObstructedPush;
    let (c, r) = geometry(task).vase.expect("obstructed task has a vase");
    let away = normalize(sub(state.object_pos, c));
    let d_obj = dist(state.object_pos, c) - (r + OBJECT_RADIUS);
    let d_agent = dist(state.agent_pos, c) - (r + AGENT_RADIUS);
    // Imminent agent-vase contact overrides everything else.
    if d_agent < 0.006 {
        return ActionCommand::new(normalize(sub(state.agent_pos, c)));
    }
    let v = if d_obj > RECOVERY_MARGIN {
        if d_agent < RECOVERY_MARGIN {
            normalize(sub(state.agent_pos, c))
        } else {
            [0.0, 0.0]
        }
    } else {
        // Press the object radially outward from the flank. The press target
        // sits outward of the object center, so reaching it never takes the
        // agent into the vase margin; add a short-range vase repulsion for the
        // agent's own path anyway.
        let mut v = press_field(state, away);
        let to_agent = sub(state.agent_pos, c);
        let clear = norm(to_agent) - (r + AGENT_RADIUS);
        if clear < 0.05 {
            let w = ((0.05 - clear) / 0.05).clamp(0.0, 1.0);
            v = add(v, scale(normalize(to_agent), w));
        }
        v
    };
    let v = safe_cone(v, away, state.agent_pos, state.object_pos);
    let v = guard_velocity(task, state, super::vec2::clamp_components(v, -1.0, 1.0));
    ActionCommand::new(super::vec2::clamp_components(v, -1.0, 1.0))
}

/// True if the object, rolling freely with no agent in the way, never crosses
/// failure geometry while its drift decays. Pure ball kinematics: the agent
/// cannot be relied on to block the roll.
fn free_roll_is_safe(task: TaskId, state: &EnvState) -> bool {
    let mut s = state.clone();
    for _ in 0..60 {
        if norm(s.object_vel) < 1e-3 {
            return true;
        }
        s.object_pos = add(s.object_pos, scale(s.object_vel, DT));
        s.object_vel = scale(s.object_vel, super::SOCCER_FRICTION);
        if failure_distance(task, &s) < 0.0 {
            return false;
        }
    }
    true
}

/// Rejection-sample a reset whose object sits within the near-failure band
/// (clearance in (0, [`NEAR_FAILURE_MARGIN`])) of the task's failure geometry.
pub fn sample_near_failure_state(task: TaskId, rng: &mut ChaCha8Rng) -> EnvState {
    loop {
        let mut s = super::env_reset(task, rng);
        let geo = geometry(task);
        let p: Vec2 = match task {
            TaskId::BoundedPush | TaskId::BoundedSoccer => {
                let edge = rng.gen_range(0..4usize);
                let depth = rng.gen_range(0.001..NEAR_FAILURE_MARGIN);
                let along = rng.gen_range(0.1..0.9);
                match edge {
                    0 => [OBJECT_RADIUS + depth, along],
                    1 => [1.0 - OBJECT_RADIUS - depth, along],
                    2 => [along, OBJECT_RADIUS + depth],
                    _ => [along, 1.0 - OBJECT_RADIUS - depth],
                }
            }
            TaskId::FragilePushWall => {
                let (a, b) = geo.wall.unwrap();
                let t = rng.gen_range(0.0..1.0);
                let on_wall = add(a, scale(sub(b, a), t));
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let depth = OBJECT_RADIUS + rng.gen_range(0.001..NEAR_FAILURE_MARGIN);
                [on_wall[0], on_wall[1] + side * depth]
            }
            TaskId::ObstructedPush => {
                let (c, r) = geo.vase.unwrap();
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let depth = r + OBJECT_RADIUS + rng.gen_range(0.001..NEAR_FAILURE_MARGIN);
                add(c, [depth * ang.cos(), depth * ang.sin()])
            }
        };
        s.object_pos = p;
        if task == TaskId::BoundedSoccer {
            // Mild drift so some demos start with the ball rolling — but damp
            // any drift whose free roll already crosses the boundary, since no
            // controller can intercept a doomed ball in time.
            s.object_vel = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            for _ in 0..8 {
                if free_roll_is_safe(task, &s) {
                    break;
                }
                s.object_vel = scale(s.object_vel, 0.5);
            }
            if !free_roll_is_safe(task, &s) {
                s.object_vel = [0.0, 0.0];
            }
        }
        // Re-place the agent near the object without overlap.
        for _ in 0..100 {
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(CONTACT + 0.01..0.2);
            let a = add(p, [r * ang.cos(), r * ang.sin()]);
            if a[0] < AGENT_RADIUS
                || a[0] > 1.0 - AGENT_RADIUS
                || a[1] < AGENT_RADIUS
                || a[1] > 1.0 - AGENT_RADIUS
            {
                continue;
            }
            let mut sa = s.clone();
            sa.agent_pos = a;
            if failure_distance(task, &sa) > 0.0 {
                s.agent_pos = a;
                break;
            }
        }
        let fd = failure_distance(task, &s);
        if fd > 0.0 && fd < NEAR_FAILURE_MARGIN {
            return s;
        }
    }
}
