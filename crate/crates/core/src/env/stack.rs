//! Push block A onto block B. Blocks slide over each other; only the
//! gripper pushes. Slots: A, B, C, D centers (8), radii (4).

use rand::Rng;

use super::{dist, uniform_point, Observation, GRIPPER_RADIUS, HOME, STACK_HOLD_STEPS};

pub const BLOCK_RADIUS: f64 = 0.03;
const CONTACT_SLACK: f64 = 0.005;
const MOVE_EPS: f64 = 0.004;

#[derive(Debug, Clone, PartialEq)]
pub struct StackState {
    /// Canonical order: target block A, base block B, then the other two.
    pub blocks: [[f64; 2]; 4],
    pub radii: [f64; 4],
}

/// Ordered pairs `(a, b)` with `a ≠ b`, lexicographic.
pub fn variant_pair(variant: u32) -> (usize, usize) {
    let pairs: Vec<(usize, usize)> = (0..4)
        .flat_map(|a| (0..4).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    pairs[variant as usize]
}

pub fn reset<R: Rng + ?Sized>(variant: u32, rng: &mut R) -> StackState {
    let (a, b) = variant_pair(variant);
    loop {
        let colored: Vec<[f64; 2]> = (0..4).map(|_| uniform_point(rng, 0.2, 0.8)).collect();
        let ok_pairs = (0..4).all(|i| (i + 1..4).all(|j| dist(colored[i], colored[j]) >= 2.0 * BLOCK_RADIUS + 0.04));
        let ok_home = colored.iter().all(|&p| dist(p, HOME) >= 0.15);
        let ab = dist(colored[a], colored[b]);
        if !(ok_pairs && ok_home && (0.12..=0.25).contains(&ab)) {
            continue;
        }
        let u = unit(colored[a], colored[b]);
        let stage = [colored[a][0] + u[0] * 0.09, colored[a][1] + u[1] * 0.09];
        if !(0.04..=0.96).contains(&stage[0]) || !(0.04..=0.96).contains(&stage[1]) {
            continue;
        }
        let rest: Vec<usize> = (0..4).filter(|&i| i != a && i != b).collect();
        return StackState {
            blocks: [colored[a], colored[b], colored[rest[0]], colored[rest[1]]],
            radii: [BLOCK_RADIUS; 4],
        };
    }
}

/// Unit vector from `to` towards `from`.
fn unit(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let d = dist(from, to).max(1e-12);
    [(from[0] - to[0]) / d, (from[1] - to[1]) / d]
}

pub fn substep(s: &mut StackState, g: [f64; 2]) {
    for (b, &r) in s.blocks.iter_mut().zip(&s.radii) {
        let d = dist(*b, g);
        let reach = GRIPPER_RADIUS + r;
        if d < reach {
            let n = if d > 1e-12 { [(b[0] - g[0]) / d, (b[1] - g[1]) / d] } else { [1.0, 0.0] };
            *b = [
                (g[0] + n[0] * reach).clamp(0.0, 1.0),
                (g[1] + n[1] * reach).clamp(0.0, 1.0),
            ];
        }
    }
}

pub fn observe(s: &StackState, slots: &mut [f64]) {
    for (i, b) in s.blocks.iter().enumerate() {
        slots[2 * i] = b[0];
        slots[2 * i + 1] = b[1];
    }
    slots[8..12].copy_from_slice(&s.radii);
}

fn block(o: &Observation, i: usize) -> [f64; 2] {
    o.slot_xy(2 * i)
}

fn radius(o: &Observation, i: usize) -> f64 {
    o.slot(8 + i)
}

pub fn contact(prev: &Observation, next: &Observation) -> bool {
    let g = next.gripper();
    (0..4).any(|i| {
        dist(g, block(next, i)) < GRIPPER_RADIUS + radius(next, i) + CONTACT_SLACK
            || dist(block(prev, i), block(next, i)) > MOVE_EPS
    })
}

/// Block A moved at least 0.02 toward B's starting center.
pub fn clip_success(obs: &[Observation]) -> bool {
    let (first, last) = (&obs[0], &obs[obs.len() - 1]);
    let a0 = block(first, 0);
    let to_goal = unit(block(first, 1), a0);
    let a1 = block(last, 0);
    (a1[0] - a0[0]) * to_goal[0] + (a1[1] - a0[1]) * to_goal[1] >= 0.02
}

pub fn success(obs: &[Observation]) -> bool {
    let tail = &obs[obs.len().saturating_sub(STACK_HOLD_STEPS + 1)..];
    tail.iter().all(|o| dist(block(o, 0), block(o, 1)) < radius(o, 1))
}

pub fn expert_target(s: &StackState, g: [f64; 2]) -> [f64; 2] {
    let (a, b) = (s.blocks[0], s.blocks[1]);
    let ab = dist(a, b);
    if ab < 0.004 {
        return g;
    }
    let u = unit(a, b);
    let reach = GRIPPER_RADIUS + s.radii[0];
    let behind = [a[0] + u[0] * reach, a[1] + u[1] * reach];
    // lateral offset of the gripper from the push line, and how far behind A it is
    let rel = [g[0] - a[0], g[1] - a[1]];
    let along = rel[0] * u[0] + rel[1] * u[1];
    let perp = [-u[1], u[0]];
    let lateral = rel[0] * perp[0] + rel[1] * perp[1];
    if along > reach - 0.01 && lateral.abs() < 0.008 {
        // aligned: push A toward B, slowing near the goal
        let step = ab.min(0.05);
        return [g[0] - u[0] * step, g[1] - u[1] * step];
    }
    let stage_dist = reach + 0.03;
    let stage = [a[0] + u[0] * stage_dist, a[1] + u[1] * stage_dist];
    if along > reach && lateral.abs() < 0.03 {
        // close to the line behind A: slide onto it
        return [behind[0] + u[0] * 0.005, behind[1] + u[1] * 0.005];
    }
    if along < reach + 0.01 && lateral.abs() < reach + 0.03 {
        // on the wrong side or beside A: go around
        let side = if lateral >= 0.0 { 1.0 } else { -1.0 };
        let clear = reach + 0.035;
        return [a[0] + perp[0] * side * clear + u[0] * 0.04, a[1] + perp[1] * side * clear + u[1] * 0.04];
    }
    stage
}
