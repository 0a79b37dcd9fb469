//! Pick up the marker and trace the twelve waypoints of a circle.
//! Slots: circle center (2), marker (2), engaged (1), visited flags (12).

use std::f64::consts::TAU;

use rand::Rng;

use super::{dist, uniform_point, Observation, HOME};

pub const NUM_WAYPOINTS: usize = 12;
pub const CIRCLE_RADIUS: f64 = 0.12;
pub const TOOL_RADIUS: f64 = 0.06;
pub const VISIT_TOLERANCE: f64 = 0.03;
const CONTACT_BAND: f64 = 0.04;
const SWEEP_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DrawState {
    pub center: [f64; 2],
    pub tool: [f64; 2],
    pub visited: [bool; NUM_WAYPOINTS],
    pub order: Vec<usize>,
}

pub fn waypoint(center: [f64; 2], k: usize) -> [f64; 2] {
    let a = TAU * k as f64 / NUM_WAYPOINTS as f64;
    [center[0] + CIRCLE_RADIUS * a.cos(), center[1] + CIRCLE_RADIUS * a.sin()]
}

pub fn reset<R: Rng + ?Sized>(rng: &mut R) -> DrawState {
    loop {
        let center = uniform_point(rng, 0.25, 0.75);
        let tool = uniform_point(rng, 0.2, 0.8);
        let ok = dist(tool, center) >= CIRCLE_RADIUS + 0.13
            && dist(tool, HOME) >= 0.15
            && dist(center, HOME) >= CIRCLE_RADIUS + 0.1;
        if ok {
            return DrawState {
                center,
                tool,
                visited: [false; NUM_WAYPOINTS],
                order: Vec::new(),
            };
        }
    }
}

pub fn substep(s: &mut DrawState, g: [f64; 2], engaged: &mut bool) {
    if !*engaged && dist(g, s.tool) < TOOL_RADIUS {
        *engaged = true;
    }
    if !*engaged {
        return;
    }
    s.tool = g;
    for k in 0..NUM_WAYPOINTS {
        if !s.visited[k] && dist(g, waypoint(s.center, k)) < VISIT_TOLERANCE {
            s.visited[k] = true;
            s.order.push(k);
        }
    }
}

pub fn observe(s: &DrawState, _g: [f64; 2], engaged: bool, slots: &mut [f64]) {
    slots[0] = s.center[0];
    slots[1] = s.center[1];
    slots[2] = s.tool[0];
    slots[3] = s.tool[1];
    slots[4] = engaged as u8 as f64;
    for k in 0..NUM_WAYPOINTS {
        slots[5 + k] = s.visited[k] as u8 as f64;
    }
}

fn flags(o: &Observation) -> [bool; NUM_WAYPOINTS] {
    std::array::from_fn(|k| o.slot(5 + k) >= 0.5)
}

fn visited_count(o: &Observation) -> usize {
    flags(o).iter().filter(|&&v| v).count()
}

pub fn contact(next: &Observation) -> bool {
    let engaged = next.slot(4) >= 0.5;
    engaged && (dist(next.gripper(), next.slot_xy(0)) - CIRCLE_RADIUS).abs() < CONTACT_BAND
}

pub fn clip_success(obs: &[Observation]) -> bool {
    visited_count(&obs[obs.len() - 1]) >= visited_count(&obs[0]) + 2
}

/// First-visit times recovered from flag flips, grouped by step.
pub fn visit_groups(obs: &[Observation]) -> Vec<Vec<usize>> {
    let mut seen = [false; NUM_WAYPOINTS];
    let mut groups = Vec::new();
    for o in obs {
        let f = flags(o);
        let new: Vec<usize> = (0..NUM_WAYPOINTS).filter(|&k| f[k] && !seen[k]).collect();
        for &k in &new {
            seen[k] = true;
        }
        if !new.is_empty() {
            groups.push(new);
        }
    }
    groups
}

/// Visits form one cyclic sweep (in either direction) that misses at most
/// one waypoint.
pub fn cyclic_order_ok(groups: &[Vec<usize>]) -> bool {
    let total: usize = groups.iter().map(|g| g.len()).sum();
    if total + 1 < NUM_WAYPOINTS {
        return false;
    }
    [1usize, NUM_WAYPOINTS - 1].into_iter().any(|dir| sweep_ok(groups, dir))
}

fn sweep_ok(groups: &[Vec<usize>], dir: usize) -> bool {
    let n = NUM_WAYPOINTS;
    let fwd = |from: usize, to: usize| (to + n - from) % n;
    let fwd_dir = |from: usize, to: usize| if dir == 1 { fwd(from, to) } else { fwd(to, from) };
    let mut seq: Vec<usize> = Vec::new();
    for g in groups {
        let mut g = g.clone();
        if let Some(&last) = seq.last() {
            g.sort_by_key(|&k| fwd_dir(last, k));
        } else if g.len() > 1 {
            // pick the rotation whose internal steps are smallest
            let best = (0..g.len())
                .min_by_key(|&s| g.iter().map(|&k| fwd_dir(g[s], k)).max().unwrap())
                .unwrap();
            let start = g[best];
            g.sort_by_key(|&k| fwd_dir(start, k));
        }
        seq.extend(g);
    }
    let mut skips = 0;
    for w in seq.windows(2) {
        match fwd_dir(w[0], w[1]) {
            1 => {}
            2 => skips += 1,
            _ => return false,
        }
    }
    skips <= 1
}

pub fn success(obs: &[Observation]) -> bool {
    cyclic_order_ok(&visit_groups(obs))
}

pub fn expert_target(s: &DrawState, g: [f64; 2], engaged: bool) -> [f64; 2] {
    if !engaged {
        return s.tool;
    }
    // counter-clockwise sweep: aim at the circle point a fixed arc ahead
    let rel = [g[0] - s.center[0], g[1] - s.center[1]];
    let theta = rel[1].atan2(rel[0]) + SWEEP_STEP / CIRCLE_RADIUS;
    [
        s.center[0] + CIRCLE_RADIUS * theta.cos(),
        s.center[1] + CIRCLE_RADIUS * theta.sin(),
    ]
}
