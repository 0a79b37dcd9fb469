//! Drag the cover handle around its hinge. A released cover below vertical
//! falls shut. Slots: hinge (2), orientation as (cos+1)/2, (sin+1)/2 (2),
//! angle / π (1), handle (2), cover length (1), held (1).

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use super::{dist, uniform_point, Observation, GRIPPER_RADIUS, HOME, SUBSTEPS};

pub const GRAB_RADIUS: f64 = 0.05;
pub const OPEN_ANGLE: f64 = 2.5;
const CONTACT_RADIUS: f64 = 0.05;
/// Closing speed of a released cover, radians per low-level step.
const FALL_RATE: f64 = 0.1;
const COVER_LENGTHS: [f64; 4] = [0.12, 0.14, 0.16, 0.18];

#[derive(Debug, Clone, PartialEq)]
pub struct BookState {
    pub hinge: [f64; 2],
    pub orientation: f64,
    pub angle: f64,
    pub length: f64,
}

impl BookState {
    pub fn handle(&self) -> [f64; 2] {
        handle_at(self, self.angle)
    }
}

fn handle_at(s: &BookState, angle: f64) -> [f64; 2] {
    let a = s.orientation + angle;
    [s.hinge[0] + s.length * a.cos(), s.hinge[1] + s.length * a.sin()]
}

pub fn reset<R: Rng + ?Sized>(variant: u32, rng: &mut R) -> BookState {
    let length = COVER_LENGTHS[variant as usize];
    let m = length + 0.06;
    loop {
        let hinge = uniform_point(rng, m, 1.0 - m);
        let orientation = rng.gen_range(0.0..2.0 * PI);
        let s = BookState {
            hinge,
            orientation,
            angle: 0.0,
            length,
        };
        if dist(s.handle(), HOME) >= 0.15 && dist(hinge, HOME) > length + GRIPPER_RADIUS + 0.05 {
            return s;
        }
    }
}

pub fn substep(s: &mut BookState, prev: [f64; 2], g: [f64; 2], held: &mut bool) {
    if *held || dist(prev, s.handle()) < GRAB_RADIUS {
        let rel = [g[0] - s.hinge[0], g[1] - s.hinge[1]];
        let mut psi = rel[1].atan2(rel[0]) - s.orientation;
        // map into (-π/2, 3π/2] so the closed and open ends are both reachable
        while psi <= -FRAC_PI_2 {
            psi += 2.0 * PI;
        }
        while psi > 3.0 * FRAC_PI_2 {
            psi -= 2.0 * PI;
        }
        let target = psi.clamp(0.0, PI);
        if dist(g, handle_at(s, target)) < GRAB_RADIUS {
            s.angle = target;
            *held = true;
            return;
        }
        *held = false;
    }
    if !*held && s.angle < FRAC_PI_2 {
        s.angle = (s.angle - FALL_RATE / SUBSTEPS as f64).max(0.0);
    }
}

pub fn observe(s: &BookState, held: bool, slots: &mut [f64]) {
    slots[0] = s.hinge[0];
    slots[1] = s.hinge[1];
    slots[2] = (s.orientation.cos() + 1.0) / 2.0;
    slots[3] = (s.orientation.sin() + 1.0) / 2.0;
    slots[4] = s.angle / PI;
    let h = s.handle();
    slots[5] = h[0];
    slots[6] = h[1];
    slots[7] = s.length;
    slots[8] = held as u8 as f64;
}

fn angle(o: &Observation) -> f64 {
    o.slot(4) * PI
}

pub fn contact(next: &Observation) -> bool {
    dist(next.gripper(), next.slot_xy(5)) < CONTACT_RADIUS
}

pub fn clip_success(obs: &[Observation]) -> bool {
    angle(&obs[obs.len() - 1]) - angle(&obs[0]) >= 0.2
}

pub fn success(obs: &[Observation]) -> bool {
    angle(&obs[obs.len() - 1]) > OPEN_ANGLE
}

pub fn expert_target(s: &BookState, g: [f64; 2], held: bool) -> [f64; 2] {
    if !held {
        return s.handle();
    }
    if s.angle >= 2.8 {
        return g;
    }
    let da = 0.045 / s.length;
    handle_at(s, (s.angle + da).min(PI))
}
