//! Pick up the scoop, gather particles, drop them in the bowl.
//! Slots: scoop (2), engaged (1), bowl (2), centroid of loose particles (2),
//! nearest loose particle (2), fraction loose, carried, in bowl (3).

use rand::Rng;

use super::{dist, uniform_point, Observation, HOME};

pub const NUM_PARTICLES: usize = 8;
pub const TOOL_RADIUS: f64 = 0.06;
pub const PICKUP_RADIUS: f64 = 0.04;
pub const BOWL_RADIUS: f64 = 0.08;
pub const CAPACITY: usize = 4;
pub const SUCCESS_COUNT: usize = 3;
const CONTACT_RADIUS: f64 = 0.06;
const SPREADS: [f64; 3] = [0.03, 0.04, 0.05];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoopState {
    pub tool: [f64; 2],
    pub bowl: [f64; 2],
    pub particles: [[f64; 2]; NUM_PARTICLES],
    pub carried: [bool; NUM_PARTICLES],
    pub deposited: [bool; NUM_PARTICLES],
}

impl ScoopState {
    pub fn in_bowl(&self, i: usize) -> bool {
        !self.carried[i] && dist(self.particles[i], self.bowl) < BOWL_RADIUS
    }

    pub fn in_bowl_count(&self) -> usize {
        (0..NUM_PARTICLES).filter(|&i| self.in_bowl(i)).count()
    }

    fn loose(&self, i: usize) -> bool {
        !self.carried[i] && !self.deposited[i]
    }
}

pub fn reset<R: Rng + ?Sized>(variant: u32, rng: &mut R) -> ScoopState {
    let spread = SPREADS[variant as usize];
    loop {
        let tool = uniform_point(rng, 0.2, 0.8);
        let bowl = uniform_point(rng, 0.2, 0.8);
        let pile = uniform_point(rng, 0.2, 0.8);
        let ok = dist(tool, HOME) >= 0.15
            && dist(bowl, HOME) >= 0.15
            && dist(pile, HOME) >= 0.15
            && dist(tool, bowl) >= 0.2
            && dist(tool, pile) >= 0.2
            && dist(bowl, pile) >= 0.25;
        if !ok {
            continue;
        }
        let mut particles = [[0.0; 2]; NUM_PARTICLES];
        for p in particles.iter_mut() {
            let r = spread * rng.gen_range(0.0f64..1.0).sqrt();
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            *p = [pile[0] + r * th.cos(), pile[1] + r * th.sin()];
        }
        return ScoopState {
            tool,
            bowl,
            particles,
            carried: [false; NUM_PARTICLES],
            deposited: [false; NUM_PARTICLES],
        };
    }
}

pub fn substep(s: &mut ScoopState, g: [f64; 2], engaged: &mut bool) {
    if !*engaged && dist(g, s.tool) < TOOL_RADIUS {
        *engaged = true;
    }
    if !*engaged {
        return;
    }
    s.tool = g;
    let mut n_carried = s.carried.iter().filter(|&&c| c).count();
    for i in 0..NUM_PARTICLES {
        if n_carried < CAPACITY && s.loose(i) && dist(g, s.particles[i]) < PICKUP_RADIUS {
            s.carried[i] = true;
            n_carried += 1;
        }
    }
    let inside = dist(g, s.bowl) < BOWL_RADIUS - 0.01;
    for i in 0..NUM_PARTICLES {
        if s.carried[i] {
            s.particles[i] = g;
            if inside {
                s.carried[i] = false;
                s.deposited[i] = true;
            }
        }
    }
}

pub fn observe(s: &ScoopState, g: [f64; 2], engaged: bool, slots: &mut [f64]) {
    slots[0] = s.tool[0];
    slots[1] = s.tool[1];
    slots[2] = engaged as u8 as f64;
    slots[3] = s.bowl[0];
    slots[4] = s.bowl[1];
    let loose: Vec<[f64; 2]> = (0..NUM_PARTICLES).filter(|&i| s.loose(i)).map(|i| s.particles[i]).collect();
    if !loose.is_empty() {
        let n = loose.len() as f64;
        slots[5] = loose.iter().map(|p| p[0]).sum::<f64>() / n;
        slots[6] = loose.iter().map(|p| p[1]).sum::<f64>() / n;
        let near = loose
            .iter()
            .min_by(|a, b| dist(**a, g).total_cmp(&dist(**b, g)))
            .copied()
            .unwrap();
        slots[7] = near[0];
        slots[8] = near[1];
    }
    let n = NUM_PARTICLES as f64;
    slots[9] = loose.len() as f64 / n;
    slots[10] = s.carried.iter().filter(|&&c| c).count() as f64 / n;
    slots[11] = s.in_bowl_count() as f64 / n;
}

fn counts(o: &Observation) -> (usize, usize, usize) {
    let n = NUM_PARTICLES as f64;
    let c = |i: usize| (o.slot(i) * n).round().max(0.0) as usize;
    (c(9), c(10), c(11))
}

pub fn contact(prev: &Observation, next: &Observation) -> bool {
    let (_, c0, b0) = counts(prev);
    let (l1, c1, b1) = counts(next);
    let engaged = next.slot(2) >= 0.5;
    c0 != c1 || b0 != b1 || (engaged && l1 > 0 && dist(next.gripper(), next.slot_xy(7)) < CONTACT_RADIUS)
}

pub fn clip_success(obs: &[Observation]) -> bool {
    obs.windows(2).any(|w| {
        let (_, c0, b0) = counts(&w[0]);
        let (_, c1, b1) = counts(&w[1]);
        c1 > c0 || b1 > b0
    })
}

pub fn success(obs: &[Observation]) -> bool {
    counts(&obs[obs.len() - 1]).2 >= SUCCESS_COUNT
}

pub fn expert_target(s: &ScoopState, g: [f64; 2], engaged: bool) -> [f64; 2] {
    if !engaged {
        return s.tool;
    }
    let carried = s.carried.iter().filter(|&&c| c).count();
    let nearest = (0..NUM_PARTICLES)
        .filter(|&i| s.loose(i))
        .map(|i| s.particles[i])
        .min_by(|a, b| dist(*a, g).total_cmp(&dist(*b, g)));
    let target_total = s.in_bowl_count() + carried;
    match nearest {
        Some(p) if carried < 3 && target_total < 6 && !(carried > 0 && dist(p, g) > 0.12) => p,
        _ => s.bowl,
    }
}
