//! Pick up the tissue, then pass over every mark.
//! Slots: tissue (2), engaged (1), 3 × (mark x, y, erased) (9).

use rand::Rng;

use super::{dist, uniform_point, Observation, HOME};

pub const TOOL_RADIUS: f64 = 0.06;
pub const ERASE_RADIUS: f64 = 0.04;
const CONTACT_RADIUS: f64 = 0.06;

#[derive(Debug, Clone, PartialEq)]
pub struct WipeState {
    pub tool: [f64; 2],
    pub marks: Vec<[f64; 2]>,
    pub erased: Vec<bool>,
}

pub fn num_marks(variant: u32) -> usize {
    variant as usize + 1
}

pub fn reset<R: Rng + ?Sized>(variant: u32, rng: &mut R) -> WipeState {
    let n = num_marks(variant);
    loop {
        let tool = uniform_point(rng, 0.2, 0.8);
        let marks: Vec<[f64; 2]> = (0..n).map(|_| uniform_point(rng, 0.2, 0.8)).collect();
        let ok = dist(tool, HOME) >= 0.15
            && marks.iter().all(|&m| dist(m, HOME) >= 0.15 && dist(m, tool) >= 0.15)
            && (0..n).all(|i| (i + 1..n).all(|j| dist(marks[i], marks[j]) >= 0.18));
        if ok {
            return WipeState {
                tool,
                erased: vec![false; n],
                marks,
            };
        }
    }
}

pub fn substep(s: &mut WipeState, g: [f64; 2], engaged: &mut bool) {
    if !*engaged && dist(g, s.tool) < TOOL_RADIUS {
        *engaged = true;
    }
    if *engaged {
        s.tool = g;
        for (m, e) in s.marks.iter().zip(s.erased.iter_mut()) {
            if !*e && dist(g, *m) < ERASE_RADIUS {
                *e = true;
            }
        }
    }
}

pub fn observe(s: &WipeState, _g: [f64; 2], engaged: bool, slots: &mut [f64]) {
    slots[0] = s.tool[0];
    slots[1] = s.tool[1];
    slots[2] = engaged as u8 as f64;
    for i in 0..3 {
        let base = 3 + 3 * i;
        match s.marks.get(i) {
            Some(m) => {
                slots[base] = m[0];
                slots[base + 1] = m[1];
                slots[base + 2] = s.erased[i] as u8 as f64;
            }
            None => {
                slots[base + 2] = 1.0;
            }
        }
    }
}

fn mark(o: &Observation, i: usize) -> [f64; 2] {
    o.slot_xy(3 + 3 * i)
}

fn erased_count(variant: u32, o: &Observation) -> usize {
    (0..num_marks(variant)).filter(|&i| o.slot(5 + 3 * i) >= 0.5).count()
}

pub fn contact(variant: u32, next: &Observation) -> bool {
    let g = next.gripper();
    (0..num_marks(variant)).any(|i| dist(g, mark(next, i)) < CONTACT_RADIUS)
}

pub fn clip_success(variant: u32, obs: &[Observation]) -> bool {
    erased_count(variant, &obs[obs.len() - 1]) > erased_count(variant, &obs[0])
}

pub fn success(variant: u32, obs: &[Observation]) -> bool {
    erased_count(variant, &obs[obs.len() - 1]) == num_marks(variant)
}

pub fn expert_target(s: &WipeState, g: [f64; 2], engaged: bool) -> [f64; 2] {
    if !engaged {
        return s.tool;
    }
    // marks in index order
    s.marks.iter().zip(&s.erased).find(|(_, &e)| !e).map_or(g, |(m, _)| *m)
}
