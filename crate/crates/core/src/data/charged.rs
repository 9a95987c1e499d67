//! Two-dimensional charged particles in a reflecting box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SceneRecord;
use crate::model::ClassAssignment;
use crate::numerics::rng::{seeded, shuffle, standard_normal};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Lower bound on `r³` in the pair force.
pub const SOFTENING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChargeMode {
    /// Each charge is +1 with probability `p_positive`, else −1.
    Random { p_positive: f64 },
    /// Exactly `positive` charges of +1, the rest −1, in shuffled order.
    Balanced { positive: usize },
}

impl Default for ChargeMode {
    fn default() -> Self {
        ChargeMode::Random { p_positive: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChargedConfig {
    pub n_particles: usize,
    pub charges: ChargeMode,
    /// Walls at `±box_size` on both axes.
    pub box_size: f64,
    pub strength: f64,
    /// Integration step.
    pub dt: f64,
    /// Integration steps between recorded frames.
    pub sample_every: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Standard deviation of initial positions.
    pub init_spread: f64,
    /// Norm of every initial velocity.
    pub init_speed: f64,
    /// Gaussian observation noise added to recorded inputs.
    pub noise: f64,
}

impl Default for ChargedConfig {
    fn default() -> Self {
        ChargedConfig {
            n_particles: 5,
            charges: ChargeMode::default(),
            box_size: 5.0,
            strength: 1.0,
            dt: 0.001,
            sample_every: 100,
            t_in: 80,
            t_out: 20,
            init_spread: 1.0,
            init_speed: 0.5,
            noise: 0.0,
        }
    }
}

impl ChargedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config(format!("n_particles must be at least 2, got {}", self.n_particles)));
        }
        if !(self.dt > 0.0) || !(self.box_size > 0.0) || self.sample_every == 0 {
            return Err(Error::Config("dt, box_size and sample_every must be positive".into()));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Config("t_in and t_out must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.init_spread >= 0.0 && self.init_speed >= 0.0) {
            return Err(Error::Config("noise and initial spreads must be nonnegative".into()));
        }
        match self.charges {
            ChargeMode::Random { p_positive } if !(0.0..=1.0).contains(&p_positive) => {
                Err(Error::Config("p_positive must lie in [0, 1]".into()))
            }
            ChargeMode::Balanced { positive } if positive > self.n_particles => {
                Err(Error::Config("more positive charges than particles".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Positions and velocities of every particle, `[n][2]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub charge: Vec<f64>,
}

impl ParticleState {
    pub fn forces(&self, strength: f64) -> Vec<[f64; 2]> {
        let n = self.pos.len();
        let mut f = vec![[0.0; 2]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d = [self.pos[i][0] - self.pos[j][0], self.pos[i][1] - self.pos[j][1]];
                let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let k = strength * self.charge[i] * self.charge[j] / (r * r * r).max(SOFTENING);
                for a in 0..2 {
                    f[i][a] += k * d[a];
                    f[j][a] -= k * d[a];
                }
            }
        }
        f
    }

    pub fn momentum(&self) -> [f64; 2] {
        let mut p = [0.0; 2];
        for v in &self.vel {
            p[0] += v[0];
            p[1] += v[1];
        }
        p
    }

    /// Kinetic plus pair potential energy (unit masses, unsoftened pairs).
    pub fn energy(&self, strength: f64) -> f64 {
        let n = self.pos.len();
        let mut e: f64 = self.vel.iter().map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1])).sum();
        for i in 0..n {
            for j in i + 1..n {
                let d = [self.pos[i][0] - self.pos[j][0], self.pos[i][1] - self.pos[j][1]];
                let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
                e += strength * self.charge[i] * self.charge[j] / r;
            }
        }
        e
    }

    /// One kick-drift-kick leapfrog step followed by wall reflection.
    /// Returns whether any particle hit a wall.
    pub fn step(&mut self, dt: f64, strength: f64, box_size: f64) -> bool {
        let f = self.forces(strength);
        for (v, fi) in self.vel.iter_mut().zip(&f) {
            v[0] += 0.5 * dt * fi[0];
            v[1] += 0.5 * dt * fi[1];
        }
        for (p, v) in self.pos.iter_mut().zip(&self.vel) {
            p[0] += dt * v[0];
            p[1] += dt * v[1];
        }
        let f = self.forces(strength);
        for (v, fi) in self.vel.iter_mut().zip(&f) {
            v[0] += 0.5 * dt * fi[0];
            v[1] += 0.5 * dt * fi[1];
        }
        let mut hit = false;
        for (p, v) in self.pos.iter_mut().zip(self.vel.iter_mut()) {
            for a in 0..2 {
                if p[a] > box_size {
                    p[a] = 2.0 * box_size - p[a];
                    v[a] = -v[a];
                    hit = true;
                } else if p[a] < -box_size {
                    p[a] = -2.0 * box_size - p[a];
                    v[a] = -v[a];
                    hit = true;
                }
            }
        }
        hit
    }
}

fn draw_charges(cfg: &ChargedConfig, rng: &mut impl Rng) -> Vec<f64> {
    match cfg.charges {
        ChargeMode::Random { p_positive } => (0..cfg.n_particles)
            .map(|_| if rng.random::<f64>() < p_positive { 1.0 } else { -1.0 })
            .collect(),
        ChargeMode::Balanced { positive } => {
            let mut q: Vec<f64> = (0..cfg.n_particles).map(|i| if i < positive { 1.0 } else { -1.0 }).collect();
            shuffle(&mut q, rng);
            q
        }
    }
}

pub fn initial_state(cfg: &ChargedConfig, rng: &mut impl Rng) -> ParticleState {
    let charge = draw_charges(cfg, rng);
    let pos = (0..cfg.n_particles)
        .map(|_| {
            let p = [standard_normal(rng) * cfg.init_spread, standard_normal(rng) * cfg.init_spread];
            [p[0].clamp(-cfg.box_size, cfg.box_size), p[1].clamp(-cfg.box_size, cfg.box_size)]
        })
        .collect();
    let vel = (0..cfg.n_particles)
        .map(|_| {
            let v = [standard_normal(rng), standard_normal(rng)];
            let norm = (v[0] * v[0] + v[1] * v[1]).sqrt().max(1e-12);
            [v[0] / norm * cfg.init_speed, v[1] / norm * cfg.init_speed]
        })
        .collect();
    ParticleState { pos, vel, charge }
}

pub fn charge_label(q: f64) -> &'static str {
    if q >= 0.0 {
        "+"
    } else {
        "-"
    }
}

/// Integrates from `state` and records `frames` snapshots, one every
/// `sample_every` steps (the first one before any step).
pub fn integrate(cfg: &ChargedConfig, state: &mut ParticleState, frames: usize) -> Vec<ParticleState> {
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            for _ in 0..cfg.sample_every {
                state.step(cfg.dt, cfg.strength, cfg.box_size);
            }
        }
        out.push(state.clone());
    }
    out
}

/// One scene: inputs are `(x, y, vx, vy)` over `t_in` frames, targets are
/// positions over the following `t_out` frames, labels are charge signs.
pub fn simulate_charged(cfg: &ChargedConfig, seed: u64) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let mut state = initial_state(cfg, &mut rng);
    let frames = integrate(cfg, &mut state, cfg.t_in + cfg.t_out);
    let n = cfg.n_particles;
    let mut x = Tensor::zeros(&[n, cfg.t_in, 4]);
    let mut y = Tensor::zeros(&[n, cfg.t_out, 2]);
    for (t, fr) in frames.iter().enumerate() {
        for i in 0..n {
            if t < cfg.t_in {
                let vals = [fr.pos[i][0], fr.pos[i][1], fr.vel[i][0], fr.vel[i][1]];
                for (k, v) in vals.into_iter().enumerate() {
                    let noise = if cfg.noise > 0.0 { cfg.noise * standard_normal(&mut rng) } else { 0.0 };
                    x.set(&[i, t, k], v + noise);
                }
            } else {
                y.set(&[i, t - cfg.t_in, 0], fr.pos[i][0]);
                y.set(&[i, t - cfg.t_in, 1], fr.pos[i][1]);
            }
        }
    }
    let labels = ClassAssignment::new(state.charge.iter().map(|&q| charge_label(q)))?;
    Ok(SceneRecord {
        id: format!("charged-{seed:016x}"),
        seed,
        x,
        y,
        labels,
        tree: None,
    })
}
