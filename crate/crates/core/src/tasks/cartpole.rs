use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::ParamVector;
use super::mlp::RowForward;
use crate::error::{invalid, shape, Result};
use crate::seed::derive_seed;

/// Classic cart-pole physics with explicit Euler integration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartpoleConfig {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub pole_half_length: f64,
    pub force_mag: f64,
    pub dt: f64,
    pub x_limit: f64,
    /// Radians.
    pub angle_limit: f64,
    pub max_steps: usize,
}

impl Default for CartpoleConfig {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            x_limit: 2.4,
            angle_limit: 12.0_f64.to_radians(),
            max_steps: 500,
        }
    }
}

pub const OBS_DIM: usize = 4;
pub const NUM_ACTIONS: usize = 2;

/// State `[x, ẋ, angle, angular velocity]`.
#[derive(Clone, Debug)]
pub struct CartpoleEnv {
    pub config: CartpoleConfig,
    state: [f64; 4],
    steps: usize,
    done: bool,
}

impl CartpoleEnv {
    pub fn new(config: CartpoleConfig) -> Self {
        Self {
            config,
            state: [0.0; 4],
            steps: 0,
            done: false,
        }
    }

    /// Starts an episode from U(−0.05, 0.05)⁴.
    pub fn reset(&mut self, rng: &mut impl Rng) -> [f64; 4] {
        for s in &mut self.state {
            *s = rng.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    pub fn observation(&self) -> [f32; 4] {
        self.state.map(|v| v as f32)
    }

    /// Applies action 0 (push left) or 1 (push right). Returns
    /// `(reward, done)`; every step taken, including the last, earns 1.
    pub fn step(&mut self, action: usize) -> (f64, bool) {
        let c = &self.config;
        let [x, x_dot, th, th_dot] = self.state;
        let force = if action == 1 { c.force_mag } else { -c.force_mag };
        let total_mass = c.cart_mass + c.pole_mass;
        let pml = c.pole_mass * c.pole_half_length;
        let (sin, cos) = th.sin_cos();
        let temp = (force + pml * th_dot * th_dot * sin) / total_mass;
        let th_acc = (c.gravity * sin - cos * temp)
            / (c.pole_half_length * (4.0 / 3.0 - c.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pml * th_acc * cos / total_mass;
        self.state = [
            x + c.dt * x_dot,
            x_dot + c.dt * x_acc,
            th + c.dt * th_dot,
            th_dot + c.dt * th_acc,
        ];
        self.steps += 1;
        let fell = self.state[0].abs() > c.x_limit || self.state[2].abs() > c.angle_limit;
        self.done = fell || self.steps >= c.max_steps;
        (1.0, self.done)
    }
}

pub fn check_policy_arch(params: &ParamVector) -> Result<()> {
    let a = params.arch();
    if a.input_dim() != OBS_DIM || a.output_dim() != NUM_ACTIONS {
        return Err(shape(
            "rollout",
            format!("policy maps {} → {}, env needs {OBS_DIM} → {NUM_ACTIONS}", a.input_dim(), a.output_dim()),
        ));
    }
    Ok(())
}

pub(crate) fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Mean undiscounted return of the greedy (argmax) policy over `episodes`
/// episodes whose initial states derive from `seed`.
pub fn rollout_return(params: &ParamVector, config: &CartpoleConfig, episodes: usize, seed: u64) -> Result<f64> {
    check_policy_arch(params)?;
    if episodes == 0 {
        return Err(invalid("episodes must be ≥ 1"));
    }
    let mut env = CartpoleEnv::new(config.clone());
    let mut fwd = RowForward::new(params.arch());
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[e as u64]));
        env.reset(&mut rng);
        loop {
            let obs = env.observation();
            let a = argmax(fwd.run(params, &obs));
            let (r, done) = env.step(a);
            total += r;
            if done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}
