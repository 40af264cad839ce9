//! Physics constants of the simulated control tasks, collected in one place.
//! Values follow the classic gym implementations.

use std::f64::consts::PI;

pub mod cartpole {
    use super::PI;

    pub const GRAVITY: f64 = 9.8;
    pub const MASS_CART: f64 = 1.0;
    pub const MASS_POLE: f64 = 0.1;
    pub const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
    /// Half the pole length.
    pub const LENGTH: f64 = 0.5;
    pub const POLE_MASS_LENGTH: f64 = MASS_POLE * LENGTH;
    pub const FORCE_MAG: f64 = 10.0;
    pub const TAU: f64 = 0.02;
    pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * PI / 360.0;
    pub const X_THRESHOLD: f64 = 2.4;
    pub const INIT_HALF_WIDTH: f64 = 0.05;
    pub const MAX_EPISODE_STEPS: usize = 200;
    pub const REWARD_BOUNDS: (f64, f64) = (0.0, 1.0);
    pub const STEP_REWARD: f64 = 1.0;
}

pub mod mountaincar {
    pub const MIN_POSITION: f64 = -1.2;
    pub const MAX_POSITION: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const GOAL_POSITION: f64 = 0.5;
    pub const FORCE: f64 = 0.001;
    pub const GRAVITY: f64 = 0.0025;
    pub const INIT_LOW: f64 = -0.6;
    pub const INIT_HIGH: f64 = -0.4;
    pub const MAX_EPISODE_STEPS: usize = 200;
    pub const REWARD_BOUNDS: (f64, f64) = (-1.0, 0.0);
    pub const STEP_REWARD: f64 = -1.0;
}

pub mod pendulum {
    use super::PI;

    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const DT: f64 = 0.05;
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const INIT_MAX_ANGLE: f64 = PI;
    pub const INIT_MAX_SPEED: f64 = 1.0;
    pub const MAX_EPISODE_STEPS: usize = 200;
    /// Worst step cost is pi^2 + 0.1 * 8^2 + 0.001 * 2^2.
    pub const REWARD_BOUNDS: (f64, f64) = (-(PI * PI + 0.1 * 64.0 + 0.001 * 4.0), 0.0);
}
