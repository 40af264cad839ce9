use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::mdp::{GroundState, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cmp {
    /// Strictly below the threshold.
    Lt,
    /// At or above the threshold.
    Ge,
}

/// Threshold test on one state coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    #[serde(default)]
    pub name: String,
    pub coord: usize,
    pub cmp: Cmp,
    pub threshold: f64,
}

impl Predicate {
    pub fn new(name: &str, coord: usize, cmp: Cmp, threshold: f64) -> Self {
        Predicate { name: name.to_string(), coord, cmp, threshold }
    }

    pub fn holds(&self, s: &GroundState) -> bool {
        let x = s.coords()[self.coord];
        match self.cmp {
            Cmp::Lt => x < self.threshold,
            Cmp::Ge => x >= self.threshold,
        }
    }
}

/// Ordered list of predicates; bit `i` of a label is predicate `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelingSpec {
    pub predicates: Vec<Predicate>,
}

impl LabelingSpec {
    pub fn n_ap(&self) -> usize {
        self.predicates.len()
    }

    pub fn label(&self, s: &GroundState) -> Label {
        let bits = self
            .predicates
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, p)| acc | ((p.holds(s) as u64) << i));
        Label::new(bits, self.predicates.len())
    }

    /// Safe cart position and safe pole angle over `(x, x_dot, theta, theta_dot)`.
    pub fn cartpole() -> Self {
        LabelingSpec {
            predicates: vec![
                Predicate::new("safe_position", 0, Cmp::Lt, 1.5),
                Predicate::new("safe_angle", 2, Cmp::Lt, 0.15),
            ],
        }
    }

    /// Target position, right-hand side of the mountain, and rightward motion
    /// over `(x, v)`.
    pub fn mountaincar() -> Self {
        LabelingSpec {
            predicates: vec![
                Predicate::new("target", 0, Cmp::Ge, 0.5),
                Predicate::new("right_side", 0, Cmp::Ge, -0.5),
                Predicate::new("moving_right", 1, Cmp::Ge, 0.0),
            ],
        }
    }

    /// Over `(cos theta, sin theta, omega)`.
    pub fn pendulum() -> Self {
        LabelingSpec {
            predicates: vec![
                Predicate::new("near_top", 0, Cmp::Ge, (PI / 3.0).cos()),
                Predicate::new("upper_half", 0, Cmp::Ge, 0.0),
                Predicate::new("right_half", 1, Cmp::Ge, 0.0),
                Predicate::new("clockwise", 2, Cmp::Ge, 0.0),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartpole_origin_is_safe() {
        let l = LabelingSpec::cartpole().label(&GroundState::new(vec![0.0, 0.0, 0.0, 0.0]));
        assert_eq!(l.to_vec(), vec![1, 1]);
    }

    #[test]
    fn mountaincar_left_of_valley_has_no_labels() {
        let l = LabelingSpec::mountaincar().label(&GroundState::new(vec![-0.6, -0.01]));
        assert_eq!(l.to_vec(), vec![0, 0, 0]);
    }

    #[test]
    fn mountaincar_goal_sets_first_bit() {
        let l = LabelingSpec::mountaincar().label(&GroundState::new(vec![0.5, 0.0]));
        assert!(l.get(0) && l.get(1));
    }

    #[test]
    fn pendulum_upright_sets_first_three_bits() {
        let l = LabelingSpec::pendulum().label(&GroundState::new(vec![1.0, 0.0, -0.3]));
        assert_eq!(l.to_vec(), vec![1, 1, 1, 0]);
    }

    #[test]
    fn predicate_config_roundtrip() {
        let spec = LabelingSpec::mountaincar();
        let json = serde_json::to_string(&spec).unwrap();
        let back: LabelingSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
