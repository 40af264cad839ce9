use bisimcert::env::{heuristic_policy, Environment};
use bisimcert::mdp::{episode_returns, Policy};

fn returns(id: &str) -> Vec<f64> {
    let env = Environment::from_id(id).unwrap();
    let pol = heuristic_policy(&env);
    episode_returns(&env, 30, 3, |s, rngs| pol.act(&env, s, &mut rngs.policy)).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn cartpole_controller_balances_every_episode() {
    let r = returns("cartpole");
    assert!(r.iter().all(|&x| x >= 195.0), "{r:?}");
}

#[test]
fn mountaincar_controller_reaches_goal_before_time_limit() {
    let r = returns("mountaincar");
    assert!(r.iter().all(|&x| x > -200.0), "{r:?}");
}

#[test]
fn pendulum_controller_beats_random_by_far() {
    let env = Environment::from_id("pendulum").unwrap();
    let random = episode_returns(&env, 30, 3, |_, rngs| {
        bisimcert::mdp::UniformRandomPolicy.act(&env, &bisimcert::mdp::GroundState::new(vec![]), &mut rngs.policy)
    })
    .unwrap();
    let r = returns("pendulum");
    assert!(mean(&r) > -300.0 && mean(&r) > mean(&random) + 500.0, "{} vs {}", mean(&r), mean(&random));
}

#[test]
fn lifted_chain_has_no_episodes() {
    let env = Environment::from_id("lifted_chain").unwrap();
    assert!(episode_returns(&env, 1, 0, |_, _| Ok(bisimcert::mdp::Action::Discrete(0))).is_err());
}
