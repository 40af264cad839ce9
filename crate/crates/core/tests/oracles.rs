//! Library results checked against independent reference computations.

mod common;

use bisimcert::checker::bisim::{bisim_pseudometric, BisimVariant};
use bisimcert::checker::ot::wasserstein_exact;
use bisimcert::checker::stationary::stationary_distribution;
use bisimcert::checker::value::evaluate_mc;
use bisimcert::checker::{lipschitz_constants, LatentMc};
use bisimcert::env::policies::heuristic_policy;
use bisimcert::env::{Environment, LiftedChainSpec};
use bisimcert::latent::{LatentMdp, LatentPolicy, LatentRow};
use bisimcert::mdp::{rollout, Action};
use bisimcert::pac::{pointwise_bounds, LossEstimate, PacParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() }).collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; n];
        v[rng.random_range(0..n)] = 1.0;
        return v;
    }
    raw.iter().map(|x| x / s).collect()
}

/// Distances between random points in the plane.
fn random_metric(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    (0..n)
        .map(|i| (0..n).map(|j| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()).collect())
        .collect()
}

#[test]
fn transport_matches_dual_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let n = 2 + trial % 4;
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let d = random_metric(&mut rng, n);
        let got = wasserstein_exact(&p, &q, &d).unwrap();
        let want = common::kantorovich(&p, &q, &d);
        assert!((got - want).abs() <= 1e-9, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn transport_under_discrete_metric_is_total_variation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 2..=7 {
        let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i != j) as u8 as f64).collect()).collect();
        for _ in 0..20 {
            let p = random_distribution(&mut rng, n);
            let q = random_distribution(&mut rng, n);
            let got = wasserstein_exact(&p, &q, &d).unwrap();
            assert!((got - common::total_variation(&p, &q)).abs() <= 1e-12);
        }
    }
}

fn fixture_matrix(doc: &serde_json::Value, key: &str) -> Vec<Vec<f64>> {
    serde_json::from_value(doc[key].clone()).unwrap()
}

#[test]
fn four_state_fixture_matches_long_iteration() {
    let doc: serde_json::Value = serde_json::from_str(&common::read_fixture("four_state_bisim.json")).unwrap();
    let gamma = doc["gamma"].as_f64().unwrap();
    let (m, pi) = common::four_state();
    let mc = LatentMc::induced(&m, &pi).unwrap();
    let p = common::dense_of(&mc);
    for (key, label_variant, variant) in
        [("reward", false, BisimVariant::Reward), ("label", true, BisimVariant::Label)]
    {
        let stored = fixture_matrix(&doc, key);
        // 200 sweeps at gamma 1/2 leave an error far below f64 resolution.
        let oracle = common::bisim_long_iteration(&p, &mc.rewards, &mc.labels, label_variant, gamma, 200);
        let lib = bisim_pseudometric(&mc, variant, gamma, 1e-12).unwrap();
        for i in 0..mc.len() {
            for j in 0..mc.len() {
                assert!((oracle[i][j] - stored[i][j]).abs() <= 1e-12, "{key} oracle ({i},{j})");
                assert!((lib[i][j] - stored[i][j]).abs() <= 1e-9, "{key} library ({i},{j})");
            }
        }
    }
}

#[test]
fn bisimulation_on_random_chains_matches_long_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..6 {
        let n = 3 + trial % 2;
        let p = common::random_stochastic(&mut rng, n, 3);
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let labels: Vec<u64> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mc = LatentMc::from_dense(&p, &r, &labels).unwrap();
        let gamma = 0.6;
        let lib = bisim_pseudometric(&mc, BisimVariant::Reward, gamma, 1e-12).unwrap();
        let oracle = common::bisim_long_iteration(&p, &r, &labels, false, gamma, 120);
        for i in 0..n {
            for j in 0..n {
                assert!((lib[i][j] - oracle[i][j]).abs() <= 1e-9, "trial {trial} ({i},{j})");
            }
        }
    }
}

#[test]
fn discounted_values_match_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for &gamma in &[0.0, 0.5, 0.9, 0.99] {
        let n = 8;
        let p = common::random_stochastic(&mut rng, n, 4);
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mc = LatentMc::from_dense(&p, &r, &vec![0; n]).unwrap();
        let (v, _) = evaluate_mc(&mc, gamma, 1e-10).unwrap();
        let want = common::dense_values(&p, &r, gamma);
        for i in 0..n {
            assert!((v[i] - want[i]).abs() <= 1e-9, "gamma {gamma} state {i}");
        }
    }
}

#[test]
fn stationary_distribution_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for n in [2, 5, 9] {
        let p = common::random_stochastic(&mut rng, n, 3);
        let mc = LatentMc::from_dense(&p, &vec![0.0; n], &vec![0; n]).unwrap();
        let xi = stationary_distribution(&mc, 1e-13).unwrap();
        let want = common::dense_stationary(&p);
        for i in 0..n {
            assert!((xi[i] - want[i]).abs() <= 1e-10, "n {n} state {i}");
        }
    }
}

/// Six ground states merged in pairs into three latent states; the latent
/// model is the stationary-weighted aggregate, so the losses are exact.
#[test]
fn pointwise_bounds_hold_on_six_state_aggregations() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let gamma = 0.5;
    let phi = |s: usize| s / 2;
    for trial in 0..25 {
        let n = 6;
        let p = common::random_stochastic(&mut rng, n, 4);
        let r: Vec<f64> = (0..n).map(|_| 0.5 * (rng.random::<f64>() - 0.5)).collect();
        let xi = common::dense_stationary(&p);
        let mut latent_p = vec![vec![0.0; 3]; 3];
        let mut latent_r = vec![0.0; 3];
        let mut mass = vec![0.0; 3];
        for s in 0..n {
            mass[phi(s)] += xi[s];
            latent_r[phi(s)] += xi[s] * r[s];
            for t in 0..n {
                latent_p[phi(s)][phi(t)] += xi[s] * p[s][t];
            }
        }
        for z in 0..3 {
            latent_r[z] /= mass[z];
            for w in 0..3 {
                latent_p[z][w] /= mass[z];
            }
        }
        let mut lr = 0.0;
        let mut lp = 0.0;
        for s in 0..n {
            lr += xi[s] * (r[s] - latent_r[phi(s)]).abs();
            for t in 0..n {
                lp += xi[s] * p[s][t] * (1.0 - latent_p[phi(s)][phi(t)]);
            }
        }
        let rows = (0..3u64).map(|z| {
            let next = (0..3u64).map(|w| (w, latent_p[z as usize][w as usize])).filter(|e| e.1 > 0.0).collect();
            ((z, 0), LatentRow { next, reward: latent_r[z as usize], count: 0 })
        });
        let m = LatentMdp::from_rows(2, 0, 1, rows).unwrap();
        let policy = LatentPolicy::deterministic(1, (0..3u64).map(|z| (z, 0)));
        let consts = lipschitz_constants(&LatentMc::induced(&m, &policy).unwrap(), gamma).unwrap();
        let est = LossEstimate { lr, lp, t_used: 0, params: PacParams::new(1e-9, 0.5, gamma).unwrap(), unsupported_steps: 0 };

        let ground = LatentMc::from_dense(&p, &r, &vec![0; n]).unwrap();
        let d = bisim_pseudometric(&ground, BisimVariant::Reward, gamma, 1e-12).unwrap();
        let v = common::dense_values(&p, &r, gamma);
        for s1 in 0..n {
            for s2 in (s1 + 1)..n {
                if phi(s1) != phi(s2) {
                    continue;
                }
                let b = pointwise_bounds(&xi, s1, s2, &est, &consts).unwrap();
                assert!((v[s1] - v[s2]).abs() <= b.value_return + 1e-12, "trial {trial} value ({s1},{s2})");
                if let Some(bound) = b.bisim_reward {
                    assert!(d[s1][s2] <= bound + 1e-12, "trial {trial} bisim ({s1},{s2})");
                }
            }
        }
    }
}

#[test]
fn lifted_chain_transitions_follow_their_matrices() {
    let spec = LiftedChainSpec::oracle_default();
    let env = Environment::lifted_chain(spec.clone()).unwrap();
    let policy = heuristic_policy(&env);
    let trace = rollout(&env, &policy, 100_000, 21).unwrap();
    let n = spec.n_nodes;
    let mut counts = vec![vec![vec![0u64; n]; n]; spec.n_actions()];
    for t in &trace.transitions {
        let a = match t.a {
            Action::Discrete(a) => a,
            Action::Continuous(_) => panic!("chain actions are discrete"),
        };
        counts[a][spec.node_of(&t.s)][spec.node_of(&t.s_next)] += 1;
    }
    let mut stat = 0.0;
    let mut df = 0usize;
    for a in 0..spec.n_actions() {
        for i in 0..n {
            let total: u64 = counts[a][i].iter().sum();
            assert!(total > 1000, "pair ({i}, {a}) visited {total} times");
            let mut support = 0;
            for j in 0..n {
                let pr = spec.transitions[a][i][j];
                if pr == 0.0 {
                    assert_eq!(counts[a][i][j], 0);
                    continue;
                }
                support += 1;
                let e = pr * total as f64;
                stat += (counts[a][i][j] as f64 - e).powi(2) / e;
            }
            df += support - 1;
        }
    }
    let p_value = 1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat);
    assert!(p_value > 0.001, "chi-square {stat} on {df} degrees of freedom, p = {p_value}");
}
