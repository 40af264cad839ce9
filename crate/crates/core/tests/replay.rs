//! Empirical sampling frequencies of the replay buffer against its
//! priorities.

mod common;

use bisimcert::replay::{BufferConfig, ReplayBuffer, ReplayMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 100_000;

/// Target law `p_i^ς / sum_j p_j^ς` computed from the stored priorities.
fn target_law(buf: &ReplayBuffer<usize>) -> Vec<f64> {
    let exp = buf.config().priority_exponent;
    let w: Vec<f64> = (0..buf.len()).map(|s| buf.entry(s).priority.powf(exp)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn empirical(buf: &ReplayBuffer<usize>, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; buf.len()];
    let batch = buf.len().min(1000);
    for _ in 0..DRAWS / batch {
        for s in buf.sample(batch, 0.4, &mut rng).unwrap().slots {
            counts[s] += 1;
        }
    }
    let drawn = (DRAWS / batch) * batch;
    counts.iter().map(|&c| c as f64 / drawn as f64).collect()
}

#[test]
fn bucket_sampling_matches_its_priorities() {
    let cfg = BufferConfig { capacity: 200_000, mode: ReplayMode::Bucket, ..BufferConfig::default() };
    let mut buf = ReplayBuffer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // A skewed visitation: latent 0 dominates.
    for i in 0..DRAWS {
        let z = if rng.random::<f64>() < 0.7 { 0 } else { rng.random_range(1..8) };
        buf.insert(i, z);
    }
    let law = target_law(&buf);
    for (s, &p) in law.iter().enumerate().step_by(997) {
        assert!((buf.probability(s) - p).abs() <= 1e-12);
    }
    // Group slots by latent state so the frequencies have enough mass to compare.
    let latent_of: Vec<u64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..DRAWS).map(|_| if rng.random::<f64>() < 0.7 { 0 } else { rng.random_range(1..8) }).collect()
    };
    let emp = empirical(&buf, 2);
    let mut by_latent = [[0.0f64; 2]; 8];
    for s in 0..buf.len() {
        by_latent[latent_of[s] as usize][0] += law[s];
        by_latent[latent_of[s] as usize][1] += emp[s];
    }
    let p: Vec<f64> = by_latent.iter().map(|r| r[0]).collect();
    let q: Vec<f64> = by_latent.iter().map(|r| r[1]).collect();
    let tv = common::total_variation(&p, &q);
    assert!(tv <= 0.01, "total variation {tv}");
}

#[test]
fn loss_sampling_matches_logistic_priorities() {
    let cfg = BufferConfig { capacity: 16, mode: ReplayMode::Loss, priority_exponent: 0.3, max_priority: 1.0 };
    let mut buf = ReplayBuffer::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..16 {
        buf.insert(i, 0);
    }
    for s in 0..16 {
        buf.update_priority_loss(s, rng.random::<f64>() * 5.0).unwrap();
    }
    let law = target_law(&buf);
    let emp = empirical(&buf, 4);
    let tv = common::total_variation(&law, &emp);
    assert!(tv <= 0.01, "total variation {tv}");
}

#[test]
fn uniform_sampling_is_uniform_and_unweighted() {
    let cfg = BufferConfig { capacity: 10, mode: ReplayMode::Uniform, ..BufferConfig::default() };
    let mut buf = ReplayBuffer::new(cfg).unwrap();
    for i in 0..25 {
        buf.insert(i, (i % 3) as u64);
    }
    assert_eq!(buf.len(), 10);
    let emp = empirical(&buf, 5);
    let tv = common::total_variation(&emp, &[0.1; 10]);
    assert!(tv <= 0.01, "total variation {tv}");
    let batch = buf.sample(8, 0.4, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!(batch.weights.iter().all(|&w| (w - 1.0).abs() <= 1e-12));
    // Only the 10 most recent items survive.
    assert!(batch.items.iter().all(|&i| i >= 15));
}
