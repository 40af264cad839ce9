//! Reverse-mode gradients against central finite differences on random
//! compositions of every differentiable operation.

mod common;

use bisimcert::autodiff::{Graph, ParamStore, Tensor};

#[test]
fn gradients_match_central_differences_on_random_shapes() {
    for seed in 0..100 {
        let (err, at) = common::fd::max_relative_error(seed);
        assert!(err <= common::fd::TOLERANCE, "seed {seed}, {at}");
    }
}

#[test]
fn stop_gradient_blocks_the_path() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![0.3, -0.7]));
    let mut g = Graph::new();
    let w = g.param(&store, id).unwrap();
    let frozen = g.stop_gradient(w).unwrap();
    let sq = g.square(frozen).unwrap();
    let live = g.sum(w).unwrap();
    let dead = g.sum(sq).unwrap();
    let loss = g.add(live, dead).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(id).unwrap().data, vec![1.0, 1.0]);
}
