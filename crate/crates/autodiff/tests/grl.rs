use bridge_autodiff::{AutodiffError, GradCheck, Graph, Tensor};
use proptest::prelude::*;

#[test]
fn forward_is_identity() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.5, -2.0]));
    let r = g.grl(x, 1.0).unwrap();
    assert_eq!(g.eval_forward(r).unwrap().data(), &[1.5, -2.0]);
}

fn reversed_grad(up: &[f64], lambda: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[up.len()]));
    let r = g.grl(x, lambda).unwrap();
    let u = g.input(Tensor::from_vec(up.to_vec()));
    let m = g.mul(r, u).unwrap();
    let s = g.sum(m).unwrap();
    g.eval_forward(s).unwrap();
    g.backprop(s).unwrap();
    g.grad(x).into_data()
}

#[test]
fn backward_negates_upstream() {
    assert_eq!(reversed_grad(&[1.0, 1.0], 1.0), vec![-1.0, -1.0]);
    assert_eq!(reversed_grad(&[2.0, -4.0], 0.5), vec![-1.0, 2.0]);
}

#[test]
fn rejects_non_positive_strength() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1.0));
    assert!(matches!(g.grl(x, 0.0), Err(AutodiffError::InvalidReversalStrength(_))));
    assert!(matches!(g.grl(x, -1.0), Err(AutodiffError::InvalidReversalStrength(_))));
    assert!(g.grl(x, f64::NAN).is_err());
}

#[test]
fn reversed_graph_matches_negated_oracle() {
    // backprop through grl(x) * w equals d/dx of -lambda * (x * w)
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.3, -0.8, 1.1]));
    let w = g.input(Tensor::from_vec(vec![2.0, 0.5, -1.5]));
    let r = g.grl(x, 0.7).unwrap();
    let m = g.mul(r, w).unwrap();
    let root = g.sum(m).unwrap();
    let plain = g.mul(x, w).unwrap();
    let plain = g.sum(plain).unwrap();
    let oracle = g.scale(plain, -0.7).unwrap();
    let report = GradCheck::default().run_against(&mut g, root, oracle, &[x]);
    assert!(report.passed, "{report:?}");
}

proptest! {
    #[test]
    fn forward_bit_exact_backward_exact(
        xs in prop::collection::vec(-1e6f64..1e6, 1..32),
        lambda in 1e-3f64..10.0,
    ) {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(xs.clone()));
        let r = g.grl(x, lambda).unwrap();
        let out = g.eval_forward(r).unwrap();
        for (a, b) in out.data().iter().zip(&xs) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        let grads = reversed_grad(&xs, lambda);
        for (gr, u) in grads.iter().zip(&xs) {
            prop_assert_eq!(*gr, -lambda * u);
        }
    }

    #[test]
    fn sgd_without_momentum_or_decay_is_plain_descent(
        theta in prop::collection::vec(-10f64..10.0, 1..8),
        grad_seed in -5f64..5.0,
        lr in 1e-4f64..1.0,
    ) {
        use bridge_autodiff::{sgd_step, ParamSet, SgdState};
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(theta.clone()));
        let grad: Vec<f64> = theta.iter().map(|t| t * grad_seed + 0.5).collect();
        let mut s = SgdState::new(&p, lr, 0.0, 0.0);
        sgd_step(&mut p, &[Tensor::from_vec(grad.clone())], &mut s).unwrap();
        for ((new, old), g) in p.get(0).data().iter().zip(&theta).zip(&grad) {
            prop_assert_eq!(*new, old - lr * g);
        }
    }
}
