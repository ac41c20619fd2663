mod common;

use fedrane::data::derived_rng;
use fedrane::model::{cross_entropy, mlp_loss_and_grad, sgd_step, Architecture, FlatParams, MLPParams};
use fedrane::numeric::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn arch(extractor: Vec<usize>, predictor: Vec<usize>, mp_steps: usize) -> Architecture {
    Architecture {
        input: 4,
        extractor_hidden: extractor,
        d_emb: 5,
        predictor_hidden: predictor,
        classes: 3,
        mp_steps,
    }
}

fn architecture() -> impl Strategy<Value = Architecture> {
    (
        prop::collection::vec(1usize..6, 0..3),
        prop::collection::vec(1usize..6, 0..2),
        0usize..3,
    )
        .prop_map(|(e, p, m)| arch(e, p, m))
}

fn params(a: &Architecture, seed: u64) -> MLPParams {
    common::off_kink_params(a, &mut derived_rng(seed, &[1]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mlp_gradients_match_finite_differences(seed in any::<u64>(), e in prop::collection::vec(2usize..6, 1..3)) {
        let a = arch(e, vec![4], 0);
        let p = params(&a, seed);
        let mut rng = derived_rng(seed, &[2]);
        let x = Matrix::from_vec(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let (_, grad) = mlp_loss_and_grad(&p, &x, &labels).unwrap();
        let layout = p.layout();
        let err = common::fd_mismatch(&p.flatten().values, &grad.values, 1e-6, 1e-6, |v| {
            let q = p.unflatten(&FlatParams::new(layout.clone(), v.to_vec()).unwrap()).unwrap();
            mlp_loss_and_grad(&q, &x, &labels).unwrap().0
        });
        prop_assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn cross_entropy_is_nonnegative(logits in prop::collection::vec(-30.0f64..30.0, 12), labels in prop::collection::vec(0usize..4, 3)) {
        let l = cross_entropy(&Matrix::from_vec(3, 4, logits).unwrap(), &labels).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn uniform_logits_give_log_classes(c in 2usize..20, value in -5.0f64..5.0, label in any::<prop::sample::Index>()) {
        let l = cross_entropy(&Matrix::filled(1, c, value), &[label.index(c)]).unwrap();
        prop_assert_eq!(l, (c as f64).ln());
    }

    #[test]
    fn flatten_is_a_bijection(a in architecture(), seed in any::<u64>()) {
        let p = params(&a, seed);
        let flat = p.flatten();
        prop_assert_eq!(p.unflatten(&flat).unwrap(), p.clone());
        let mut rng = derived_rng(seed, &[3]);
        let values: Vec<f64> = (0..flat.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let other = FlatParams::new(flat.layout.clone(), values.clone()).unwrap();
        prop_assert_eq!(p.unflatten(&other).unwrap().flatten().values, values);
        let json = other.to_json().unwrap();
        let back = FlatParams::from_json(&json).unwrap();
        prop_assert_eq!(back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), other.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn sgd_steps_compose_linearly(a in architecture(), seed in any::<u64>(), lr in 0.001f64..1.0) {
        let p = params(&a, seed).flatten();
        let mut rng = derived_rng(seed, &[4]);
        let mut draw = || FlatParams::new(p.layout.clone(), (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (g1, g2) = (draw(), draw());
        let sum = FlatParams::new(p.layout.clone(), g1.values.iter().zip(&g2.values).map(|(a, b)| a + b).collect()).unwrap();
        let once = sgd_step(&p, &sum, lr).unwrap();
        let twice = sgd_step(&sgd_step(&p, &g1, lr).unwrap(), &g2, lr).unwrap();
        for (x, y) in once.values.iter().zip(&twice.values) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn mismatched_layouts_are_rejected() {
    let p = params(&arch(vec![3], vec![], 0), 0);
    let q = params(&arch(vec![4], vec![], 0), 0);
    assert!(p.unflatten(&q.flatten()).is_err());
    assert!(sgd_step(&p.flatten(), &q.flatten(), 0.1).is_err());
}
