mod support;

use glitchlab::classify::{svm_predict, svm_train, SvmParams};
use glitchlab::oracle::Label;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::dual_decision;

fn dataset(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let glitch = i % 3 == 0;
        let shift = if glitch { 1.5 } else { -0.5 };
        rows.push((0..dim).map(|_| shift + rng.random::<f64>() * 2.0 - 1.0).collect());
        labels.push(if glitch { Label::Glitch } else { Label::Normal });
    }
    (rows, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_match_dual_form(seed in any::<u64>(), degree in 1u32..5, c in 0.1f64..20.0, balance in any::<bool>()) {
        let (rows, labels) = dataset(seed, 30, 4);
        let params = SvmParams { degree, c, balance_classes: balance, ..SvmParams::default() };
        let model = svm_train(&rows, &labels, &params).unwrap();
        let (probe, _) = dataset(seed ^ 0x5eed, 20, 4);
        let k = model.kernel;
        for x in probe.iter().chain(&rows) {
            let expect = dual_decision(&model.support_vectors, &model.dual_coefs, model.bias, k.scale, k.offset, k.degree, x);
            let (label, value) = svm_predict(&model, x).unwrap();
            prop_assert!((value - expect).abs() <= 1e-9 * expect.abs().max(1.0));
            prop_assert_eq!(label, if value >= 0.0 { Label::Glitch } else { Label::Normal });
        }
    }

    #[test]
    fn kkt_feasibility(seed in any::<u64>(), c in 0.05f64..5.0) {
        let (rows, labels) = dataset(seed, 40, 3);
        let params = SvmParams { c, ..SvmParams::default() };
        let model = svm_train(&rows, &labels, &params).unwrap();
        for &coef in &model.dual_coefs {
            prop_assert!(coef.abs() > 0.0 && coef.abs() <= c * (1.0 + 1e-9));
        }
        let balance: f64 = model.dual_coefs.iter().sum();
        prop_assert!(balance.abs() <= params.tolerance);
    }
}

#[test]
fn scale_defaults_to_inverse_dimension() {
    let (rows, labels) = dataset(1, 30, 5);
    let model = svm_train(&rows, &labels, &SvmParams::default()).unwrap();
    assert_eq!(model.kernel.scale, 0.2);
    assert_eq!(model.kernel.offset, 1.0);
    assert_eq!(model.kernel.degree, 3);
}
