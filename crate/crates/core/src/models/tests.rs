use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::gradcheck::{check_kind, max_relative_error, random_problem};
use super::*;
use crate::rng::{self, Stream};

fn pv(v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec()).unwrap()
}

fn batch(rows: &[Vec<f64>], targets: Targets) -> Batch {
    Batch::new(Matrix::from_rows(rows).unwrap(), targets).unwrap()
}

#[test]
fn softmax_uniform_logits_give_ln_classes() {
    let spec = ModelSpec::softmax(2, 3).unwrap();
    let b = batch(
        &[vec![1.0, 2.0], vec![-3.0, 0.5]],
        Targets::Classes(vec![0, 2]),
    );
    let l = loss(&spec, &ParamVector::zeros(spec.num_params()), &b).unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-15);
    assert!((l - 1.0986).abs() < 1e-4);
}

#[test]
fn perfect_linear_fit_has_zero_loss_and_gradient() {
    let spec = ModelSpec::linear_regression(2)
        .unwrap()
        .with_l2(0.0)
        .unwrap();
    let w = pv(&[2.0, -1.0, 0.5]);
    let rows = vec![vec![1.0, 1.0], vec![0.0, 3.0], vec![-2.0, 0.25]];
    let labels = rows.iter().map(|r| 2.0 * r[0] - r[1] + 0.5).collect();
    let b = batch(&rows, Targets::Values(labels));
    assert_eq!(loss(&spec, &w, &b).unwrap(), 0.0);
    assert!(grad(&spec, &w, &b).unwrap().norm() < 1e-10);
}

#[test]
fn logistic_loss_matches_hand_computation() {
    let spec = ModelSpec::logistic(2).unwrap().with_l2(0.1).unwrap();
    let w = pv(&[0.5, -1.0, 0.25]);
    let rows = vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![2.0, 1.0],
        vec![-1.0, -1.0],
    ];
    let labels = vec![1, 0, 1, 0];
    let b = batch(&rows, Targets::Classes(labels.clone()));

    // Straight-line oracle: z = w.x + b, log-loss with sigmoid.
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut total = 0.0;
    for (r, &y) in rows.iter().zip(&labels) {
        let z = 0.5 * r[0] - 1.0 * r[1] + 0.25;
        let p = sigmoid(z);
        total += if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    let expected = total / 4.0 + 0.5 * 0.1 * (0.25 + 1.0 + 0.0625);
    let got = loss(&spec, &w, &b).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn softmax_bias_gradient_vanishes_on_balanced_batch() {
    let spec = ModelSpec::softmax(2, 3).unwrap();
    let b = batch(
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        Targets::Classes(vec![0, 1, 2]),
    );
    let g = grad(&spec, &ParamVector::zeros(spec.num_params()), &b).unwrap();
    for &gb in &g.as_slice()[6..] {
        assert!(gb.abs() < 1e-15);
    }
}

#[test]
fn gradients_match_finite_differences_for_every_kind() {
    for kind in ModelKind::ALL {
        let report = check_kind(kind, 100, 11).unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}

#[test]
fn frozen_coordinates_have_zero_gradient() {
    let spec = ModelSpec::two_layer(3, 4, 2)
        .unwrap()
        .freeze_all_but_last_layer()
        .unwrap();
    let mut rng = rng::stream(5, Stream::Init);
    let w = spec.init_params(&mut rng);
    let b = batch(
        &[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.0]],
        Targets::Classes(vec![1, 0]),
    );
    let g = grad(&spec, &w, &b).unwrap();
    let last = spec.last_layer_range();
    for (i, gi) in g.as_slice().iter().enumerate() {
        if !last.contains(&i) {
            assert_eq!(*gi, 0.0);
        }
    }
    assert!(g.as_slice()[last].iter().any(|v| *v != 0.0));
}

#[test]
fn prox_grad_reductions_and_identity() {
    let mut rng = rng::stream(3, Stream::Init);
    for kind in ModelKind::ALL {
        let (spec, w, b) = random_problem(kind, &mut rng).unwrap();
        let anchor =
            ParamVector::new((0..w.dim()).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let g = grad(&spec, &w, &b).unwrap();
        assert_eq!(prox_grad(&spec, &w, &anchor, 0.0, &b).unwrap(), g);
        assert_eq!(prox_grad(&spec, &w, &w, 0.7, &b).unwrap(), g);

        let theta = 0.3;
        let p = prox_grad(&spec, &w, &anchor, theta, &b).unwrap();
        for i in 0..w.dim() {
            let diff = p.as_slice()[i] - g.as_slice()[i];
            let want = theta * (w.as_slice()[i] - anchor.as_slice()[i]);
            assert!((diff - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn prox_grad_rejects_mismatched_anchor() {
    let spec = ModelSpec::logistic(2).unwrap();
    let b = batch(&[vec![1.0, 1.0]], Targets::Classes(vec![1]));
    let err = prox_grad(
        &spec,
        &ParamVector::zeros(3),
        &ParamVector::zeros(2),
        0.1,
        &b,
    );
    assert!(matches!(err, Err(Error::DimMismatch { .. })));
}

#[test]
fn logits_of_zero_weights_are_zero() {
    for kind in ModelKind::ALL {
        let spec = ModelSpec::new(kind, 3, 4, 5).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let z = predict_logits(&spec, &ParamVector::zeros(spec.num_params()), &x).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn one_hot_feature_selects_weight_column() {
    let spec = ModelSpec::softmax(3, 2).unwrap();
    // W = [[1,2,3],[4,5,6]], b = [0.5, -0.5]
    let w = pv(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5]);
    let x = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
    let z = predict_logits(&spec, &w, &x).unwrap();
    assert_eq!(z.row(0), &[2.5, 4.5]);
}

#[test]
fn two_layer_logits_match_matmul_oracle() {
    let spec = ModelSpec::two_layer(2, 2, 2).unwrap();
    // W1 = [[1, 0], [0.5, -1]], b1 = [0, 0.25], W2 = [[1, 2], [-1, 0.5]], b2 = [0.1, 0]
    let w = pv(&[
        1.0, 0.0, 0.5, -1.0, 0.0, 0.25, 1.0, 2.0, -1.0, 0.5, 0.1, 0.0,
    ]);
    let x = Matrix::from_rows(&[vec![0.4, 0.2]]).unwrap();
    let h0 = (0.4f64).tanh();
    let h1 = (0.2f64 - 0.2 + 0.25).tanh();
    let expected = [h0 + 2.0 * h1 + 0.1, -h0 + 0.5 * h1];
    let z = predict_logits(&spec, &w, &x).unwrap();
    for (a, b) in z.row(0).iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn errors_on_bad_inputs() {
    let spec = ModelSpec::softmax(2, 3).unwrap();
    let b = batch(&[vec![1.0, 1.0]], Targets::Classes(vec![3]));
    assert!(matches!(
        loss(&spec, &ParamVector::zeros(9), &b),
        Err(Error::LabelOutOfRange {
            label: 3,
            num_classes: 3
        })
    ));
    let ok = batch(&[vec![1.0, 1.0]], Targets::Classes(vec![1]));
    assert!(matches!(
        grad(&spec, &ParamVector::zeros(8), &ok),
        Err(Error::DimMismatch { .. })
    ));
    let wrong_width = batch(&[vec![1.0, 1.0, 1.0]], Targets::Classes(vec![1]));
    assert!(predict_logits(&spec, &ParamVector::zeros(9), wrong_width.features()).is_err());
}

#[test]
fn mask_validation() {
    let spec = ModelSpec::logistic(2).unwrap();
    assert!(spec.clone().with_frozen_mask(vec![true; 2]).is_err());
    assert!(spec.clone().with_frozen_mask(vec![true; 3]).is_err());
    assert!(spec.with_frozen_mask(vec![true, false, true]).is_ok());
}

#[test]
fn finite_difference_oracle_on_scalar_logistic() {
    let spec = ModelSpec::logistic(1).unwrap();
    let w = pv(&[0.3, 0.1]);
    let b = batch(&[vec![2.0]], Targets::Classes(vec![1]));
    assert!(max_relative_error(&spec, &w, &b).unwrap() < 1e-6);
}

proptest! {
    #[test]
    fn classifier_losses_are_midpoint_convex(seed in any::<u64>(), softmax in any::<bool>()) {
        let kind = if softmax { ModelKind::SoftmaxClassifier } else { ModelKind::LogisticRegression };
        let mut rng = rng::stream(seed, Stream::Init);
        let (spec, u, b) = random_problem(kind, &mut rng).unwrap();
        let v = ParamVector::new((0..u.dim()).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        let mid = ParamVector::new(u.as_slice().iter().zip(v.as_slice()).map(|(a, b)| 0.5 * (a + b)).collect()).unwrap();
        let lm = loss(&spec, &mid, &b).unwrap();
        let lu = loss(&spec, &u, &b).unwrap();
        let lv = loss(&spec, &v, &b).unwrap();
        prop_assert!(lm <= 0.5 * (lu + lv) + 1e-9);
        prop_assert!(lu >= 0.0);
    }
}
