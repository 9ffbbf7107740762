mod common;

use common::gradient_checks;
use vogseg::mask::ClassMask;
use vogseg::ops;
use vogseg::segmenter::{Architecture, ModelParams};
use vogseg::Tensor;

#[test]
fn analytic_gradients_match_central_differences() {
    let checks = gradient_checks(2024);
    assert!(checks.len() >= 50);
    for c in &checks {
        assert!(c.max_rel_err < 1e-3, "{}: relative error {:.3e}", c.name, c.max_rel_err);
    }
}

#[test]
fn uniform_two_class_logit_gradient() {
    let z = Tensor::<f64>::zeros(&[2, 1, 1]);
    let target = ClassMask::from_rows(&[&[0]]).unwrap();
    let (loss, g) = ops::softmax_cross_entropy(&z, &target).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(g.data(), &[-0.5, 0.5]);
}

#[test]
fn f32_training_gradients_track_the_f64_reference() {
    let arch = Architecture {
        levels: 2,
        base_channels: 4,
        num_classes: 4,
        in_channels: 1,
    };
    let p32 = ModelParams::<f32>::init(arch, 3).unwrap();
    let p64: ModelParams<f64> = p32.cast();
    let mut rng = common::rng(5);
    let image = common::random_tensor(&mut rng, &[1, 16, 16]).map(|v| 0.5 + 0.5 * v);
    let target = common::random_mask(&mut rng, 16, 16, 4);
    let grads = |p: &ModelParams<f64>| {
        let (z, tape) = p.forward_recorded(&image).unwrap();
        let (_, g) = ops::softmax_cross_entropy(&z, &target).unwrap();
        p.backward(&tape, &g).unwrap().parameter_grads
    };
    let reference = grads(&p64);
    let image32: Tensor<f32> = image.cast();
    let (z, tape) = p32.forward_recorded(&image32).unwrap();
    let (_, g) = ops::softmax_cross_entropy(&z, &target).unwrap();
    let single = p32.backward(&tape, &g).unwrap().parameter_grads;
    for (a, b) in single.iter().zip(&reference) {
        let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((*x as f64 - y).abs() <= 1e-3 * scale + 1e-9);
        }
    }
}
