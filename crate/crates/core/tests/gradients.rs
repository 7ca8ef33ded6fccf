use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tat_core::audit::{loss_audit, AUDIT_STEP, AUDIT_TOLERANCE};
use tat_core::gradcheck::finite_diff_check;
use tat_core::losses::{cross_entropy, tat_loss, FeatureMap, Reduction};
use tat_core::nets::{build_convnet, ConvNetSpec, Head};
use tat_core::projector::{build_projectors, Parametric};
use tat_core::{Mode, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_registered_loss_passes_the_audit() {
    let rows = loss_audit(0).unwrap();
    assert!(rows.len() >= 12);
    for r in &rows {
        assert!(r.passes(), "{} {:?}: {:e}", r.name, r.dims, r.max_rel_error);
    }
    assert!(rows.iter().any(|r| r.dims == [4, 4, 3]));
    assert!(rows.iter().any(|r| r.dims == [8, 8, 2]));
}

#[test]
fn tat_student_gradient_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..20 {
        let mode = [Parametric::Non, Parametric::Semi, Parametric::Full][i % 3];
        let [a, b, c] = mode.kinds();
        let (set, mut params) = build_projectors::<f64>(a, b, c, 3, 3, 3, "", i as u64).unwrap();
        let s = random(&mut rng, &[4, 4, 3]);
        let t = random(&mut rng, &[4, 4, 3]);
        let red = if i % 2 == 0 { Reduction::MeanSquared } else { Reduction::LiteralSum };
        let check = finite_diff_check(
            |tape, x| {
                params.bind(tape, false);
                let tv = tape.constant(t.clone());
                let out = tat_loss(tape, &mut params, FeatureMap::student(x), FeatureMap::teacher(tv), &set, red, Mode::Train)?;
                Ok(out.loss)
            },
            &s,
            AUDIT_STEP,
        )
        .unwrap();
        params.unbind();
        assert!(check.passes(AUDIT_TOLERANCE), "instance {i}: {:e}", check.max_rel_error);
    }
}

#[test]
fn network_input_gradient() {
    let spec = ConvNetSpec::fig1_student(1, Head::Classifier { classes: 3 });
    let (net, mut params) = build_convnet::<f64>(&spec, "s.", 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, 6, 6, 1]);
    let check = finite_diff_check(
        |tape, x| {
            params.bind(tape, false);
            let out = net.forward(tape, &mut params, x, Mode::Train)?;
            cross_entropy(tape, out.logits, &[0, 2])
        },
        &x,
        // small enough that no pre-activation crosses a ReLU kink
        1e-6,
    )
    .unwrap();
    assert!(check.passes(AUDIT_TOLERANCE), "{:e}", check.max_rel_error);
}
