//! Shared helpers for the oracle tests: seeded tensors and a central
//! finite-difference gradient checker kept independent of the tape's
//! backward rules.

use qgait_core::rng::SplitMix64;
use qgait_core::tensor::{Tape, Tensor, TensorRef};

pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Sample values bounded away from zero (for relu-style kinks).
pub fn random_tensor_off_kink(rng: &mut SplitMix64, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.uniform(margin, 1.0);
            if rng.next_f64() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Check the tape gradient of `inputs[check]` against central finite
/// differences of the scalar produced by `build`. `build` must
/// reconstruct the same graph from plain input tensors every call.
pub fn gradcheck(
    inputs: &[Tensor],
    check: usize,
    step: f64,
    tol: f64,
    build: &dyn Fn(&mut Tape, &[TensorRef]) -> TensorRef,
) {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let refs: Vec<TensorRef> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut tape, &refs);
        tape.value(loss).item().unwrap()
    };

    // analytic gradient
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &refs);
    tape.backward(loss).unwrap();
    let analytic = tape
        .grad(refs[check])
        .unwrap_or_else(|| panic!("no gradient on input {check}"))
        .clone();

    let n = inputs[check].numel();
    for i in 0..n {
        let mut plus = inputs.to_vec();
        let mut data = plus[check].data().to_vec();
        data[i] += step;
        plus[check] = Tensor::new(inputs[check].shape(), data).unwrap();
        let fp = eval(&plus);

        let mut minus = inputs.to_vec();
        let mut data = minus[check].data().to_vec();
        data[i] -= step;
        minus[check] = Tensor::new(inputs[check].shape(), data).unwrap();
        let fm = eval(&minus);

        let fd = (fp - fm) / (2.0 * step);
        let an = analytic.data()[i];
        let err = relative_error(an, fd);
        assert!(
            err <= tol,
            "element {i}: analytic {an} vs finite-difference {fd} (rel err {err:.3e})"
        );
    }
}

/// Scalar loss from a fixed random projection of an op output, so every
/// output element influences the loss.
pub fn projected_loss(tape: &mut Tape, out: TensorRef, seed: u64) -> TensorRef {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let w = tape.constant(Tensor::new(&shape, weights).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}
