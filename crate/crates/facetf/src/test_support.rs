//! Helpers shared by the unit tests of several modules: deterministic
//! pseudo-random data and a finite-difference gradient checker.

use crate::tensor::{Tape, Tensor, TensorId};

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} differ by more than {tol}");
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Deterministic xorshift-based values in [-1, 1), so tests get varied data
/// without threading an RNG through every helper.
pub fn pseudo(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

pub fn mat(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, pseudo(n, seed))
}

/// Evaluates `build` as a scalar function of its inputs by contracting the
/// output with fixed weights, then checks the tape gradient of every input
/// coordinate against central finite differences at tolerance 1e-5.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
) {
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &ids);
        let readout: Vec<f64> =
            pseudo(tape.value(out).numel(), 7).iter().map(|v| v + 1.5).collect();
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(Tensor::from_vec(shape, readout));
        let prod = tape.mul(out, w);
        let loss = tape.sum_all(prod);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> =
        inputs.iter().map(|t| tape.leaf(t.clone().into_param())).collect();
    let out = build(&mut tape, &ids);
    let readout: Vec<f64> =
        pseudo(tape.value(out).numel(), 7).iter().map(|v| v + 1.5).collect();
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::from_vec(shape, readout));
    let prod = tape.mul(out, w);
    let loss = tape.sum_all(prod);
    tape.backward(loss);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, id) in ids.iter().enumerate() {
        let analytic = tape.grad(*id).expect("input missing gradient").to_vec();
        for ci in 0..work[ti].numel() {
            let orig = work[ti].data()[ci];
            let h = 1e-5 * orig.abs().max(1.0);
            work[ti].data_mut()[ci] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[ci] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(analytic[ci], fd);
            assert!(
                err < 1e-5,
                "input {ti} coord {ci}: tape {} vs fd {} (rel err {err})",
                analytic[ci],
                fd
            );
        }
    }
}
