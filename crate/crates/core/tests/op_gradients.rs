//! Every registered differentiable operation is checked against the
//! finite-difference oracle: for seeded random inputs and a random
//! upstream cotangent, `<vjp(upstream), v>` must match the central
//! difference of `<upstream, forward(x + t v)>` in t.

use cnnvlm::cnn::{Conv2d, MaxPool};
use cnnvlm::gradcheck::finite_diff_directional;
use cnnvlm::tape::{ops, DiffOp};
use cnnvlm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-8;
const CASES: usize = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Uniform values bounded away from zero (for the relu kink).
fn rand_tensor_no_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let magnitude: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Pool input whose windows have no near-ties, so the max is stable under
/// the probe step.
fn rand_pool_input(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    loop {
        let t = rand_tensor(rng, &[h, w, c]);
        let mut ok = true;
        'outer: for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let mut vals = Vec::with_capacity(4);
                    for ky in 0..2 {
                        for kx in 0..2 {
                            vals.push(t.get(&[oy * 2 + ky, ox * 2 + kx, ch]));
                        }
                    }
                    vals.sort_by(f64::total_cmp);
                    if vals.windows(2).any(|p| (p[1] - p[0]).abs() < 1e-3) {
                        ok = false;
                        break 'outer;
                    }
                }
            }
        }
        if ok {
            return t;
        }
    }
}

/// Check the vjp of `op` at the given inputs against the directional
/// finite-difference probe, one direction per input.
fn check_op(op: &dyn DiffOp<f64>, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let output = op.forward(&refs).unwrap();
    let upstream = rand_tensor(rng, output.shape());
    let cotangents = op.vjp(&refs, &output, &upstream).unwrap();
    assert_eq!(cotangents.len(), inputs.len(), "{}: vjp arity", op.name());
    for (i, cotangent) in cotangents.iter().enumerate() {
        assert_eq!(
            cotangent.shape(),
            inputs[i].shape(),
            "{}: cotangent {} shape",
            op.name(),
            i
        );
        let direction = rand_tensor(rng, inputs[i].shape());
        let analytic = cotangent.dot(&direction).unwrap();
        let numeric = finite_diff_directional(
            |x| {
                let mut probe: Vec<&Tensor<f64>> = inputs.iter().collect();
                probe[i] = x;
                Ok(op.forward(&probe)?.dot(&upstream).unwrap())
            },
            &inputs[i],
            &direction,
            EPS,
        )
        .unwrap();
        let diff = (analytic - numeric).abs();
        let allowed = ABS_TOL + REL_TOL * analytic.abs().max(numeric.abs());
        assert!(
            diff <= allowed,
            "{} input {}: analytic {analytic:.9e} vs numeric {numeric:.9e}",
            op.name(),
            i
        );
    }
}

macro_rules! op_case {
    ($name:ident, $seed:expr, $op:expr, |$rng:ident| $inputs:expr) => {
        #[test]
        fn $name() {
            let mut owned = ChaCha8Rng::seed_from_u64($seed);
            for _ in 0..CASES {
                let op = $op;
                let inputs: Vec<Tensor<f64>> = {
                    let $rng = &mut owned;
                    $inputs
                };
                check_op(&op, &inputs, &mut owned);
            }
        }
    };
}

op_case!(add_vjp, 100, ops::Add, |rng| vec![
    rand_tensor(rng, &[3, 4]),
    rand_tensor(rng, &[3, 4])
]);
op_case!(sub_vjp, 101, ops::Sub, |rng| vec![
    rand_tensor(rng, &[3, 4]),
    rand_tensor(rng, &[3, 4])
]);
op_case!(mul_vjp, 102, ops::Mul, |rng| vec![
    rand_tensor(rng, &[2, 5]),
    rand_tensor(rng, &[2, 5])
]);
op_case!(scale_vjp, 103, ops::Scale { factor: -1.7 }, |rng| vec![
    rand_tensor(rng, &[6])
]);
op_case!(tanh_vjp, 104, ops::Tanh, |rng| vec![rand_tensor(rng, &[4, 3])]);
op_case!(sigmoid_vjp, 105, ops::Sigmoid, |rng| vec![
    rand_tensor(rng, &[4, 3])
]);
op_case!(relu_vjp, 106, ops::Relu, |rng| vec![rand_tensor_no_kink(
    rng,
    &[4, 3]
)]);
op_case!(matmul_vjp, 107, ops::MatMul, |rng| vec![
    rand_tensor(rng, &[3, 4]),
    rand_tensor(rng, &[4, 2])
]);
op_case!(add_row_vjp, 108, ops::AddRow, |rng| vec![
    rand_tensor(rng, &[3, 4]),
    rand_tensor(rng, &[4])
]);
op_case!(mul_row_vjp, 109, ops::MulRow, |rng| vec![
    rand_tensor(rng, &[3, 4]),
    rand_tensor(rng, &[4])
]);
op_case!(sum_vjp, 110, ops::Sum, |rng| vec![rand_tensor(rng, &[2, 3])]);
op_case!(sum_rows_vjp, 111, ops::SumRows, |rng| vec![rand_tensor(
    rng,
    &[3, 5]
)]);
op_case!(dot_vjp, 112, ops::Dot, |rng| vec![
    rand_tensor(rng, &[5]),
    rand_tensor(rng, &[5])
]);
op_case!(reshape_vjp, 113, ops::Reshape { to: vec![3, 4] }, |rng| vec![
    rand_tensor(rng, &[2, 6])
]);
op_case!(
    grid_slice_axis0_vjp,
    114,
    ops::GridSlice { axis: 0, index: 1 },
    |rng| vec![rand_tensor(rng, &[3, 4, 2])]
);
op_case!(
    grid_slice_axis1_vjp,
    115,
    ops::GridSlice { axis: 1, index: 2 },
    |rng| vec![rand_tensor(rng, &[3, 4, 2])]
);
op_case!(conv2d_same_vjp, 116, Conv2d { stride: 1, pad: 1 }, |rng| vec![
    rand_tensor(rng, &[5, 6, 2]),
    rand_tensor(rng, &[3, 2, 3, 3]),
    rand_tensor(rng, &[3])
]);
op_case!(
    conv2d_strided_vjp,
    117,
    Conv2d { stride: 2, pad: 0 },
    |rng| vec![
        rand_tensor(rng, &[6, 6, 3]),
        rand_tensor(rng, &[2, 3, 3, 3]),
        rand_tensor(rng, &[2])
    ]
);
op_case!(maxpool_vjp, 118, MaxPool { kernel: 2, stride: 2 }, |rng| vec![
    rand_pool_input(rng, 6, 6, 2)
]);
