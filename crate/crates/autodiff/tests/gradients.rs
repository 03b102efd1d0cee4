use std::rc::Rc;

use proptest::prelude::*;
use viewlab_autodiff::{CustomOp, Tape, Tensor, Var};

fn pseudo(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Compares the tape gradient of `f` at `x` against central differences.
fn check(x: Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
    let tape = Tape::new();
    let v = tape.var(x.clone());
    let out = f(v);
    let grads = tape.backward(out);
    let analytic = grads.wrt(v);

    let eval = |t: Tensor| {
        let tape = Tape::new();
        let v = tape.constant(t);
        f(v).item()
    };
    let h = 1e-6;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (numeric.abs() + 1e-6);
        assert!(err < 1e-5, "coord {i}: analytic {a} vs numeric {numeric}");
    }
}

fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::matrix(rows, cols, pseudo(rows * cols, seed))
}

#[test]
fn elementwise_and_unary_ops() {
    let x = mat(3, 4, 1);
    check(x.clone(), |v| v.mul(v).add(v).sub(v.scale(0.5)).offset(2.0).sum());
    check(x.clone(), |v| v.tanh().sum());
    check(x.clone(), |v| v.silu().sum());
    check(x.clone(), |v| v.sigmoid().square().sum());
    check(x.clone(), |v| v.softplus().neg().sum());
    check(x.clone(), |v| v.exp().offset(1.0).ln().sqrt().sum());
    check(x, |v| v.relu().mean());
}

#[test]
fn matmul_both_layouts() {
    let b = mat(4, 5, 2);
    check(mat(3, 4, 3), |v| {
        let c = v.tape().constant(b.clone());
        v.matmul(c).square().sum()
    });
    check(mat(4, 5, 4), |v| {
        let a = v.tape().constant(mat(3, 4, 5));
        a.matmul(v).tanh().sum()
    });
    check(mat(6, 4, 6), |v| {
        let a = v.tape().constant(mat(3, 4, 7));
        a.matmul_t(v).square().sum()
    });
    check(mat(5, 3, 8), |v| v.matmul_t(v).tanh().sum());
}

#[test]
fn row_reductions_and_normalization() {
    check(mat(4, 3, 9), |v| v.sum_rows().square().sum());
    check(mat(4, 3, 10), |v| v.norm_rows().sum());
    check(mat(4, 3, 11), |v| {
        let w: Rc<[f64]> = pseudo(12, 12).into();
        v.normalize_rows().weighted_sum(w)
    });
    check(mat(4, 5, 20), |v| {
        let w: Rc<[f64]> = pseudo(20, 21).into();
        v.center_rows().normalize_rows().weighted_sum(w)
    });
    check(mat(3, 4, 13), |v| v.logsumexp_rows(None).sum());
    check(mat(3, 4, 14), |v| {
        let mask: Rc<[bool]> = (0..12).map(|k| k % 3 != 0).collect();
        v.logsumexp_rows(Some(mask)).square().sum()
    });
}

#[test]
fn indexing_ops() {
    check(mat(4, 3, 15), |v| v.gather(vec![0, 5, 5, 11].into()).square().sum());
    check(mat(4, 3, 16), |v| v.select_rows(vec![3, 0, 3].into()).tanh().sum());
    check(mat(4, 5, 17), |v| v.slice_cols(1, 3).square().sum());
    check(mat(2, 6, 18), |v| v.reshape(&[3, 4]).matmul_t(v.reshape(&[3, 4])).sum());
    check(mat(3, 2, 19), |v| {
        let t = v.tape();
        let c = t.constant(mat(3, 3, 20));
        t.concat_cols(&[v, c, v]).square().sum()
    });
    check(mat(2, 3, 21), |v| {
        let t = v.tape();
        let c = t.constant(mat(1, 3, 22));
        t.concat_rows(&[v, c, v.tanh()]).square().sum()
    });
    check(mat(2, 3, 23), |v| {
        let b = v.tape().constant(Tensor::vector(vec![0.1, 0.2, -0.3]));
        v.add_row_broadcast(b).square().sum()
    });
}

#[test]
fn conv2d_input_weight_and_bias() {
    let x = Tensor::new(vec![2, 2, 5, 5], pseudo(100, 24));
    let w = Tensor::new(vec![3, 2, 3, 3], pseudo(54, 25));
    let b = Tensor::vector(vec![0.1, -0.1, 0.05]);
    check(x.clone(), |v| {
        let t = v.tape();
        v.conv2d(t.constant(w.clone()), Some(t.constant(b.clone())), 2, 1).tanh().sum()
    });
    check(w.clone(), |v| {
        let t = v.tape();
        t.constant(x.clone()).conv2d(v, None, 1, 0).square().sum()
    });
    check(b, |v| {
        let t = v.tape();
        t.constant(x.clone()).conv2d(t.constant(w.clone()), Some(v), 1, 1).square().sum()
    });
}

struct Cube;

impl CustomOp for Cube {
    fn name(&self) -> &str {
        "cube"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(g)
                .map(|(x, g)| 3.0 * x * x * g)
                .collect()
        })]
    }
}

#[test]
fn custom_op_participates_in_backward() {
    check(mat(2, 3, 26), |v| {
        let out = v.value().map(|x| x * x * x);
        v.tape().custom(Rc::new(Cube), &[v], out).tanh().sum()
    });
}

#[test]
fn detach_blocks_gradient_and_constants_are_skipped() {
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
    let y = x.detach().mul(x).sum();
    let g = tape.backward(y);
    assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);

    let c = tape.constant(Tensor::vector(vec![3.0]));
    let z = c.square().sum();
    assert!(!z.requires_grad());
}

#[test]
fn normalize_zero_row_falls_back_to_first_basis_vector() {
    let tape = Tape::new();
    let x = tape.var(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]));
    let y = x.normalize_rows();
    assert_eq!(y.value().data(), &[1.0, 0.0, 0.0]);
    let g = tape.backward(y.sum());
    assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn logsumexp_is_shift_equivariant(vals in proptest::collection::vec(-50.0f64..50.0, 6), shift in -100.0f64..100.0) {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vals.clone()));
        let b = tape.constant(Tensor::matrix(2, 3, vals.iter().map(|v| v + shift).collect()));
        let la = a.logsumexp_rows(None).value();
        let lb = b.logsumexp_rows(None).value();
        for (x, y) in la.data().iter().zip(lb.data()) {
            prop_assert!((x + shift - y).abs() < 1e-9);
        }
    }
}

#[test]
fn centered_rows_have_zero_mean() {
    let tape = Tape::new();
    let y = tape.constant(mat(3, 5, 22)).center_rows().value();
    for i in 0..3 {
        assert!(y.row(i).iter().sum::<f64>().abs() < 1e-14);
    }
}

#[test]
fn logsumexp_propagates_nan() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 2, vec![f64::NAN, f64::NAN, 0.0, 1.0]));
    let y = x.logsumexp_rows(None).value();
    assert!(y.data()[0].is_nan());
    assert!(y.data()[1].is_finite());
}
