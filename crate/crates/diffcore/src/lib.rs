//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records forward operations define-by-run and replays them in
//! reverse to accumulate gradients. The op set (matrix product, elementwise
//! arithmetic and activations, reductions, row softmax/layer-norm,
//! concatenation) is the minimum needed to express recurrent and attention
//! sequence models plus Gaussian likelihood objectives, with an [`AdamState`]
//! optimizer to drive them.
//!
//! Everything is 64-bit and single-threaded per tape; independent tapes may
//! live on parallel workers.

mod adam;
mod matrix;
mod tape;

pub use adam::{clip_global_norm, AdamState};
pub use matrix::Matrix;
pub use tape::{sigmoid_scalar, softplus_scalar, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(Matrix::new(2, 1, vec![3.0, 4.0]));
        let out = tape.matmul(eye, v);
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::new(1, 2, vec![1.0, 2.0]));
        let b = tape.constant(Matrix::new(2, 1, vec![3.0, 4.0]));
        let out = tape.matmul(a, b);
        assert_eq!(tape.value(out).item(), 11.0);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes 1x2 and 3x1")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::new(1, 2, vec![1.0, 2.0]));
        let b = tape.constant(Matrix::new(3, 1, vec![3.0, 4.0, 5.0]));
        let _ = tape.matmul(a, b);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(0.0));
        let y = tape.softplus(x);
        assert_relative_eq!(tape.value(y).item(), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn softplus_strictly_positive_for_extreme_inputs() {
        for x in [-1e6, -800.0, -60.0, 0.0, 60.0, 700.0] {
            assert!(softplus_scalar(x) > 0.0, "softplus({x}) not positive");
            assert!(softplus_scalar(x).is_finite());
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.var(Matrix::scalar(0.0));
        let y = tape.tanh(x);
        tape.backward(y);
        assert_eq!(tape.grad(x).item(), 1.0);
    }

    #[test]
    fn square_gradient_by_hand() {
        // d(x^2)/dx at x = 3 is 6.
        let mut tape = Tape::new();
        let x = tape.var(Matrix::scalar(3.0));
        let y = tape.square(x);
        tape.backward(y);
        assert_eq!(tape.grad(x).item(), 6.0);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.var(Matrix::scalar(2.0));
        let _ = tape.square(x);
        let c = tape.scalar(7.0);
        tape.backward(c);
        assert_eq!(tape.grad(x).item(), 0.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.var(Matrix::scalar(3.0));
        let y = tape.square(x);
        tape.backward(y);
        tape.backward(y);
        assert_eq!(tape.grad(x).item(), 12.0);
    }

    #[test]
    #[should_panic(expected = "backward: root must be a scalar")]
    fn non_scalar_backward_root_panics() {
        let mut tape = Tape::new();
        let x = tape.var(Matrix::new(2, 1, vec![1.0, 2.0]));
        let y = tape.square(x);
        tape.backward(y);
    }

    #[test]
    #[should_panic(expected = "log: domain error")]
    fn log_of_non_positive_panics() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(-1.0));
        let _ = tape.log(x);
    }

    #[test]
    fn scalar_broadcast_mul_and_grad() {
        let mut tape = Tape::new();
        let s = tape.var(Matrix::scalar(2.0));
        let v = tape.var(Matrix::column(&[1.0, 2.0, 3.0]));
        let p = tape.mul(s, v);
        let total = tape.sum(p);
        tape.backward(total);
        assert_eq!(tape.value(total).item(), 12.0);
        assert_eq!(tape.grad(s).item(), 6.0);
        assert_eq!(tape.grad(v).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_causal_mask_zeroes() {
        let mut tape = Tape::new();
        // -1e30 stands in for -inf in an additive causal mask.
        let x = tape.constant(Matrix::new(2, 2, vec![0.3, -1e30, 0.1, 0.2]));
        let y = tape.softmax_rows(x);
        let m = tape.value(y);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_relative_eq!(m.get(1, 0) + m.get(1, 1), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.var(Matrix::new(2, 2, vec![0.3, -1.2, 0.77, 0.01]));
            let b = tape.var(Matrix::new(2, 1, vec![0.5, -0.25]));
            let h = tape.matmul(a, b);
            let s = tape.sigmoid(h);
            let t = tape.tanh(s);
            let sp = tape.softplus(t);
            let out = tape.sum(sp);
            tape.value(out).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
