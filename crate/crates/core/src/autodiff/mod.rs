//! Minimal dense fp64 reverse-mode differentiation.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! sweeps the tape once in reverse. Shapes are never broadcast implicitly,
//! except for the trailing-axis bias in [`Graph::add_bias`].

pub mod checkpoint;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{BatchNormMode, Graph, Var, BN_EPS};
pub use params::{adam_step, AdamConfig, AdamState, Bound, Params};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::AutodiffError;

    #[test]
    fn relu_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_max() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_of_ones_counts_overlap() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn square_and_reuse() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.backward(x), Err(AutodiffError::NotScalar(vec![2])));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(AutodiffError::AlreadyBackpropagated));
        g.reset_grads();
        g.backward(s).unwrap();

        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0));
        assert_eq!(g.backward(c), Err(AutodiffError::Detached));
    }

    #[test]
    fn shape_errors_name_operation_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch { op: "matmul", left: vec![2, 3], right: vec![2, 3] }
        );
        assert!(err.to_string().contains("matmul"));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![2, 3], vec![1.0, -4.0, 300.0, 0.1, 0.2, 0.3]).unwrap());
        let ce = g.softmax_cross_entropy(l, &[2, 0]).unwrap();
        let p = g.softmax_probs(ce).unwrap();
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(g.value(ce).data()[0].abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let mean = vec![0.5, -1.0];
        let var = vec![4.0, 0.25];
        let run = |x: Vec<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![2, 2], x).unwrap());
            let ga = g.constant(Tensor::vector(vec![2.0, 0.5]));
            let be = g.constant(Tensor::vector(vec![0.1, 0.2]));
            let y = g
                .batch_norm(xv, ga, be, &BatchNormMode::Eval { mean: mean.clone(), var: var.clone() })
                .unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a, run(vec![1.0, 2.0, 3.0, 4.0]));
        let expected = (1.0 - 0.5) / (4.0 + BN_EPS).sqrt() * 2.0 + 0.1;
        assert!((a[0] - expected).abs() < 1e-15);
        // Rows are transformed independently.
        assert_eq!(run(vec![1.0, 2.0, 9.0, 9.0])[..2], a[..2]);
    }
}
