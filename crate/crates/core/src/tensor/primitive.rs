//! Uniform entry point over the kernels in [`super::ops`]: run one
//! primitive forward and get a closure that maps an output gradient to
//! input gradients. The encoder calls the kernels directly; this surface
//! exists for per-primitive verification and ad-hoc composition.

use ndarray::{Array1, Array2, Ix1, Ix2};

use super::ops;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// inputs: x (R×I), W (I×O), b (O); gradients for all three.
    Affine,
    Relu,
    Sigmoid,
    /// Max over rows of a matrix (per column).
    RowMaxPool,
    /// Mean over rows of a matrix (per column).
    RowMeanPool,
    L2Normalize,
    /// Column-wise concatenation of two matrices.
    Concat,
    SoftmaxTemperature(f64),
}

pub type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

fn as2<T: Real>(t: &Tensor<T>, what: &str) -> Result<Array2<T>> {
    t.clone().into_dimensionality::<Ix2>().map_err(|_| Error::ShapeMismatch {
        op: "primitive",
        detail: format!("{what}: expected a matrix, got shape {:?}", t.shape()),
    })
}

fn as1<T: Real>(t: &Tensor<T>, what: &str) -> Result<Array1<T>> {
    t.clone().into_dimensionality::<Ix1>().map_err(|_| Error::ShapeMismatch {
        op: "primitive",
        detail: format!("{what}: expected a vector, got shape {:?}", t.shape()),
    })
}

fn arity(kind: Primitive, inputs: usize, want: usize) -> Result<()> {
    if inputs != want {
        return Err(Error::invalid(format!("{kind:?} takes {want} inputs, got {inputs}")));
    }
    Ok(())
}

pub fn primitive_forward_backward<T: Real>(kind: Primitive, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Backward<T>)> {
    match kind {
        Primitive::Affine => {
            arity(kind, inputs.len(), 3)?;
            let x = as2(&inputs[0], "affine input")?;
            let w = as2(&inputs[1], "affine weight")?;
            let b = as1(&inputs[2], "affine bias")?;
            let y = ops::affine(x.view(), w.view(), b.view(), "primitive")?;
            let back: Backward<T> = Box::new(move |dy| {
                let dy = dy.view().into_dimensionality::<Ix2>().expect("affine gradient must be a matrix");
                let g = ops::affine_backward(x.view(), w.view(), dy, true);
                vec![g.dx.into_dyn(), g.dw.into_dyn(), g.db.into_dyn()]
            });
            Ok((y.into_dyn(), back))
        }
        Primitive::Relu => {
            arity(kind, inputs.len(), 1)?;
            let x = inputs[0].clone();
            let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
            let back: Backward<T> = Box::new(move |dy| {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                });
                vec![dx]
            });
            Ok((y, back))
        }
        Primitive::Sigmoid => {
            arity(kind, inputs.len(), 1)?;
            let y = inputs[0].mapv(ops::sigmoid_scalar);
            let yc = y.clone();
            let back: Backward<T> = Box::new(move |dy| {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(&yc).for_each(|d, &s| *d *= s * (T::one() - s));
                vec![dx]
            });
            Ok((y, back))
        }
        Primitive::RowMaxPool => {
            arity(kind, inputs.len(), 1)?;
            let x = as2(&inputs[0], "row max pool")?;
            if x.nrows() == 0 {
                return Err(Error::invalid("row max pool over zero rows"));
            }
            let (y, arg) = ops::max_rows(x.view());
            let (rows, cols) = x.dim();
            let back: Backward<T> = Box::new(move |dy| {
                let mut dx = Array2::zeros((rows, cols));
                for (c, &r) in arg.iter().enumerate() {
                    dx[[r, c]] += dy[[c]];
                }
                vec![dx.into_dyn()]
            });
            Ok((y.into_dyn(), back))
        }
        Primitive::RowMeanPool => {
            arity(kind, inputs.len(), 1)?;
            let x = as2(&inputs[0], "row mean pool")?;
            if x.nrows() == 0 {
                return Err(Error::invalid("row mean pool over zero rows"));
            }
            let y = ops::mean_rows(x.view());
            let rows = x.nrows();
            let back: Backward<T> = Box::new(move |dy| {
                let dy = dy.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                vec![ops::mean_rows_backward(rows, &dy).into_dyn()]
            });
            Ok((y.into_dyn(), back))
        }
        Primitive::L2Normalize => {
            arity(kind, inputs.len(), 1)?;
            let x = as1(&inputs[0], "l2 normalize")?;
            let (y, n) = ops::l2_normalize(x.view())?;
            let yc = y.clone();
            let back: Backward<T> = Box::new(move |dy| {
                let dy = dy.view().into_dimensionality::<Ix1>().unwrap().to_owned();
                vec![ops::l2_normalize_backward(&yc, n, &dy).into_dyn()]
            });
            Ok((y.into_dyn(), back))
        }
        Primitive::Concat => {
            arity(kind, inputs.len(), 2)?;
            let a = as2(&inputs[0], "concat left")?;
            let b = as2(&inputs[1], "concat right")?;
            let y = ops::concat_cols(a.view(), b.view())?;
            let left = a.ncols();
            let back: Backward<T> = Box::new(move |dy| {
                let dy = dy.view().into_dimensionality::<Ix2>().unwrap();
                let (l, r) = ops::split_cols(dy, left);
                vec![l.into_dyn(), r.into_dyn()]
            });
            Ok((y.into_dyn(), back))
        }
        Primitive::SoftmaxTemperature(tau) => {
            arity(kind, inputs.len(), 1)?;
            let z = as1(&inputs[0], "softmax")?;
            let p = ops::softmax_temperature(z.view(), tau)?;
            let out = p.mapv(T::of);
            let back: Backward<T> = Box::new(move |dy| {
                let dp = dy.iter().map(|v| v.f64()).collect::<Array1<f64>>();
                vec![ops::softmax_temperature_backward(&p, tau, &dp).mapv(T::of).into_dyn()]
            });
            Ok((out.into_dyn(), back))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{array, ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut r = rng::stream(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| r.random_range(-1.0..1.0))
    }

    /// Checks every input gradient of `kind` against central differences of
    /// the scalar `Σ w ⊙ y` for a random weighting `w`.
    fn check(kind: Primitive, inputs: Vec<ArrayD<f64>>, seed: u64) -> f64 {
        let (y, back) = primitive_forward_backward(kind, &inputs).unwrap();
        let w = random(y.shape(), seed ^ 0xabc);
        let grads = back(&w);
        let objective = |ins: &[ArrayD<f64>]| -> f64 {
            let (y, _) = primitive_forward_backward(kind, ins).unwrap();
            (&y * &w).sum()
        };
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, g) in grads.iter().enumerate() {
            assert_eq!(g.shape(), inputs[k].shape());
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += eps;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut().unwrap()[idx] -= eps;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let analytic = g.as_slice().unwrap()[idx];
                let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
                if (analytic - numeric).abs() > 1e-9 {
                    worst = worst.max(err);
                }
            }
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn affine_matches_finite_differences(seed in 0u64..10_000) {
            let e = check(Primitive::Affine, vec![random(&[4, 3], seed), random(&[3, 5], seed + 1), random(&[5], seed + 2)], seed);
            prop_assert!(e < 1e-6, "{}", e);
        }

        #[test]
        fn relu_matches_finite_differences(seed in 0u64..10_000) {
            // keep inputs away from the kink
            let x = random(&[3, 4], seed).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            prop_assert!(check(Primitive::Relu, vec![x], seed) < 1e-6);
        }

        #[test]
        fn sigmoid_matches_finite_differences(seed in 0u64..10_000) {
            prop_assert!(check(Primitive::Sigmoid, vec![random(&[6], seed)], seed) < 1e-6);
        }

        #[test]
        fn pools_match_finite_differences(seed in 0u64..10_000) {
            prop_assert!(check(Primitive::RowMaxPool, vec![random(&[5, 3], seed)], seed) < 1e-6);
            prop_assert!(check(Primitive::RowMeanPool, vec![random(&[5, 3], seed)], seed) < 1e-6);
        }

        #[test]
        fn l2_normalize_matches_finite_differences(seed in 0u64..10_000) {
            let x = random(&[5], seed) + 0.01;
            prop_assert!(check(Primitive::L2Normalize, vec![x.clone()], seed) < 1e-6);
            let (y, back) = primitive_forward_backward(Primitive::L2Normalize, &[x]).unwrap();
            let n: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
            let g = back(&random(&[5], seed + 9));
            let tangent: f64 = g[0].iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            prop_assert!(tangent.abs() < 1e-5);
        }

        #[test]
        fn concat_and_softmax_match_finite_differences(seed in 0u64..10_000, tau in 0.05f64..2.0) {
            prop_assert!(check(Primitive::Concat, vec![random(&[3, 2], seed), random(&[3, 4], seed + 1)], seed) < 1e-6);
            prop_assert!(check(Primitive::SoftmaxTemperature(tau), vec![random(&[4], seed)], seed) < 1e-5);
        }
    }

    #[test]
    fn softmax_example() {
        let (p, _) = primitive_forward_backward(Primitive::SoftmaxTemperature(1.0), &[array![1.0f64, 0.0].into_dyn()]).unwrap();
        assert!((p[[0]] - 0.7311).abs() < 1e-4 && (p[[1]] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn relu_examples() {
        let (_, back) = primitive_forward_backward(Primitive::Relu, &[array![-1.0f64, 2.0].into_dyn()]).unwrap();
        assert_eq!(back(&array![3.0, 3.0].into_dyn())[0], array![0.0, 3.0].into_dyn());
    }

    #[test]
    fn wrong_arity_and_shape_rejected() {
        assert!(primitive_forward_backward::<f64>(Primitive::Affine, &[array![1.0].into_dyn()]).is_err());
        let err = primitive_forward_backward::<f64>(
            Primitive::Affine,
            &[Array2::zeros((2, 3)).into_dyn(), Array2::zeros((2, 2)).into_dyn(), Array1::zeros(2).into_dyn()],
        );
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
