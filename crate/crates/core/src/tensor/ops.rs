//! Forward and backward kernels. Each `*_backward` takes the upstream
//! gradient and whatever the forward pass cached, and returns input (and
//! parameter) gradients. Reductions accumulate in f64.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Real;
use crate::error::{Error, Result};

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// `y = x·W + b` for row-major `x` (`R×I`), `W` (`I×O`), `b` (`O`).
pub fn affine<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>, b: ArrayView1<T>, name: &str) -> Result<Array2<T>> {
    if x.ncols() != w.nrows() || w.ncols() != b.len() {
        return Err(mismatch(
            "affine",
            format!(
                "layer `{name}`: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let mut y = x.dot(&w);
    y += &b;
    Ok(y)
}

pub struct AffineGrads<T> {
    pub dx: Array2<T>,
    pub dw: Array2<T>,
    pub db: Array1<T>,
}

pub fn affine_backward<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>, dy: ArrayView2<T>, need_dx: bool) -> AffineGrads<T> {
    let dx = if need_dx {
        dy.dot(&w.t())
    } else {
        Array2::zeros((0, 0))
    };
    AffineGrads {
        dx,
        dw: x.t().dot(&dy),
        db: col_sums(dy),
    }
}

/// Column sums accumulated in f64.
pub fn col_sums<T: Real>(x: ArrayView2<T>) -> Array1<T> {
    let mut acc = vec![0.0f64; x.ncols()];
    for row in x.rows() {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v.f64();
        }
    }
    acc.into_iter().map(T::of).collect()
}

pub fn relu<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through `relu`, given its output (or input; the sign test is the same).
pub fn relu_backward<T: Real>(y: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Array1<T>) -> Array1<T> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Real>(y: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &s| *d *= s * (T::one() - s));
    dx
}

/// Max over contiguous row segments: rows `offsets[s]..offsets[s+1]` form
/// segment `s`. Returns per-segment maxima and the winning row per channel
/// (first row on ties).
pub fn segment_max<T: Real>(x: ArrayView2<T>, offsets: &[usize]) -> Result<(Array2<T>, Array2<u32>)> {
    let segs = offsets.len().saturating_sub(1);
    if offsets.last().copied().unwrap_or(0) != x.nrows() || offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(mismatch(
            "segment_max",
            format!("offsets do not partition {} rows into nonempty segments", x.nrows()),
        ));
    }
    let c = x.ncols();
    let mut out = Array2::zeros((segs, c));
    let mut arg = Array2::zeros((segs, c));
    for s in 0..segs {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        let mut best = out.row_mut(s);
        best.assign(&x.row(lo));
        let mut which = arg.row_mut(s);
        which.fill(lo as u32);
        for r in (lo + 1)..hi {
            for ((b, w), &v) in best.iter_mut().zip(which.iter_mut()).zip(x.row(r).iter()) {
                if v > *b {
                    *b = v;
                    *w = r as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn segment_max_backward<T: Real>(rows: usize, arg: &Array2<u32>, dy: ArrayView2<T>) -> Array2<T> {
    let mut dx = Array2::zeros((rows, dy.ncols()));
    for ((s, ch), &r) in arg.indexed_iter() {
        dx[[r as usize, ch]] += dy[[s, ch]];
    }
    dx
}

/// Max over all rows (per column) with the first arg-max row.
pub fn max_rows<T: Real>(x: ArrayView2<T>) -> (Array1<T>, Vec<usize>) {
    let mut best = x.row(0).to_owned();
    let mut arg = vec![0usize; x.ncols()];
    for (r, row) in x.rows().into_iter().enumerate().skip(1) {
        for (c, &v) in row.iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    (best, arg)
}

/// Max over all columns (per row) with the first arg-max column.
pub fn max_cols<T: Real>(x: ArrayView2<T>) -> (Array1<T>, Vec<usize>) {
    let mut out = Array1::zeros(x.nrows());
    let mut arg = vec![0usize; x.nrows()];
    for (r, row) in x.rows().into_iter().enumerate() {
        let mut b = row[0];
        let mut bi = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > b {
                b = v;
                bi = c;
            }
        }
        out[r] = b;
        arg[r] = bi;
    }
    (out, arg)
}

/// Mean over rows (per column), accumulated in f64.
pub fn mean_rows<T: Real>(x: ArrayView2<T>) -> Array1<T> {
    let n = x.nrows() as f64;
    col_sums(x).mapv(|v| T::of(v.f64() / n))
}

/// Mean over columns (per row), accumulated in f64.
pub fn mean_cols<T: Real>(x: ArrayView2<T>) -> Array1<T> {
    let m = x.ncols() as f64;
    x.rows()
        .into_iter()
        .map(|r| T::of(r.iter().map(|v| v.f64()).sum::<f64>() / m))
        .collect()
}

/// Gradient of `mean_rows`: every row receives `dy / R`.
pub fn mean_rows_backward<T: Real>(rows: usize, dy: &Array1<T>) -> Array2<T> {
    let s = T::of(1.0 / rows as f64);
    let row = dy.mapv(|v| v * s);
    row.broadcast((rows, dy.len())).unwrap().to_owned()
}

/// `y = x / ‖x‖` and the norm (computed in f64).
pub fn l2_normalize<T: Real>(x: ArrayView1<T>) -> Result<(Array1<T>, f64)> {
    let n = x.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!("cannot L2-normalize a vector of norm {n}")));
    }
    Ok((x.mapv(|v| T::of(v.f64() / n)), n))
}

/// Gradient of `l2_normalize`: `(dy − y (y·dy)) / ‖x‖`.
pub fn l2_normalize_backward<T: Real>(y: &Array1<T>, norm: f64, dy: &Array1<T>) -> Array1<T> {
    let proj: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
    ndarray::Zip::from(y)
        .and(dy)
        .map_collect(|&yy, &d| T::of((d.f64() - yy.f64() * proj) / norm))
}

pub fn concat_cols<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<Array2<T>> {
    ndarray::concatenate(Axis(1), &[a, b])
        .map_err(|_| mismatch("concat", format!("row counts differ: {:?} vs {:?}", a.shape(), b.shape())))
}

pub fn split_cols<T: Real>(d: ArrayView2<T>, left: usize) -> (Array2<T>, Array2<T>) {
    (
        d.slice(ndarray::s![.., ..left]).to_owned(),
        d.slice(ndarray::s![.., left..]).to_owned(),
    )
}

/// `softmax(z / τ)`, computed in f64.
pub fn softmax_temperature<T: Real>(z: ArrayView1<T>, tau: f64) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive (got {tau})")));
    }
    let max = z.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v.f64() - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Gradient of `softmax_temperature` with respect to `z`.
pub fn softmax_temperature_backward(p: &Array1<f64>, tau: f64, dp: &Array1<f64>) -> Array1<f64> {
    let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    ndarray::Zip::from(p).and(dp).map_collect(|&pi, &d| pi * (d - dot) / tau)
}
