use super::{is_decayed, GradientSet, ModelParameters, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient `c` of a decay gradient `c·w` on decayed weights, applied
    /// outside the adaptive moments (`w -= lr·c·w`). Zero disables it.
    pub decoupled_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry keep
/// their value but the step counter advances once per call.
pub fn adam_step<T: Real>(params: &mut ModelParameters<T>, grads: &GradientSet<T>, cfg: &AdamConfig) -> Result<()> {
    grads.check_against(params)?;
    grads.check_finite()?;
    if !(cfg.lr >= 0.0
        && (0.0..1.0).contains(&cfg.beta1)
        && (0.0..1.0).contains(&cfg.beta2)
        && cfg.eps > 0.0
        && cfg.decoupled_decay >= 0.0)
    {
        return Err(Error::invalid(format!("invalid Adam configuration {cfg:?}")));
    }
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in &grads.tensors {
        let p = params.tensors.get_mut(name).expect("checked above");
        let m = params.adam_m.get_mut(name).expect("moments mirror parameters");
        let v = params.adam_v.get_mut(name).expect("moments mirror parameters");
        let (p, m, v, g) = (
            p.as_slice_mut().expect("standard layout"),
            m.as_slice_mut().expect("standard layout"),
            v.as_slice_mut().expect("standard layout"),
            g.as_slice().expect("standard layout"),
        );
        for i in 0..p.len() {
            let gi = g[i].f64();
            let mi = cfg.beta1 * m[i].f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            p[i] = T::of(p[i].f64() - update);
        }
    }
    if cfg.decoupled_decay > 0.0 {
        let shrink = 1.0 - cfg.lr * cfg.decoupled_decay;
        for (name, p) in params.tensors.iter_mut() {
            if is_decayed(name) {
                p.mapv_inplace(|v| T::of(v.f64() * shrink));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    fn single(p: f64) -> ModelParameters<f64> {
        let mut params = ModelParameters::default();
        params.insert("p.w", arr1(&[p]).into_dyn());
        params
    }

    fn grad(g: f64) -> GradientSet<f64> {
        let mut gs = GradientSet::default();
        gs.accumulate("p.w", arr1(&[g]).into_dyn());
        gs
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut p, &grad(1.0), &cfg).unwrap();
        // m̂ = 1, v̂ = 1: p' = 1 − 0.1 · 1 / (1 + 1e-8)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.tensors["p.w"][[0]] - expect).abs() < 1e-15);
        assert!((p.tensors["p.w"][[0]] - 0.9).abs() < 1e-6);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.25);
        adam_step(&mut p, &grad(0.0), &AdamConfig::default()).unwrap();
        assert_eq!(p.tensors["p.w"][[0]], 0.25);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 0.01);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = single(1.0);
        assert!(adam_step(&mut p, &grad(f64::NAN), &AdamConfig::default()).is_err());
        assert_eq!(p.step, 0);
        let mut bad = GradientSet::default();
        bad.accumulate("q.w", ArrayD::zeros(ndarray::IxDyn(&[1])));
        assert!(adam_step(&mut p, &bad, &AdamConfig::default()).is_err());
    }

    #[test]
    fn decoupled_decay_bypasses_moments() {
        let mut p = single(2.0);
        p.insert("p.b", arr1(&[2.0]).into_dyn());
        let cfg = AdamConfig {
            lr: 0.1,
            decoupled_decay: 0.5,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &grad(0.0), &cfg).unwrap();
        assert!((p.tensors["p.w"][[0]] - 2.0 * 0.95).abs() < 1e-15);
        assert_eq!(p.tensors["p.b"][[0]], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = single(3.0);
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        for _ in 0..2000 {
            let x = p.tensors["p.w"][[0]];
            adam_step(&mut p, &grad(2.0 * (x - 1.0)), &cfg).unwrap();
        }
        assert!((p.tensors["p.w"][[0]] - 1.0).abs() < 1e-3);
    }
}
