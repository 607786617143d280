use rand::Rng;

use super::{is_statistic, GradientSet, ModelParameters, Real};
use crate::error::Result;
use crate::rng;

/// Symmetric difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+h) − f(p−h)) / 2h`
    Central,
    /// `(8(f(p+h) − f(p−h)) − (f(p+2h) − f(p−2h))) / 12h`, fourth order.
    Central4,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Step `h`.
    pub eps: f64,
    pub stencil: Stencil,
    /// Number of coordinates to check; at least the parameter count means all of them.
    pub samples: usize,
    pub seed: u64,
    /// Redraws allowed for coordinates whose perturbation crosses a kink.
    pub max_redraws: usize,
    /// Coordinates where both gradients are below this magnitude count as
    /// exact agreement; relative error between roundoff terms is meaningless.
    pub zero_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            stencil: Stencil::Central4,
            samples: 200,
            seed: 0,
            max_redraws: 2000,
            zero_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates excluded because `loss(p ± eps)` switched a relu, max or
    /// hinge branch relative to `loss(p)`.
    pub skipped_kinks: usize,
    /// Coordinates whose perturbed loss was not finite.
    pub non_finite: Vec<(String, usize)>,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against symmetric finite differences of `loss_fn`.
///
/// `loss_fn` is evaluated on an f64 copy of the parameters and returns the
/// loss together with a branch signature (a hash of relu signs, arg-max
/// choices and active hinges; 0 if the loss has none). A coordinate whose
/// perturbed evaluations report a different signature than the base point is
/// replaced by a fresh draw.
pub fn gradient_check<T: Real, F>(
    params: &ModelParameters<T>,
    analytic: &GradientSet<T>,
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParameters<f64>) -> Result<(f64, u64)>,
{
    let base = params.cast::<f64>();
    let (_, base_sig) = loss_fn(&base)?;

    let coords: Vec<(String, usize)> = base
        .tensors
        .iter()
        .filter(|(n, _)| !is_statistic(n))
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
        .collect();
    let exhaustive = cfg.samples >= coords.len();
    let mut stream = rng::stream(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut redraws = 0;
    let mut next = 0usize;

    while report.checked < cfg.samples.min(coords.len()) {
        let (name, idx) = if exhaustive {
            if next >= coords.len() {
                break;
            }
            next += 1;
            coords[next - 1].clone()
        } else {
            coords[stream.random_range(0..coords.len())].clone()
        };

        let eval = |delta: f64| -> Result<(f64, u64)> {
            let mut p = base.clone();
            p.tensors.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] += delta;
            loss_fn(&p)
        };
        let steps: &[f64] = match cfg.stencil {
            Stencil::Central => &[1.0, -1.0],
            Stencil::Central4 => &[1.0, -1.0, 2.0, -2.0],
        };
        let mut values = Vec::with_capacity(steps.len());
        let mut kink = false;
        for &k in steps {
            let (l, sig) = eval(k * cfg.eps)?;
            values.push(l);
            kink |= sig != base_sig;
        }
        if values.iter().any(|v| !v.is_finite()) {
            report.non_finite.push((name, idx));
            continue;
        }
        if kink {
            report.skipped_kinks += 1;
            redraws += 1;
            if redraws > cfg.max_redraws {
                break;
            }
            continue;
        }
        let numeric = match cfg.stencil {
            Stencil::Central => (values[0] - values[1]) / (2.0 * cfg.eps),
            Stencil::Central4 => (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12.0 * cfg.eps),
        };
        let a = analytic
            .get(&name)
            .map(|t| t.as_slice().unwrap()[idx].f64())
            .unwrap_or(0.0);
        let err = if a.abs() < cfg.zero_tol && numeric.abs() < cfg.zero_tol {
            0.0
        } else {
            relative_error(a, numeric)
        };
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name, idx, a, numeric));
        }
    }
    Ok(report)
}
