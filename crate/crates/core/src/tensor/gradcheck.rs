//! Central finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

pub const REL_FLOOR: f64 = 1e-12;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let y = v.item().f64();
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(y)
}

/// Compares backward gradients of scalar `f` at `points` against central
/// differences with step `epsilon`, Richardson-extrapolated. Fails with [`Error::NonDifferentiable`]
/// when the path to an input crosses an op without a backward rule.
pub fn finite_diff_check_many<T, F>(f: F, points: &[Tensor<T>], epsilon: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::checked();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().f64().is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| match g.grad(v) {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; p.len()],
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<T>> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        for e in 0..point.len() {
            let orig = point.data()[e];
            let mut at = |offset: f64| -> Result<(f64, f64)> {
                let shifted = T::c(orig.f64() + offset);
                probe[input].data_mut()[e] = shifted;
                let y = eval(&f, &probe)?;
                probe[input].data_mut()[e] = orig;
                // the offset actually applied after rounding to T
                Ok((y, shifted.f64() - orig.f64()))
            };
            let central = |at: &mut dyn FnMut(f64) -> Result<(f64, f64)>, h: f64| -> Result<f64> {
                let (up, hu) = at(h)?;
                let (down, hd) = at(-h)?;
                Ok((up - down) / (hu - hd))
            };
            // Richardson step: cancels the h² truncation term of the
            // central difference
            let wide = central(&mut at, epsilon)?;
            let narrow = central(&mut at, epsilon / 2.0)?;
            let numeric = (4.0 * narrow - wide) / 3.0;
            let a = analytic[input][e];
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (input, e);
            }
        }
    }
    Ok(report)
}

/// Directional form: compares `∇f·u` with central differences of `f`
/// along `directions` unit vectors `u` spanning all inputs. `directions`
/// are drawn from `seed`. `coordinates` in the report counts directions.
pub fn directional_check_many<T, F>(
    f: F,
    points: &[Tensor<T>],
    epsilon: f64,
    directions: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::checked();
    let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let grad: Vec<f64> = vars
        .iter()
        .zip(points)
        .flat_map(|(&v, p)| match g.grad(v) {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; p.len()],
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for d in 0..directions {
        let mut u: Vec<f64> = (0..grad.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        let at = |h: f64| -> Result<f64> {
            let mut probe: Vec<Tensor<T>> = points.to_vec();
            let mut k = 0;
            for t in &mut probe {
                for x in t.data_mut() {
                    *x = T::c(x.f64() + h * u[k]);
                    k += 1;
                }
            }
            eval(&f, &probe)
        };
        let central = |h: f64| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
        let numeric = (4.0 * central(epsilon / 2.0)? - central(epsilon)?) / 3.0;
        let analytic: f64 = grad.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rel = relative_error(analytic, numeric);
        report.coordinates += 1;
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (d, 0);
        }
    }
    Ok(report)
}

/// Single-input form of [`finite_diff_check_many`]; returns the maximum
/// relative error.
pub fn finite_diff_check<T, F>(f: F, point: &Tensor<T>, epsilon: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(point), epsilon)
        .map(|r| r.max_rel_error)
}
