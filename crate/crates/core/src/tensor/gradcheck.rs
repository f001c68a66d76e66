use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Central finite-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input (sampled); `None` checks all.
    pub max_coords_per_input: Option<usize>,
    /// Check this many random directional derivatives per input instead of coordinates.
    pub directions: Option<usize>,
    /// Use Ridders' extrapolation starting from `step` instead of a single
    /// central difference.
    pub ridders: bool,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
            max_coords_per_input: None,
            directions: None,
            ridders: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, coordinate or direction index) of the worst check.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) derivative at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
}

fn evaluate<T: Scalar, F>(f: &F, point: &[Tensor<T>], with_grad: bool) -> Result<(f64, Vec<Option<Tensor<T>>>)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
}

/// Central difference, or Ridders' polynomial extrapolation of central
/// differences with shrinking steps. Ridders runs from four starting steps
/// (`step`, `step/10`, ...) and keeps the estimate with the smallest internal
/// error, which guards against both rounding noise and kinks.
fn derivative(central: &mut impl FnMut(f64) -> Result<f64>, cfg: &GradCheck) -> Result<f64> {
    if !cfg.ridders {
        return central(cfg.step);
    }
    let mut best = (0.0, f64::INFINITY);
    let mut h = cfg.step;
    for _ in 0..4 {
        let r = ridders(central, h)?;
        if r.1 < best.1 {
            best = r;
        }
        h /= 10.0;
    }
    Ok(best.0)
}

fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<(f64, f64)> {
    const CON: f64 = 1.4;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let con2 = CON * CON;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = central(h)?;
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = central(h)?;
        let mut fac = con2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= con2;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok((best, err))
}

/// Compare the analytic gradient of `f` at `point` against central differences.
///
/// Coordinate mode compares single partial derivatives. Direction mode
/// compares `gᵀu` for seeded Gaussian directions `u` over a whole input, which
/// stays above the finite-difference noise floor when individual partials are
/// tiny. Relative error is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<T: Scalar, F>(f: F, point: &[Tensor<T>], cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&f, point, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        passed: false,
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_values: None,
    };
    let mut record = |input: usize, j: usize, a: f64, numeric: f64| {
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((input, j));
            report.worst_values = Some((a, numeric));
        }
    };
    let mut work: Vec<Tensor<T>> = point.to_vec();
    for (input, p) in point.iter().enumerate() {
        let n = p.numel();
        let grad: Vec<f64> = match &analytic[input] {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; n],
        };
        if let Some(count) = cfg.directions {
            let normal = StandardNormal;
            for d in 0..count {
                let u: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                let a: f64 = grad.iter().zip(&u).map(|(g, u)| g * u).sum();
                let mut line = |h: f64| -> Result<f64> {
                    let shifted = |sign: f64| {
                        Tensor::new(
                            p.shape().to_vec(),
                            p.data()
                                .iter()
                                .zip(&u)
                                .map(|(&x, &u)| x + T::lit(sign * h * u))
                                .collect(),
                        )
                    };
                    work[input] = shifted(1.0)?;
                    let (fp, _) = evaluate(&f, &work, false)?;
                    work[input] = shifted(-1.0)?;
                    let (fm, _) = evaluate(&f, &work, false)?;
                    work[input] = p.clone();
                    Ok((fp - fm) / (2.0 * h))
                };
                let numeric = derivative(&mut line, cfg)?;
                record(input, d, a, numeric);
            }
            continue;
        }
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = p.data()[j];
            let mut line = |h: f64| -> Result<f64> {
                work[input].data_mut()[j] = orig + T::lit(h);
                let (fp, _) = evaluate(&f, &work, false)?;
                work[input].data_mut()[j] = orig - T::lit(h);
                let (fm, _) = evaluate(&f, &work, false)?;
                work[input].data_mut()[j] = orig;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = derivative(&mut line, cfg)?;
            record(input, j, grad[j], numeric);
        }
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}
