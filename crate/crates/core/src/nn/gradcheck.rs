//! Central finite-difference gradient checker.
//!
//! The function under test is always evaluated in `f64`. To check a
//! single-precision backward pass, compute the analytic gradient in `f32`
//! and hand the checker an `f64` evaluation of the same (upcast) parameters.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite value {value} at coordinate {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("point has {point} coordinates but gradient has {grad}")]
    LengthMismatch { point: usize, grad: usize },
    #[error("nothing to check: empty point")]
    Empty,
    #[error("every probed coordinate straddled a kink")]
    AllSkipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Coordinates probed; all of them when the point is smaller.
    pub probes: usize,
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor as a fraction of the largest analytic magnitude, so
    /// coordinates with a vanishing gradient are judged on an absolute scale.
    pub floor_rel: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            probes: 64,
            step: 1e-4,
            floor_rel: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
    /// Probes dropped because the step crossed a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    /// Worst of two reports.
    pub fn worst(self, other: GradCheckReport) -> GradCheckReport {
        if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor).max(f64::MIN_POSITIVE);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` (the claimed gradient of `f` at `x`) against central
/// differences at randomly sampled coordinates and returns the worst relative error.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError> {
    grad_check_piecewise(|p: &[f64]| (f(p), ()), x, analytic, opts)
}

/// Like [`grad_check`] for piecewise-smooth functions: `f` also returns the
/// branch pattern of its evaluation, and coordinates whose `x ± step` probes
/// leave the branch of `x` are skipped instead of compared.
pub fn grad_check_piecewise<P: PartialEq>(
    mut f: impl FnMut(&[f64]) -> (f64, P),
    x: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError> {
    if x.is_empty() {
        return Err(GradCheckError::Empty);
    }
    if x.len() != analytic.len() {
        return Err(GradCheckError::LengthMismatch {
            point: x.len(),
            grad: analytic.len(),
        });
    }
    if let Some((index, &value)) = analytic.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(GradCheckError::NonFinite { index, value });
    }
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = opts.floor_rel * scale;

    let coords: Vec<usize> = if opts.probes >= x.len() {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, x.len(), opts.probes).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut point = x.to_vec();
    let (_, base) = f(&point);
    let mut report: Option<GradCheckReport> = None;
    let mut skipped = 0;
    for &i in &coords {
        let orig = point[i];
        point[i] = orig + opts.step;
        let (up, up_branch) = f(&point);
        point[i] = orig - opts.step;
        let (down, down_branch) = f(&point);
        point[i] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        if let Some(value) = [up, down, numeric].into_iter().find(|v| !v.is_finite()) {
            return Err(GradCheckError::NonFinite { index: i, value });
        }
        if up_branch != base || down_branch != base {
            skipped += 1;
            continue;
        }
        let err = relative_error(analytic[i], numeric, floor);
        if report.is_none_or(|r| err > r.max_rel_error) {
            report = Some(GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
                probed: coords.len(),
                skipped: 0,
            });
        }
    }
    let mut report = report.ok_or(GradCheckError::AllSkipped)?;
    report.skipped = skipped;
    Ok(report)
}
