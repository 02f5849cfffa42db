//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::maps::{LogitMap, ProbabilityMap};

use super::LossReport;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Coordinates checked; all of them when the input is smaller.
    pub max_coordinates: usize,
    /// Coordinates whose pixel lies within `kink_radius · h` of a
    /// non-smooth point are skipped.
    pub kink_radius: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coordinates: 200,
            kink_radius: 10.0,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, abs_floor)` over checked coordinates.
    pub max_relative_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

/// Compares `analytic` with central differences of `eval`, where
/// `eval(index, delta)` returns the loss with coordinate `index` shifted by
/// `delta`. Coordinates for which `skip` returns `true` are not checked.
pub fn finite_difference_check<F, S>(
    mut eval: F,
    analytic: &[f64],
    options: &GradCheckOptions,
    mut skip: S,
) -> GradCheckReport
where
    F: FnMut(usize, f64) -> f64,
    S: FnMut(usize) -> bool,
{
    let dim = analytic.len();
    let coordinates: Vec<usize> = if dim <= options.max_coordinates {
        (0..dim).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut picked = sample(&mut rng, dim, options.max_coordinates).into_vec();
        picked.sort_unstable();
        picked
    };

    let h = options.step;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        skipped: 0,
    };
    for idx in coordinates {
        if skip(idx) {
            report.skipped += 1;
            continue;
        }
        let numeric = (eval(idx, h) - eval(idx, -h)) / (2.0 * h);
        let a = analytic[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.abs_floor);
        report.checked += 1;
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst_coordinate = Some(idx);
        }
    }
    report
}

fn near_kink(kinks: Option<&[f64]>, plane: usize, idx: usize, radius: f64) -> bool {
    kinks.is_some_and(|k| k[idx % plane] < radius)
}

/// Checks a probability-space loss. `kinks` holds per-pixel distances to
/// non-smooth points (see [`super::kink_distances`]).
pub fn check_on_probabilities<F>(
    probs: &ProbabilityMap,
    kinks: Option<&[f64]>,
    options: &GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ProbabilityMap) -> Result<LossReport>,
{
    let analytic = loss(probs)?.gradient;
    let plane = probs.height() * probs.width();
    let radius = options.kink_radius * options.step;
    let mut failure = None;
    let report = finite_difference_check(
        |idx, delta| match loss(&probs.perturbed(idx, delta)) {
            Ok(r) => r.value,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        analytic.as_slice(),
        options,
        |idx| near_kink(kinks, plane, idx, radius),
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Checks a logit-space loss. Kink distances are measured on
/// `softmax(logits)`.
pub fn check_on_logits<F>(
    logits: &LogitMap,
    kinks: Option<&[f64]>,
    options: &GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&LogitMap) -> Result<LossReport>,
{
    let analytic = loss(logits)?.gradient;
    let plane = logits.height() * logits.width();
    let radius = options.kink_radius * options.step;
    let mut failure = None;
    let report = finite_difference_check(
        |idx, delta| match loss(&logits.perturbed(idx, delta)) {
            Ok(r) => r.value,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        analytic.as_slice(),
        options,
        |idx| near_kink(kinks, plane, idx, radius),
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = [1.0, -2.0, 0.5];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let report = finite_difference_check(
            |idx, d| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| if i == idx { (v + d) * (v + d) } else { v * v })
                    .sum()
            },
            &analytic,
            &GradCheckOptions::default(),
            |_| false,
        );
        assert_eq!(report.checked, 3);
        assert!(report.passes(1e-8), "{report:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let report = finite_difference_check(
            |_, d| (1.0 + d).powi(3),
            &[2.0],
            &GradCheckOptions::default(),
            |_| false,
        );
        assert!(!report.passes(1e-5));
    }

    #[test]
    fn subsamples_large_inputs() {
        let analytic = vec![1.0; 1000];
        let report = finite_difference_check(|_, d| d, &analytic, &GradCheckOptions::default(), |i| i % 2 == 0);
        assert_eq!(report.checked + report.skipped, 200);
    }
}
