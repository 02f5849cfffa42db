//! Ordinal loss terms and their weighted combination.
//!
//! Every term returns a [`LossReport`] carrying its value and the exact
//! gradient with respect to its input. Terms operating on probabilities
//! differentiate with respect to probabilities; [`combined_loss`] chains
//! through the softmax and differentiates with respect to logits.
//!
//! Non-smooth points (ReLU kinks of the margin term, the activation
//! threshold of the distance-transform term) use subgradient 0.

pub mod gradcheck;
mod terms;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dt::{DistanceMetric, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::maps::{softmax, softmax_backward, ChannelGrid, LogitMap, ProbabilityMap, SegmentationMask};
use crate::order::ClassOrder;

pub use gradcheck::{
    check_on_logits, check_on_probabilities, finite_difference_check, GradCheckOptions,
    GradCheckReport,
};
pub use terms::{
    cross_entropy, csdt_term, csnp_term, o2_kink_distances, o2_term, threshold_distances,
    LOG_CLAMP,
};

pub const DEFAULT_MARGIN: f64 = 0.05;
pub const DEFAULT_GAMMA: f64 = 10.0;

/// Weights and hyper-parameters of the combined loss.
///
/// The margin of the unimodality term and the activation threshold of the
/// distance-transform term are distinct parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_o2: f64,
    pub lambda_csnp: f64,
    pub lambda_csdt: f64,
    pub delta_margin: f64,
    pub delta_dt: f64,
    pub gamma: f64,
    pub dt_metric: DistanceMetric,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_o2: 0.0,
            lambda_csnp: 0.0,
            lambda_csdt: 0.0,
            delta_margin: DEFAULT_MARGIN,
            delta_dt: DEFAULT_THRESHOLD,
            gamma: DEFAULT_GAMMA,
            dt_metric: DistanceMetric::Euclidean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("lambda_o2", self.lambda_o2),
            ("lambda_csnp", self.lambda_csnp),
            ("lambda_csdt", self.lambda_csdt),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::Invalid {
                    what: "loss weight",
                    reason: format!("{name} must be a finite value >= 0, got {value}"),
                });
            }
        }
        if !self.delta_margin.is_finite() {
            return Err(Error::invalid("delta_margin", "must be finite"));
        }
        if !(self.delta_dt > 0.0 && self.delta_dt < 1.0) {
            return Err(Error::invalid(
                "delta_dt",
                format!("threshold must satisfy 0 < delta_dt < 1, got {}", self.delta_dt),
            ));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(
                "gamma",
                format!("saturation distance must satisfy gamma > 0, got {}", self.gamma),
            ));
        }
        Ok(())
    }

    /// Configuration with a single regulariser weighted by `lambda`.
    pub fn with_term(term: Term, lambda: f64) -> Self {
        let mut config = LossConfig::default();
        config.set_weight(term, lambda);
        config
    }

    pub fn set_weight(&mut self, term: Term, lambda: f64) {
        match term {
            Term::Ce => {}
            Term::O2 => self.lambda_o2 = lambda,
            Term::Csnp => self.lambda_csnp = lambda,
            Term::Csdt => self.lambda_csdt = lambda,
        }
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Ce => 1.0,
            Term::O2 => self.lambda_o2,
            Term::Csnp => self.lambda_csnp,
            Term::Csdt => self.lambda_csdt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Ce,
    O2,
    Csnp,
    Csdt,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Ce, Term::O2, Term::Csnp, Term::Csdt];

    pub fn name(self) -> &'static str {
        match self {
            Term::Ce => "ce",
            Term::O2 => "o2",
            Term::Csnp => "csnp",
            Term::Csdt => "csdt",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid("loss term", format!("`{s}` is not one of ce, o2, csnp, csdt")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Gradient with respect to the input of the operation that produced
    /// the report.
    pub gradient: ChannelGrid,
    /// Unweighted value of each constituent term.
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub(crate) fn single(term: Term, value: f64, gradient: ChannelGrid) -> Self {
        LossReport {
            value,
            gradient,
            terms: BTreeMap::from([(term.name().to_string(), value)]),
        }
    }

    pub fn term(&self, term: Term) -> Option<f64> {
        self.terms.get(term.name()).copied()
    }
}

/// `CE + λ_o2·O2 + λ_csnp·CSNP + λ_csdt·CSDT` evaluated on probabilities;
/// the gradient is with respect to the probabilities.
pub fn combined_on_probabilities(
    probs: &ProbabilityMap,
    target: &SegmentationMask,
    order: &ClassOrder,
    config: &LossConfig,
) -> Result<LossReport> {
    config.validate()?;
    let reports = [
        (Term::Ce, cross_entropy(probs, target)?),
        (Term::O2, o2_term(probs, target, order, config.delta_margin)?),
        (Term::Csnp, csnp_term(probs, order)?),
        (
            Term::Csdt,
            csdt_term(probs, order, config.delta_dt, config.gamma, config.dt_metric)?,
        ),
    ];
    let (k, h, w) = probs.grid().shape();
    let mut gradient = ChannelGrid::zeros(k, h, w);
    let mut value = 0.0;
    let mut terms = BTreeMap::new();
    for (term, report) in reports {
        let weight = config.weight(term);
        terms.insert(term.name().to_string(), report.value);
        if weight == 0.0 {
            continue;
        }
        value += weight * report.value;
        for (g, r) in gradient.as_mut_slice().iter_mut().zip(report.gradient.as_slice()) {
            *g += weight * r;
        }
    }
    Ok(LossReport {
        value,
        gradient,
        terms,
    })
}

/// Softmax followed by the weighted loss; the gradient is with respect to
/// the logits.
pub fn combined_loss(
    logits: &LogitMap,
    target: &SegmentationMask,
    order: &ClassOrder,
    config: &LossConfig,
) -> Result<LossReport> {
    let probs = softmax(logits)?;
    let mut report = combined_on_probabilities(&probs, target, order, config)?;
    report.gradient = softmax_backward(&probs, &report.gradient)?;
    Ok(report)
}

/// Per-pixel distance (in probability units) to the nearest non-smooth
/// point of the combined loss under `config`; `+inf` when smooth.
pub fn kink_distances(
    probs: &ProbabilityMap,
    target: &SegmentationMask,
    order: &ClassOrder,
    config: &LossConfig,
) -> Result<Vec<f64>> {
    let mut out = vec![f64::INFINITY; probs.height() * probs.width()];
    if config.lambda_o2 > 0.0 {
        for (o, d) in out.iter_mut().zip(o2_kink_distances(probs, target, order, config.delta_margin)?) {
            *o = o.min(d);
        }
    }
    if config.lambda_csdt > 0.0 {
        for (o, d) in out.iter_mut().zip(threshold_distances(probs, config.delta_dt)) {
            *o = o.min(d);
        }
    }
    Ok(out)
}

/// Pairwise (cascade) summation.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = [
            LossConfig { gamma: 0.0, ..Default::default() },
            LossConfig { delta_dt: 1.0, ..Default::default() },
            LossConfig { lambda_o2: -1.0, ..Default::default() },
            LossConfig { lambda_csnp: f64::NAN, ..Default::default() },
        ];
        for config in bad {
            assert!(config.validate().is_err(), "{config:?}");
        }
        let msg = LossConfig { gamma: 0.0, ..Default::default() }
            .validate()
            .unwrap_err()
            .to_string();
        assert!(msg.contains("gamma > 0"), "{msg}");
    }

    #[test]
    fn term_names_round_trip() {
        for term in Term::ALL {
            assert_eq!(term.name().parse::<Term>().unwrap(), term);
        }
        assert!("dice".parse::<Term>().is_err());
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let logits = LogitMap::from_vec(3, 1, 2, vec![0.1, -0.3, 1.2, 0.4, 0.0, -0.8]).unwrap();
        let target = SegmentationMask::new(1, 2, 3, vec![2, 0]).unwrap();
        let order = ClassOrder::chain(3).unwrap();
        let combined = combined_loss(&logits, &target, &order, &LossConfig::default()).unwrap();
        let ce = cross_entropy(&softmax(&logits).unwrap(), &target).unwrap();
        assert_eq!(combined.value, ce.value);
        assert_eq!(combined.terms.len(), 4);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let values: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&values), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
