//! Thresholded activations and exact distance transforms.
//!
//! The distance transform assigns every pixel its distance to the nearest
//! *active* pixel. Euclidean distances use the separable lower-envelope
//! algorithm of Felzenszwalb and Huttenlocher on squared distances, which is
//! exact on integer grids; chessboard and Manhattan distances use a forward
//! and a backward chamfer sweep.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::maps::ProbabilityMap;

/// Default activation threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Chessboard,
    Manhattan,
}

impl DistanceMetric {
    pub fn between(self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let di = a.0.abs_diff(b.0);
        let dj = a.1.abs_diff(b.1);
        match self {
            DistanceMetric::Euclidean => ((di * di + dj * dj) as f64).sqrt(),
            DistanceMetric::Chessboard => di.max(dj) as f64,
            DistanceMetric::Manhattan => (di + dj) as f64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Chessboard => "chessboard",
            DistanceMetric::Manhattan => "manhattan",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "chessboard" => Ok(DistanceMetric::Chessboard),
            "manhattan" => Ok(DistanceMetric::Manhattan),
            other => Err(Error::invalid(
                "distance metric",
                format!("`{other}` is not one of euclidean, chessboard, manhattan"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMask {
    height: usize,
    width: usize,
    active: Vec<bool>,
}

impl ActivationMask {
    pub fn new(height: usize, width: usize, active: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || active.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} activations"),
                format!("{} values", active.len()),
            ));
        }
        Ok(ActivationMask {
            height,
            width,
            active,
        })
    }

    /// Pixels of channel `class` with probability `>= threshold`.
    pub fn from_channel(probs: &ProbabilityMap, class: usize, threshold: f64) -> Result<Self> {
        if class >= probs.num_classes() {
            return Err(Error::invalid(
                "channel",
                format!("{class} is not below {}", probs.num_classes()),
            ));
        }
        Ok(Self::threshold_plane(
            probs.grid().channel(class),
            probs.height(),
            probs.width(),
            threshold,
        ))
    }

    pub(crate) fn threshold_plane(plane: &[f64], height: usize, width: usize, threshold: f64) -> Self {
        ActivationMask {
            height,
            width,
            active: plane.iter().map(|&p| p >= threshold).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[i * self.width + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.active[i * self.width + j] = value;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    metric: DistanceMetric,
    cap: Option<f64>,
}

impl DistanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn cap(&self) -> Option<f64> {
        self.cap
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Distance from every pixel to its nearest active pixel; `+inf` everywhere
/// when nothing is active.
pub fn distance_transform(active: &ActivationMask, metric: DistanceMetric) -> DistanceMap {
    let values = match metric {
        DistanceMetric::Euclidean => euclidean(active),
        DistanceMetric::Chessboard => chamfer(active, true),
        DistanceMetric::Manhattan => chamfer(active, false),
    };
    DistanceMap {
        height: active.height,
        width: active.width,
        values,
        metric,
        cap: None,
    }
}

/// Caps every distance at `gamma`; infinite distances become `gamma`.
pub fn saturate(dist: &DistanceMap, gamma: f64) -> Result<DistanceMap> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(
            "gamma",
            format!("saturation distance must satisfy gamma > 0, got {gamma}"),
        ));
    }
    Ok(DistanceMap {
        values: dist.values.iter().map(|&d| d.min(gamma)).collect(),
        cap: Some(dist.cap.map_or(gamma, |c| c.min(gamma))),
        ..dist.clone()
    })
}

fn euclidean(active: &ActivationMask) -> Vec<f64> {
    let (h, w) = (active.height, active.width);
    let mut squared: Vec<f64> = active
        .active
        .iter()
        .map(|&a| if a { 0.0 } else { f64::INFINITY })
        .collect();
    let n = h.max(w);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut scratch = Envelope::with_capacity(n);

    for j in 0..w {
        for i in 0..h {
            line[i] = squared[i * w + j];
        }
        scratch.transform(&line[..h], &mut out[..h]);
        for i in 0..h {
            squared[i * w + j] = out[i];
        }
    }
    for i in 0..h {
        let row = &mut squared[i * w..(i + 1) * w];
        line[..w].copy_from_slice(row);
        scratch.transform(&line[..w], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    squared.iter().map(|&d| d.sqrt()).collect()
}

/// Lower envelope of the parabolas `(q - site)^2 + f(site)`.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            let qf = q as f64;
            loop {
                let Some(&v) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let vf = v as f64;
                let s = ((fq + qf * qf) - (f[v] + vf * vf)) / (2.0 * qf - 2.0 * vf);
                if s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, slot) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < qf {
                k += 1;
            }
            let v = self.sites[k];
            let dq = qf - v as f64;
            *slot = dq * dq + f[v];
        }
    }
}

fn chamfer(active: &ActivationMask, diagonal: bool) -> Vec<f64> {
    let (h, w) = (active.height, active.width);
    let mut d: Vec<f64> = active
        .active
        .iter()
        .map(|&a| if a { 0.0 } else { f64::INFINITY })
        .collect();
    for i in 0..h {
        for j in 0..w {
            let mut best = d[i * w + j];
            if i > 0 {
                best = best.min(d[(i - 1) * w + j] + 1.0);
                if diagonal && j > 0 {
                    best = best.min(d[(i - 1) * w + j - 1] + 1.0);
                }
                if diagonal && j + 1 < w {
                    best = best.min(d[(i - 1) * w + j + 1] + 1.0);
                }
            }
            if j > 0 {
                best = best.min(d[i * w + j - 1] + 1.0);
            }
            d[i * w + j] = best;
        }
    }
    for i in (0..h).rev() {
        for j in (0..w).rev() {
            let mut best = d[i * w + j];
            if i + 1 < h {
                best = best.min(d[(i + 1) * w + j] + 1.0);
                if diagonal && j + 1 < w {
                    best = best.min(d[(i + 1) * w + j + 1] + 1.0);
                }
                if diagonal && j > 0 {
                    best = best.min(d[(i + 1) * w + j - 1] + 1.0);
                }
            }
            if j + 1 < w {
                best = best.min(d[i * w + j + 1] + 1.0);
            }
            d[i * w + j] = best;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(active: &ActivationMask, metric: DistanceMetric) -> Vec<f64> {
        let (h, w) = (active.height(), active.width());
        let mut out = vec![f64::INFINITY; h * w];
        for i in 0..h {
            for j in 0..w {
                for a in 0..h {
                    for b in 0..w {
                        if active.is_active(a, b) {
                            out[i * w + j] = out[i * w + j].min(metric.between((i, j), (a, b)));
                        }
                    }
                }
            }
        }
        out
    }

    fn mask(h: usize, w: usize, bits: &[u8]) -> ActivationMask {
        ActivationMask::new(h, w, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn single_row() {
        let dist = distance_transform(&mask(1, 4, &[1, 0, 0, 0]), DistanceMetric::Euclidean);
        assert_eq!(dist.values(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(dist.values(), brute_force(&mask(1, 4, &[1, 0, 0, 0]), DistanceMetric::Euclidean).as_slice());
    }

    #[test]
    fn all_active_is_zero() {
        for metric in [DistanceMetric::Euclidean, DistanceMetric::Chessboard, DistanceMetric::Manhattan] {
            let dist = distance_transform(&mask(3, 2, &[1; 6]), metric);
            assert!(dist.values().iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn chessboard_center() {
        let m = mask(3, 3, &[0, 0, 0, 0, 1, 0, 0, 0, 0]);
        let dist = distance_transform(&m, DistanceMetric::Chessboard);
        assert_eq!(dist.values(), &[1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dist.values(), brute_force(&m, DistanceMetric::Chessboard).as_slice());
    }

    #[test]
    fn empty_activation_saturates_to_gamma() {
        let dist = distance_transform(&mask(2, 2, &[0; 4]), DistanceMetric::Euclidean);
        assert!(dist.values().iter().all(|d| d.is_infinite()));
        let capped = saturate(&dist, 10.0).unwrap();
        assert!(capped.values().iter().all(|&d| d == 10.0));
    }

    #[test]
    fn saturation() {
        let dist = distance_transform(&mask(1, 4, &[1, 0, 0, 0]), DistanceMetric::Euclidean);
        assert_eq!(saturate(&dist, 2.0).unwrap().values(), &[0.0, 1.0, 2.0, 2.0]);
        assert_eq!(saturate(&dist, 100.0).unwrap().values(), dist.values());
        assert!(saturate(&dist, 0.0).is_err());
        assert!(saturate(&dist, -1.0).is_err());
    }

    fn random_mask() -> impl Strategy<Value = ActivationMask> {
        (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
            prop::collection::vec(prop::bool::weighted(0.15), h * w)
                .prop_map(move |bits| ActivationMask::new(h, w, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(m in random_mask()) {
            for metric in [DistanceMetric::Chessboard, DistanceMetric::Manhattan] {
                prop_assert_eq!(distance_transform(&m, metric).into_values(), brute_force(&m, metric));
            }
            let fast = distance_transform(&m, DistanceMetric::Euclidean);
            for (a, b) in fast.values().iter().zip(brute_force(&m, DistanceMetric::Euclidean)) {
                prop_assert!(a == &b || (a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn adding_active_pixel_never_increases(m in random_mask(), pick in any::<prop::sample::Index>()) {
            let idx = pick.index(m.height() * m.width());
            let mut more = m.clone();
            more.set(idx / m.width(), idx % m.width(), true);
            for metric in [DistanceMetric::Euclidean, DistanceMetric::Chessboard, DistanceMetric::Manhattan] {
                let before = distance_transform(&m, metric);
                let after = distance_transform(&more, metric);
                for (a, b) in after.values().iter().zip(before.values()) {
                    prop_assert!(a <= b);
                }
            }
        }

        #[test]
        fn saturate_idempotent(m in random_mask(), gamma in 0.5f64..20.0) {
            let once = saturate(&distance_transform(&m, DistanceMetric::Euclidean), gamma).unwrap();
            let twice = saturate(&once, gamma).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
