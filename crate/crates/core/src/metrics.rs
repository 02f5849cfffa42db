//! Segmentation quality and ordinal consistency metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ProbabilityMap, SegmentationMask};
use crate::order::ClassOrder;

/// Named metric values (fractions in `[0, 1]`) and per-class Dice scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    /// `None` for classes absent from both prediction and target.
    pub dice_per_class: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistencyVerdict {
    pub consistent: bool,
    /// First offending neighbour pair `((i, j), (i', j'))` in row-major
    /// order, horizontal neighbour before vertical.
    pub violation: Option<((usize, usize), (usize, usize))>,
}

fn same_shape(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    a.check_shape(b.height(), b.width())
}

fn check_labels(mask: &SegmentationMask, order: &ClassOrder) -> Result<()> {
    if mask.max_label() >= order.num_classes() {
        return Err(Error::invalid(
            "mask",
            format!(
                "label {} exceeds the {} classes of the order",
                mask.max_label(),
                order.num_classes()
            ),
        ));
    }
    Ok(())
}

/// Macro Dice over classes present in the prediction or the target.
pub fn dice_macro(
    pred: &SegmentationMask,
    target: &SegmentationMask,
    num_classes: usize,
) -> Result<MetricReport> {
    same_shape(pred, target)?;
    if pred.max_label() >= num_classes || target.max_label() >= num_classes {
        return Err(Error::invalid(
            "class count",
            format!("labels exceed {num_classes} classes"),
        ));
    }
    let mut overlap = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut target_count = vec![0usize; num_classes];
    for (&p, &t) in pred.labels().iter().zip(target.labels()) {
        pred_count[p] += 1;
        target_count[t] += 1;
        if p == t {
            overlap[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|k| {
            let denom = pred_count[k] + target_count[k];
            (denom > 0).then(|| 2.0 * overlap[k] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_dice = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MetricReport {
        values: BTreeMap::from([("dice_macro".to_string(), macro_dice)]),
        dice_per_class: per_class,
    })
}

/// Fraction of ordinally invalid jumps among neighbouring pixels with
/// different labels, averaged over the horizontal and vertical directions.
/// Distinct incomparable labels count as invalid.
pub fn contact_surface(pred: &SegmentationMask, order: &ClassOrder) -> Result<f64> {
    check_labels(pred, order)?;
    let (h, w) = (pred.height(), pred.width());
    let ratio = |invalid: usize, jumps: usize| {
        if jumps == 0 {
            0.0
        } else {
            invalid as f64 / jumps as f64
        }
    };
    let (mut jumps_x, mut invalid_x, mut jumps_y, mut invalid_y) = (0, 0, 0, 0);
    for i in 0..h {
        for j in 0..w {
            let here = pred.get(i, j);
            if j + 1 < w {
                let right = pred.get(i, j + 1);
                if right != here {
                    jumps_x += 1;
                    invalid_x += usize::from(!order.is_valid_jump(here, right));
                }
            }
            if i + 1 < h {
                let down = pred.get(i + 1, j);
                if down != here {
                    jumps_y += 1;
                    invalid_y += usize::from(!order.is_valid_jump(here, down));
                }
            }
        }
    }
    Ok(0.5 * ratio(invalid_x, jumps_x) + 0.5 * ratio(invalid_y, jumps_y))
}

/// `true` when `values` rises (non-strictly) to some mode and then falls
/// (non-strictly).
pub fn is_unimodal(values: &[f64]) -> bool {
    let mut i = 1;
    while i < values.len() && values[i] >= values[i - 1] {
        i += 1;
    }
    while i < values.len() && values[i] <= values[i - 1] {
        i += 1;
    }
    i >= values.len()
}

/// Fraction of pixels whose class distribution is unimodal along the
/// total order.
pub fn unimodal_pixels(probs: &ProbabilityMap) -> f64 {
    let k = probs.num_classes();
    let n = probs.height() * probs.width();
    let data = probs.as_slice();
    let mut scratch = vec![0.0; k];
    let unimodal = (0..n)
        .filter(|&p| {
            for (c, slot) in scratch.iter_mut().enumerate() {
                *slot = data[c * n + p];
            }
            is_unimodal(&scratch)
        })
        .count();
    unimodal as f64 / n as f64
}

/// Unimodal-pixel fraction under a partial order: a pixel counts when its
/// distribution restricted to every maximal chain is unimodal.
pub fn unimodal_pixels_ordered(probs: &ProbabilityMap, order: &ClassOrder) -> Result<f64> {
    if probs.num_classes() != order.num_classes() {
        return Err(Error::shape(
            format!("{} classes from the order", order.num_classes()),
            format!("{} probability channels", probs.num_classes()),
        ));
    }
    if order.is_chain() {
        return Ok(unimodal_pixels(probs));
    }
    let chains = order.maximal_chains();
    let n = probs.height() * probs.width();
    let data = probs.as_slice();
    let mut scratch = Vec::new();
    let unimodal = (0..n)
        .filter(|&p| {
            chains.iter().all(|chain| {
                scratch.clear();
                scratch.extend(chain.iter().map(|&c| data[c * n + p]));
                is_unimodal(&scratch)
            })
        })
        .count();
    Ok(unimodal as f64 / n as f64)
}

/// Checks that every pair of 4-neighbours is ordinally valid.
pub fn structural_consistency_check(
    pred: &SegmentationMask,
    order: &ClassOrder,
) -> Result<ConsistencyVerdict> {
    check_labels(pred, order)?;
    let (h, w) = (pred.height(), pred.width());
    for i in 0..h {
        for j in 0..w {
            let here = pred.get(i, j);
            if j + 1 < w && !order.is_valid_jump(here, pred.get(i, j + 1)) {
                return Ok(ConsistencyVerdict {
                    consistent: false,
                    violation: Some(((i, j), (i, j + 1))),
                });
            }
            if i + 1 < h && !order.is_valid_jump(here, pred.get(i + 1, j)) {
                return Ok(ConsistencyVerdict {
                    consistent: false,
                    violation: Some(((i, j), (i + 1, j))),
                });
            }
        }
    }
    Ok(ConsistencyVerdict {
        consistent: true,
        violation: None,
    })
}

/// Dice against `target`, contact surface of `pred`, and, when
/// probabilities are supplied, the unimodal-pixel fraction.
pub fn evaluate(
    pred: &SegmentationMask,
    target: &SegmentationMask,
    probs: Option<&ProbabilityMap>,
    order: &ClassOrder,
) -> Result<MetricReport> {
    let mut report = dice_macro(pred, target, order.num_classes())?;
    report
        .values
        .insert("cs".to_string(), contact_surface(pred, order)?);
    if let Some(probs) = probs {
        report
            .values
            .insert("up".to_string(), unimodal_pixels_ordered(probs, order)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, k: usize, labels: &[usize]) -> SegmentationMask {
        SegmentationMask::new(h, w, k, labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_cases() {
        let m = mask(2, 2, 3, &[0, 1, 2, 1]);
        assert_eq!(dice_macro(&m, &m, 3).unwrap().get("dice_macro"), Some(1.0));

        let pred = mask(1, 3, 2, &[0, 0, 0]);
        let target = mask(1, 3, 2, &[1, 1, 1]);
        assert_eq!(dice_macro(&pred, &target, 2).unwrap().get("dice_macro"), Some(0.0));

        let pred = mask(1, 4, 2, &[0, 0, 1, 1]);
        let target = mask(1, 4, 2, &[0, 1, 1, 1]);
        let report = dice_macro(&pred, &target, 2).unwrap();
        assert_eq!(report.dice_per_class, vec![Some(2.0 / 3.0), Some(4.0 / 5.0)]);
        assert!((report.get("dice_macro").unwrap() - 11.0 / 15.0).abs() < 1e-15);

        // class 2 absent from both masks
        let report = dice_macro(&pred.with_num_classes(3).unwrap(), &target.with_num_classes(3).unwrap(), 3).unwrap();
        assert_eq!(report.dice_per_class[2], None);
        assert!((report.get("dice_macro").unwrap() - 11.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn contact_surface_cases() {
        let chain = ClassOrder::chain(3).unwrap();
        assert_eq!(contact_surface(&mask(2, 2, 3, &[1; 4]), &chain).unwrap(), 0.0);
        assert_eq!(contact_surface(&mask(1, 3, 3, &[0, 1, 2]), &chain).unwrap(), 0.0);
        assert_eq!(contact_surface(&mask(1, 3, 3, &[0, 2, 0]), &chain).unwrap(), 0.5);
        assert!(contact_surface(&mask(1, 2, 4, &[0, 3]), &chain).is_err());
    }

    #[test]
    fn contact_surface_incomparable_labels_are_invalid() {
        let diamond = ClassOrder::from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        assert_eq!(contact_surface(&mask(1, 2, 4, &[1, 2]), &diamond).unwrap(), 0.5);
        assert_eq!(contact_surface(&mask(1, 2, 4, &[1, 3]), &diamond).unwrap(), 0.0);
    }

    #[test]
    fn unimodality() {
        assert!(!is_unimodal(&[0.4, 0.1, 0.5]));
        assert!(is_unimodal(&[1.0 / 3.0; 3]));
        assert!(is_unimodal(&[0.1, 0.6, 0.2, 0.1]));
        assert!(is_unimodal(&[0.9, 0.1]));
        assert!(is_unimodal(&[0.1, 0.9]));
        assert!(is_unimodal(&[1.0]));

        let one_hot = ProbabilityMap::from_vec(3, 1, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(unimodal_pixels(&one_hot), 1.0);
        let mixed = ProbabilityMap::from_vec(3, 1, 2, vec![0.4, 0.2, 0.1, 0.3, 0.5, 0.5]).unwrap();
        assert_eq!(unimodal_pixels(&mixed), 0.5);
    }

    #[test]
    fn unimodal_along_every_chain() {
        let diamond = ClassOrder::from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        // chains 0-1-3: (0.3, 0.1, 0.4) is bimodal; 0-2-3: (0.3, 0.2, 0.4) too
        let p = ProbabilityMap::from_vec(4, 1, 1, vec![0.3, 0.1, 0.2, 0.4]).unwrap();
        assert_eq!(unimodal_pixels_ordered(&p, &diamond).unwrap(), 0.0);
        // 0-1-3: (0.1, 0.5, 0.3) unimodal, 0-2-3: (0.1, 0.1, 0.3) unimodal
        let p = ProbabilityMap::from_vec(4, 1, 1, vec![0.1, 0.5, 0.1, 0.3]).unwrap();
        assert_eq!(unimodal_pixels_ordered(&p, &diamond).unwrap(), 1.0);
    }

    #[test]
    fn consistency_cases() {
        let chain = ClassOrder::chain(3).unwrap();
        let ok = structural_consistency_check(&mask(2, 2, 3, &[0, 1, 1, 2]), &chain).unwrap();
        assert!(ok.consistent);
        let bad = structural_consistency_check(&mask(2, 2, 3, &[0, 2, 0, 0]), &chain).unwrap();
        assert_eq!(bad.violation, Some(((0, 0), (0, 1))));
        assert!(structural_consistency_check(&mask(1, 1, 3, &[2]), &chain).unwrap().consistent);
    }
}
