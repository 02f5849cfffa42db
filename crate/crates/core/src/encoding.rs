//! Cumulative ordinal encoding of labels.
//!
//! Channel `k` of a [`CumulativeMap`] holds the probability that the label
//! is greater than `k`, so a K-class problem has K-1 channels.

use crate::error::{Error, Result};
use crate::maps::{ChannelGrid, SegmentationMask};

/// Slack allowed on the `[0, 1]` range of raw cumulative values.
pub const RANGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeMap(ChannelGrid);

impl CumulativeMap {
    pub fn new(grid: ChannelGrid) -> Result<Self> {
        if let Some(pos) = grid
            .as_slice()
            .iter()
            .position(|&v| !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&v))
        {
            return Err(Error::invalid(
                "cumulative map",
                format!("value {} at flat index {pos} is outside [0, 1]", grid.as_slice()[pos]),
            ));
        }
        Ok(CumulativeMap(grid))
    }

    pub fn grid(&self) -> &ChannelGrid {
        &self.0
    }

    pub fn into_grid(self) -> ChannelGrid {
        self.0
    }

    /// Number of classes encoded (channels + 1).
    pub fn num_classes(&self) -> usize {
        self.0.channels() + 1
    }
}

/// Channel `k` is 1 where the label exceeds `k`.
pub fn ordinal_encode(mask: &SegmentationMask, num_classes: usize) -> Result<CumulativeMap> {
    if num_classes < 2 {
        return Err(Error::invalid(
            "class count",
            format!("ordinal encoding needs at least 2 classes, got {num_classes}"),
        ));
    }
    if mask.max_label() >= num_classes {
        return Err(Error::invalid(
            "class count",
            format!("{num_classes} classes cannot encode label {}", mask.max_label()),
        ));
    }
    let (h, w) = (mask.height(), mask.width());
    let n = h * w;
    let mut grid = ChannelGrid::zeros(num_classes - 1, h, w);
    let data = grid.as_mut_slice();
    for (p, &label) in mask.labels().iter().enumerate() {
        for k in 0..label {
            data[k * n + p] = 1.0;
        }
    }
    Ok(CumulativeMap(grid))
}

/// Chains conditional outputs into cumulative probabilities:
/// `out[0] = raw[0]`, `out[k] = raw[k] · out[k-1]`.
pub fn consistency_correct(raw: &CumulativeMap) -> CumulativeMap {
    let mut grid = raw.0.clone();
    let n = grid.plane_len();
    let channels = grid.channels();
    let data = grid.as_mut_slice();
    for k in 1..channels {
        for p in 0..n {
            data[k * n + p] *= data[(k - 1) * n + p];
        }
    }
    CumulativeMap(grid)
}

/// Inverse of [`consistency_correct`] on monotone maps:
/// `out[k] = cum[k] / cum[k-1]`, with 0 where the previous channel is 0.
pub fn conditional_from_cumulative(cum: &CumulativeMap) -> Result<CumulativeMap> {
    check_monotone(cum)?;
    let src = cum.0.as_slice();
    let mut grid = cum.0.clone();
    let n = grid.plane_len();
    let channels = grid.channels();
    let data = grid.as_mut_slice();
    for k in 1..channels {
        for p in 0..n {
            let prev = src[(k - 1) * n + p];
            data[k * n + p] = if prev > 0.0 {
                (src[k * n + p] / prev).min(1.0)
            } else {
                0.0
            };
        }
    }
    Ok(CumulativeMap(grid))
}

fn check_monotone(cum: &CumulativeMap) -> Result<()> {
    let grid = &cum.0;
    let n = grid.plane_len();
    let data = grid.as_slice();
    for k in 1..grid.channels() {
        for p in 0..n {
            if data[k * n + p] > data[(k - 1) * n + p] {
                return Err(Error::invalid(
                    "cumulative map",
                    format!(
                        "channel {k} exceeds channel {} at pixel ({}, {})",
                        k - 1,
                        p / grid.width(),
                        p % grid.width()
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// Label = number of channels `>= threshold`. The input must be monotone
/// non-increasing across channels.
pub fn decode(cum: &CumulativeMap, threshold: f64) -> Result<SegmentationMask> {
    check_monotone(cum)?;
    let grid = &cum.0;
    let n = grid.plane_len();
    let data = grid.as_slice();
    let labels = (0..n)
        .map(|p| (0..grid.channels()).filter(|&k| data[k * n + p] >= threshold).count())
        .collect();
    SegmentationMask::new(grid.height(), grid.width(), cum.num_classes(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cum(channels: usize, values: Vec<f64>) -> CumulativeMap {
        CumulativeMap::new(ChannelGrid::new(channels, 1, 1, values).unwrap()).unwrap()
    }

    #[test]
    fn encode_examples() {
        let m = SegmentationMask::new(1, 3, 4, vec![2, 0, 3]).unwrap();
        let enc = ordinal_encode(&m, 4).unwrap();
        // channel-major: channel 0 = [1, 0, 1], 1 = [1, 0, 1], 2 = [0, 0, 1]
        assert_eq!(enc.grid().as_slice(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(ordinal_encode(&SegmentationMask::filled(1, 1, 1, 0).unwrap(), 1).is_err());
    }

    #[test]
    fn correction_is_cumulative_product() {
        let corrected = consistency_correct(&cum(3, vec![0.9, 0.8, 0.5]));
        let expected = [0.9, 0.72, 0.36];
        for (a, b) in corrected.grid().as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(decode(&corrected, 0.5).unwrap().labels(), &[2]);

        let ones = consistency_correct(&cum(3, vec![1.0; 3]));
        assert_eq!(ones.grid().as_slice(), &[1.0; 3]);

        // monotone input still changes
        let monotone = cum(2, vec![0.8, 0.6]);
        assert_ne!(consistency_correct(&monotone), monotone);
    }

    #[test]
    fn decode_rules() {
        assert_eq!(decode(&cum(3, vec![0.4, 0.2, 0.1]), 0.5).unwrap().labels(), &[0]);
        assert!(decode(&cum(2, vec![0.2, 0.6]), 0.5).is_err());
        assert!(CumulativeMap::new(ChannelGrid::new(1, 1, 1, vec![1.5]).unwrap()).is_err());
    }

    #[test]
    fn conditional_reconstruction_inverts_correction() {
        let c = cum(3, vec![0.9, 0.72, 0.36]);
        let cond = conditional_from_cumulative(&c).unwrap();
        let back = consistency_correct(&cond);
        for (a, b) in back.grid().as_slice().iter().zip(c.grid().as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
