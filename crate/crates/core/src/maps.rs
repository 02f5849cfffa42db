//! Dense per-pixel containers and the softmax bridge between them.

use crate::error::{Error, Result};

/// Tolerance on the per-pixel probability sum.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// A K×H×W grid of reals, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ChannelGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(
                "grid shape",
                format!("{channels}x{height}x{width} has an empty dimension"),
            ));
        }
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::invalid("grid shape", "dimension product overflows"))?;
        if data.len() != expected {
            return Err(Error::shape(
                format!("{expected} values for {channels}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(ChannelGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ChannelGrid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(k, i, j)]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Values of every channel at one pixel.
    pub fn pixel(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.channels).map(|k| self.get(k, i, j)).collect()
    }

    fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// H×W grid of hard class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<usize>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask", format!("{height}x{width} is empty")));
        }
        if num_classes == 0 {
            return Err(Error::invalid("mask", "at least one class is required"));
        }
        if labels.len() != height * width {
            return Err(Error::shape(
                format!("{} labels for {height}x{width}", height * width),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(pos) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::invalid(
                "mask",
                format!(
                    "label {} at ({}, {}) is not below {num_classes}",
                    labels[pos],
                    pos / width,
                    pos % width
                ),
            ));
        }
        Ok(SegmentationMask {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: usize) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.width + j]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Same labels interpreted over a different class count.
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self> {
        Self::new(self.height, self.width, num_classes, self.labels.clone())
    }

    pub(crate) fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::shape(
                format!("{height}x{width} mask"),
                format!("{}x{} mask", self.height, self.width),
            ));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities; every pixel lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(ChannelGrid);

impl ProbabilityMap {
    pub fn new(grid: ChannelGrid) -> Result<Self> {
        let n = grid.plane_len();
        for p in 0..n {
            let mut sum = 0.0;
            for k in 0..grid.channels {
                let v = grid.data[k * n + p];
                if !(-SIMPLEX_TOLERANCE..=1.0 + SIMPLEX_TOLERANCE).contains(&v) {
                    return Err(Error::invalid(
                        "probability map",
                        format!("value {v} at channel {k}, pixel {p} is outside [0, 1]"),
                    ));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::invalid(
                    "probability map",
                    format!("pixel {p} sums to {sum}"),
                ));
            }
        }
        Ok(ProbabilityMap(grid))
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(ChannelGrid::new(channels, height, width, data)?)
    }

    /// Copy with one coordinate shifted by `delta`; the result may leave
    /// the simplex. Used to probe derivatives by finite differences.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut grid = self.0.clone();
        grid.data[index] += delta;
        ProbabilityMap(grid)
    }

    pub fn grid(&self) -> &ChannelGrid {
        &self.0
    }

    pub fn into_grid(self) -> ChannelGrid {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.channels
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.0.get(k, i, j)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Unconstrained per-pixel class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap(ChannelGrid);

impl LogitMap {
    pub fn new(grid: ChannelGrid) -> Result<Self> {
        if let Some(pos) = grid.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "logit map",
                format!("non-finite value at flat index {pos}"),
            ));
        }
        Ok(LogitMap(grid))
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(ChannelGrid::new(channels, height, width, data)?)
    }

    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut grid = self.0.clone();
        grid.data[index] += delta;
        LogitMap(grid)
    }

    pub fn grid(&self) -> &ChannelGrid {
        &self.0
    }

    pub fn into_grid(self) -> ChannelGrid {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.channels
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        self.0.as_mut_slice()
    }
}

pub fn softmax(logits: &LogitMap) -> Result<ProbabilityMap> {
    let grid = logits.grid();
    if let Some(pos) = grid.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "logit map",
            format!("non-finite value at flat index {pos}"),
        ));
    }
    let (k, h, w) = grid.shape();
    let n = h * w;
    let mut out = vec![0.0; k * n];
    let mut scratch = vec![0.0; k];
    for p in 0..n {
        let max = (0..k).map(|c| grid.data[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (grid.data[c * n + p] - max).exp();
            scratch[c] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * n + p] = scratch[c] / sum;
        }
    }
    Ok(ProbabilityMap(ChannelGrid {
        channels: k,
        height: h,
        width: w,
        data: out,
    }))
}

/// Backpropagates a gradient with respect to softmax outputs onto the
/// logits: `dz_k = p_k (g_k - Σ_j p_j g_j)`.
pub fn softmax_backward(probs: &ProbabilityMap, grad_probs: &ChannelGrid) -> Result<ChannelGrid> {
    let grid = probs.grid();
    if grid.shape() != grad_probs.shape() {
        return Err(Error::shape(grid.shape_string(), grad_probs.shape_string()));
    }
    let (k, h, w) = grid.shape();
    let n = h * w;
    let mut out = ChannelGrid::zeros(k, h, w);
    for p in 0..n {
        let dot: f64 = (0..k).map(|c| grid.data[c * n + p] * grad_probs.data[c * n + p]).sum();
        for c in 0..k {
            let idx = c * n + p;
            out.data[idx] = grid.data[idx] * (grad_probs.data[idx] - dot);
        }
    }
    Ok(out)
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_mask(probs: &ProbabilityMap) -> SegmentationMask {
    let grid = probs.grid();
    let (k, h, w) = grid.shape();
    let n = h * w;
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if grid.data[c * n + p] > grid.data[best * n + p] {
                    best = c;
                }
            }
            best
        })
        .collect();
    SegmentationMask {
        height: h,
        width: w,
        num_classes: k,
        labels,
    }
}

pub fn one_hot(mask: &SegmentationMask, num_classes: usize) -> Result<ProbabilityMap> {
    if num_classes == 0 || mask.max_label() >= num_classes {
        return Err(Error::invalid(
            "class count",
            format!(
                "{num_classes} classes cannot encode label {}",
                mask.max_label()
            ),
        ));
    }
    let n = mask.height * mask.width;
    let mut data = vec![0.0; num_classes * n];
    for (p, &label) in mask.labels.iter().enumerate() {
        data[label * n + p] = 1.0;
    }
    Ok(ProbabilityMap(ChannelGrid {
        channels: num_classes,
        height: mask.height,
        width: mask.width,
        data,
    }))
}
