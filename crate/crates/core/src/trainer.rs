//! Toy optimisation on per-pixel logits.
//!
//! Synthetic scenes nest class regions so that the clean mask only has
//! ordinally valid contacts; label noise then introduces invalid ones.
//! Training runs plain gradient descent directly on the logits, which keeps
//! the loss terms as the only moving part.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{csv_string, format_sig6};
use crate::losses::{combined_loss, LossConfig, Term};
use crate::maps::{argmax_mask, softmax, ChannelGrid, LogitMap, SegmentationMask};
use crate::metrics::{contact_surface, dice_macro, structural_consistency_check, unimodal_pixels_ordered};
use crate::order::ClassOrder;

/// Logit assigned to the noisy label of each pixel.
pub const SCENE_CONFIDENCE: f64 = 3.0;
/// Standard deviation of the Gaussian jitter added to every logit.
pub const SCENE_JITTER: f64 = 0.5;
/// The λ grid used by [`grid_search`] when none is given.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0];

const LAYOUT_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub clean: SegmentationMask,
    pub noisy: SegmentationMask,
    /// Scaled one-hot logits of `noisy` plus jitter.
    pub logits: LogitMap,
    pub noise_rate: f64,
    pub seed: u64,
}

/// Nested ellipses over a chain of `num_classes` classes.
pub fn generate_scene(
    num_classes: usize,
    height: usize,
    width: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<SyntheticScene> {
    if num_classes < 2 {
        return Err(Error::invalid("scene", "at least 2 classes are required"));
    }
    generate_scene_for_order(&ClassOrder::chain(num_classes)?, height, width, noise_rate, seed)
}

/// Scene whose regions follow the Hasse diagram of `order`: every class is
/// drawn inside the region of its lowest-indexed parent, siblings side by
/// side. The order must have a single minimal class, which fills the
/// background.
pub fn generate_scene_for_order(
    order: &ClassOrder,
    height: usize,
    width: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<SyntheticScene> {
    let k = order.num_classes();
    if k < 2 {
        return Err(Error::invalid("scene", "at least 2 classes are required"));
    }
    if height < 8 || width < 8 {
        return Err(Error::invalid(
            "scene",
            format!("{height}x{width} is smaller than the 8x8 minimum"),
        ));
    }
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::invalid(
            "noise rate",
            format!("{noise_rate} is outside [0, 1)"),
        ));
    }
    let tree = ContainmentTree::new(order)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centre = (
        height as f64 / 2.0 - 0.5 + rng.random_range(-0.05..0.05) * height as f64,
        width as f64 / 2.0 - 0.5 + rng.random_range(-0.05..0.05) * width as f64,
    );
    let mut stretch: f64 = rng.random_range(0.75..1.33);
    let mut clean = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        let ellipse = Ellipse {
            cy: centre.0,
            cx: centre.1,
            ry: (height as f64 / 2.0 - 1.0) * stretch.min(1.0),
            rx: (width as f64 / 2.0 - 1.0) / stretch.max(1.0),
        };
        let mask = tree.paint(height, width, ellipse)?;
        let all_present = {
            let mut seen = vec![false; k];
            mask.labels().iter().for_each(|&l| seen[l] = true);
            seen.into_iter().all(|s| s)
        };
        if all_present && structural_consistency_check(&mask, order)?.consistent {
            clean = Some(mask);
            break;
        }
        // round towards circles before giving up
        stretch = 1.0 + (stretch - 1.0) / 2.0;
    }
    let clean = clean.ok_or_else(|| {
        Error::invalid(
            "scene",
            format!("cannot fit {k} nested regions into {height}x{width}"),
        )
    })?;

    let noisy_labels: Vec<usize> = clean
        .labels()
        .iter()
        .map(|&label| {
            if rng.random::<f64>() < noise_rate {
                rng.random_range(0..k)
            } else {
                label
            }
        })
        .collect();
    let noisy = SegmentationMask::new(height, width, k, noisy_labels)?;

    let n = height * width;
    let mut data = vec![0.0; k * n];
    for c in 0..k {
        for p in 0..n {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let hot = if noisy.labels()[p] == c { SCENE_CONFIDENCE } else { 0.0 };
            data[c * n + p] = hot + SCENE_JITTER * jitter;
        }
    }
    Ok(SyntheticScene {
        clean,
        noisy,
        logits: LogitMap::from_vec(k, height, width, data)?,
        noise_rate,
        seed,
    })
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, i: usize, j: usize) -> bool {
        let dy = (i as f64 - self.cy) / self.ry;
        let dx = (j as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// Each class hangs under its lowest-indexed parent.
struct ContainmentTree {
    root: usize,
    children: Vec<Vec<usize>>,
    /// Nodes on the longest downward path, counting the node itself.
    depth_below: Vec<usize>,
}

impl ContainmentTree {
    fn new(order: &ClassOrder) -> Result<Self> {
        let k = order.num_classes();
        let mut parent = vec![None; k];
        for &(m, n) in order.edges() {
            if parent[n].is_none_or(|p| m < p) {
                parent[n] = Some(m);
            }
        }
        let roots: Vec<usize> = (0..k).filter(|&c| parent[c].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::invalid(
                "scene",
                format!("the order needs exactly one minimal class, found {roots:?}"),
            ));
        }
        let mut children = vec![Vec::new(); k];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(c);
            }
        }
        let mut depth_below = vec![0; k];
        fn depth(node: usize, children: &[Vec<usize>], memo: &mut [usize]) -> usize {
            if memo[node] == 0 {
                memo[node] = 1 + children[node]
                    .iter()
                    .map(|&c| depth(c, children, memo))
                    .max()
                    .unwrap_or(0);
            }
            memo[node]
        }
        depth(roots[0], &children, &mut depth_below);
        Ok(ContainmentTree {
            root: roots[0],
            children,
            depth_below,
        })
    }

    fn paint(&self, height: usize, width: usize, frame: Ellipse) -> Result<SegmentationMask> {
        let mut labels = vec![self.root; height * width];
        let mut regions = Vec::new();
        self.place(self.root, frame, &mut regions);
        for (class, ellipse) in regions {
            for i in 0..height {
                for j in 0..width {
                    if ellipse.contains(i, j) {
                        labels[i * width + j] = class;
                    }
                }
            }
        }
        SegmentationMask::new(height, width, self.children.len(), labels)
    }

    /// Regions of the descendants of `node`, parents before children.
    fn place(&self, node: usize, region: Ellipse, out: &mut Vec<(usize, Ellipse)>) {
        let kids = &self.children[node];
        let slots = kids.len() as f64;
        for (slot, &child) in kids.iter().enumerate() {
            let d = self.depth_below[child] as f64;
            let shrink = d / (d + 1.0);
            let slot_rx = region.rx / slots;
            let inner = Ellipse {
                cy: region.cy,
                cx: region.cx - region.rx + (2.0 * slot as f64 + 1.0) * slot_rx,
                ry: region.ry * shrink,
                rx: slot_rx * shrink,
            };
            out.push((child, inner));
            self.place(child, inner, out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainTarget {
    /// Fit the noise-free mask.
    #[default]
    Clean,
    /// Fit the corrupted mask the logits were generated from.
    Noisy,
}

impl std::fmt::Display for TrainTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainTarget::Clean => "clean",
            TrainTarget::Noisy => "noisy",
        })
    }
}

impl std::str::FromStr for TrainTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(TrainTarget::Clean),
            "noisy" => Ok(TrainTarget::Noisy),
            other => Err(Error::invalid("train target", format!("`{other}` is not clean or noisy"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    /// Per-pixel step size. Every loss term is a mean over pixels, so the
    /// update scales the gradient by the pixel count.
    pub learning_rate: f64,
    pub target: TrainTarget,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            learning_rate: 1.0,
            target: TrainTarget::Clean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// Macro Dice against the training target.
    pub dice: f64,
    /// Macro Dice against the clean mask.
    pub dice_clean: f64,
    pub cs: f64,
    pub up: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub config: LossConfig,
    pub options: TrainOptions,
    pub seed: u64,
    /// One row per step, starting with the untrained logits.
    pub trace: Vec<TraceRow>,
    pub final_logits: LogitMap,
    pub final_mask: SegmentationMask,
}

impl TrainRun {
    pub fn last(&self) -> &TraceRow {
        self.trace.last().expect("trace always holds step 0")
    }
}

pub fn train_logits(
    scene: &SyntheticScene,
    order: &ClassOrder,
    config: &LossConfig,
    options: &TrainOptions,
) -> Result<TrainRun> {
    config.validate()?;
    if options.steps == 0 {
        return Err(Error::invalid("steps", "at least one step is required"));
    }
    if !(options.learning_rate > 0.0) || !options.learning_rate.is_finite() {
        return Err(Error::invalid(
            "learning rate",
            format!("must be > 0, got {}", options.learning_rate),
        ));
    }
    let target = match options.target {
        TrainTarget::Clean => &scene.clean,
        TrainTarget::Noisy => &scene.noisy,
    };
    let k = order.num_classes();
    let mut logits = scene.logits.clone();
    let step_scale = options.learning_rate * (logits.height() * logits.width()) as f64;
    let mut trace = Vec::with_capacity(options.steps + 1);

    for step in 0..=options.steps {
        let report = combined_loss(&logits, target, order, config)?;
        let probs = softmax(&logits)?;
        let pred = argmax_mask(&probs);
        trace.push(TraceRow {
            step,
            loss: report.value,
            dice: dice_macro(&pred, target, k)?.get("dice_macro").unwrap_or(0.0),
            dice_clean: dice_macro(&pred, &scene.clean, k)?.get("dice_macro").unwrap_or(0.0),
            cs: contact_surface(&pred, order)?,
            up: unimodal_pixels_ordered(&probs, order)?,
        });
        if !report.value.is_finite() || report.gradient.as_slice().iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                value: report.value,
                trace: trace_csv(&trace),
            });
        }
        if step == options.steps {
            break;
        }
        for (z, g) in logits.as_mut_slice().iter_mut().zip(report.gradient.as_slice()) {
            *z -= step_scale * g;
        }
    }
    let final_mask = argmax_mask(&softmax(&logits)?);
    Ok(TrainRun {
        config: *config,
        options: *options,
        seed: scene.seed,
        trace,
        final_logits: logits,
        final_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: f64,
    pub loss: f64,
    pub dice: f64,
    pub dice_clean: f64,
    pub cs: f64,
    pub up: f64,
}

/// One run per λ plus the λ = 0 baseline (first row). Runs execute in
/// parallel; rows keep the input order.
pub fn grid_search(
    scene: &SyntheticScene,
    order: &ClassOrder,
    term: Term,
    base: &LossConfig,
    lambdas: &[f64],
    options: &TrainOptions,
) -> Result<Vec<GridRow>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda set", "at least one λ is required"));
    }
    if term == Term::Ce {
        return Err(Error::invalid("loss term", "ce is not a regulariser"));
    }
    let all: Vec<f64> = std::iter::once(0.0).chain(lambdas.iter().copied()).collect();
    all.par_iter()
        .map(|&lambda| {
            let mut config = *base;
            config.set_weight(term, lambda);
            let run = train_logits(scene, order, &config, options)?;
            let last = run.last();
            Ok(GridRow {
                lambda,
                loss: last.loss,
                dice: last.dice,
                dice_clean: last.dice_clean,
                cs: last.cs,
                up: last.up,
            })
        })
        .collect()
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let header = ["step", "loss", "dice", "dice_clean", "cs", "up"].map(String::from);
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                format_sig6(r.loss),
                format_sig6(r.dice),
                format_sig6(r.dice_clean),
                format_sig6(r.cs),
                format_sig6(r.up),
            ]
        })
        .collect();
    csv_string(&header, &rows)
}

pub fn sweep_csv(term: Term, rows: &[GridRow]) -> String {
    let header = ["term", "lambda", "loss", "dice", "dice_clean", "cs", "up"].map(String::from);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                term.name().to_string(),
                format_sig6(r.lambda),
                format_sig6(r.loss),
                format_sig6(r.dice),
                format_sig6(r.dice_clean),
                format_sig6(r.cs),
                format_sig6(r.up),
            ]
        })
        .collect();
    csv_string(&header, &rows)
}

/// Logits scaled one-hot around `mask`, without jitter.
pub fn confident_logits(mask: &SegmentationMask, confidence: f64) -> Result<LogitMap> {
    let (k, h, w) = (mask.num_classes(), mask.height(), mask.width());
    let mut grid = ChannelGrid::zeros(k, h, w);
    let n = h * w;
    for (p, &label) in mask.labels().iter().enumerate() {
        grid.as_mut_slice()[label * n + p] = confidence;
    }
    LogitMap::new(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_scene_is_consistent() {
        let order = ClassOrder::chain(4).unwrap();
        for seed in 0..5 {
            let scene = generate_scene(4, 32, 40, 0.0, seed).unwrap();
            assert!(structural_consistency_check(&scene.clean, &order).unwrap().consistent);
            assert_eq!(scene.clean, scene.noisy);
        }
    }

    #[test]
    fn noise_creates_invalid_contacts() {
        let order = ClassOrder::chain(3).unwrap();
        let scene = generate_scene(3, 64, 64, 0.3, 7).unwrap();
        let noisy_pred = argmax_mask(&softmax(&scene.logits).unwrap());
        assert!(contact_surface(&noisy_pred, &order).unwrap() > 0.0);
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(4, 16, 16, 0.2, 42).unwrap();
        let b = generate_scene(4, 16, 16, 0.2, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(4, 16, 16, 0.2, 43).unwrap());
    }

    #[test]
    fn hasse_layout() {
        let diamond = ClassOrder::from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let scene = generate_scene_for_order(&diamond, 32, 48, 0.0, 1).unwrap();
        assert!(structural_consistency_check(&scene.clean, &diamond).unwrap().consistent);
        let mut seen = [false; 4];
        scene.clean.labels().iter().for_each(|&l| seen[l] = true);
        assert_eq!(seen, [true; 4]);

        let two_roots = ClassOrder::from_edges(3, [(0, 2), (1, 2)]).unwrap();
        assert!(generate_scene_for_order(&two_roots, 16, 16, 0.0, 1).is_err());
    }

    #[test]
    fn scene_preconditions() {
        assert!(generate_scene(1, 16, 16, 0.0, 0).is_err());
        assert!(generate_scene(3, 4, 16, 0.0, 0).is_err());
        assert!(generate_scene(3, 16, 16, 1.0, 0).is_err());
        assert!(generate_scene(40, 8, 8, 0.0, 0).is_err());
    }

    #[test]
    fn cross_entropy_alone_recovers_the_clean_mask() {
        let order = ClassOrder::chain(3).unwrap();
        let scene = generate_scene(3, 16, 16, 0.3, 3).unwrap();
        let options = TrainOptions {
            steps: 60,
            ..Default::default()
        };
        let run = train_logits(&scene, &order, &LossConfig::default(), &options).unwrap();
        assert_eq!(run.trace.len(), 61);
        assert_eq!(run.last().dice, 1.0);
        for pair in run.trace.windows(2) {
            if pair[0].loss < 1e-3 {
                break;
            }
            assert!(pair[1].loss < pair[0].loss, "{pair:?}");
        }
    }

    #[test]
    fn training_rejects_bad_options() {
        let order = ClassOrder::chain(3).unwrap();
        let scene = generate_scene(3, 8, 8, 0.0, 0).unwrap();
        let config = LossConfig::default();
        let zero_steps = TrainOptions { steps: 0, ..Default::default() };
        assert!(train_logits(&scene, &order, &config, &zero_steps).is_err());
        let bad_lr = TrainOptions { learning_rate: 0.0, ..Default::default() };
        assert!(train_logits(&scene, &order, &config, &bad_lr).is_err());
    }
}
