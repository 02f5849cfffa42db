use crate::dt::{distance_transform, saturate, ActivationMask, DistanceMetric};
use crate::error::{Error, Result};
use crate::maps::{ChannelGrid, ProbabilityMap, SegmentationMask};
use crate::order::ClassOrder;

use super::{pairwise_sum, LossReport, Term};

/// Lower clamp applied to probabilities inside the logarithm only.
pub const LOG_CLAMP: f64 = 1e-12;

fn check_target(probs: &ProbabilityMap, target: &SegmentationMask) -> Result<()> {
    target.check_shape(probs.height(), probs.width())?;
    if target.max_label() >= probs.num_classes() {
        return Err(Error::invalid(
            "target",
            format!(
                "label {} is not below the {} probability channels",
                target.max_label(),
                probs.num_classes()
            ),
        ));
    }
    Ok(())
}

fn check_order(probs: &ProbabilityMap, order: &ClassOrder) -> Result<()> {
    if probs.num_classes() != order.num_classes() {
        return Err(Error::shape(
            format!("{} classes from the order", order.num_classes()),
            format!("{} probability channels", probs.num_classes()),
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood of the target class over all pixels.
pub fn cross_entropy(probs: &ProbabilityMap, target: &SegmentationMask) -> Result<LossReport> {
    check_target(probs, target)?;
    let grid = probs.grid();
    let n = grid.plane_len();
    let scale = 1.0 / n as f64;
    let mut gradient = ChannelGrid::zeros(grid.channels(), grid.height(), grid.width());
    let logs: Vec<f64> = target
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &y)| {
            let idx = y * n + p;
            let prob = grid.as_slice()[idx];
            if prob > LOG_CLAMP {
                gradient.as_mut_slice()[idx] = -scale / prob;
                prob.ln()
            } else {
                LOG_CLAMP.ln()
            }
        })
        .collect();
    let value = -pairwise_sum(&logs) * scale;
    Ok(LossReport::single(Term::Ce, value, gradient))
}

/// Per-pixel unimodality margin penalty around the ground-truth class:
/// `ReLU(margin + p_k - p_k')` for every pair of the class's ascending and
/// descending pair sets, averaged over pixels.
pub fn o2_term(
    probs: &ProbabilityMap,
    target: &SegmentationMask,
    order: &ClassOrder,
    margin: f64,
) -> Result<LossReport> {
    check_target(probs, target)?;
    check_order(probs, order)?;
    let pair_sets = pair_lists(order)?;
    let grid = probs.grid();
    let n = grid.plane_len();
    let scale = 1.0 / n as f64;
    let data = grid.as_slice();
    let mut gradient = ChannelGrid::zeros(grid.channels(), grid.height(), grid.width());
    let per_pixel: Vec<f64> = target
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &y)| {
            let mut acc = 0.0;
            for &(k, k2) in &pair_sets[y] {
                let arg = margin + data[k * n + p] - data[k2 * n + p];
                if arg > 0.0 {
                    acc += arg;
                    let g = gradient.as_mut_slice();
                    g[k * n + p] += scale;
                    g[k2 * n + p] -= scale;
                }
            }
            acc
        })
        .collect();
    let value = pairwise_sum(&per_pixel) * scale;
    Ok(LossReport::single(Term::O2, value, gradient))
}

/// Ascending pairs followed by descending pairs, per ground-truth class.
fn pair_lists(order: &ClassOrder) -> Result<Vec<Vec<(usize, usize)>>> {
    (0..order.num_classes())
        .map(|y| {
            let sets = order.ordinal_pair_sets(y)?;
            Ok(sets.ascending.into_iter().chain(sets.descending).collect())
        })
        .collect()
}

/// Per-pixel distance from the margin term's ReLU kinks.
pub fn o2_kink_distances(
    probs: &ProbabilityMap,
    target: &SegmentationMask,
    order: &ClassOrder,
    margin: f64,
) -> Result<Vec<f64>> {
    check_target(probs, target)?;
    check_order(probs, order)?;
    let pair_sets = pair_lists(order)?;
    let n = probs.grid().plane_len();
    let data = probs.as_slice();
    Ok(target
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &y)| {
            pair_sets[y]
                .iter()
                .map(|&(k, k2)| (margin + data[k * n + p] - data[k2 * n + p]).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Per-pixel distance from the activation threshold over all channels.
pub fn threshold_distances(probs: &ProbabilityMap, threshold: f64) -> Vec<f64> {
    let grid = probs.grid();
    let n = grid.plane_len();
    (0..n)
        .map(|p| {
            (0..grid.channels())
                .map(|k| (grid.as_slice()[k * n + p] - threshold).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Contact-surface penalty on neighbouring pixels.
///
/// For every ordered class pair with positive cost, the horizontal and
/// vertical neighbour products `p_a(x) · p_b(x + step)` are averaged per
/// direction, the two means are averaged and weighted by the cost, and the
/// result is divided by the number of contributing pairs. A direction with
/// no neighbour pairs contributes a mean of 0.
pub fn csnp_term(probs: &ProbabilityMap, order: &ClassOrder) -> Result<LossReport> {
    check_order(probs, order)?;
    let costs = order.cost_matrix();
    let grid = probs.grid();
    let (k, h, w) = grid.shape();
    let n = h * w;
    let data = grid.as_slice();
    let mut gradient = ChannelGrid::zeros(k, h, w);
    let nx = h * (w - 1);
    let ny = (h - 1) * w;

    let mut total = 0.0;
    let mut count = 0usize;
    let mut products = Vec::with_capacity(nx.max(ny));
    let mut pairs = Vec::new();
    for a in 0..k {
        for b in 0..k {
            let cost = costs.get(a, b);
            if cost > 0.0 {
                pairs.push((a, b, cost));
            }
        }
    }
    let weight = |cost: f64, pairs_in_direction: usize| {
        cost / (2.0 * pairs_in_direction as f64 * pairs.len() as f64)
    };

    for &(a, b, cost) in &pairs {
        let pa = &data[a * n..(a + 1) * n];
        let pb = &data[b * n..(b + 1) * n];

        products.clear();
        for i in 0..h {
            for j in 0..w - 1 {
                products.push(pa[i * w + j] * pb[i * w + j + 1]);
            }
        }
        let mean_x = if nx > 0 { pairwise_sum(&products) / nx as f64 } else { 0.0 };

        products.clear();
        for i in 0..h - 1 {
            for j in 0..w {
                products.push(pa[i * w + j] * pb[(i + 1) * w + j]);
            }
        }
        let mean_y = if ny > 0 { pairwise_sum(&products) / ny as f64 } else { 0.0 };

        total += cost * (mean_x + mean_y) / 2.0;
        count += 1;

        let g = gradient.as_mut_slice();
        if nx > 0 {
            let s = weight(cost, nx);
            for i in 0..h {
                for j in 0..w - 1 {
                    let (left, right) = (i * w + j, i * w + j + 1);
                    g[a * n + left] += s * pb[right];
                    g[b * n + right] += s * pa[left];
                }
            }
        }
        if ny > 0 {
            let s = weight(cost, ny);
            for i in 0..h - 1 {
                for j in 0..w {
                    let (up, down) = (i * w + j, (i + 1) * w + j);
                    g[a * n + up] += s * pb[down];
                    g[b * n + down] += s * pa[up];
                }
            }
        }
    }
    let value = if count > 0 { total / count as f64 } else { 0.0 };
    Ok(LossReport::single(Term::Csnp, value, gradient))
}

/// Distance-transform contact penalty (non-positive).
///
/// Each class is thresholded at `threshold`, its saturated distance
/// transform computed, and for every class pair `a < b` with positive cost
/// the map `p_a · DT_b + p_b · DT_a` is averaged over its nonzero entries.
/// The cost-weighted means are averaged over pairs, divided by `gamma` and
/// negated. Distance transforms are constants of the input: the gradient
/// flows through the probability factors only.
pub fn csdt_term(
    probs: &ProbabilityMap,
    order: &ClassOrder,
    threshold: f64,
    gamma: f64,
    metric: DistanceMetric,
) -> Result<LossReport> {
    check_order(probs, order)?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(
            "gamma",
            format!("saturation distance must satisfy gamma > 0, got {gamma}"),
        ));
    }
    let costs = order.cost_matrix();
    let grid = probs.grid();
    let (k, h, w) = grid.shape();
    let n = h * w;
    let data = grid.as_slice();
    let mut gradient = ChannelGrid::zeros(k, h, w);

    let mut pairs = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let cost = costs.get(a, b);
            if cost > 0.0 {
                pairs.push((a, b, cost));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(LossReport::single(Term::Csdt, 0.0, gradient));
    }

    let mut transforms: Vec<Option<Vec<f64>>> = vec![None; k];
    for &(a, b, _) in &pairs {
        for class in [a, b] {
            if transforms[class].is_none() {
                let active = ActivationMask::threshold_plane(grid.channel(class), h, w, threshold);
                let dist = saturate(&distance_transform(&active, metric), gamma)?;
                transforms[class] = Some(dist.into_values());
            }
        }
    }

    let norm = 1.0 / (pairs.len() as f64 * gamma);
    let mut total = 0.0;
    let mut calc = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n);
    for &(a, b, cost) in &pairs {
        let (da, db) = (
            transforms[a].as_deref().unwrap(),
            transforms[b].as_deref().unwrap(),
        );
        let (pa, pb) = (&data[a * n..(a + 1) * n], &data[b * n..(b + 1) * n]);
        calc.clear();
        support.clear();
        for p in 0..n {
            let v = pa[p] * db[p] + pb[p] * da[p];
            if v != 0.0 {
                calc.push(v);
                support.push(p);
            }
        }
        if support.is_empty() {
            continue;
        }
        let count = support.len() as f64;
        total += cost * pairwise_sum(&calc) / count;
        let s = -cost * norm / count;
        let g = gradient.as_mut_slice();
        for &p in &support {
            g[a * n + p] += s * db[p];
            g[b * n + p] += s * da[p];
        }
    }
    let value = -(total / pairs.len() as f64) / gamma;
    Ok(LossReport::single(Term::Csdt, value, gradient))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(k: usize, h: usize, w: usize, data: Vec<f64>) -> ProbabilityMap {
        ProbabilityMap::from_vec(k, h, w, data).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ce_cases() {
        let target = SegmentationMask::new(1, 2, 2, vec![0, 1]).unwrap();
        let hot = probs(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(cross_entropy(&hot, &target).unwrap().value <= 1e-11);

        let uniform = probs(4, 1, 1, vec![0.25; 4]);
        let t = SegmentationMask::new(1, 1, 4, vec![3]).unwrap();
        assert!(close(cross_entropy(&uniform, &t).unwrap().value, 4f64.ln(), 1e-12));

        let half = probs(2, 1, 1, vec![0.5, 0.5]);
        let t = SegmentationMask::new(1, 1, 2, vec![0]).unwrap();
        let report = cross_entropy(&half, &t).unwrap();
        assert!(close(report.value, 2f64.ln(), 1e-15));
        assert_eq!(report.gradient.as_slice(), &[-2.0, 0.0]);
    }

    #[test]
    fn ce_shape_mismatch() {
        let p = probs(2, 1, 2, vec![0.5; 4]);
        let t = SegmentationMask::new(2, 1, 2, vec![0, 1]).unwrap();
        assert!(matches!(cross_entropy(&p, &t), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn o2_examples() {
        let order = ClassOrder::chain(3).unwrap();
        let t = SegmentationMask::new(1, 1, 3, vec![0]).unwrap();
        let good = probs(3, 1, 1, vec![0.5, 0.3, 0.2]);
        assert_eq!(o2_term(&good, &t, &order, 0.05).unwrap().value, 0.0);

        let bad = probs(3, 1, 1, vec![0.2, 0.3, 0.5]);
        let report = o2_term(&bad, &t, &order, 0.05).unwrap();
        assert!(close(report.value, 0.40, 1e-12), "{}", report.value);
        // pairs (1,0) and (2,1) both active
        assert_eq!(report.gradient.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn o2_zero_on_unimodal_with_margin() {
        let order = ClassOrder::chain(4).unwrap();
        let t = SegmentationMask::new(1, 2, 4, vec![1, 2]).unwrap();
        // pixel 0 peaks at 1, pixel 1 peaks at 2, every step exceeds 0.05
        let p = probs(4, 1, 2, vec![0.2, 0.05, 0.5, 0.2, 0.2, 0.5, 0.1, 0.25]);
        assert_eq!(o2_term(&p, &t, &order, 0.05).unwrap().value, 0.0);
    }

    #[test]
    fn csnp_examples() {
        let order = ClassOrder::chain(3).unwrap();
        let p = probs(3, 1, 2, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(close(csnp_term(&p, &order).unwrap().value, 0.25, 1e-15));

        let consistent = probs(3, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(csnp_term(&consistent, &order).unwrap().value, 0.0);

        let two = ClassOrder::chain(2).unwrap();
        let p = probs(2, 2, 2, vec![0.3, 0.9, 0.5, 0.1, 0.7, 0.1, 0.5, 0.9]);
        let report = csnp_term(&p, &two).unwrap();
        assert_eq!(report.value, 0.0);
        assert!(report.gradient.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn csdt_examples() {
        let order = ClassOrder::chain(3).unwrap();
        let p = probs(
            3,
            1,
            4,
            vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        );
        let report = csdt_term(&p, &order, 0.5, 10.0, DistanceMetric::Euclidean).unwrap();
        assert!(close(report.value, -0.15, 1e-15), "{}", report.value);

        let two = ClassOrder::chain(2).unwrap();
        let p2 = probs(2, 1, 2, vec![0.7, 0.2, 0.3, 0.8]);
        assert_eq!(csdt_term(&p2, &two, 0.5, 10.0, DistanceMetric::Euclidean).unwrap().value, 0.0);
    }

    #[test]
    fn csdt_fully_active_classes_give_zero() {
        // classes 0 and 2 both at exactly the threshold everywhere
        let order = ClassOrder::chain(3).unwrap();
        let p = probs(3, 2, 2, vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5]);
        let report = csdt_term(&p, &order, 0.5, 10.0, DistanceMetric::Euclidean).unwrap();
        assert_eq!(report.value, 0.0);
    }

    #[test]
    fn order_size_must_match() {
        let p = probs(2, 1, 1, vec![0.5, 0.5]);
        assert!(csnp_term(&p, &ClassOrder::chain(3).unwrap()).is_err());
    }
}
