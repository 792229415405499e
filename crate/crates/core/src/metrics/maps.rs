//! Agreement measures between spatial attention maps.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::attention_map::AttentionMap;
use crate::error::{contract_err, dim_err, Result};

fn same_grid(a: &AttentionMap, b: &AttentionMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return dim_err(format!(
            "maps {}×{} and {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if x.is_empty() || constant(x) || constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Fractional ranks starting at 1; tied values share their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Linear correlation coefficient over flattened map values.
pub fn cc(a: &AttentionMap, b: &AttentionMap) -> Result<Option<f64>> {
    same_grid(a, b)?;
    Ok(pearson(a.values(), b.values()))
}

/// Rank correlation over flattened map values.
pub fn spearman(a: &AttentionMap, b: &AttentionMap) -> Result<Option<f64>> {
    same_grid(a, b)?;
    Ok(pearson(&fractional_ranks(a.values()), &fractional_ranks(b.values())))
}

/// Histogram intersection of the two maps after normalizing each to a distribution.
pub fn sim(a: &AttentionMap, b: &AttentionMap) -> Result<f64> {
    same_grid(a, b)?;
    let (a, b) = (a.as_distribution()?, b.as_distribution()?);
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x.min(*y))
        .sum())
}

/// Grid coordinates marked as fixated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixationSet {
    height: usize,
    width: usize,
    points: Vec<(usize, usize)>,
}

impl FixationSet {
    pub fn new(height: usize, width: usize, points: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(p) = points.iter().find(|(r, c)| *r >= height || *c >= width) {
            return dim_err(format!("fixation {p:?} outside {height}×{width}"));
        }
        Ok(FixationSet {
            height,
            width,
            points,
        })
    }

    /// Every location whose unit-max value exceeds `threshold`.
    pub fn from_map(map: &AttentionMap, threshold: f64) -> Self {
        let m = map.as_unit_max();
        let points = (0..m.height())
            .flat_map(|r| (0..m.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c) > threshold)
            .collect();
        FixationSet {
            height: m.height(),
            width: m.width(),
            points,
        }
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub const DESCRIBED_THRESHOLD: f64 = 0.1;

/// Fraction of fixations at which the unit-max captioning map exceeds `threshold`.
/// A map on a different grid is bilinearly resized to the fixation grid first.
pub fn p_described_given_fixated(
    cap_map: &AttentionMap,
    fixations: &FixationSet,
    threshold: f64,
) -> Result<f64> {
    if fixations.is_empty() {
        return contract_err("P(d|f) needs at least one fixation");
    }
    let m = if (cap_map.height(), cap_map.width()) == (fixations.height, fixations.width) {
        cap_map.as_unit_max()
    } else {
        cap_map.resize(fixations.height, fixations.width)?.as_unit_max()
    };
    let hits = fixations
        .points
        .iter()
        .filter(|&&(r, c)| m.get(r, c) > threshold)
        .count();
    Ok(hits as f64 / fixations.len() as f64)
}

/// Binary footprint of one object instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMask {
    pub category: String,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

/// Captioning attention from the noun mapping: the union of the masks of every
/// object whose category is named by a caption token, as a unit-max map.
pub fn vos_captioning_attention<S: AsRef<str>>(
    objects: &[ObjectMask],
    caption: &[S],
    noun_map: &HashMap<String, String>,
    height: usize,
    width: usize,
) -> Result<AttentionMap> {
    let named: BTreeSet<&str> = caption
        .iter()
        .filter_map(|t| noun_map.get(t.as_ref()).map(String::as_str))
        .collect();
    let mut values = vec![0.0; height * width];
    for o in objects {
        if (o.height, o.width) != (height, width) || o.mask.len() != height * width {
            return dim_err(format!("mask for {} is not {height}×{width}", o.category));
        }
        if named.contains(o.category.as_str()) {
            for (v, &m) in values.iter_mut().zip(&o.mask) {
                if m {
                    *v = 1.0;
                }
            }
        }
    }
    AttentionMap::to_unit_max(height, width, &values)
}
