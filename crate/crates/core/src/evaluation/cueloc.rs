//! Cue localization: counterfactual maps `|s^A - s^B|` scored against masks
//! of the parts whose attributes differ between classes A and B.

use std::collections::BTreeSet;

use super::report::MetricReport;
use super::{pxap, AnnotatedSample, ClassAttributes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parts touched by the symmetric difference of two attribute sets.
pub fn differing_parts(attrs: &ClassAttributes, a: usize, b: usize) -> Result<BTreeSet<usize>> {
    let get = |c: usize| {
        attrs
            .sets
            .get(&c)
            .ok_or_else(|| Error::Argument(format!("class {c} has no attribute set")))
    };
    let (sa, sb) = (get(a)?, get(b)?);
    sa.symmetric_difference(sb).map(|&t| attrs.part_of(t)).collect()
}

/// Marks pixels whose nearest visible keypoint belongs to `parts`. Pixel
/// `(row i, col j)` sits at `(x = j, y = i)`; equidistant keypoints resolve
/// to the lowest part id. `None` when the sample has no visible keypoint.
pub fn build_gt_cue_mask(sample: &AnnotatedSample, parts: &BTreeSet<usize>) -> Option<Tensor> {
    let visible: Vec<_> = sample.keypoints.iter().filter(|k| k.visible).collect();
    if visible.is_empty() {
        return None;
    }
    let (h, w) = sample.size();
    Some(Tensor::from_fn(&[h, w], |idx| {
        let (y, x) = ((idx / w) as f64, (idx % w) as f64);
        let mut best = (f64::INFINITY, usize::MAX);
        for k in &visible {
            let d = (k.x - x).powi(2) + (k.y - y).powi(2);
            if d < best.0 || (d == best.0 && k.part < best.1) {
                best = (d, k.part);
            }
        }
        if parts.contains(&best.1) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Mean PxAP over class pairs with between 1 and `pair_filter` differing
/// parts. `class_maps[i][y]` is the image-resolution map of class `y` for
/// `samples[i]`; images of both classes in a pair are pooled.
pub fn mpxap_cue_localization(
    samples: &[AnnotatedSample],
    attrs: &ClassAttributes,
    class_maps: &[Vec<Tensor>],
    pair_filter: usize,
) -> Result<MetricReport> {
    if class_maps.len() != samples.len() {
        return Err(Error::dim(
            "mpxap_cue_localization",
            format!("{} map sets for {} samples", class_maps.len(), samples.len()),
        ));
    }
    let classes: Vec<usize> = attrs.classes().collect();
    let mut report = MetricReport::new("cueloc");
    report.item_columns = ["class_a", "class_b", "n_parts", "n_images", "pxap"]
        .map(String::from)
        .to_vec();
    report.echo("pair_filter", pair_filter);

    let mut per_count: Vec<Vec<f64>> = vec![Vec::new(); pair_filter + 1];
    let mut considered = 0;
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            let parts = differing_parts(attrs, a, b)?;
            if parts.is_empty() || parts.len() > pair_filter {
                continue;
            }
            considered += 1;
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            let mut n_images = 0;
            for (s, maps) in samples.iter().zip(class_maps) {
                if s.label != a && s.label != b {
                    continue;
                }
                let Some(mask) = build_gt_cue_mask(s, &parts) else { continue };
                if mask.sum() == 0.0 {
                    continue;
                }
                let (ma, mb) = (maps.get(a), maps.get(b));
                let (Some(ma), Some(mb)) = (ma, mb) else {
                    return Err(Error::Argument(format!("missing class map for {} at class {a} or {b}", s.path)));
                };
                ma.expect_same_shape(&mask, "mpxap_cue_localization")?;
                mb.expect_same_shape(&mask, "mpxap_cue_localization")?;
                scores.extend(ma.data().iter().zip(mb.data()).map(|(x, y)| (x - y).abs()));
                labels.extend(mask.data().iter().map(|&m| m > 0.5));
                n_images += 1;
            }
            let value = if n_images == 0 { None } else { Some(pxap(&scores, &labels)?) };
            if let Some(v) = value {
                per_count[parts.len()].push(v);
            }
            report.items.push(vec![
                a.to_string(),
                b.to_string(),
                parts.len().to_string(),
                n_images.to_string(),
                super::report::fmt_value(value),
            ]);
        }
    }
    if considered == 0 {
        return Err(Error::Argument(format!(
            "no class pair has between 1 and {pair_filter} differing parts"
        )));
    }
    let all: Vec<f64> = per_count.iter().flatten().copied().collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    report.set("mpxap", mean(&all));
    report.set("n_pairs", Some(all.len() as f64));
    for (k, vals) in per_count.iter().enumerate().skip(1) {
        report.set(&format!("mpxap_parts_{k}"), mean(vals));
    }
    Ok(report)
}
