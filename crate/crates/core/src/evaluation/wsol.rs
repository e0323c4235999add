//! Weakly-supervised localization metrics: MaxBoxAcc over thresholded maps
//! and foreground PxAP.

use std::collections::VecDeque;

use rayon::prelude::*;

use super::report::{fmt_value, MetricReport};
use super::{pxap, AnnotatedSample, BBox};
use crate::attribution::min_max_normalize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tight boxes around the 4-connected components of a binary `[H,W]` mask,
/// in order of discovery by a row-major scan.
pub fn boxes_from_mask(mask: &Tensor) -> Vec<BBox> {
    let s = mask.shape();
    assert_eq!(s.len(), 2, "boxes_from_mask expects a 2-D mask");
    let (h, w) = (s[0], s[1]);
    let on: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        boxes.push(BBox { x0, y0, x1, y1 });
    }
    boxes
}

/// `n` evenly spaced thresholds covering `[0, 1]`.
pub fn tau_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Highest IoU between any ground-truth box and any box of the map
/// thresholded at any `tau`.
pub fn best_box_iou(map: &Tensor, gt: &[BBox], taus: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &t in taus {
        let mask = map.map(|v| if v >= t { 1.0 } else { 0.0 });
        for b in boxes_from_mask(&mask) {
            for g in gt {
                best = best.max(g.iou(&b));
            }
        }
    }
    best
}

/// Mean over `deltas` of the fraction of images localized at IoU `>= delta`.
/// Each map is min-max normalized before thresholding.
pub fn max_box_acc(
    score_maps: &[Tensor],
    samples: &[AnnotatedSample],
    deltas: &[f64],
    tau_count: usize,
) -> Result<MetricReport> {
    if score_maps.len() != samples.len() || samples.is_empty() {
        return Err(Error::Argument(format!(
            "{} maps for {} samples",
            score_maps.len(),
            samples.len()
        )));
    }
    if deltas.is_empty() || tau_count == 0 {
        return Err(Error::Argument("need at least one delta and one threshold".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.gt_boxes.is_empty()) {
        return Err(Error::Argument(format!("sample {} has no boxes", s.path)));
    }
    let taus = tau_grid(tau_count);
    let best: Vec<f64> = score_maps
        .par_iter()
        .zip(samples)
        .map(|(m, s)| {
            let (h, w) = s.size();
            if m.shape() != [h, w] {
                return Err(Error::dim("max_box_acc", format!("map {:?} for image {h}x{w}", m.shape())));
            }
            Ok(best_box_iou(&min_max_normalize(m), &s.gt_boxes, &taus))
        })
        .collect::<Result<_>>()?;

    let mut report = MetricReport::new("wsol");
    report.item_columns = vec!["path".into(), "label".into(), "best_iou".into()];
    report.item_columns.extend(deltas.iter().map(|d| format!("correct_{d}")));
    report.echo("deltas", deltas.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "));
    report.echo("tau_grid", tau_count);

    let n = samples.len() as f64;
    let mut accs = Vec::new();
    for &d in deltas {
        let acc = best.iter().filter(|&&b| b >= d).count() as f64 / n;
        report.set(&format!("maxboxacc_{d}"), Some(acc));
        accs.push(acc);
    }
    report.set("maxboxacc", Some(accs.iter().sum::<f64>() / accs.len() as f64));
    for (s, b) in samples.iter().zip(&best) {
        let mut row = vec![s.path.clone(), s.label.to_string(), fmt_value(Some(*b))];
        row.extend(deltas.iter().map(|&d| u8::from(*b >= d).to_string()));
        report.items.push(row);
    }
    Ok(report)
}

/// Foreground PxAP with pixels pooled over all samples.
pub fn pxap_wsol(score_maps: &[Tensor], samples: &[AnnotatedSample]) -> Result<f64> {
    if score_maps.len() != samples.len() {
        return Err(Error::Argument(format!(
            "{} maps for {} samples",
            score_maps.len(),
            samples.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, s) in score_maps.iter().zip(samples) {
        let mask = s
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::Argument(format!("sample {} has no mask", s.path)))?;
        m.expect_same_shape(mask, "pxap_wsol")?;
        scores.extend_from_slice(m.data());
        labels.extend(mask.data().iter().map(|&v| v > 0.5));
    }
    pxap(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::pxap::tests::brute_force_ap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fill(h: usize, w: usize, boxes: &[BBox]) -> Tensor {
        Tensor::from_fn(&[h, w], |i| {
            let (y, x) = (i / w, i % w);
            if boxes.iter().any(|b| b.contains(x, y)) {
                1.0
            } else {
                0.0
            }
        })
    }

    fn sample(h: usize, w: usize, gt: Vec<BBox>, mask: Option<Tensor>) -> AnnotatedSample {
        AnnotatedSample {
            path: "x".into(),
            image: Tensor::zeros(&[1, 1, h, w]),
            label: 0,
            keypoints: Vec::new(),
            gt_boxes: gt,
            gt_mask: mask,
        }
    }

    /// Recursive flood fill labelling, then one box per label.
    fn flood_oracle(mask: &Tensor) -> Vec<BBox> {
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let mut label = vec![0usize; h * w];
        let mut next = 0;
        fn flood(m: &Tensor, lab: &mut [usize], y: isize, x: isize, h: usize, w: usize, id: usize) {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                return;
            }
            let p = y as usize * w + x as usize;
            if m.data()[p] < 0.5 || lab[p] != 0 {
                return;
            }
            lab[p] = id;
            flood(m, lab, y + 1, x, h, w, id);
            flood(m, lab, y - 1, x, h, w, id);
            flood(m, lab, y, x + 1, h, w, id);
            flood(m, lab, y, x - 1, h, w, id);
        }
        for p in 0..h * w {
            if mask.data()[p] > 0.5 && label[p] == 0 {
                next += 1;
                flood(mask, &mut label, (p / w) as isize, (p % w) as isize, h, w, next);
            }
        }
        (1..=next)
            .map(|id| {
                let pts: Vec<usize> = (0..h * w).filter(|&p| label[p] == id).collect();
                BBox {
                    x0: pts.iter().map(|p| p % w).min().unwrap(),
                    y0: pts.iter().map(|p| p / w).min().unwrap(),
                    x1: pts.iter().map(|p| p % w).max().unwrap() + 1,
                    y1: pts.iter().map(|p| p / w).max().unwrap() + 1,
                }
            })
            .collect()
    }

    #[test]
    fn square_and_pairs() {
        let sq = BBox::new(5, 5, 15, 15).unwrap();
        assert_eq!(boxes_from_mask(&fill(20, 20, &[sq])), vec![sq]);
        let a = BBox::new(12, 1, 15, 3).unwrap();
        let b = BBox::new(0, 6, 4, 9).unwrap();
        assert_eq!(boxes_from_mask(&fill(12, 16, &[b, a])), vec![a, b]);
        assert!(boxes_from_mask(&Tensor::zeros(&[4, 4])).is_empty());
        // Diagonal neighbours are separate components.
        let diag = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(boxes_from_mask(&diag).len(), 2);
    }

    #[test]
    fn boxes_match_flood_fill_on_random_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = Tensor::from_fn(&[12, 15], |_| if rng.gen_bool(0.45) { 1.0 } else { 0.0 });
            assert_eq!(boxes_from_mask(&m), flood_oracle(&m));
        }
    }

    #[test]
    fn max_box_acc_hand_cases() {
        let gt = BBox::new(0, 0, 10, 10).unwrap();
        let deltas = [0.3, 0.5, 0.7];
        let perfect = max_box_acc(&[fill(20, 20, &[gt])], &[sample(20, 20, vec![gt], None)], &deltas, 128).unwrap();
        assert_eq!(perfect.aggregate("maxboxacc"), Some(1.0));

        let far = BBox::new(14, 14, 20, 20).unwrap();
        let tiny = BBox::new(0, 0, 1, 1).unwrap();
        let missed = max_box_acc(&[fill(20, 20, &[far])], &[sample(20, 20, vec![tiny], None)], &deltas, 128).unwrap();
        assert_eq!(missed.aggregate("maxboxacc"), Some(0.0));

        let shifted = BBox::new(5, 0, 15, 10).unwrap();
        let third = max_box_acc(&[fill(20, 20, &[shifted])], &[sample(20, 20, vec![gt], None)], &deltas, 128).unwrap();
        assert!((third.aggregate("maxboxacc").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(third.aggregate("maxboxacc_0.3"), Some(1.0));
        assert_eq!(third.aggregate("maxboxacc_0.5"), Some(0.0));
    }

    #[test]
    fn correctness_is_monotone_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps: Vec<Tensor> = (0..10).map(|_| Tensor::from_fn(&[10, 10], |_| rng.gen_range(0.0..1.0))).collect();
        let samples: Vec<AnnotatedSample> = (0..10)
            .map(|i| sample(10, 10, vec![BBox::new(i % 5, 1, 6 + i % 4, 9).unwrap()], None))
            .collect();
        let r = max_box_acc(&maps, &samples, &[0.1, 0.3, 0.5, 0.7, 0.9], 32).unwrap();
        for row in &r.items {
            let flags: Vec<u8> = row[3..].iter().map(|v| v.parse().unwrap()).collect();
            assert!(flags.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn pxap_wsol_cases() {
        let m = fill(6, 6, &[BBox::new(1, 1, 3, 4).unwrap()]);
        let s = sample(6, 6, vec![], Some(m.clone()));
        assert_eq!(pxap_wsol(&[m.clone()], &[s.clone()]).unwrap(), 1.0);
        assert!((pxap_wsol(&[Tensor::full(&[6, 6], 0.2)], &[s]).unwrap() - 6.0 / 36.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let masks: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[4, 5], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })).collect();
        let maps: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[4, 5], |_| (rng.gen_range(0..6) as f64) / 5.0)).collect();
        let samples: Vec<AnnotatedSample> = masks.iter().map(|m| sample(4, 5, vec![], Some(m.clone()))).collect();
        let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().to_vec()).collect();
        let labels: Vec<bool> = masks.iter().flat_map(|m| m.data().iter().map(|&v| v > 0.5).collect::<Vec<_>>()).collect();
        assert!((pxap_wsol(&maps, &samples).unwrap() - brute_force_ap(&scores, &labels)).abs() < 1e-9);
    }
}
