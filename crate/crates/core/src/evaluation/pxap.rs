use crate::error::{Error, Result};

/// Average precision of pixel retrieval, pooled over every pixel given.
///
/// Each distinct score is a threshold; AP is the sum of recall increments
/// weighted by the precision at that threshold.
pub fn pxap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "pxap",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("pxap score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("no positive pixels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerates every distinct score as a threshold independently.
    pub(crate) fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
        let positives = labels.iter().filter(|&&l| l).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut points = Vec::new();
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut pred = 0.0;
            for (s, l) in scores.iter().zip(labels) {
                if *s >= t {
                    pred += 1.0;
                    if *l {
                        tp += 1.0;
                    }
                }
            }
            points.push((tp / positives, tp / pred));
        }
        let mut ap = 0.0;
        let mut last = 0.0;
        for (r, p) in points {
            ap += (r - last) * p;
            last = r;
        }
        ap
    }

    #[test]
    fn perfect_and_flat_rankings() {
        let labels = [true, false, true, false, false];
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        assert_eq!(pxap(&scores, &labels).unwrap(), 1.0);
        assert!((pxap(&[0.3; 5], &labels).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_positives_is_undefined() {
        assert!(matches!(pxap(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn matches_oracle_on_fifty_pixels() {
        let scores: Vec<f64> = (0..50).map(|i| ((i * 37 % 50) as f64 / 10.0).floor() / 5.0).collect();
        let labels: Vec<bool> = (0..50).map(|i| (i * 13) % 7 < 3).collect();
        assert!((pxap(&scores, &labels).unwrap() - brute_force_ap(&scores, &labels)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn agrees_with_threshold_enumeration(
            data in proptest::collection::vec((0u8..12, any::<bool>()), 1..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 11.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l));
            let fast = pxap(&scores, &labels).unwrap();
            prop_assert!((fast - brute_force_ap(&scores, &labels)).abs() < 1e-9);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&fast));
        }
    }
}
