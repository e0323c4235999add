//! Remove-and-classify: blur out the top-k% pixels of a score map and compare
//! accuracy against erasing the same number of random pixels.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::report::{fmt_value, MetricReport};
use super::AnnotatedSample;
use crate::attribution::gaussian_blur;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RacConfig {
    /// Percentages of pixels to erase.
    pub k_grid: Vec<f64>,
    /// Number of random-mask repetitions per k.
    pub seeds: usize,
    pub seed: u64,
    /// Blur applied to erased pixels.
    pub blur_sigma: f64,
}

impl Default for RacConfig {
    fn default() -> Self {
        Self {
            k_grid: (0..=10).map(|i| 10.0 * i as f64).collect(),
            seeds: 5,
            seed: 0,
            blur_sigma: 3.0,
        }
    }
}

/// Replaces masked pixels of a `[1,ch,H,W]` image by their blurred values.
pub fn blur_perturb(image: &Tensor, mask: &Tensor, sigma: f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || mask.shape() != &s[2..] {
        return Err(Error::dim(
            "blur_perturb",
            format!("image {:?} with mask {:?}", s, mask.shape()),
        ));
    }
    let plane = s[2] * s[3];
    let mut out = image.clone();
    for c in 0..s[1] {
        let channel = Tensor::new(&s[2..], image.data()[c * plane..(c + 1) * plane].to_vec())?;
        let blurred = gaussian_blur(&channel, sigma)?;
        for (p, (&m, &b)) in mask.data().iter().zip(blurred.data()).enumerate() {
            if m > 0.5 {
                out.data_mut()[c * plane + p] = b;
            }
        }
    }
    Ok(out)
}

/// Number of pixels erased at `k` percent of an `h x w` image.
pub fn erase_budget(k: f64, h: usize, w: usize) -> usize {
    ((k / 100.0) * (h * w) as f64).round() as usize
}

/// Binary mask of the `m` highest scores; equal scores go to the lower
/// row-major index first.
pub fn top_k_mask(scores: &Tensor, m: usize) -> Tensor {
    let d = scores.data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let mut mask = Tensor::zeros(scores.shape());
    for &i in order.iter().take(m) {
        mask.data_mut()[i] = 1.0;
    }
    mask
}

pub fn random_mask(shape: &[usize], m: usize, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Tensor::zeros(shape);
    for i in index::sample(&mut rng, n, m.min(n)) {
        mask.data_mut()[i] = 1.0;
    }
    mask
}

struct ImageOutcome {
    attributed: Vec<bool>,
    random: Vec<Vec<bool>>,
}

/// Accuracy `A_k` after erasing by score, mean accuracy `A^r_k` over random
/// masks of the same size, and `R_k = A_k / A^r_k` for every k.
pub fn remove_and_classify<F>(
    classify: F,
    samples: &[AnnotatedSample],
    score_maps: &[Tensor],
    cfg: &RacConfig,
) -> Result<MetricReport>
where
    F: Fn(&Tensor) -> Result<usize> + Sync,
{
    if samples.is_empty() || samples.len() != score_maps.len() {
        return Err(Error::Argument(format!(
            "{} samples with {} score maps",
            samples.len(),
            score_maps.len()
        )));
    }
    if let Some(k) = cfg.k_grid.iter().find(|k| !(0.0..=100.0).contains(*k)) {
        return Err(Error::Argument(format!("k = {k} outside [0, 100]")));
    }
    if cfg.seeds == 0 {
        return Err(Error::Argument("need at least one random-mask seed".into()));
    }

    let outcomes: Vec<ImageOutcome> = samples
        .par_iter()
        .zip(score_maps)
        .enumerate()
        .map(|(i, (s, scores))| -> Result<ImageOutcome> {
            let (h, w) = s.size();
            if scores.shape() != [h, w] {
                return Err(Error::dim("remove_and_classify", format!("score map {:?}", scores.shape())));
            }
            let mut attributed = Vec::new();
            let mut random = Vec::new();
            for (ki, &k) in cfg.k_grid.iter().enumerate() {
                let m = erase_budget(k, h, w);
                let erased = blur_perturb(&s.image, &top_k_mask(scores, m), cfg.blur_sigma)?;
                attributed.push(classify(&erased)? == s.label);
                let mut hits = Vec::new();
                for r in 0..cfg.seeds {
                    let mask = random_mask(&[h, w], m, derive_seed(cfg.seed, &[ki as u64, r as u64, i as u64]));
                    let erased = blur_perturb(&s.image, &mask, cfg.blur_sigma)?;
                    hits.push(classify(&erased)? == s.label);
                }
                random.push(hits);
            }
            Ok(ImageOutcome { attributed, random })
        })
        .collect::<Result<_>>()?;

    let n = samples.len() as f64;
    let mut report = MetricReport::new("rac");
    report.item_columns = ["k", "A_k", "A_r_k", "R_k"].map(String::from).to_vec();
    report.item_columns.extend((0..cfg.seeds).map(|r| format!("A_r_seed{r}")));
    report.echo("k_grid", cfg.k_grid.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "));
    report.echo("seeds", cfg.seeds);
    report.echo("seed", cfg.seed);
    report.echo("blur_sigma", cfg.blur_sigma);

    let mut band = Vec::new();
    for (ki, &k) in cfg.k_grid.iter().enumerate() {
        let a_k = outcomes.iter().filter(|o| o.attributed[ki]).count() as f64 / n;
        let per_seed: Vec<f64> = (0..cfg.seeds)
            .map(|r| outcomes.iter().filter(|o| o.random[ki][r]).count() as f64 / n)
            .collect();
        let a_r = per_seed.iter().sum::<f64>() / cfg.seeds as f64;
        let r_k = (a_r > 0.0).then(|| a_k / a_r);
        if r_k.is_none() {
            log::warn!("random-erasure accuracy is zero at k = {k}; R_k undefined");
        }
        if (10.0..=50.0).contains(&k) {
            band.push(r_k);
        }
        report.set(&format!("A_{k}"), Some(a_k));
        report.set(&format!("A_r_{k}"), Some(a_r));
        report.set(&format!("R_{k}"), r_k);
        let mut row = vec![k.to_string(), fmt_value(Some(a_k)), fmt_value(Some(a_r)), fmt_value(r_k)];
        row.extend(per_seed.iter().map(|v| fmt_value(Some(*v))));
        report.items.push(row);
    }
    let band_mean = (!band.is_empty() && band.iter().all(Option::is_some))
        .then(|| band.iter().flatten().sum::<f64>() / band.len() as f64);
    report.set("mean_R_10_50", band_mean);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen_range(0.0..1.0))
    }

    fn sample(image: Tensor, label: usize) -> AnnotatedSample {
        AnnotatedSample {
            path: String::new(),
            image,
            label,
            keypoints: Vec::new(),
            gt_boxes: Vec::new(),
            gt_mask: None,
        }
    }

    #[test]
    fn blur_perturb_cases() {
        let x = rand_image(1);
        assert_eq!(blur_perturb(&x, &Tensor::zeros(&[8, 8]), 2.0).unwrap(), x);
        let full = blur_perturb(&x, &Tensor::full(&[8, 8], 1.0), 2.0).unwrap();
        let plane = Tensor::new(&[8, 8], x.data().to_vec()).unwrap();
        assert_eq!(full.data(), gaussian_blur(&plane, 2.0).unwrap().data());

        let checker = Tensor::from_fn(&[8, 8], |i| ((i / 8 + i % 8) % 2) as f64);
        let mixed = blur_perturb(&x, &checker, 2.0).unwrap();
        for p in 0..64 {
            let expected = if checker.data()[p] == 1.0 { full.data()[p] } else { x.data()[p] };
            assert_eq!(mixed.data()[p], expected);
        }
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        let s = Tensor::new(&[2, 3], vec![0.5, 0.9, 0.5, 0.1, 0.5, 0.9]).unwrap();
        assert_eq!(top_k_mask(&s, 3).data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn budgets_are_paired() {
        for k in [0.0, 10.0, 33.0, 100.0] {
            let m = erase_budget(k, 32, 32);
            assert_eq!(m, (k / 100.0 * 1024.0_f64).round() as usize);
            assert_eq!(top_k_mask(&Tensor::zeros(&[32, 32]), m).sum() as usize, m);
            assert_eq!(random_mask(&[32, 32], m, 4).sum() as usize, m);
        }
    }

    /// Correct iff the sum of the top-left quadrant stays above a threshold.
    fn quadrant_classifier(img: &Tensor) -> Result<usize> {
        let s: f64 = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| img.at(&[0, 0, i, j])).sum();
        Ok(usize::from(s > 12.0))
    }

    #[test]
    fn endpoints_and_faithful_map() {
        let samples: Vec<AnnotatedSample> = (0..6)
            .map(|i| {
                let mut img = rand_image(i).scale(0.1);
                for r in 0..4 {
                    for c in 0..4 {
                        img.set(&[0, 0, r, c], 1.0);
                    }
                }
                sample(img, 1)
            })
            .collect();
        let maps: Vec<Tensor> = samples
            .iter()
            .map(|_| Tensor::from_fn(&[8, 8], |i| if i / 8 < 4 && i % 8 < 4 { 1.0 } else { 0.0 }))
            .collect();
        let cfg = RacConfig { k_grid: vec![0.0, 25.0, 100.0], seeds: 3, seed: 9, blur_sigma: 2.0 };
        let r = remove_and_classify(quadrant_classifier, &samples, &maps, &cfg).unwrap();
        assert_eq!(r.aggregate("R_0"), Some(1.0));
        assert!(matches!(r.aggregate("R_100"), None | Some(1.0)));
        assert_eq!(r.aggregate("A_100"), r.aggregate("A_r_100"));
        assert_eq!(r.aggregate("A_25"), Some(0.0));
        assert!(r.aggregate("A_r_25").unwrap() > 0.0);
        assert_eq!(r.aggregate("R_25"), Some(0.0));
        assert_eq!(r.items.len(), 3);

        let again = remove_and_classify(quadrant_classifier, &samples, &maps, &cfg).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn bad_k_is_rejected() {
        let s = vec![sample(rand_image(0), 0)];
        let cfg = RacConfig { k_grid: vec![120.0], ..Default::default() };
        assert!(remove_and_classify(|_| Ok(0), &s, &[Tensor::zeros(&[8, 8])], &cfg).is_err());
    }
}
