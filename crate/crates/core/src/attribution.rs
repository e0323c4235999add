//! Score-map producers: the CALM products, normalized CAM, and input-gradient
//! baselines, plus resizing, blurring and export helpers.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{class_posterior_of, JointMap, ModelParams};
use crate::tensor::{io, Tape, Tensor, Var, EPS_LOG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapKind {
    CalmAttr,
    CalmSaliency,
    CalmSubset,
    CalmCounterfactual,
    CamMax,
    CamMinmax,
    GradVanilla,
    GradIntegrated,
    GradSmooth,
    GradVar,
}

impl MapKind {
    pub const ALL: [MapKind; 10] = [
        MapKind::CalmAttr,
        MapKind::CalmSaliency,
        MapKind::CalmSubset,
        MapKind::CalmCounterfactual,
        MapKind::CamMax,
        MapKind::CamMinmax,
        MapKind::GradVanilla,
        MapKind::GradIntegrated,
        MapKind::GradSmooth,
        MapKind::GradVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::CalmAttr => "calm_attr",
            MapKind::CalmSaliency => "calm_saliency",
            MapKind::CalmSubset => "calm_subset",
            MapKind::CalmCounterfactual => "calm_counterfactual",
            MapKind::CamMax => "cam_max",
            MapKind::CamMinmax => "cam_minmax",
            MapKind::GradVanilla => "grad_vanilla",
            MapKind::GradIntegrated => "grad_integrated",
            MapKind::GradSmooth => "grad_smooth",
            MapKind::GradVar => "grad_var",
        }
    }

    pub fn is_gradient(self) -> bool {
        matches!(
            self,
            MapKind::GradVanilla | MapKind::GradIntegrated | MapKind::GradSmooth | MapKind::GradVar
        )
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MapKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown map kind '{s}'")))
    }
}

/// An image-resolution map with the classes it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub values: Tensor,
    pub kind: MapKind,
    pub class: usize,
    pub class_b: Option<usize>,
    pub classes: Option<Vec<usize>>,
}

fn check_class(jm: &JointMap, label: usize) -> Result<()> {
    if label >= jm.classes() {
        return Err(Error::Argument(format!(
            "class {label} out of range for {} classes",
            jm.classes()
        )));
    }
    Ok(())
}

fn class_row(joint: &Tensor, label: usize) -> Tensor {
    let s = joint.shape();
    let n = s[1] * s[2];
    Tensor::new(&s[1..], joint.data()[label * n..(label + 1) * n].to_vec()).expect("row shape")
}

/// `s_z = p(label, z | x)`.
pub fn calm_attribution(jm: &JointMap, label: usize) -> Result<Tensor> {
    check_class(jm, label)?;
    Ok(class_row(&jm.joint, label))
}

/// `p(z | x)`.
pub fn calm_saliency(jm: &JointMap) -> Tensor {
    jm.spatial.clone()
}

/// `sum_{y in classes} p(y, z | x)`.
pub fn calm_subset(jm: &JointMap, classes: &[usize]) -> Result<Tensor> {
    if classes.is_empty() {
        return Err(Error::Argument("empty class subset".into()));
    }
    let (h, w) = jm.grid();
    let mut out = Tensor::zeros(&[h, w]);
    for &y in classes {
        check_class(jm, y)?;
        let row = class_row(&jm.joint, y);
        for (o, v) in out.data_mut().iter_mut().zip(row.data()) {
            *o += v;
        }
    }
    Ok(out)
}

/// `p(a, z | x) - p(b, z | x)`.
pub fn calm_counterfactual(jm: &JointMap, a: usize, b: usize) -> Result<Tensor> {
    check_class(jm, a)?;
    check_class(jm, b)?;
    class_row(&jm.joint, a).sub(&class_row(&jm.joint, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamNorm {
    Max,
    MinMax,
}

/// Normalized CAM for one class of `[C,H,W]` features.
pub fn cam_map(features: &Tensor, label: usize, norm: CamNorm) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::dim("cam_map", format!("features shape {s:?}")));
    }
    if label >= s[0] {
        return Err(Error::Argument(format!("class {label} out of range for {} classes", s[0])));
    }
    let f = class_row(features, label);
    Ok(match norm {
        CamNorm::Max => {
            let m = f.max();
            if m <= 0.0 {
                log::debug!("cam_map: max-normalization with non-positive maximum, returning zeros");
                Tensor::zeros(f.shape())
            } else {
                f.map(|v| v.max(0.0) / m)
            }
        }
        CamNorm::MinMax => min_max_normalize(&f),
    })
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    if !(hi > lo) {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Bilinear resize with corner alignment.
pub fn upsample_bilinear(grid: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::dim("upsample_bilinear", format!("grid shape {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let (h0, w0) = target;
    if h0 < h || w0 < w {
        return Err(Error::Argument(format!(
            "target {h0}x{w0} smaller than grid {h}x{w}"
        )));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..w0).map(|j| coord(j, w0, w)).collect();
    let d = grid.data();
    let mut out = Vec::with_capacity(h0 * w0);
    for i in 0..h0 {
        let (r0, r1, fy) = coord(i, h0, h);
        for &(c0, c1, fx) in &cols {
            let top = d[r0 * w + c0] * (1.0 - fx) + d[r0 * w + c1] * fx;
            let bot = d[r1 * w + c0] * (1.0 - fx) + d[r1 * w + c1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(&[h0, w0], out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as usize;
    let raw: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of a `[H,W]` map, kernel truncated at `3 sigma`
/// and edges replicated. `sigma == 0` returns the input.
pub fn gaussian_blur(map: &Tensor, sigma: f64) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::dim("gaussian_blur", format!("map shape {s:?}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("blur sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let (h, w) = (s[0], s[1]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let d = map.data();
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * d[i * w + clamp(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[clamp(i as isize + t as isize - r, h) * w + j])
                .sum();
        }
    }
    Tensor::new(s, out)
}

/// Blur then min-max normalize a raw gradient map.
pub fn postprocess_gradient_map(raw: &Tensor, sigma_blur: f64) -> Result<Tensor> {
    Ok(min_max_normalize(&gaussian_blur(raw, sigma_blur)?))
}

/// A differentiable scalar response `F(x)` whose input gradient is explained.
pub trait ScoreModel {
    fn score_on(&self, tape: &mut Tape, image: Var, label: usize) -> Result<Var>;
}

/// `F(x) = log p(label | x)`.
impl ScoreModel for ModelParams {
    fn score_on(&self, tape: &mut Tape, image: Var, label: usize) -> Result<Var> {
        if label >= self.config().classes {
            return Err(Error::Argument(format!("class {label} out of range")));
        }
        let bound = self.bind(tape);
        let post = self.class_posterior_on(tape, &bound, image)?;
        let p = tape.select(post, label)?;
        Ok(tape.log_floor(p, EPS_LOG))
    }
}

pub fn score_value(model: &dyn ScoreModel, image: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let f = model.score_on(&mut tape, x, label)?;
    Ok(tape.value(f).item())
}

/// `dF/dx`, shaped like `image`.
pub fn input_gradient(model: &dyn ScoreModel, image: &Tensor, label: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let f = model.score_on(&mut tape, x, label)?;
    Ok(tape.backward(f)?.take(x))
}

/// Per-pixel max over channels of `|t|` for a `[1,ch,H,W]` tensor.
pub fn reduce_channels(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::dim("reduce_channels", format!("expected [1,ch,H,W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut out = vec![0.0f64; plane];
    for c in 0..s[1] {
        for (o, v) in out.iter_mut().zip(&t.data()[c * plane..(c + 1) * plane]) {
            *o = o.max(v.abs());
        }
    }
    Tensor::new(&s[2..], out)
}

pub fn grad_vanilla(model: &dyn ScoreModel, image: &Tensor, label: usize) -> Result<Tensor> {
    reduce_channels(&input_gradient(model, image, label)?)
}

/// Integrated gradients before channel reduction, with the midpoint rule on
/// the straight path from `baseline` (zeros if `None`).
pub fn integrated_gradients(
    model: &dyn ScoreModel,
    image: &Tensor,
    label: usize,
    baseline: Option<&Tensor>,
    steps: usize,
) -> Result<Tensor> {
    if steps < 8 {
        return Err(Error::Argument(format!("integrated gradients needs >= 8 steps, got {steps}")));
    }
    let zeros;
    let x0 = match baseline {
        Some(b) => {
            image.expect_same_shape(b, "integrated_gradients")?;
            b
        }
        None => {
            zeros = Tensor::zeros(image.shape());
            &zeros
        }
    };
    let delta = image.sub(x0)?;
    let mut acc = Tensor::zeros(image.shape());
    for s in 0..steps {
        let a = (s as f64 + 0.5) / steps as f64;
        let point = x0.zip_map(&delta, |b, d| b + a * d)?;
        let g = input_gradient(model, &point, label)?;
        for (o, v) in acc.data_mut().iter_mut().zip(g.data()) {
            *o += v;
        }
    }
    let k = 1.0 / steps as f64;
    delta.zip_map(&acc, |d, g| d * g * k)
}

pub fn grad_integrated(
    model: &dyn ScoreModel,
    image: &Tensor,
    label: usize,
    baseline: Option<&Tensor>,
    steps: usize,
) -> Result<Tensor> {
    reduce_channels(&integrated_gradients(model, image, label, baseline, steps)?)
}

/// Running mean and population variance of vanilla-gradient maps under
/// Gaussian input noise.
fn noisy_gradient_moments(
    model: &dyn ScoreModel,
    image: &Tensor,
    label: usize,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if n == 0 {
        return Err(Error::Argument("noisy gradients need n >= 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("noise sigma {sigma} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let (mut mean, mut m2) = (Tensor::zeros(&image.shape()[2..]), Tensor::zeros(&image.shape()[2..]));
    for k in 1..=n {
        let noisy = Tensor::from_fn(image.shape(), |i| image.data()[i] + normal.sample(&mut rng));
        let g = grad_vanilla(model, &noisy, label)?;
        for ((m, s), &x) in mean.data_mut().iter_mut().zip(m2.data_mut()).zip(g.data()) {
            let d = x - *m;
            *m += d / k as f64;
            *s += d * (x - *m);
        }
    }
    let var = m2.scale(1.0 / n as f64);
    Ok((mean, var))
}

pub fn grad_smooth(
    model: &dyn ScoreModel,
    image: &Tensor,
    label: usize,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    Ok(noisy_gradient_moments(model, image, label, sigma, n, seed)?.0)
}

pub fn grad_var(
    model: &dyn ScoreModel,
    image: &Tensor,
    label: usize,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    Ok(noisy_gradient_moments(model, image, label, sigma, n, seed)?.1)
}

/// Settings for the gradient baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSettings {
    pub ig_steps: usize,
    pub noise_sigma: f64,
    pub noise_samples: usize,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for GradientSettings {
    fn default() -> Self {
        Self {
            ig_steps: 32,
            noise_sigma: 0.15,
            noise_samples: 16,
            blur_sigma: 2.0,
            seed: 0,
        }
    }
}

/// Post-processed `[H0,W0]` map of a gradient baseline.
pub fn gradient_map(
    model: &dyn ScoreModel,
    kind: MapKind,
    image: &Tensor,
    label: usize,
    settings: &GradientSettings,
) -> Result<Tensor> {
    let raw = match kind {
        MapKind::GradVanilla => grad_vanilla(model, image, label)?,
        MapKind::GradIntegrated => grad_integrated(model, image, label, None, settings.ig_steps)?,
        MapKind::GradSmooth => grad_smooth(
            model,
            image,
            label,
            settings.noise_sigma,
            settings.noise_samples,
            settings.seed,
        )?,
        MapKind::GradVar => grad_var(
            model,
            image,
            label,
            settings.noise_sigma,
            settings.noise_samples,
            settings.seed,
        )?,
        other => return Err(Error::Argument(format!("{other} is not a gradient map"))),
    };
    postprocess_gradient_map(&raw, settings.blur_sigma)
}

/// Class posterior of a joint, re-exported for map consumers.
pub fn marginal(jm: &JointMap) -> Tensor {
    class_posterior_of(&jm.joint)
}

/// Writes `<stem>.pgm` (16-bit) and `<stem>.tnsr`. Counterfactual maps are
/// shifted to `(v + 1) / 2` in the PGM only.
pub fn export_map(stem: impl AsRef<Path>, values: &Tensor, counterfactual: bool) -> Result<()> {
    let stem = stem.as_ref();
    let s = values.shape();
    if s.len() != 2 {
        return Err(Error::dim("export_map", format!("map shape {s:?}")));
    }
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    let exact = io::quantize(values);
    io::write(stem.with_extension("tnsr"), &exact)?;
    let mut bytes = format!("P5\n{} {}\n65535\n", s[1], s[0]).into_bytes();
    for &v in exact.data() {
        bytes.extend_from_slice(&pgm_level(v, counterfactual).to_be_bytes());
    }
    fs::write(stem.with_extension("pgm"), bytes)?;
    Ok(())
}

/// 16-bit gray level for a map value.
pub fn pgm_level(v: f64, counterfactual: bool) -> u16 {
    let v = if counterfactual { (v + 1.0) / 2.0 } else { v };
    (65535.0 * v.clamp(0.0, 1.0)).round() as u16
}

/// Reads a 16-bit binary PGM as `(width, height, levels)`.
pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s}")));
    if fields[0] != "P5" || num(&fields[3])? != 65535 {
        return Err(Error::Format("expected a 16-bit P5 PGM".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * w * h {
        return Err(Error::Format("PGM payload length mismatch".into()));
    }
    let levels = body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, levels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn random_jm(seed: u64) -> JointMap {
        JointMap::from_logits(&rand_tensor(&[5, 4, 4], seed, 3.0), &rand_tensor(&[4, 4], seed + 1, 3.0)).unwrap()
    }

    fn onehot_jm(y: usize, z: usize) -> JointMap {
        let mut jm = random_jm(0);
        jm.joint = Tensor::zeros(&[5, 4, 4]);
        jm.joint.data_mut()[y * 16 + z] = 1.0;
        jm
    }

    struct Linear {
        w: Tensor,
    }

    impl ScoreModel for Linear {
        fn score_on(&self, tape: &mut Tape, image: Var, _label: usize) -> Result<Var> {
            let w = tape.leaf(self.w.clone());
            let p = tape.mul(w, image)?;
            Ok(tape.sum_all(p))
        }
    }

    fn linear(seed: u64) -> Linear {
        Linear { w: rand_tensor(&[1, 2, 6, 6], seed, 1.0) }
    }

    fn abs_max_channels(t: &Tensor) -> Vec<f64> {
        (0..36).map(|p| t.data()[p].abs().max(t.data()[36 + p].abs())).collect()
    }

    #[test]
    fn attribution_cases() {
        let m = calm_attribution(&onehot_jm(2, 5), 2).unwrap();
        assert_eq!(m.sum(), 1.0);
        assert_eq!(m.data()[5], 1.0);
        let u = JointMap::from_logits(&Tensor::zeros(&[5, 4, 4]), &Tensor::zeros(&[4, 4])).unwrap();
        assert!(calm_attribution(&u, 1).unwrap().data().iter().all(|&v| (v - 1.0 / 80.0).abs() < 1e-15));
        for seed in 0..10 {
            let jm = random_jm(seed * 7);
            let post = marginal(&jm);
            assert!((calm_attribution(&jm, 3).unwrap().sum() - post.data()[3]).abs() < 1e-12);
        }
        assert!(calm_attribution(&u, 5).is_err());
    }

    #[test]
    fn saliency_cases() {
        let u = JointMap::from_logits(&Tensor::zeros(&[5, 4, 4]), &Tensor::zeros(&[4, 4])).unwrap();
        assert!(calm_saliency(&u).data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        let jm = random_jm(3);
        let mut stacked = Tensor::zeros(&[4, 4]);
        for y in 0..5 {
            stacked = stacked.add(&calm_attribution(&jm, y).unwrap()).unwrap();
        }
        assert!(stacked.max_abs_diff(&calm_saliency(&jm)) < 1e-12);
        assert!((calm_saliency(&jm).sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn subset_cases() {
        let jm = random_jm(11);
        let all: Vec<usize> = (0..5).collect();
        assert!(calm_subset(&jm, &all).unwrap().max_abs_diff(&calm_saliency(&jm)) < 1e-12);
        assert_eq!(calm_subset(&jm, &[2]).unwrap(), calm_attribution(&jm, 2).unwrap());
        let small = calm_subset(&jm, &[1, 3]).unwrap();
        let big = calm_subset(&jm, &[0, 1, 3]).unwrap();
        assert!(small.data().iter().zip(big.data()).all(|(a, b)| a <= b));
        assert!(matches!(calm_subset(&jm, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn counterfactual_cases() {
        let jm = random_jm(5);
        assert!(calm_counterfactual(&jm, 2, 2).unwrap().data().iter().all(|&v| v == 0.0));
        let ab = calm_counterfactual(&jm, 1, 4).unwrap();
        let ba = calm_counterfactual(&jm, 4, 1).unwrap();
        assert!(ab.data().iter().zip(ba.data()).all(|(a, b)| *a == -*b));
        for z in 0..16 {
            assert!((ab.data()[z] - (jm.joint.data()[16 + z] - jm.joint.data()[64 + z])).abs() < 1e-15);
        }
    }

    #[test]
    fn cam_map_cases() {
        let f = Tensor::new(&[1, 2, 2], vec![-1.0, 2.0, 4.0, 0.0]).unwrap();
        assert_eq!(cam_map(&f, 0, CamNorm::Max).unwrap().data(), &[0.0, 0.5, 1.0, 0.0]);
        let mm = cam_map(&f, 0, CamNorm::MinMax).unwrap();
        for (a, b) in mm.data().iter().zip([0.0, 0.6, 1.0, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        let shifted = cam_map(&f.add_scalar(3.0), 0, CamNorm::Max).unwrap();
        assert!(shifted.max_abs_diff(&cam_map(&f, 0, CamNorm::Max).unwrap()) > 1e-3);
        let neg = Tensor::full(&[1, 2, 2], -1.0);
        assert!(cam_map(&neg, 0, CamNorm::Max).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(cam_map(&neg, 0, CamNorm::MinMax).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifting_logits_leaves_joint_unchanged() {
        let g = rand_tensor(&[5, 4, 4], 1, 2.0);
        let h = rand_tensor(&[4, 4], 2, 2.0);
        let base = calm_attribution(&JointMap::from_logits(&g, &h).unwrap(), 2).unwrap();
        for c in [-10.0, -1.0, 1.0, 10.0] {
            let moved = calm_attribution(&JointMap::from_logits(&g.add_scalar(c), &h).unwrap(), 2).unwrap();
            assert!(moved.max_abs_diff(&base) < 1e-9);
        }
    }

    #[test]
    fn upsample_cases() {
        let c = upsample_bilinear(&Tensor::full(&[3, 2], 0.4), (9, 7)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let r = rand_tensor(&[4, 5], 3, 1.0);
        assert_eq!(upsample_bilinear(&r, (4, 5)).unwrap(), r);
        let m = upsample_bilinear(&Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(), (3, 3)).unwrap();
        assert_eq!(m.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
        assert!(upsample_bilinear(&r, (3, 5)).is_err());

        let up = upsample_bilinear(&r, (13, 17)).unwrap();
        assert!(up.max() <= r.max() + 1e-15 && up.min() >= r.min() - 1e-15);

        let mut peak = Tensor::full(&[4, 4], 0.2);
        peak.set(&[1, 2], 0.9);
        let up = upsample_bilinear(&peak, (10, 10)).unwrap();
        assert_eq!(up.argmax(), 3 * 10 + 6);
    }

    #[test]
    fn blur_and_postprocess() {
        assert!(postprocess_gradient_map(&Tensor::full(&[6, 6], 3.0), 2.0).unwrap().data().iter().all(|&v| v == 0.0));
        let mut delta = Tensor::zeros(&[9, 9]);
        delta.set(&[4, 4], 1.0);
        let p = postprocess_gradient_map(&delta, 1.0).unwrap();
        assert_eq!(p.argmax(), 40);
        assert_eq!(p.data()[40], 1.0);
        let p = postprocess_gradient_map(&rand_tensor(&[12, 10], 4, 5.0), 2.0).unwrap();
        assert!(p.min().abs() < 1e-12 && (p.max() - 1.0).abs() < 1e-12);
        let b = gaussian_blur(&delta, 1.0).unwrap();
        assert!((b.sum() - 1.0).abs() < 1e-12);
        assert!((b.at(&[3, 4]) - b.at(&[4, 5])).abs() < 1e-15);
    }

    #[test]
    fn vanilla_gradient_of_linear_model() {
        let m = linear(1);
        let x = rand_tensor(&[1, 2, 6, 6], 2, 1.0);
        assert_eq!(grad_vanilla(&m, &x, 0).unwrap().data(), abs_max_channels(&m.w).as_slice());
        let zero = Linear { w: Tensor::zeros(&[1, 2, 6, 6]) };
        assert!(grad_vanilla(&zero, &x, 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vanilla_gradient_matches_finite_differences() {
        let p = ModelParams::build(ModelConfig::new(3, 8, 16, HeadKind::Calm, 4)).unwrap();
        let x = rand_tensor(&[1, 1, 16, 16], 5, 1.0).map(|v| v.abs());
        let g = input_gradient(&p, &x, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-5;
        for _ in 0..10 {
            let i = rng.gen_range(0..256);
            let mut a = x.clone();
            a.data_mut()[i] += eps;
            let mut b = x.clone();
            b.data_mut()[i] -= eps;
            let fd = (score_value(&p, &a, 1).unwrap() - score_value(&p, &b, 1).unwrap()) / (2.0 * eps);
            let an = g.data()[i];
            assert!((an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-6), "{an} vs {fd}");
        }
    }

    #[test]
    fn integrated_gradient_cases() {
        let m = linear(3);
        let x = rand_tensor(&[1, 2, 6, 6], 4, 1.0);
        let x0 = rand_tensor(&[1, 2, 6, 6], 5, 1.0);
        for steps in [8, 13] {
            let ig = integrated_gradients(&m, &x, 0, Some(&x0), steps).unwrap();
            let expected = x.sub(&x0).unwrap().mul(&m.w).unwrap();
            assert!(ig.max_abs_diff(&expected) < 1e-12);
        }
        assert!(grad_integrated(&m, &x, 0, Some(&x), 8).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(integrated_gradients(&m, &x, 0, None, 4).is_err());
    }

    #[test]
    fn integrated_gradients_are_complete_on_toy_model() {
        let p = ModelParams::build(ModelConfig::new(3, 8, 16, HeadKind::Cam, 6)).unwrap();
        let x = rand_tensor(&[1, 1, 16, 16], 7, 1.0);
        let ig = integrated_gradients(&p, &x, 2, None, 128).unwrap();
        let lhs = ig.sum();
        let rhs = score_value(&p, &x, 2).unwrap() - score_value(&p, &Tensor::zeros(x.shape()), 2).unwrap();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn noisy_gradient_cases() {
        let p = ModelParams::build(ModelConfig::new(3, 8, 16, HeadKind::Cam, 6)).unwrap();
        let x = rand_tensor(&[1, 1, 16, 16], 8, 1.0);
        let v = grad_vanilla(&p, &x, 0).unwrap();
        assert_eq!(grad_smooth(&p, &x, 0, 0.0, 4, 1).unwrap(), v);
        assert!(grad_var(&p, &x, 0, 0.0, 4, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grad_var(&p, &x, 0, 0.3, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(grad_smooth(&p, &x, 0, 0.3, 3, 5).unwrap(), grad_smooth(&p, &x, 0, 0.3, 3, 5).unwrap());

        let m = linear(4);
        let y = rand_tensor(&[1, 2, 6, 6], 1, 1.0);
        let s = grad_smooth(&m, &y, 0, 0.5, 5, 2).unwrap();
        let expected = abs_max_channels(&m.w);
        assert!(s.data().iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn export_pairs_pgm_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let values = Tensor::new(&[2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        let stem = dir.path().join("maps/a");
        export_map(&stem, &values, false).unwrap();
        let side = io::read(stem.with_extension("tnsr")).unwrap();
        let (w, h, levels) = read_pgm16(stem.with_extension("pgm")).unwrap();
        assert_eq!((w, h), (3, 2));
        for (l, v) in levels.iter().zip(side.data()) {
            assert_eq!(*l, pgm_level(*v, false));
        }
        assert_eq!(levels[2], 32768);

        let cf = Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap();
        export_map(dir.path().join("cf"), &cf, true).unwrap();
        let (_, _, levels) = read_pgm16(dir.path().join("cf.pgm")).unwrap();
        assert_eq!(levels, vec![0, 65535]);
    }
}
