//! The toy fully-convolutional extractor and its two heads.
//!
//! Extractor: four 3x3 conv + bias + relu layers, the first two with stride 2,
//! so a square image of side `image_size` yields a `image_size / 4` grid of
//! `L`-channel features.
//!
//! * CAM head: a 1x1 conv to `C` class maps; `p(y|x) = softmax(GAP(f))`.
//! * CALM head: a 1x1 conv to `C` logits `g` and a 1x1 conv to one channel
//!   `h`, normalized as `softmax_y(g)` and `l1_z(softplus(relu(h)))`; their
//!   product is the joint `p(y, z | x)` over classes and grid cells.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Total downsampling of the extractor.
pub const EXTRACTOR_STRIDE: usize = 4;
/// Width of the first two extractor stages.
pub const HIDDEN_CHANNELS: usize = 16;

const CONV_LAYERS: [(&str, usize); 4] = [("conv1", 2), ("conv2", 2), ("conv3", 1), ("conv4", 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Cam,
    Calm,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Cam => "cam",
            HeadKind::Calm => "calm",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(HeadKind::Cam),
            "calm" => Ok(HeadKind::Calm),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of classes `C`.
    pub classes: usize,
    /// Feature channels `L` entering the heads.
    pub channels: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(classes: usize, channels: usize, image_size: usize, head: HeadKind, seed: u64) -> Self {
        Self {
            classes,
            channels,
            image_size,
            in_channels: 1,
            head,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % EXTRACTOR_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of the extractor stride {EXTRACTOR_STRIDE}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Side of the attribution grid.
    pub fn grid(&self) -> usize {
        self.image_size / EXTRACTOR_STRIDE
    }

    /// `key=value` lines, the checkpoint `config.txt` body.
    pub fn to_kv(&self) -> String {
        format!(
            "C={}\nL={}\nimage_size={}\nin_channels={}\nhead_kind={}\nseed={}\n",
            self.classes, self.channels, self.image_size, self.in_channels, self.head, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line without '=': {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("config missing key {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("config key {k} is not an integer")))
        };
        let cfg = Self {
            classes: num("C")? as usize,
            channels: num("L")? as usize,
            image_size: num("image_size")? as usize,
            in_channels: map.get("in_channels").map_or(Ok(1), |v| {
                v.parse()
                    .map_err(|_| Error::Config("config key in_channels is not an integer".into()))
            })?,
            head: get("head_kind")?.parse()?,
            seed: num("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Fan-in scaled normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(&config) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            tensors.insert(name, t);
        }
        Ok(Self { config, tensors })
    }

    /// Parameter names and shapes, in initialization order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let widths = [config.in_channels, HIDDEN_CHANNELS, HIDDEN_CHANNELS, config.channels, config.channels];
        let mut out = Vec::new();
        for (i, (name, _)) in CONV_LAYERS.iter().enumerate() {
            out.push((format!("{name}.weight"), vec![widths[i + 1], widths[i], 3, 3]));
            out.push((format!("{name}.bias"), vec![widths[i + 1]]));
        }
        match config.head {
            HeadKind::Cam => out.push(("head_cam.weight".into(), vec![config.classes, config.channels, 1, 1])),
            HeadKind::Calm => {
                out.push(("head_g.weight".into(), vec![config.classes, config.channels, 1, 1]));
                out.push(("head_h.weight".into(), vec![1, config.channels, 1, 1]));
            }
        }
        out
    }

    /// Assembles parameters loaded from elsewhere, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &layout {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        slot.expect_same_shape(&value, "ModelParams::set")?;
        *slot = value;
        Ok(())
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    fn expect_head(&self, head: HeadKind) -> Result<()> {
        if self.config.head != head {
            return Err(Error::Config(format!(
                "operation needs a {head} head, model has {}",
                self.config.head
            )));
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [1, c.in_channels, c.image_size, c.image_size];
        if image.shape() != want {
            return Err(Error::dim(
                "forward",
                format!("image shape {:?}, model expects {want:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Extractor output `[1, L, grid, grid]`.
    pub fn extract(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<Var> {
        let mut x = image;
        for (name, stride) in CONV_LAYERS {
            let w = bound.var(&format!("{name}.weight"))?;
            let b = bound.var(&format!("{name}.bias"))?;
            let y = tape.conv2d(x, w, stride, 1)?;
            let y = tape.channel_bias(y, b)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    pub fn forward_calm_on(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<CalmVars> {
        self.expect_head(HeadKind::Calm)?;
        let (c, n) = (self.config.classes, self.config.grid());
        let feats = self.extract(tape, bound, image)?;
        let g = tape.conv2d(feats, bound.var("head_g.weight")?, 1, 0)?;
        let g = tape.reshape(g, &[c, n, n])?;
        let h = tape.conv2d(feats, bound.var("head_h.weight")?, 1, 0)?;
        let h = tape.reshape(h, &[n, n])?;
        calm_head_on(tape, g, h)
    }

    pub fn forward_cam_on(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<CamVars> {
        self.expect_head(HeadKind::Cam)?;
        let (c, n) = (self.config.classes, self.config.grid());
        let feats = self.extract(tape, bound, image)?;
        let f = tape.conv2d(feats, bound.var("head_cam.weight")?, 1, 0)?;
        let features = tape.reshape(f, &[c, n, n])?;
        let pooled = tape.global_average_pool(features)?;
        let posterior = tape.softmax_axis(pooled, 0)?;
        Ok(CamVars { features, posterior })
    }

    /// `[C]` class posterior `p(y|x)` on the tape, for either head.
    pub fn class_posterior_on(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<Var> {
        match self.config.head {
            HeadKind::Cam => Ok(self.forward_cam_on(tape, bound, image)?.posterior),
            HeadKind::Calm => {
                let vars = self.forward_calm_on(tape, bound, image)?;
                let per_class = tape.sum_axis(vars.joint, 2)?;
                tape.sum_axis(per_class, 1)
            }
        }
    }

    pub fn forward_calm(&self, image: &Tensor) -> Result<JointMap> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let v = self.forward_calm_on(&mut tape, &bound, x)?;
        Ok(v.read(&tape))
    }

    pub fn forward_cam(&self, image: &Tensor) -> Result<CamOutput> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let v = self.forward_cam_on(&mut tape, &bound, x)?;
        Ok(CamOutput {
            features: tape.value(v.features).clone(),
            class_posterior: tape.value(v.posterior).clone(),
        })
    }

    /// `p(y|x)` for either head.
    pub fn predict_proba(&self, image: &Tensor) -> Result<Tensor> {
        match self.config.head {
            HeadKind::Cam => Ok(self.forward_cam(image)?.class_posterior),
            HeadKind::Calm => Ok(class_posterior(&self.forward_calm(image)?)),
        }
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.predict_proba(image)?.argmax())
    }
}

/// Parameter leaves registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Substitutes `var` for the named parameter.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        *slot = var;
        Ok(())
    }
}

/// Tape handles of a CALM forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CalmVars {
    pub g_logits: Var,
    pub h_logits: Var,
    pub cond_class: Var,
    pub spatial: Var,
    pub joint: Var,
}

impl CalmVars {
    pub fn read(&self, tape: &Tape) -> JointMap {
        JointMap {
            joint: tape.value(self.joint).clone(),
            cond_class: tape.value(self.cond_class).clone(),
            spatial: tape.value(self.spatial).clone(),
            g_logits: tape.value(self.g_logits).clone(),
            h_logits: tape.value(self.h_logits).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CamVars {
    pub features: Var,
    pub posterior: Var,
}

/// Normalizes raw head outputs `g: [C,H,W]`, `h: [H,W]` into the joint.
pub fn calm_head_on(tape: &mut Tape, g: Var, h: Var) -> Result<CalmVars> {
    let gs = tape.value(g).shape().to_vec();
    if gs.len() != 3 || tape.value(h).shape() != &gs[1..] {
        return Err(Error::dim(
            "calm_head",
            format!("g {:?} and h {:?}", gs, tape.value(h).shape()),
        ));
    }
    let (c, hh, ww) = (gs[0], gs[1], gs[2]);
    let cond_class = tape.softmax_axis(g, 0)?;
    let hr = tape.relu(h);
    let hs = tape.softplus(hr);
    let flat = tape.reshape(hs, &[hh * ww])?;
    let norm = tape.l1_normalize_axis(flat, 0)?;
    let spatial = tape.reshape(norm, &[hh, ww])?;
    let tiled = tape.expand(spatial, 0, c)?;
    let joint = tape.mul(cond_class, tiled)?;
    Ok(CalmVars {
        g_logits: g,
        h_logits: h,
        cond_class,
        spatial,
        joint,
    })
}

/// `p(y, z | x)` for one image with its two factors.
#[derive(Clone, Debug, PartialEq)]
pub struct JointMap {
    /// `[C,H,W]`, `p(y, z | x)`.
    pub joint: Tensor,
    /// `[C,H,W]`, `p(y | x, z)`.
    pub cond_class: Tensor,
    /// `[H,W]`, `p(z | x)`.
    pub spatial: Tensor,
    /// Raw class-branch logits `g`.
    pub g_logits: Tensor,
    /// Raw spatial-branch output `h` before relu.
    pub h_logits: Tensor,
}

impl JointMap {
    pub fn from_logits(g: &Tensor, h: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let gv = tape.leaf(g.clone());
        let hv = tape.leaf(h.clone());
        Ok(calm_head_on(&mut tape, gv, hv)?.read(&tape))
    }

    pub fn classes(&self) -> usize {
        self.joint.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.joint.shape()[1], self.joint.shape()[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamOutput {
    /// `[C,H,W]` pre-pooling class maps.
    pub features: Tensor,
    /// `[C]`.
    pub class_posterior: Tensor,
}

impl CamOutput {
    /// Posterior from raw class maps.
    pub fn from_features(features: Tensor) -> Result<Self> {
        let pooled = kernels::global_average_pool(&features)?;
        let class_posterior = kernels::softmax_axis(&pooled, 0)?;
        Ok(Self {
            features,
            class_posterior,
        })
    }
}

/// `p(y|x) = sum_z p(y, z | x)`.
pub fn class_posterior(jm: &JointMap) -> Tensor {
    class_posterior_of(&jm.joint)
}

/// Class marginal of a `[C,H,W]` joint.
pub fn class_posterior_of(joint: &Tensor) -> Tensor {
    let per_row = kernels::sum_axis(joint, 2).expect("rank-3 joint");
    kernels::sum_axis(&per_row, 1).expect("rank-2 rows")
}

/// Evaluates a linear layer after global average pooling both ways round:
/// `W · GAP(f)` and `GAP(conv1x1_W(f))`. Returns the shared `[C]` result.
pub fn commute_linear_gap(weights: &Tensor, pre_features: &Tensor) -> Result<Tensor> {
    let (ws, fs) = (weights.shape(), pre_features.shape());
    if ws.len() != 2 || fs.len() != 3 || ws[1] != fs[0] {
        return Err(Error::dim(
            "commute_linear_gap",
            format!("weights {ws:?}, features {fs:?}"),
        ));
    }
    let (c, l) = (ws[0], ws[1]);
    let pooled = kernels::global_average_pool(pre_features)?;
    let linear_after = Tensor::from_fn(&[c], |y| {
        (0..l).map(|k| weights.at(&[y, k]) * pooled.data()[k]).sum()
    });

    let x = pre_features.reshape(&[1, fs[0], fs[1], fs[2]])?;
    let kernel = weights.reshape(&[c, l, 1, 1])?;
    let mapped = kernels::conv2d(&x, &kernel, 1, 0)?;
    let conv_first = kernels::global_average_pool(&mapped)?.reshape(&[c])?;

    let diff = linear_after.max_abs_diff(&conv_first);
    let scale = linear_after.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if diff > 1e-10 * scale {
        return Err(Error::Consistency(format!(
            "linear/GAP orderings differ by {diff:e}"
        )));
    }
    Ok(linear_after)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn calm_cfg() -> ModelConfig {
        ModelConfig::new(8, 16, 32, HeadKind::Calm, 3)
    }

    #[test]
    fn grid_from_stride() {
        let p = ModelParams::build(calm_cfg()).unwrap();
        assert_eq!(p.config().grid(), 8);
        let jm = p.forward_calm(&rand_tensor(&[1, 1, 32, 32], 1, 1.0)).unwrap();
        assert_eq!(jm.joint.shape(), &[8, 8, 8]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = ModelParams::build(calm_cfg()).unwrap();
        let b = ModelParams::build(calm_cfg()).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn rejects_indivisible_image_size() {
        let cfg = ModelConfig::new(8, 16, 30, HeadKind::Calm, 0);
        assert!(matches!(ModelParams::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_heads_give_uniform_joint() {
        let mut p = ModelParams::build(calm_cfg()).unwrap();
        p.set("head_g.weight", Tensor::zeros(&[8, 16, 1, 1])).unwrap();
        p.set("head_h.weight", Tensor::zeros(&[1, 16, 1, 1])).unwrap();
        let jm = p.forward_calm(&rand_tensor(&[1, 1, 32, 32], 2, 1.0)).unwrap();
        let u = 1.0 / (8.0 * 64.0);
        assert!(jm.joint.data().iter().all(|&v| (v - u).abs() < 1e-15));
    }

    #[test]
    fn joint_matches_scalar_oracle() {
        let p = ModelParams::build(calm_cfg()).unwrap();
        let jm = p.forward_calm(&rand_tensor(&[1, 1, 32, 32], 4, 1.0)).unwrap();
        let (g, h) = (&jm.g_logits, &jm.h_logits);
        let hz: Vec<f64> = h.data().iter().map(|&v| (1.0 + v.max(0.0).exp()).ln()).collect();
        let hsum: f64 = hz.iter().sum();
        for z in 0..64 {
            let col: Vec<f64> = (0..8).map(|y| g.data()[y * 64 + z]).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = col.iter().map(|v| (v - m).exp()).sum();
            for y in 0..8 {
                let expected = (col[y] - m).exp() / denom * hz[z] / hsum;
                assert!((jm.joint.data()[y * 64 + z] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_posterior_cases() {
        let g = Tensor::zeros(&[4, 3, 3]);
        let h = Tensor::zeros(&[3, 3]);
        let jm = JointMap::from_logits(&g, &h).unwrap();
        assert!(class_posterior(&jm).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut concentrated = jm.clone();
        concentrated.joint = Tensor::zeros(&[4, 3, 3]);
        concentrated.joint.set(&[2, 1, 0], 1.0);
        assert_eq!(class_posterior(&concentrated).data(), &[0.0, 0.0, 1.0, 0.0]);

        let jm = JointMap::from_logits(&rand_tensor(&[4, 3, 3], 9, 3.0), &rand_tensor(&[3, 3], 10, 3.0)).unwrap();
        let post = class_posterior(&jm);
        for y in 0..4 {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += jm.joint.at(&[y, i, j]);
                }
            }
            assert!((post.data()[y] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn cam_posterior_known_values() {
        let mut f = Tensor::zeros(&[2, 4, 4]);
        for i in 16..32 {
            f.data_mut()[i] = 3f64.ln();
        }
        let out = CamOutput::from_features(f.clone()).unwrap();
        assert!((out.class_posterior.data()[0] - 0.25).abs() < 1e-15);
        assert!((out.class_posterior.data()[1] - 0.75).abs() < 1e-15);
        let shifted = CamOutput::from_features(f.add_scalar(5.0)).unwrap();
        assert!(shifted.class_posterior.max_abs_diff(&out.class_posterior) < 1e-12);
    }

    #[test]
    fn cam_forward_matches_manual_gap_softmax() {
        let p = ModelParams::build(ModelConfig::new(5, 8, 16, HeadKind::Cam, 1)).unwrap();
        let out = p.forward_cam(&rand_tensor(&[1, 1, 16, 16], 5, 1.0)).unwrap();
        let f = &out.features;
        let means: Vec<f64> = (0..5).map(|y| f.data()[y * 16..(y + 1) * 16].iter().sum::<f64>() / 16.0).collect();
        let m = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = means.iter().map(|v| (v - m).exp()).sum();
        for y in 0..5 {
            assert!((out.class_posterior.data()[y] - (means[y] - m).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn head_kind_is_checked() {
        let p = ModelParams::build(ModelConfig::new(3, 4, 8, HeadKind::Cam, 0)).unwrap();
        assert!(p.forward_calm(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
        assert!(p.forward_cam(&Tensor::zeros(&[1, 1, 12, 12])).is_err());
    }

    #[test]
    fn commute_linear_gap_cases() {
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(&[i, i], 1.0);
        }
        let c = commute_linear_gap(&eye, &Tensor::full(&[3, 4, 4], 1.5)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));

        let z = commute_linear_gap(&Tensor::zeros(&[2, 3]), &rand_tensor(&[3, 5, 5], 1, 1.0)).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);

        let w = rand_tensor(&[4, 6], 2, 1.0);
        let f = rand_tensor(&[6, 5, 5], 3, 1.0);
        let pooled: Vec<f64> = (0..6).map(|l| f.data()[l * 25..(l + 1) * 25].iter().sum::<f64>() / 25.0).collect();
        let mut conv_first = vec![0.0; 4];
        for (y, slot) in conv_first.iter_mut().enumerate() {
            for p in 0..25 {
                *slot += (0..6).map(|l| w.at(&[y, l]) * f.data()[l * 25 + p]).sum::<f64>() / 25.0;
            }
        }
        let r = commute_linear_gap(&w, &f).unwrap();
        for y in 0..4 {
            let lin: f64 = (0..6).map(|l| w.at(&[y, l]) * pooled[l]).sum();
            assert!((r.data()[y] - lin).abs() < 1e-12);
            assert!((r.data()[y] - conv_first[y]).abs() < 1e-12);
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = calm_cfg();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::from_kv("C=2\nL=4\n").is_err());
    }
}
