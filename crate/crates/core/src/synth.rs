//! Deterministic "patch-cue" images: each class is a pair of small glyphs, one
//! body glyph shared with other classes and one discriminative glyph, drawn
//! at random positions over a textured background.
//!
//! Dataset directory layout:
//!
//! ```text
//! spec.txt                 generator settings, key<TAB>value
//! annotations.txt          records as read by `evaluation::read_annotations`
//! images/<split>/NNNNN.tnsr
//! masks/<split>/NNNNN.tnsr foreground masks, same relative name as the image
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{
    read_annotations, write_annotations, AnnotatedSample, Annotations, BBox, ClassAttributes, Keypoint, Taxonomy,
};
use crate::seed::derive_seed;
use crate::tensor::{io, Tensor};

pub const SPEC_FILE: &str = "spec.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.txt";

const PLACEMENT_RETRIES: usize = 1000;
const BACKGROUND_MAX: f64 = 0.3;
const INK: f64 = 1.0;

/// Named glyph shapes, drawn on an `n x n` grid.
pub const GLYPH_NAMES: [&str; 8] = ["cross", "ring", "diag", "x", "tee", "ell", "aitch", "checker"];

fn glyph_on(id: usize, n: usize, r: usize, c: usize) -> bool {
    let m = n / 2;
    match id {
        0 => r == m || c == m,
        1 => r == 0 || c == 0 || r == n - 1 || c == n - 1,
        2 => r == c,
        3 => r == c || r + c == n - 1,
        4 => r == 0 || c == m,
        5 => c == 0 || r == n - 1,
        6 => c == 0 || c == n - 1 || r == m,
        7 => (r + c) % 2 == 0,
        _ => unreachable!("glyph id checked by PatchCueSpec::validate"),
    }
}

/// Binary `[n, n]` pattern of glyph `id`.
pub fn glyph(id: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| f64::from(u8::from(glyph_on(id, n, i / n, i % n))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    /// Split of a dataset-relative image path.
    pub fn of_path(path: &str) -> Option<Split> {
        [Split::Train, Split::Eval]
            .into_iter()
            .find(|s| path.starts_with(&format!("images/{}/", s.dir())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchCueSpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub glyph_size: usize,
    /// Side of the square window holding both glyphs of an image.
    pub object_size: usize,
    pub vocabulary: usize,
    pub glyphs_per_class: usize,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub seed: u64,
}

impl Default for PatchCueSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            image_size: 32,
            glyph_size: 5,
            object_size: 16,
            vocabulary: 6,
            glyphs_per_class: 2,
            noise_std: 0.05,
            train_per_class: 250,
            eval_per_class: 50,
            seed: 0,
        }
    }
}

impl PatchCueSpec {
    pub fn samples_per_class(&self) -> usize {
        self.train_per_class + self.eval_per_class
    }

    /// Fewest body glyphs leaving enough discriminative glyphs for every class.
    pub fn body_glyphs(&self) -> Option<usize> {
        (1..self.vocabulary).find(|&b| b * (self.vocabulary - b) >= self.n_classes)
    }

    /// `(body, discriminative)` glyph ids of `class`.
    pub fn class_glyphs(&self, class: usize) -> (usize, usize) {
        let b = self.body_glyphs().expect("validated spec");
        let d = self.vocabulary - b;
        (class / d, b + class % d)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.glyphs_per_class != 2 {
            return fail(format!(
                "classes are a body glyph plus a discriminative glyph, got glyphs_per_class = {}",
                self.glyphs_per_class
            ));
        }
        if self.glyph_size < 3 || 2 * self.glyph_size >= self.image_size {
            return fail(format!(
                "glyph size {} must be at least 3 and below half the image size {}",
                self.glyph_size, self.image_size
            ));
        }
        if self.object_size < 2 * self.glyph_size + 1 || self.object_size > self.image_size {
            return fail(format!(
                "object size {} must fit two glyphs of size {} and lie within the image",
                self.object_size, self.glyph_size
            ));
        }
        if self.vocabulary > GLYPH_NAMES.len() {
            return fail(format!("vocabulary {} exceeds the {} known glyphs", self.vocabulary, GLYPH_NAMES.len()));
        }
        if self.body_glyphs().is_none() {
            return fail(format!(
                "{} glyphs cannot form {} distinct body/discriminative pairs",
                self.vocabulary, self.n_classes
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be non-negative", self.noise_std));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("n_classes", self.n_classes.to_string()),
            ("image_size", self.image_size.to_string()),
            ("glyph_size", self.glyph_size.to_string()),
            ("object_size", self.object_size.to_string()),
            ("vocabulary", self.vocabulary.to_string()),
            ("glyphs_per_class", self.glyphs_per_class.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("eval_per_class", self.eval_per_class.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            writeln!(s, "{k}\t{v}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: source.into(),
                line: i + 1,
                msg: "expected key<TAB>value".into(),
            })?;
            kv.insert(k.to_string(), (i + 1, v.to_string()));
        }
        fn field<T: std::str::FromStr>(kv: &BTreeMap<String, (usize, String)>, key: &str, source: &str) -> Result<T> {
            let (line, v) = kv.get(key).ok_or_else(|| Error::Parse {
                path: source.into(),
                line: 0,
                msg: format!("missing key {key}"),
            })?;
            v.parse().map_err(|_| Error::Parse {
                path: source.into(),
                line: *line,
                msg: format!("invalid {key} '{v}'"),
            })
        }
        let spec = Self {
            n_classes: field(&kv, "n_classes", source)?,
            image_size: field(&kv, "image_size", source)?,
            glyph_size: field(&kv, "glyph_size", source)?,
            object_size: field(&kv, "object_size", source)?,
            vocabulary: field(&kv, "vocabulary", source)?,
            glyphs_per_class: field(&kv, "glyphs_per_class", source)?,
            noise_std: field(&kv, "noise_std", source)?,
            train_per_class: field(&kv, "train_per_class", source)?,
            eval_per_class: field(&kv, "eval_per_class", source)?,
            seed: field(&kv, "seed", source)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub spec: Option<PatchCueSpec>,
    pub samples: Vec<AnnotatedSample>,
    pub attrs: ClassAttributes,
    pub taxonomy: Taxonomy,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<AnnotatedSample> {
        self.samples
            .iter()
            .filter(|s| Split::of_path(&s.path) == Some(split))
            .cloned()
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.attrs.classes().max().map_or(0, |c| c + 1)
    }
}

/// Places non-overlapping `g x g` boxes, keeping at least one background
/// pixel between them.
fn place(rng: &mut ChaCha8Rng, count: usize, size: usize, g: usize) -> Result<Vec<(usize, usize)>> {
    for _ in 0..PLACEMENT_RETRIES {
        let mut spots: Vec<(usize, usize)> = Vec::with_capacity(count);
        for _ in 0..count {
            let p = (rng.gen_range(0..=size - g), rng.gen_range(0..=size - g));
            let clear = spots
                .iter()
                .all(|q| p.0 + g < q.0 || q.0 + g < p.0 || p.1 + g < q.1 || q.1 + g < p.1);
            if !clear {
                break;
            }
            spots.push(p);
        }
        if spots.len() == count {
            return Ok(spots);
        }
    }
    Err(Error::Generation(format!(
        "could not place {count} glyphs of size {g} in a {size}x{size} image after {PLACEMENT_RETRIES} attempts"
    )))
}

fn render(spec: &PatchCueSpec, class: usize, rng: &mut ChaCha8Rng, path: String) -> Result<AnnotatedSample> {
    let (n, g) = (spec.image_size, spec.glyph_size);
    let (body, disc) = spec.class_glyphs(class);
    let (ox, oy) = (rng.gen_range(0..=n - spec.object_size), rng.gen_range(0..=n - spec.object_size));
    let spots: Vec<(usize, usize)> = place(rng, 2, spec.object_size, g)?
        .into_iter()
        .map(|(x, y)| (ox + x, oy + y))
        .collect();

    // Half per-pixel noise, half a random linear ramp, both within [0, 0.3].
    let alpha: f64 = rng.gen_range(0.0..1.0);
    let (flip_x, flip_y) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let mut pixels = Tensor::from_fn(&[n, n], |i| {
        let (r, c) = ((i / n) as f64 / (n - 1) as f64, (i % n) as f64 / (n - 1) as f64);
        let (r, c) = (if flip_y { 1.0 - r } else { r }, if flip_x { 1.0 - c } else { c });
        0.5 * rng.gen_range(0.0..BACKGROUND_MAX) + 0.5 * BACKGROUND_MAX * (alpha * c + (1.0 - alpha) * r)
    });

    let mut mask = Tensor::zeros(&[n, n]);
    let mut keypoints = Vec::new();
    let mut boxes = Vec::new();
    for (slot, (&id, &(x0, y0))) in [body, disc].iter().zip(&spots).enumerate() {
        let (mut lo, mut hi) = ((usize::MAX, usize::MAX), (0, 0));
        for r in 0..g {
            for c in 0..g {
                if glyph_on(id, g, r, c) {
                    let (y, x) = (y0 + r, x0 + c);
                    pixels.set(&[y, x], INK);
                    mask.set(&[y, x], 1.0);
                    lo = (lo.0.min(x), lo.1.min(y));
                    hi = (hi.0.max(x + 1), hi.1.max(y + 1));
                }
            }
        }
        boxes.push(BBox::new(lo.0, lo.1, hi.0, hi.1)?);
        let half = (g - 1) as f64 / 2.0;
        keypoints.push(Keypoint {
            part: slot,
            x: x0 as f64 + half,
            y: y0 as f64 + half,
            visible: true,
        });
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in pixels.data_mut() {
            *v += normal.sample(rng);
        }
    }
    let image = io::quantize(&pixels).reshape(&[1, 1, n, n])?;
    Ok(AnnotatedSample {
        path,
        image,
        label: class,
        keypoints,
        gt_boxes: boxes,
        gt_mask: Some(mask),
    })
}

fn class_structure(spec: &PatchCueSpec) -> (ClassAttributes, Taxonomy) {
    let mut attrs = ClassAttributes::default();
    let mut tax = Taxonomy::default();
    tax.add_node("root", None, false);
    let b = spec.body_glyphs().expect("validated spec");
    for id in 0..spec.vocabulary {
        attrs.attr_part.insert(id, usize::from(id >= b));
    }
    for class in 0..spec.n_classes {
        let (body, disc) = spec.class_glyphs(class);
        attrs.sets.insert(class, BTreeSet::from([body, disc]));
        let group = format!("body_{}", GLYPH_NAMES[body]);
        if !tax.nodes.contains_key(&group) {
            tax.add_node(&group, Some("root"), true);
        }
        let leaf = format!("class_{class}");
        tax.add_node(&leaf, Some(&group), false);
        tax.add_leaf(&leaf, class);
    }
    (attrs, tax)
}

/// Generates the training split followed by the evaluation split, each
/// ordered by class. Every sample draws from its own seeded stream.
pub fn generate(spec: &PatchCueSpec) -> Result<Dataset> {
    spec.validate()?;
    let (attrs, taxonomy) = class_structure(spec);
    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class());
    let mut index = 0;
    for (split, count) in [(Split::Train, spec.train_per_class), (Split::Eval, spec.eval_per_class)] {
        for class in 0..spec.n_classes {
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &[split as u64, class as u64, i as u64],
                ));
                let path = format!("images/{}/{index:05}.tnsr", split.dir());
                samples.push(render(spec, class, &mut rng, path)?);
                index += 1;
            }
        }
    }
    Ok(Dataset {
        spec: Some(spec.clone()),
        samples,
        attrs,
        taxonomy,
    })
}

/// Mask path for a dataset-relative image path.
pub fn mask_path(image_path: &str) -> String {
    match image_path.strip_prefix("images/") {
        Some(rest) => format!("masks/{rest}"),
        None => format!("masks/{image_path}"),
    }
}

pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    if let Some(spec) = &data.spec {
        fs::write(dir.join(SPEC_FILE), spec.to_text())?;
    }
    let mut ann = Annotations {
        attrs: data.attrs.clone(),
        taxonomy: data.taxonomy.clone(),
        ..Default::default()
    };
    for s in &data.samples {
        ann.images.push((s.path.clone(), s.label));
        if !s.keypoints.is_empty() {
            ann.keypoints.insert(s.path.clone(), s.keypoints.clone());
        }
        if !s.gt_boxes.is_empty() {
            ann.boxes.insert(s.path.clone(), s.gt_boxes.clone());
        }
        let image = dir.join(&s.path);
        if let Some(parent) = image.parent() {
            fs::create_dir_all(parent)?;
        }
        io::write(&image, &s.image)?;
        if let Some(mask) = &s.gt_mask {
            let mp = dir.join(mask_path(&s.path));
            if let Some(parent) = mp.parent() {
                fs::create_dir_all(parent)?;
            }
            io::write(mp, mask)?;
        }
    }
    fs::write(dir.join(ANNOTATIONS_FILE), write_annotations(&ann))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let spec_path = dir.join(SPEC_FILE);
    let spec = if spec_path.exists() {
        Some(PatchCueSpec::from_text(
            &fs::read_to_string(&spec_path)?,
            &spec_path.display().to_string(),
        )?)
    } else {
        None
    };
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut ann = read_annotations(&fs::read_to_string(&ann_path)?, &ann_path.display().to_string())?;
    let samples = ann
        .images
        .par_iter()
        .map(|(path, label)| -> Result<AnnotatedSample> {
            let mut image = io::read(dir.join(path))?;
            if image.rank() == 2 || image.rank() == 3 {
                let s = image.shape().to_vec();
                let (ch, h, w) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                image = image.reshape(&[1, ch, h, w])?;
            }
            if image.rank() != 4 || image.shape()[0] != 1 {
                return Err(Error::Format(format!("{path}: image shape {:?}", image.shape())));
            }
            let mp = dir.join(mask_path(path));
            let gt_mask = if mp.exists() { Some(io::read(mp)?) } else { None };
            Ok(AnnotatedSample {
                path: path.clone(),
                image,
                label: *label,
                keypoints: Vec::new(),
                gt_boxes: Vec::new(),
                gt_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = samples
        .into_iter()
        .map(|mut s| {
            s.keypoints = ann.keypoints.remove(&s.path).unwrap_or_default();
            s.gt_boxes = ann.boxes.remove(&s.path).unwrap_or_default();
            s
        })
        .collect();
    Ok(Dataset {
        spec,
        samples,
        attrs: ann.attrs,
        taxonomy: ann.taxonomy,
    })
}

/// Classifies by locating the best-matching body and discriminative glyph
/// templates anywhere in the image (minimum sum of squared differences
/// against the glyph drawn at full ink over a mid-background level).
pub fn nearest_template_class(spec: &PatchCueSpec, image: &Tensor) -> usize {
    let n = spec.image_size;
    let g = spec.glyph_size;
    let d = image.data();
    let bg = BACKGROUND_MAX / 2.0;
    let ssd = |id: usize| -> f64 {
        let mut best = f64::INFINITY;
        for y0 in 0..=n - g {
            for x0 in 0..=n - g {
                let mut s = 0.0;
                for r in 0..g {
                    for c in 0..g {
                        let t = if glyph_on(id, g, r, c) { INK } else { bg };
                        s += (d[(y0 + r) * n + x0 + c] - t).powi(2);
                    }
                }
                best = best.min(s);
            }
        }
        best
    };
    let b = spec.body_glyphs().expect("validated spec");
    let scores: Vec<f64> = (0..spec.vocabulary).map(ssd).collect();
    let pick = |ids: std::ops::Range<usize>| ids.min_by(|&i, &j| scores[i].total_cmp(&scores[j])).unwrap();
    let (body, disc) = (pick(0..b), pick(b..spec.vocabulary));
    (0..spec.n_classes)
        .find(|&c| spec.class_glyphs(c) == (body, disc))
        .unwrap_or(usize::MAX)
}
