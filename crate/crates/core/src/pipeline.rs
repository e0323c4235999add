//! Glue between a dataset, a trained model and the evaluation protocols:
//! image-resolution maps for every map kind, batch prediction, and the
//! per-protocol map sets.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::attribution::{
    cam_map, calm_attribution, calm_counterfactual, calm_saliency, calm_subset, gradient_map, upsample_bilinear,
    CamNorm, GradientSettings, MapKind,
};
use crate::error::{Error, Result};
use crate::evaluation::{superset_from_taxonomy, AnnotatedSample, Taxonomy};
use crate::model::{HeadKind, ModelConfig, ModelParams};
use crate::seed::named_seed;
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainingState};

/// Which classes a map is computed for.
#[derive(Clone, Debug, PartialEq)]
pub enum MapTarget {
    Class(usize),
    Pair(usize, usize),
    Subset(Vec<usize>),
    /// Class-agnostic maps such as the saliency.
    None,
}

fn head_check(params: &ModelParams, kind: MapKind, want: HeadKind) -> Result<()> {
    let have = params.config().head;
    if have != want {
        return Err(Error::Argument(format!("{kind} needs a {want} model, checkpoint has a {have} head")));
    }
    Ok(())
}

/// Computes a `[H0, W0]` map of `kind` for `image`.
pub fn image_map(
    params: &ModelParams,
    kind: MapKind,
    image: &Tensor,
    target: &MapTarget,
    settings: &GradientSettings,
) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::dim("image_map", format!("image shape {s:?}")));
    }
    let size = (s[2], s[3]);
    let class = |what: &str| match target {
        MapTarget::Class(c) => Ok(*c),
        other => Err(Error::Argument(format!("{what} needs a single class, got {other:?}"))),
    };
    match kind {
        MapKind::CalmAttr | MapKind::CalmSaliency | MapKind::CalmSubset | MapKind::CalmCounterfactual => {
            head_check(params, kind, HeadKind::Calm)?;
            let jm = params.forward_calm(image)?;
            let grid = match (kind, target) {
                (MapKind::CalmAttr, _) => calm_attribution(&jm, class("calm_attr")?)?,
                (MapKind::CalmSaliency, _) => calm_saliency(&jm),
                (MapKind::CalmSubset, MapTarget::Subset(cs)) => calm_subset(&jm, cs)?,
                (MapKind::CalmSubset, MapTarget::Class(c)) => calm_subset(&jm, &[*c])?,
                (MapKind::CalmCounterfactual, MapTarget::Pair(a, b)) => calm_counterfactual(&jm, *a, *b)?,
                (k, t) => return Err(Error::Argument(format!("{k} cannot target {t:?}"))),
            };
            upsample_bilinear(&grid, size)
        }
        MapKind::CamMax | MapKind::CamMinmax => {
            head_check(params, kind, HeadKind::Cam)?;
            let norm = if kind == MapKind::CamMax { CamNorm::Max } else { CamNorm::MinMax };
            let out = params.forward_cam(image)?;
            upsample_bilinear(&cam_map(&out.features, class(kind.name())?, norm)?, size)
        }
        _ => gradient_map(params, kind, image, class(kind.name())?, settings),
    }
}

/// The per-class map a model of this head produces by default.
pub fn default_kind(head: HeadKind) -> MapKind {
    match head {
        HeadKind::Calm => MapKind::CalmAttr,
        HeadKind::Cam => MapKind::CamMax,
    }
}

pub fn predictions(params: &ModelParams, samples: &[AnnotatedSample]) -> Result<Vec<usize>> {
    samples.par_iter().map(|s| params.predict(&s.image)).collect()
}

pub fn accuracy(params: &ModelParams, samples: &[AnnotatedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("accuracy of an empty sample set".into()));
    }
    let preds = predictions(params, samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// `maps[i][y]`: map of class `y` for `samples[i]`.
pub fn class_maps(
    params: &ModelParams,
    kind: MapKind,
    samples: &[AnnotatedSample],
    settings: &GradientSettings,
) -> Result<Vec<Vec<Tensor>>> {
    let classes = params.config().classes;
    samples
        .par_iter()
        .map(|s| {
            (0..classes)
                .map(|y| image_map(params, kind, &s.image, &MapTarget::Class(y), settings))
                .collect()
        })
        .collect()
}

/// One map per sample, for its ground-truth class.
pub fn label_maps(
    params: &ModelParams,
    kind: MapKind,
    samples: &[AnnotatedSample],
    settings: &GradientSettings,
) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .map(|s| image_map(params, kind, &s.image, &MapTarget::Class(s.label), settings))
        .collect()
}

/// Ground-truth-class CALM maps, optionally summed over the class's
/// taxonomy superset.
pub fn wsol_maps(
    params: &ModelParams,
    samples: &[AnnotatedSample],
    taxonomy: &Taxonomy,
    superset: bool,
) -> Result<Vec<Tensor>> {
    let settings = GradientSettings::default();
    samples
        .par_iter()
        .map(|s| {
            let classes: BTreeSet<usize> = if superset {
                superset_from_taxonomy(taxonomy, s.label)?
            } else {
                BTreeSet::from([s.label])
            };
            let target = MapTarget::Subset(classes.into_iter().collect());
            image_map(params, MapKind::CalmSubset, &s.image, &target, &settings)
        })
        .collect()
}

/// Trains a fresh model on `samples`. Initialization and shuffling draw
/// from the `init` and `shuffle` streams of `seed`.
pub fn fit(
    samples: &[AnnotatedSample],
    classes: usize,
    channels: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingState> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("no training samples".into()))?;
    let (h, w) = first.size();
    if h != w {
        return Err(Error::Argument(format!("images must be square, got {h}x{w}")));
    }
    let mut config = ModelConfig::new(classes, channels, h, cfg.objective.head(), named_seed(seed, "init"));
    config.in_channels = first.image.shape()[1];
    let init = ModelParams::build(config)?;
    let pairs: Vec<(Tensor, usize)> = samples.iter().map(|s| (s.image.clone(), s.label)).collect();
    let cfg = TrainConfig {
        seed: named_seed(seed, "shuffle"),
        ..cfg.clone()
    };
    train(&pairs, init, &cfg)
}

/// Number of classes a dataset declares.
pub fn dataset_classes(data: &Dataset) -> Result<usize> {
    let from_attrs = data.classes();
    let from_labels = data.samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let n = from_attrs.max(from_labels);
    if n < 2 {
        return Err(Error::Argument(format!("dataset has {n} classes, need at least 2")));
    }
    Ok(n)
}
