//! Objectives and the SGD loop.
//!
//! The EM objective uses pseudo-targets `t_z ∝ p(label, z | x)` computed from
//! the current parameters and then held constant, so its gradient flows only
//! through the `log p(label, z | x)` term.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelParams};
use crate::tensor::{gradient_check, Tape, Tensor, Var, EPS_LOG};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    CamNll,
    CalmMl,
    CalmEm,
}

impl Objective {
    pub fn head(self) -> HeadKind {
        match self {
            Objective::CamNll => HeadKind::Cam,
            Objective::CalmMl | Objective::CalmEm => HeadKind::Calm,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::CamNll => "cam_nll",
            Objective::CalmMl => "calm_ml",
            Objective::CalmEm => "calm_em",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam_nll" => Ok(Objective::CamNll),
            "calm_ml" => Ok(Objective::CalmMl),
            "calm_em" => Ok(Objective::CalmEm),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub objective: Objective,
    /// Largest global L2 norm of a batch gradient; larger gradients are
    /// rescaled to it. `0` disables clipping.
    pub grad_clip: f64,
    /// Seeds the shuffle order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 16,
            objective: Objective::CalmEm,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default recipe for `objective`. CAM trains without gradient clipping;
    /// the CALM objectives clip at norm 1.
    pub fn for_objective(objective: Objective) -> Self {
        let grad_clip = match objective {
            Objective::CamNll => 0.0,
            Objective::CalmMl | Objective::CalmEm => 1.0,
        };
        Self { objective, grad_clip, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip {} must be non-negative", self.grad_clip)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("objective".into(), self.objective.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("grad_clip".into(), self.grad_clip.to_string()),
            ("shuffle_seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainingState {
    pub params: ModelParams,
    pub velocity: BTreeMap<String, Tensor>,
    pub step: usize,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    /// Training accuracy per epoch, measured before each update.
    pub accuracy_history: Vec<f64>,
}

impl TrainingState {
    pub fn new(params: ModelParams) -> Self {
        let velocity = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            params,
            velocity,
            step: 0,
            loss_history: Vec::new(),
            accuracy_history: Vec::new(),
        }
    }

    /// `epoch<TAB>mean_loss<TAB>train_acc` lines, epochs counted from 1.
    pub fn log_text(&self) -> String {
        self.loss_history
            .iter()
            .zip(&self.accuracy_history)
            .enumerate()
            .map(|(i, (l, a))| format!("{}\t{l:.6}\t{a:.4}\n", i + 1))
            .collect()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.log_text())?;
        Ok(())
    }
}

/// `-log p(label | x)` from a `[C]` posterior.
pub fn loss_cam_nll(tape: &mut Tape, posterior: Var, label: usize) -> Result<Var> {
    check_label(tape.value(posterior).shape()[0], label)?;
    let p = tape.select(posterior, label)?;
    let lp = tape.log_floor(p, EPS_LOG);
    Ok(tape.scale(lp, -1.0))
}

/// `-log sum_z p(label, z | x)` from a `[C,H,W]` joint.
pub fn loss_calm_ml(tape: &mut Tape, joint: Var, label: usize) -> Result<Var> {
    check_label(tape.value(joint).shape()[0], label)?;
    let row = tape.select(joint, label)?;
    let marginal = tape.sum_all(row);
    let lp = tape.log_floor(marginal, EPS_LOG);
    Ok(tape.scale(lp, -1.0))
}

/// `-sum_z t_z log p(label, z | x)` with `t` treated as a constant.
pub fn loss_calm_em(tape: &mut Tape, joint: Var, t: &Tensor, label: usize) -> Result<Var> {
    check_label(tape.value(joint).shape()[0], label)?;
    let row = tape.select(joint, label)?;
    let target = tape.leaf(t.clone());
    let lp = tape.log_floor(row, EPS_LOG);
    let weighted = tape.mul(target, lp)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, -1.0))
}

/// `t = joint[label] / sum_z joint[label, z]`, from detached values.
pub fn pseudo_targets(joint: &Tensor, label: usize) -> Result<Tensor> {
    let s = joint.shape();
    if s.len() != 3 {
        return Err(Error::dim("pseudo_targets", format!("joint shape {s:?}")));
    }
    check_label(s[0], label)?;
    let n = s[1] * s[2];
    let row = &joint.data()[label * n..(label + 1) * n];
    let total: f64 = row.iter().sum();
    if !(total >= EPS_LOG) {
        return Err(Error::Degenerate {
            op: "pseudo_targets",
            detail: format!("class {label} has joint mass {total:e}"),
        });
    }
    Tensor::new(&s[1..], row.iter().map(|v| v / total).collect())
}

/// Shannon entropy in nats; `0 log 0 = 0`.
pub fn entropy(t: &Tensor) -> f64 {
    -t.data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn check_label(classes: usize, label: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Argument(format!("label {label} out of range for {classes} classes")));
    }
    Ok(())
}

fn uniform_like(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::full(shape, 1.0 / n as f64)
}

/// Records the per-sample loss for `objective`. Returns the loss handle and
/// the predicted class.
pub fn sample_loss(
    params: &ModelParams,
    tape: &mut Tape,
    bound: &crate::model::BoundParams,
    image: &Tensor,
    label: usize,
    objective: Objective,
) -> Result<(Var, usize)> {
    let x = tape.leaf(image.clone());
    match objective {
        Objective::CamNll => {
            let out = params.forward_cam_on(tape, bound, x)?;
            let pred = tape.value(out.posterior).argmax();
            Ok((loss_cam_nll(tape, out.posterior, label)?, pred))
        }
        Objective::CalmMl | Objective::CalmEm => {
            let vars = params.forward_calm_on(tape, bound, x)?;
            let joint = tape.value(vars.joint);
            let pred = crate::model::class_posterior_of(joint).argmax();
            let loss = if objective == Objective::CalmMl {
                loss_calm_ml(tape, vars.joint, label)?
            } else {
                let t = match pseudo_targets(joint, label) {
                    Ok(t) => t,
                    Err(e) => {
                        log::warn!("{e}; using uniform pseudo-targets");
                        uniform_like(&joint.shape()[1..])
                    }
                };
                loss_calm_em(tape, vars.joint, &t, label)?
            };
            Ok((loss, pred))
        }
    }
}

/// `v <- m v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_step(state: &mut TrainingState, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "gradient of {name} is not finite at step {}",
                state.step
            )));
        }
    }
    let (lr, m, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for (name, p) in state.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Argument(format!("no gradient for {name}")))?;
        let v = state.velocity.get_mut(name).expect("velocity mirrors params");
        g.expect_same_shape(p, "sgd_step")?;
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` and returns
/// the norm before rescaling. `max_norm = 0` leaves them untouched.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Loss and parameter gradients averaged over `batch`.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[(&Tensor, usize)],
    objective: Objective,
) -> Result<(f64, usize, BTreeMap<String, Tensor>)> {
    let mut sums: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for &(image, label) in batch {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (loss, pred) = sample_loss(params, &mut tape, &bound, image, label, objective)?;
        loss_sum += tape.value(loss).item();
        correct += usize::from(pred == label);
        let mut grads = tape.backward(loss)?;
        for (name, var) in bound.iter() {
            let g = grads.take(*var);
            for (s, v) in sums.get_mut(name).expect("same names").data_mut().iter_mut().zip(g.data()) {
                *s += v;
            }
        }
    }
    let k = 1.0 / batch.len() as f64;
    for g in sums.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= k);
    }
    Ok((loss_sum * k, correct, sums))
}

/// Runs `cfg.epochs` epochs of minibatch SGD from `init`.
pub fn train(samples: &[(Tensor, usize)], init: ModelParams, cfg: &TrainConfig) -> Result<TrainingState> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if init.config().head != cfg.objective.head() {
        return Err(Error::Config(format!(
            "objective {} needs a {} head, model has {}",
            cfg.objective,
            cfg.objective.head(),
            init.config().head
        )));
    }
    let classes = init.config().classes;
    if let Some((_, bad)) = samples.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::Argument(format!("label {bad} out of range for {classes} classes")));
    }

    let mut state = TrainingState::new(init);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        let mut batches = 0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| (&samples[i].0, samples[i].1)).collect();
            let (loss, hits, mut grads) = batch_gradients(&state.params, &batch, cfg.objective)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at step {}", state.step)));
            }
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            log::trace!("step {}: gradient norm {norm:.4}", state.step);
            sgd_step(&mut state, &grads, cfg)?;
            loss_total += loss;
            correct += hits;
            batches += 1;
        }
        let mean = loss_total / batches as f64;
        let acc = correct as f64 / samples.len() as f64;
        log::info!("epoch {}: loss {mean:.4}, train acc {acc:.3}", epoch + 1);
        state.loss_history.push(mean);
        state.accuracy_history.push(acc);
    }
    Ok(state)
}

/// Worst relative error between the analytic gradient of the per-sample
/// loss and central differences, over every parameter tensor. For the EM
/// objective the pseudo-targets are fixed at `params`.
pub fn loss_gradient_check(
    params: &ModelParams,
    image: &Tensor,
    label: usize,
    objective: Objective,
    eps: f64,
) -> Result<f64> {
    let fixed_t = if objective == Objective::CalmEm {
        Some(pseudo_targets(&params.forward_calm(image)?.joint, label)?)
    } else {
        None
    };
    let mut worst = 0.0f64;
    for (name, value) in params.iter() {
        let err = gradient_check(
            |tape, p| {
                let mut bound = params.bind(tape);
                bound.replace(name, p)?;
                let x = tape.leaf(image.clone());
                match objective {
                    Objective::CamNll => {
                        let out = params.forward_cam_on(tape, &bound, x)?;
                        loss_cam_nll(tape, out.posterior, label)
                    }
                    Objective::CalmMl => {
                        let v = params.forward_calm_on(tape, &bound, x)?;
                        loss_calm_ml(tape, v.joint, label)
                    }
                    Objective::CalmEm => {
                        let v = params.forward_calm_on(tape, &bound, x)?;
                        loss_calm_em(tape, v.joint, fixed_t.as_ref().expect("set above"), label)
                    }
                }
            },
            value,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
