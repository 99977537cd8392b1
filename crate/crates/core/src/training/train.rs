//! Adam training loop over randomly cropped sample patches.
//!
//! Randomness is derived from `(seed, epoch)` for the sample order and from
//! `(seed, draw)` for crop positions, so a run resumed from a checkpoint at
//! step `k` replays exactly what the uninterrupted run would have done.
//! Parameters and Adam moments are kept on the `f32` grid that checkpoints
//! store, which makes save/resume lossless.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::image::Image;
use crate::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::fixer::{fixer_inputs, graph, round_to_f32, FixerModel};
use crate::tensor::Tensor;

use super::curate::TrainingSample;
use super::loss::{loss_graph, total_loss, LossConfig, LossValue, PerceptualBackend, PerceptualNet};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 1,
            max_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the loss history (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub l2: f64,
    pub perceptual: f64,
}

/// Loss history as CSV with header `step,loss,l2,perceptual`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,l2,perceptual\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", r.step, r.loss, r.l2, r.perceptual);
    }
    s
}

/// Model, Adam moments and the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: FixerModel,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl TrainState {
    pub fn new(model: FixerModel) -> Self {
        let zeros: Vec<Tensor> = model
            .params()
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            model,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model);
        ck.set_meta("step", self.step);
        for (name, (m, v)) in self.model.params().names().iter().zip(self.m.iter().zip(&self.v)) {
            ck.push(format!("{ADAM_M}{name}"), m.clone());
            ck.push(format!("{ADAM_V}{name}"), v.clone());
        }
        ck
    }

    /// Restores a training state. Plain model checkpoints (no optimizer
    /// tensors) start with zero moments at step 0.
    pub fn from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Self> {
        let (model, rest) = model_from_checkpoint(ck, path)?;
        let mut state = TrainState::new(model);
        let Some(step) = rest.meta("step") else {
            return Ok(state);
        };
        state.step = step
            .parse()
            .map_err(|_| Error::format(path, format!("bad step '{step}'")))?;
        let names = state.model.params().names().to_vec();
        for (key, t) in rest.into_tensors() {
            let (slot, name) = if let Some(n) = key.strip_prefix(ADAM_M) {
                (&mut state.m, n)
            } else if let Some(n) = key.strip_prefix(ADAM_V) {
                (&mut state.v, n)
            } else {
                return Err(Error::format(path, format!("unexpected tensor '{key}'")));
            };
            let i = names
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::format(path, format!("optimizer tensor for unknown '{name}'")))?;
            if slot[i].shape() != t.shape() {
                return Err(Error::format(path, format!("optimizer tensor '{key}' has the wrong shape")));
            }
            slot[i] = t;
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_checkpoint(Checkpoint::load(path)?, path)
    }
}

const ORDER_STREAM: u64 = 0x6f72_6465;
const CROP_STREAM: u64 = 0x6372_6f70;

fn sample_at(seed: u64, n: usize, draw: usize) -> usize {
    let epoch = draw / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_STREAM);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[draw % n]
}

fn crop_at(seed: u64, draw: usize, dims: (usize, usize), patch: (usize, usize)) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CROP_STREAM);
    rng.set_stream(draw as u64);
    let top = rng.random_range(0..=dims.0 - patch.0);
    let left = rng.random_range(0..=dims.1 - patch.1);
    (top, left)
}

fn check_inputs(model: &FixerModel, samples: &[TrainingSample], loss: &LossConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if loss.perceptual_backend != PerceptualBackend::RandomFeatures {
        return Err(Error::Config(
            "training needs the built-in perceptual backend (external metrics are not differentiable)".into(),
        ));
    }
    let d = model.config().divisor();
    for s in samples {
        let (h, w) = s.dims();
        if s.i_gt.channels() != model.config().in_channels {
            return Err(Error::Shape(format!(
                "sample {}:{} has {} channels, model expects {}",
                s.scene_id,
                s.frame_index,
                s.i_gt.channels(),
                model.config().in_channels
            )));
        }
        let (ph, pw) = loss.patch_size.unwrap_or((h, w));
        if ph % d != 0 || pw % d != 0 {
            return Err(Error::Config(format!(
                "patch {ph}x{pw} is not divisible by {d}; choose a multiple of {d}"
            )));
        }
        if ph > h || pw > w {
            return Err(Error::InvalidInput(format!(
                "patch {ph}x{pw} exceeds sample {}:{} of size {h}x{w}",
                s.scene_id, s.frame_index
            )));
        }
    }
    Ok(())
}

/// The crop of sample draw `draw` as network tensors.
fn patch_tensors(samples: &[TrainingSample], loss: &LossConfig, seed: u64, draw: usize) -> Result<[Tensor; 4]> {
    let s = &samples[sample_at(seed, samples.len(), draw)];
    let dims = s.dims();
    let (ph, pw) = loss.patch_size.unwrap_or(dims);
    let (top, left) = crop_at(seed, draw, dims, (ph, pw));
    let deg = s.i_deg.crop(top, left, ph, pw)?;
    let war = s.i_warped.crop(top, left, ph, pw)?;
    let gt = s.i_gt.crop(top, left, ph, pw)?;
    let (d, w, v) = fixer_inputs(&deg, &war);
    Ok([d, w, v, gt.to_tensor()])
}

/// Runs Adam steps until `optim.max_steps` steps have been completed in
/// total, calling `on_step` after each. On a non-finite loss or parameter
/// the state before the failing step is written to `diagnostic` (if given)
/// and [`Error::Diverged`] is returned.
pub fn train_state(
    state: &mut TrainState,
    samples: &[TrainingSample],
    loss: &LossConfig,
    optim: &OptimConfig,
    diagnostic: Option<&Path>,
    mut on_step: impl FnMut(&TrainState, &LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    loss.validate()?;
    optim.validate()?;
    if state.step >= optim.max_steps {
        return Ok(Vec::new());
    }
    check_inputs(&state.model, samples, loss)?;
    let net = PerceptualNet::standard();
    let mut history = Vec::with_capacity(optim.max_steps - state.step);
    let n_params = state.model.params().len();
    while state.step < optim.max_steps {
        let step = state.step;
        let mut grads: Vec<Option<Tensor>> = vec![None; n_params];
        let mut rec = LossRecord {
            step: step + 1,
            loss: 0.0,
            l2: 0.0,
            perceptual: 0.0,
        };
        let inv_b = 1.0 / optim.batch_size as f64;
        for b in 0..optim.batch_size {
            let draw = step * optim.batch_size + b;
            let [deg, war, valid, gt] = patch_tensors(samples, loss, optim.seed, draw)?;
            let (value, gr) = tensor_loss_and_gradients(&state.model, &net, &deg, &war, &valid, &gt, loss.lambda_lpips);
            rec.loss += inv_b * value.total;
            rec.l2 += inv_b * value.l2;
            rec.perceptual += inv_b * value.perceptual;
            if !rec.loss.is_finite() {
                break;
            }
            for (acc, t) in grads.iter_mut().zip(gr) {
                match (acc.as_mut(), t) {
                    (Some(a), Some(t)) => a.add_assign(&t),
                    (None, Some(t)) => *acc = Some(t),
                    _ => {}
                }
            }
        }
        if !rec.loss.is_finite() {
            return Err(diverged(state, diagnostic, step + 1, "loss is not finite"));
        }
        let next = adam_update(state, &grads, inv_b, optim);
        if !next.model.params().tensors().iter().all(Tensor::all_finite) {
            return Err(diverged(state, diagnostic, step + 1, "parameters became non-finite"));
        }
        *state = next;
        on_step(state, &rec)?;
        history.push(rec);
    }
    Ok(history)
}

fn tensor_loss_and_gradients(
    model: &FixerModel,
    net: &PerceptualNet,
    deg: &Tensor,
    war: &Tensor,
    valid: &Tensor,
    gt: &Tensor,
    lambda: f64,
) -> (LossValue, Vec<Option<Tensor>>) {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let out = graph::forward(&mut g, model, &p, deg, war, valid);
    let (total, l2, perc) = loss_graph(&mut g, net, out, gt, lambda);
    let value = LossValue {
        total: g.value(total).data()[0],
        l2: g.value(l2).data()[0],
        perceptual: g.value(perc).data()[0],
    };
    if !value.total.is_finite() {
        return (value, Vec::new());
    }
    let mut gr = g.backward(total);
    (value, p.iter().map(|&v| gr.take(v)).collect())
}

fn image_inputs(model: &FixerModel, degraded: &Image, warped: &Image, gt: &Image) -> Result<[Tensor; 4]> {
    if !degraded.same_dims(warped) || !degraded.same_dims(gt) {
        return Err(Error::Shape("degraded, warped and target images differ in size".into()));
    }
    let d = model.config().divisor();
    let (h, w) = gt.dims();
    if h % d != 0 || w % d != 0 {
        return Err(Error::Indivisible {
            what: "training image",
            height: h,
            width: w,
            divisor: d,
        });
    }
    let (a, b, c) = fixer_inputs(degraded, warped);
    Ok([a, b, c, gt.to_tensor()])
}

/// Loss of `fix(degraded, warped)` against `gt`.
pub fn fix_loss(model: &FixerModel, degraded: &Image, warped: &Image, gt: &Image, loss: &LossConfig) -> Result<LossValue> {
    let out = model.fix(degraded, warped)?;
    total_loss(&out, gt, loss)
}

/// Loss of `fix(degraded, warped)` against `gt` and its gradient for every
/// trainable parameter (`None` for frozen ones), in parameter order.
pub fn fix_loss_gradients(
    model: &FixerModel,
    degraded: &Image,
    warped: &Image,
    gt: &Image,
    loss: &LossConfig,
) -> Result<(LossValue, Vec<Option<Tensor>>)> {
    loss.validate()?;
    if loss.perceptual_backend != PerceptualBackend::RandomFeatures {
        return Err(Error::Config("external perceptual metrics are not differentiable".into()));
    }
    let [d, w, v, t] = image_inputs(model, degraded, warped, gt)?;
    let (value, grads) = tensor_loss_and_gradients(model, &PerceptualNet::standard(), &d, &w, &v, &t, loss.lambda_lpips);
    if !value.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((value, grads))
}

fn diverged(state: &TrainState, diagnostic: Option<&Path>, step: usize, reason: &str) -> Error {
    let mut reason = reason.to_string();
    if let Some(p) = diagnostic {
        match state.save(p) {
            Ok(()) => reason.push_str(&format!("; state before the step saved to {}", p.display())),
            Err(e) => reason.push_str(&format!("; diagnostic checkpoint failed: {e}")),
        }
    }
    Error::Diverged { step, reason }
}

fn adam_update(state: &TrainState, grads: &[Option<Tensor>], scale: f64, o: &OptimConfig) -> TrainState {
    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let bc1 = 1.0 - o.beta1.powi(t);
    let bc2 = 1.0 - o.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !state.model.is_trainable(i) {
            continue;
        }
        let m = next.m[i].data_mut();
        let v = next.v[i].data_mut();
        let p = next.model.params_mut().tensors_mut()[i].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k] * scale;
            m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * gk;
            v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= o.learning_rate * mh / (vh.sqrt() + o.eps);
        }
        round_to_f32(&mut next.m[i]);
        round_to_f32(&mut next.v[i]);
        round_to_f32(&mut next.model.params_mut().tensors_mut()[i]);
    }
    next
}

/// Trains a fresh optimizer state for `optim.max_steps` steps.
pub fn train(
    model: FixerModel,
    samples: &[TrainingSample],
    loss: &LossConfig,
    optim: &OptimConfig,
) -> Result<(FixerModel, Vec<LossRecord>)> {
    let mut state = TrainState::new(model);
    let history = train_state(&mut state, samples, loss, optim, None, |_, _| Ok(()))?;
    Ok((state.model, history))
}
