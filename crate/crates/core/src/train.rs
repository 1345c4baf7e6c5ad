//! Loss, optimizer, patch sampling and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Image, Unit, ViewGeometry};
use crate::nn::{
    is_running_stat, Model, ModelConfig, ModelInput, ModelParams, ModelVariant, NormMode, Real,
    RenormClip, Tensor,
};
use crate::phantom::{noise_seed, Phantom};
use crate::physics::{simulate_sinogram, NoiseSpec, PhysicsConstants, HU_PER_WATER};
use crate::sbp::{build_sbp, fbp_hu, normalize_for_network, SbpOptions};

const TRANSFER_SCALE: f64 = 2000.0;

/// `f(x) = x/(|x|+2000)` for an HU value.
pub fn transfer_f(x: f64) -> f64 {
    x / (x.abs() + TRANSFER_SCALE)
}

/// `f'(x) = 2000/(|x|+2000)²`.
pub fn transfer_f_derivative(x: f64) -> f64 {
    let d = x.abs() + TRANSFER_SCALE;
    TRANSFER_SCALE / (d * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

fn check_loss_inputs(x_true: &Image, x_hat: &Image) -> Result<()> {
    if x_true.side() != x_hat.side() {
        return Err(invalid!(
            "loss needs equal shapes, got {0}x{0} and {1}x{1}",
            x_true.side(),
            x_hat.side()
        ));
    }
    if x_true.unit() != Unit::Hu || x_hat.unit() != Unit::Hu {
        return Err(invalid!("loss inputs must be HU images"));
    }
    Ok(())
}

/// `Σ (f(x_true) − f(x̂))²`, divided by the pixel count for [`Reduction::Mean`].
pub fn loss_forward(x_true: &Image, x_hat: &Image, reduction: Reduction) -> Result<f64> {
    check_loss_inputs(x_true, x_hat)?;
    let sum: f64 = x_true
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(t, h)| (transfer_f(*t) - transfer_f(*h)).powi(2))
        .sum();
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / x_true.data().len() as f64,
    })
}

/// `∂L/∂x̂`, HU-tagged.
pub fn loss_backward(x_true: &Image, x_hat: &Image, reduction: Reduction) -> Result<Image> {
    check_loss_inputs(x_true, x_hat)?;
    let norm = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / x_true.data().len() as f64,
    };
    let grad = x_true
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(t, h)| 2.0 * (transfer_f(*h) - transfer_f(*t)) * transfer_f_derivative(*h) * norm)
        .collect();
    Image::from_vec(x_true.side(), grad, Unit::Hu)
}

/// Mean loss of a water-unit network output against HU targets, and its
/// gradient with respect to the output.
fn output_loss<T: Real>(target_hu: &[f64], out_water: &[T]) -> (f64, Vec<T>) {
    let n = target_hu.len() as f64;
    let mut loss = 0.0;
    let grad = target_hu
        .iter()
        .zip(out_water)
        .map(|(t, y)| {
            let h = y.as_f64() * HU_PER_WATER;
            let diff = transfer_f(h) - transfer_f(*t);
            loss += diff * diff;
            T::from_f64(2.0 * diff * transfer_f_derivative(h) * HU_PER_WATER / n)
        })
        .collect();
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Moment estimates for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let mut m = ModelParams::new();
        for (name, t) in params.iter().filter(|(n, _)| !is_running_stat(n)) {
            m.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            config,
        }
    }
}

/// Bias-corrected Adam update of every parameter tracked by `state`.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.m.check_same_layout(grads)?;
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (k1, k2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::from_f64(1.0 / (1.0 - c.beta1.powi(t)));
    let corr2 = T::from_f64(1.0 / (1.0 - c.beta2.powi(t)));
    let lr = T::from_f64(c.learning_rate);
    let eps = T::from_f64(c.epsilon);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(invalid!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + k1 * *g;
            *v = b2 * *v + k2 * *g * *g;
            *p -= lr * (*m * corr1) / ((*v * corr2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Network input (water units, `(N, N, C)`) and HU ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Tensor<f64>,
    pub target: Image,
}

/// Reconstructs the input a variant consumes from a measured sinogram:
/// the FBP image for `FbpCnn`, the SBP slices otherwise.
pub fn network_input(
    variant: ModelVariant,
    sino: &crate::geometry::Sinogram,
    geom: &ViewGeometry,
    phys: &PhysicsConstants,
    sbp: SbpOptions,
) -> Result<Tensor<f64>> {
    match variant {
        ModelVariant::FbpCnn => {
            let img = normalize_for_network(&fbp_hu(sino, geom, phys)?)?;
            let n = img.side();
            Tensor::try_from_vec(vec![n, n, 1], img.into_data())
        }
        ModelVariant::SbpCnn | ModelVariant::RsbpCnn => {
            Ok(normalize_for_network(&build_sbp(sino, geom, phys, sbp)?)?.to_channels())
        }
    }
}

/// Simulates each phantom (noise seeded by [`noise_seed`] when `noisy`) and
/// builds its training pair.
pub fn prepare_pairs(
    phantoms: &[Phantom],
    variant: ModelVariant,
    geom: &ViewGeometry,
    phys: &PhysicsConstants,
    noisy: bool,
    sbp: SbpOptions,
) -> Result<Vec<TrainingPair>> {
    phantoms
        .iter()
        .map(|p| {
            let noise = if noisy {
                NoiseSpec::seeded(noise_seed(p.seed))
            } else {
                NoiseSpec::off()
            };
            let sino = simulate_sinogram(&p.image, geom, phys, noise)?;
            Ok(TrainingPair {
                input: network_input(variant, &sino, geom, phys, sbp)?,
                target: p.image.clone(),
            })
        })
        .collect()
}

/// Random `patch_in` input window and the concentric `patch_out` target.
pub fn sample_patch(
    pair: &TrainingPair,
    patch_in: usize,
    patch_out: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f64>, Image)> {
    let shape = pair.input.shape();
    if shape.len() != 3 || shape[0] != shape[1] || shape[0] != pair.target.side() {
        return Err(invalid!(
            "input {:?} does not match a {}x{} target",
            shape,
            pair.target.side(),
            pair.target.side()
        ));
    }
    if patch_out > patch_in || (patch_in - patch_out) % 2 != 0 {
        return Err(invalid!(
            "target side {patch_out} must be at most the input side {patch_in} with an even difference"
        ));
    }
    let (n, c) = (shape[0], shape[2]);
    if patch_in > n || patch_out == 0 {
        return Err(invalid!("patch side {patch_in} does not fit a {n}x{n} image"));
    }
    let top = rng.random_range(0..=n - patch_in);
    let left = rng.random_range(0..=n - patch_in);
    let mut data = Vec::with_capacity(patch_in * patch_in * c);
    for r in top..top + patch_in {
        let start = (r * n + left) * c;
        data.extend_from_slice(&pair.input.data()[start..start + patch_in * c]);
    }
    let m = (patch_in - patch_out) / 2;
    Ok((
        Tensor::from_vec(vec![patch_in, patch_in, c], data),
        pair.target.crop(top + m, left + m, patch_out)?,
    ))
}

fn default_epochs() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_in: usize,
    pub patch_out: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop after this many optimizer steps, running more epochs than
    /// `epochs` if needed.
    pub max_steps: Option<usize>,
    /// Checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_interval: usize,
    pub momentum: f64,
    /// Fraction of all steps over which the renormalization limits ramp up.
    pub warmup_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: 4,
            patch_in: 48,
            patch_out: 30,
            seed: 0,
            learning_rate: AdamConfig::default().learning_rate,
            beta1: AdamConfig::default().beta1,
            beta2: AdamConfig::default().beta2,
            epsilon: AdamConfig::default().epsilon,
            max_steps: None,
            checkpoint_interval: 0,
            momentum: 0.99,
            warmup_fraction: 1.0 / 3.0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch size must be at least 1"));
        }
        if model.output_side(self.patch_in) != Some(self.patch_out) {
            return Err(invalid!(
                "patch sizes {} -> {} do not fit a depth-{} U-Net (margin {} per side)",
                self.patch_in,
                self.patch_out,
                model.depth,
                model.margin()
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("warmup fraction and momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        self.max_steps
            .unwrap_or(self.epochs * self.steps_per_epoch(n_items))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub history: Vec<LossRecord>,
}

/// `step,epoch,loss` lines with a header.
pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
    }
    out
}

fn batch_tensor<T: Real>(patches: &[Tensor<f64>]) -> Result<Tensor<T>> {
    Ok(Tensor::stack(patches)?.cast())
}

/// Trains `model` on `pairs`. The order of items is reshuffled every epoch
/// and one random patch is drawn per item; both streams derive from
/// `cfg.seed`. `checkpoint` sees the parameters every `checkpoint_interval`
/// steps.
pub fn train_loop<T: Real>(
    mut model: Model<T>,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut checkpoint: impl FnMut(usize, &ModelParams<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    if pairs.is_empty() {
        return Err(invalid!("training needs at least one item"));
    }
    let model_cfg = *model.config();
    cfg.validate(&model_cfg)?;
    let channels = match model_cfg.variant {
        ModelVariant::FbpCnn => 1,
        ModelVariant::SbpCnn | ModelVariant::RsbpCnn => model_cfg.n_views,
    };
    if let Some(p) = pairs.iter().find(|p| p.input.shape().get(2) != Some(&channels)) {
        return Err(invalid!(
            "{} with {} views expects {channels} input channels, got shape {:?}",
            model_cfg.variant,
            model_cfg.n_views,
            p.input.shape()
        ));
    }
    let total = cfg.total_steps(pairs.len());
    let warmup = (cfg.warmup_fraction * total as f64).round() as usize;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut patch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    patch_rng.set_stream(2);
    let mut adam = AdamState::new(model.params(), cfg.adam());
    let mut history = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    let diverged = |step, epoch, history: &Vec<LossRecord>| Error::Divergence {
        step,
        epoch,
        last_finite_loss: history.last().map(|r: &LossRecord| r.loss),
    };
    while step < total {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len() * cfg.patch_out * cfg.patch_out);
            for &i in batch {
                let (x, t) = sample_patch(&pairs[i], cfg.patch_in, cfg.patch_out, &mut patch_rng)?;
                inputs.push(x);
                targets.extend_from_slice(t.data());
            }
            let x = ModelInput::for_variant(model_cfg.variant, batch_tensor::<T>(&inputs)?)?;
            let mode = NormMode::Train {
                clip: RenormClip::warmup(step, warmup),
                momentum: cfg.momentum,
            };
            let y = match model.forward(&x, mode) {
                Ok(y) => y,
                Err(Error::NonFinite { .. }) => return Err(diverged(step, epoch, &history)),
                Err(e) => return Err(e),
            };
            let (loss, grad) = output_loss(&targets, y.data());
            if !loss.is_finite() {
                return Err(diverged(step, epoch, &history));
            }
            let grads = match model.backward(&Tensor::from_vec(y.shape().to_vec(), grad)) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Err(diverged(step, epoch, &history)),
                Err(e) => return Err(e),
            };
            model.commit_running_stats()?;
            adam_step(model.params_mut(), &grads, &mut adam)?;
            if model.params().check_finite().is_err() {
                return Err(diverged(step, epoch, &history));
            }
            history.push(LossRecord { step, epoch, loss });
            step += 1;
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                checkpoint(step, model.params())?;
            }
        }
        epoch += 1;
    }
    Ok(TrainOutcome { model, history })
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn train<T: Real>(
    pairs: &[TrainingPair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let model = Model::init(*model_cfg, cfg.seed)?;
    train_loop(model, pairs, cfg, |_, _| Ok(()))
}
