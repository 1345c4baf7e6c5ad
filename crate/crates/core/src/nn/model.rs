//! The three post-processing variants.
//!
//! All variants share the U-Net. `RsbpCnn` feeds the views one at a time
//! through a ConvLSTM and hands the final hidden state to the U-Net.
//! `SbpCnn` and `FbpCnn` replace the recurrence by one linear 3×3 same-padded
//! convolution to `hidden` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

use super::batch_renorm::{NormMode, RunningUpdate};
use super::conv::{conv2d_backward, conv2d_forward, Padding};
use super::conv_lstm::{
    conv_lstm_step, conv_lstm_step_backward, ConvLstmState, LstmStepCache, LstmWeights,
};
use super::unet::{
    init_unet_params, output_margin, output_size, unet_backward, unet_forward, uniform_tensor,
    UNetCache, UNetConfig,
};
use super::{ModelParams, Real, Tensor};

const UNET: &str = "unet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "FBP_CNN")]
    FbpCnn,
    #[serde(rename = "SBP_CNN")]
    SbpCnn,
    #[serde(rename = "RSBP_CNN")]
    RsbpCnn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::FbpCnn, ModelVariant::SbpCnn, ModelVariant::RsbpCnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::FbpCnn => "FBP_CNN",
            ModelVariant::SbpCnn => "SBP_CNN",
            ModelVariant::RsbpCnn => "RSBP_CNN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid!("unknown model variant {s:?}"))
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_hidden() -> usize {
    16
}
fn default_depth() -> usize {
    2
}
fn default_base_width() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub n_views: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default)]
    pub peephole: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 16 hidden channels, depth 2, widths (32, 64).
    pub fn new(variant: ModelVariant, n_views: usize) -> Self {
        ModelConfig {
            variant,
            n_views,
            hidden: default_hidden(),
            depth: default_depth(),
            base_width: default_base_width(),
            peephole: false,
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_width: self.base_width,
            in_channels: self.hidden,
        }
    }

    pub fn margin(&self) -> usize {
        output_margin(self.depth)
    }

    /// Output side for an input side, `None` if the U-Net cannot take it.
    pub fn output_side(&self, input: usize) -> Option<usize> {
        output_size(self.depth, input)
    }

    /// Channels of the network input: 1 per step for the recurrent model.
    pub fn input_channels(&self) -> usize {
        match self.variant {
            ModelVariant::FbpCnn | ModelVariant::RsbpCnn => 1,
            ModelVariant::SbpCnn => self.n_views,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(invalid!("model needs at least one view"));
        }
        if self.hidden == 0 {
            return Err(invalid!("hidden channel count must be positive"));
        }
        self.unet().validate()
    }
}

/// Network input honouring each variant's contract. Tensors are
/// `(B, H, W, C)` or `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput<T> {
    /// One FBP image, `C = 1`.
    Image(Tensor<T>),
    /// SBP slices as channels, `C = M`.
    Channels(Tensor<T>),
    /// SBP slices in view order, each with `C = 1`.
    Sequence(Vec<Tensor<T>>),
}

impl<T: Real> ModelInput<T> {
    /// Builds the input a variant expects from a stacked `(B, H, W, C)`
    /// tensor; for the recurrent model channel `j` becomes step `j`.
    pub fn for_variant(variant: ModelVariant, stacked: Tensor<T>) -> Result<Self> {
        Ok(match variant {
            ModelVariant::FbpCnn => ModelInput::Image(stacked),
            ModelVariant::SbpCnn => ModelInput::Channels(stacked),
            ModelVariant::RsbpCnn => {
                let [b, h, w, c] = stacked.dims4()?;
                let mut steps = vec![Vec::with_capacity(b * h * w); c];
                for px in stacked.data().chunks(c) {
                    for (step, v) in steps.iter_mut().zip(px) {
                        step.push(*v);
                    }
                }
                ModelInput::Sequence(
                    steps
                        .into_iter()
                        .map(|d| Tensor::from_vec(vec![b, h, w, 1], d))
                        .collect(),
                )
            }
        })
    }

    fn variant_name(&self) -> &'static str {
        match self {
            ModelInput::Image(_) => "image",
            ModelInput::Channels(_) => "channel stack",
            ModelInput::Sequence(_) => "sequence",
        }
    }
}

/// Cached activations of the layer in front of the U-Net.
#[derive(Debug, Clone)]
enum FrontCache<T> {
    Conv(Tensor<T>),
    Lstm(Vec<LstmStepCache<T>>),
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    front: FrontCache<T>,
    unet: UNetCache<T>,
}

impl<T> ForwardCache<T> {
    /// Running statistics produced by the training-mode pass.
    pub fn running_updates(&self) -> &[(String, RunningUpdate<T>)] {
        &self.unet.running_updates
    }
}

fn check_input<T: Real>(cfg: &ModelConfig, input: &ModelInput<T>) -> Result<()> {
    let mismatch = || {
        invalid!(
            "{} expects {}, got {}",
            cfg.variant,
            match cfg.variant {
                ModelVariant::FbpCnn => "a single-channel image".to_string(),
                ModelVariant::SbpCnn => format!("a {}-channel image", cfg.n_views),
                ModelVariant::RsbpCnn => format!("a sequence of {} single-channel slices", cfg.n_views),
            },
            input.variant_name()
        )
    };
    match (cfg.variant, input) {
        (ModelVariant::FbpCnn, ModelInput::Image(x)) if x.dims4()?[3] == 1 => Ok(()),
        (ModelVariant::SbpCnn, ModelInput::Channels(x)) if x.dims4()?[3] == cfg.n_views => Ok(()),
        (ModelVariant::RsbpCnn, ModelInput::Sequence(seq)) if seq.len() == cfg.n_views => {
            let first = seq[0].dims4()?;
            if first[3] != 1 {
                return Err(mismatch());
            }
            for s in seq {
                if s.dims4()? != first {
                    return Err(invalid!(
                        "sequence slices differ in shape: {:?} vs {:?}",
                        s.shape(),
                        seq[0].shape()
                    ));
                }
            }
            Ok(())
        }
        _ => Err(mismatch()),
    }
}

fn lstm_weights<'a, T: Real>(cfg: &ModelConfig, params: &'a ModelParams<T>) -> Result<LstmWeights<'a, T>> {
    Ok(LstmWeights {
        kernel: params.get("lstm.kernel")?,
        bias: params.get("lstm.bias")?,
        peephole: if cfg.peephole {
            Some(params.get("lstm.peephole")?)
        } else {
            None
        },
    })
}

/// Runs the recurrence and returns every hidden state plus the step caches.
#[allow(clippy::type_complexity)]
fn run_lstm<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    seq: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, Vec<LstmStepCache<T>>)> {
    let w = lstm_weights(cfg, params)?;
    let [b, h, wd, _] = seq[0].dims4()?;
    let mut state = ConvLstmState::zeros(b, h, wd, cfg.hidden);
    let mut outputs = Vec::with_capacity(seq.len());
    let mut caches = Vec::with_capacity(seq.len());
    for x in seq {
        let (y, next, cache) = conv_lstm_step(x, &state, &w)?;
        outputs.push(y);
        caches.push(cache);
        state = next;
    }
    Ok((outputs, caches))
}

fn front_forward<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    input: &ModelInput<T>,
) -> Result<(Tensor<T>, FrontCache<T>)> {
    check_input(cfg, input)?;
    match input {
        ModelInput::Image(x) | ModelInput::Channels(x) => {
            let [b, h, w, c] = x.dims4()?;
            let x4 = x.clone().reshape(vec![b, h, w, c])?;
            let y = conv2d_forward(&x4, params.get("front.kernel")?, params.get("front.bias")?, Padding::Same)?;
            Ok((y, FrontCache::Conv(x4)))
        }
        ModelInput::Sequence(seq) => {
            let (mut outputs, caches) = run_lstm(cfg, params, seq)?;
            let last = outputs.pop().expect("sequence is non-empty");
            Ok((last, FrontCache::Lstm(caches)))
        }
    }
}

/// Forward pass. Output is `(B, H−2m, W−2m, 1)` in water units.
pub fn model_forward<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    input: &ModelInput<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    cfg.validate()?;
    let (features, front) = front_forward(cfg, params, input)?;
    let (y, unet) = unet_forward(&cfg.unet(), UNET, params, &features, mode)?;
    y.check_finite("model output")?;
    Ok((y, ForwardCache { front, unet }))
}

/// Parameter gradients for upstream gradient `dy`. Running statistics get
/// no gradient entry.
pub fn model_backward<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dy: &Tensor<T>,
) -> Result<ModelParams<T>> {
    let mut grads = ModelParams::new();
    let dfeat = unet_backward(&cfg.unet(), UNET, params, &cache.unet, dy, &mut grads)?;
    match &cache.front {
        FrontCache::Conv(x) => {
            let g = conv2d_backward(x, params.get("front.kernel")?, Padding::Same, &dfeat)?;
            grads.accumulate("front.kernel", g.dkernel);
            grads.accumulate("front.bias", g.dbias);
        }
        FrontCache::Lstm(steps) => {
            let w = lstm_weights(cfg, params)?;
            let mut dh = dfeat;
            let mut dc = Tensor::zeros(dh.shape().to_vec());
            for step in steps.iter().rev() {
                let g = conv_lstm_step_backward(step, &w, &dh, &dc)?;
                grads.accumulate("lstm.kernel", g.dkernel);
                grads.accumulate("lstm.bias", g.dbias);
                if let Some(dp) = g.dpeephole {
                    grads.accumulate("lstm.peephole", dp);
                }
                dh = g.dh_prev;
                dc = g.dc_prev;
            }
        }
    }
    grads.check_finite()?;
    Ok(grads)
}

/// Fresh parameters for `cfg`, deterministic in `seed`. Values are drawn in
/// `f64` and cast, so both precisions start from the same point.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::<f64>::new();
    let ch = cfg.hidden;
    match cfg.variant {
        ModelVariant::RsbpCnn => {
            let cin = 1 + ch;
            let bound = (3.0 / (9 * cin) as f64).sqrt();
            p.insert("lstm.kernel", uniform_tensor(vec![3, 3, cin, 4 * ch], bound, &mut rng));
            let mut bias = Tensor::zeros(vec![4 * ch]);
            bias.data_mut()[ch..2 * ch].fill(1.0);
            p.insert("lstm.bias", bias);
            if cfg.peephole {
                p.insert("lstm.peephole", Tensor::zeros(vec![3, ch]));
            }
        }
        ModelVariant::FbpCnn | ModelVariant::SbpCnn => {
            let cin = cfg.input_channels();
            let bound = (3.0 / (9 * cin) as f64).sqrt();
            p.insert("front.kernel", uniform_tensor(vec![3, 3, cin, ch], bound, &mut rng));
            p.insert("front.bias", Tensor::zeros(vec![ch]));
        }
    }
    init_unet_params(&cfg.unet(), UNET, &mut p, &mut rng);
    Ok(p.cast())
}

/// Parameters together with the activation cache of the last training-mode
/// forward pass.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ModelParams<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Model {
            params: init_params(&config, seed)?,
            config,
            cache: None,
        })
    }

    /// Wraps existing parameters after checking they fit the architecture.
    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        let reference = init_params::<T>(&config, 0)?;
        reference.check_same_layout(&params)?;
        params.check_finite()?;
        Ok(Model {
            config,
            params,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    /// Forward pass; training mode keeps the activations for
    /// [`Model::backward`], inference mode drops any previous cache.
    pub fn forward(&mut self, input: &ModelInput<T>, mode: NormMode) -> Result<Tensor<T>> {
        self.cache = None;
        let (y, cache) = model_forward(&self.config, &self.params, input, mode)?;
        if mode.is_train() {
            self.cache = Some(cache);
        }
        Ok(y)
    }

    pub fn backward(&self, dy: &Tensor<T>) -> Result<ModelParams<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::InvalidState("backward called without a training-mode forward pass".into())
        })?;
        model_backward(&self.config, &self.params, cache, dy)
    }

    /// Writes the running statistics of the last training-mode pass into the
    /// parameters.
    pub fn commit_running_stats(&mut self) -> Result<()> {
        if let Some(cache) = &self.cache {
            self.params.apply_running_updates(cache.running_updates())?;
        }
        Ok(())
    }

    /// Inference-mode forward without touching the cache.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        Ok(model_forward(&self.config, &self.params, input, NormMode::Infer)?.0)
    }

    /// Recurrent model only: the U-Net applied to the hidden state after
    /// every step, showing how the estimate evolves as views arrive.
    pub fn predict_per_step(&self, input: &ModelInput<T>) -> Result<Vec<Tensor<T>>> {
        check_input(&self.config, input)?;
        let ModelInput::Sequence(seq) = input else {
            return Err(invalid!("per-step outputs exist only for {}", ModelVariant::RsbpCnn));
        };
        let (hidden, _) = run_lstm(&self.config, &self.params, seq)?;
        hidden
            .iter()
            .map(|h| Ok(unet_forward(&self.config.unet(), UNET, &self.params, h, NormMode::Infer)?.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_param_gradients, random_tensor};
    use crate::nn::RenormClip;

    fn tiny(variant: ModelVariant, n_views: usize) -> ModelConfig {
        ModelConfig {
            variant,
            n_views,
            hidden: 3,
            depth: 1,
            base_width: 4,
            peephole: false,
        }
    }

    fn input_for(cfg: &ModelConfig, b: usize, side: usize, seed: u64) -> ModelInput<f64> {
        let stacked = random_tensor(&[b, side, side, cfg.n_views], seed);
        match cfg.variant {
            ModelVariant::FbpCnn => ModelInput::Image(random_tensor(&[b, side, side, 1], seed)),
            v => ModelInput::for_variant(v, stacked).unwrap(),
        }
    }

    const TRAIN: NormMode = NormMode::Train {
        clip: RenormClip::PLAIN,
        momentum: 0.99,
    };

    #[test]
    fn variants_share_output_shape() {
        let shapes: Vec<_> = ModelVariant::ALL
            .iter()
            .map(|&v| {
                let cfg = tiny(v, 4);
                let m = Model::<f64>::init(cfg, 1).unwrap();
                m.predict(&input_for(&cfg, 1, 12, 2)).unwrap().shape().to_vec()
            })
            .collect();
        assert!(shapes.iter().all(|s| s == &[1, 8, 8, 1]), "{shapes:?}");
    }

    #[test]
    fn contract_violations_are_rejected() {
        let cfg = tiny(ModelVariant::SbpCnn, 4);
        let m = Model::<f64>::init(cfg, 1).unwrap();
        let wrong = ModelInput::Channels(random_tensor(&[1, 12, 12, 3], 1));
        assert!(matches!(m.predict(&wrong), Err(Error::InvalidArgument(_))));
        let seq = input_for(&tiny(ModelVariant::RsbpCnn, 4), 1, 12, 1);
        assert!(m.predict(&seq).is_err());
        let rcfg = tiny(ModelVariant::RsbpCnn, 5);
        let r = Model::<f64>::init(rcfg, 1).unwrap();
        assert!(r.predict(&seq).is_err());
    }

    #[test]
    fn single_step_sequence_is_one_cell_then_unet() {
        let cfg = tiny(ModelVariant::RsbpCnn, 1);
        let m = Model::<f64>::init(cfg, 3).unwrap();
        let x = random_tensor(&[1, 12, 12, 1], 4);
        let out = m.predict(&ModelInput::Sequence(vec![x.clone()])).unwrap();
        let w = lstm_weights(&cfg, m.params()).unwrap();
        let (h, _, _) = conv_lstm_step(&x, &ConvLstmState::zeros(1, 12, 12, 3), &w).unwrap();
        let (manual, _) = unet_forward(&cfg.unet(), UNET, m.params(), &h, NormMode::Infer).unwrap();
        assert_eq!(out, manual);
    }

    #[test]
    fn backward_without_cache_is_invalid_state() {
        let cfg = tiny(ModelVariant::FbpCnn, 1);
        let mut m = Model::<f64>::init(cfg, 1).unwrap();
        let dy = Tensor::zeros(vec![1, 8, 8, 1]);
        assert!(matches!(m.backward(&dy), Err(Error::InvalidState(_))));
        m.forward(&input_for(&cfg, 1, 12, 1), NormMode::Infer).unwrap();
        assert!(matches!(m.backward(&dy), Err(Error::InvalidState(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients_and_repeats_bitwise() {
        for v in ModelVariant::ALL {
            let cfg = tiny(v, 3);
            let mut m = Model::<f64>::init(cfg, 1).unwrap();
            let y = m.forward(&input_for(&cfg, 2, 12, 9), TRAIN).unwrap();
            let g = m.backward(&Tensor::zeros(y.shape().to_vec())).unwrap();
            assert!(g.flatten().iter().all(|&v| v == 0.0));
            let dy = random_tensor(y.shape(), 3);
            let a = m.backward(&dy).unwrap();
            let b = m.backward(&dy).unwrap();
            assert_eq!(a.flatten(), b.flatten());
            let trainable = m.params().names().filter(|n| !crate::nn::is_running_stat(n)).count();
            assert_eq!(a.len(), trainable);
        }
    }

    fn full_gradient_check(cfg: ModelConfig) {
        let params = init_params::<f64>(&cfg, 11).unwrap();
        let input = input_for(&cfg, 2, 12, 12);
        let (y, cache) = model_forward(&cfg, &params, &input, TRAIN).unwrap();
        let w = random_tensor(y.shape(), 13);
        let grads = model_backward(&cfg, &params, &cache, &w).unwrap();
        let analytic: Vec<_> = grads.iter().map(|(n, g)| (n.clone(), g.clone())).collect();
        let (name, err) = check_param_gradients(
            &analytic,
            &params,
            |p, n| p.get(n).unwrap().clone(),
            |p, n, t| *p.get_mut(n).unwrap() = t,
            |p| {
                let (y, _) = model_forward(&cfg, p, &input, TRAIN).unwrap();
                y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            },
        );
        assert!(err < 1e-4, "{} {name}: {err:e}", cfg.variant);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for v in ModelVariant::ALL {
            full_gradient_check(tiny(v, 3));
        }
        full_gradient_check(ModelConfig {
            peephole: true,
            ..tiny(ModelVariant::RsbpCnn, 3)
        });
    }

    #[test]
    fn rsbp_is_order_sensitive_sbp_is_not() {
        let cfg = tiny(ModelVariant::RsbpCnn, 4);
        let m = Model::<f64>::init(cfg, 21).unwrap();
        let ModelInput::Sequence(mut seq) = input_for(&cfg, 1, 12, 22) else {
            unreachable!()
        };
        let a = m.predict(&ModelInput::Sequence(seq.clone())).unwrap();
        seq.swap(1, 2);
        let b = m.predict(&ModelInput::Sequence(seq)).unwrap();
        let dist: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 1e-6, "{dist}");

        let scfg = tiny(ModelVariant::SbpCnn, 4);
        let s = Model::<f64>::init(scfg, 21).unwrap();
        let x = random_tensor(&[1, 12, 12, 4], 23);
        let perm = [0usize, 2, 1, 3];
        let permute_channels = |t: &Tensor<f64>, c: usize| {
            let mut out = t.clone();
            for (o, i) in out.data_mut().chunks_mut(c).zip(t.data().chunks(c)) {
                for k in 0..c {
                    o[k] = i[perm[k]];
                }
            }
            out
        };
        let before = s.predict(&ModelInput::Channels(x.clone())).unwrap();
        let mut p = s.params().clone();
        // Kernel rows (3, 3, Cin, Cout): permute the Cin axis.
        let k = p.get("front.kernel").unwrap().clone();
        let cout = k.shape()[3];
        let kp = p.get_mut("front.kernel").unwrap();
        for tap in 0..9 {
            for ci in 0..4 {
                for co in 0..cout {
                    kp.data_mut()[(tap * 4 + ci) * cout + co] = k.data()[(tap * 4 + perm[ci]) * cout + co];
                }
            }
        }
        let s2 = Model::from_params(scfg, p).unwrap();
        let after = s2.predict(&ModelInput::Channels(permute_channels(&x, 4))).unwrap();
        let diff = before
            .data()
            .iter()
            .zip(after.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn per_step_outputs_end_with_the_prediction() {
        let cfg = tiny(ModelVariant::RsbpCnn, 3);
        let m = Model::<f64>::init(cfg, 2).unwrap();
        let input = input_for(&cfg, 1, 12, 5);
        let steps = m.predict_per_step(&input).unwrap();
        assert_eq!(steps.len(), 3);
        assert_eq!(steps[2], m.predict(&input).unwrap());
        let fcfg = tiny(ModelVariant::FbpCnn, 1);
        let f = Model::<f64>::init(fcfg, 2).unwrap();
        assert!(f.predict_per_step(&input_for(&fcfg, 1, 12, 5)).is_err());
    }

    #[test]
    fn init_is_deterministic_and_precision_independent() {
        let cfg = ModelConfig::new(ModelVariant::RsbpCnn, 16);
        let a = init_params::<f64>(&cfg, 7).unwrap();
        let b = init_params::<f64>(&cfg, 7).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init_params::<f32>(&cfg, 7).unwrap();
        assert_eq!(a.cast::<f32>().flatten(), c.flatten());
        assert_ne!(a.flatten(), init_params::<f64>(&cfg, 8).unwrap().flatten());
        let bias = a.get("lstm.bias").unwrap().data();
        assert!(bias[16..32].iter().all(|&v| v == 1.0));
        assert!(bias[..16].iter().all(|&v| v == 0.0));
    }
}
