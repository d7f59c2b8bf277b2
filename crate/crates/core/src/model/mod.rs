//! The classifier network: prosody fusion, convolutional spectral encoder,
//! cross-attention, multi-scale ConvGRU refinement, transformer aggregation
//! with a classification token, and the joint loss.

pub mod check;
mod io;
mod layers;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

pub use io::{load_params, save_params, TAIM_VERSION};
pub use layers::{
    aggregate, classify, convgru_step, cross_attend, fuse_prosody, iterative_refine, joint_loss, sinusoidal_positions, spectral_encode,
    AggregatorVars, EncoderVars, GruVars, LayerVars,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::dsp::UtteranceFeatures;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of {len} frames is too short, need at least {need}")]
    SequenceTooShort { len: usize, need: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter file version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt parameter file: {0}")]
    CorruptFile(String),
    #[error("parameters do not match the model: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Network hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub d_z: usize,
    /// Encoder output width.
    pub d_h: usize,
    /// Attention, refinement and transformer width.
    pub d: usize,
    pub scales: usize,
    pub refine_iters: usize,
    pub downsample_factor: usize,
    /// Channels of the first two encoder convolutions; the third outputs `d_h`.
    pub enc_channels: [usize; 2],
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Standardize each utterance's log-Mel matrix to zero mean, unit variance.
    pub input_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            d_z: 32,
            d_h: 64,
            d: 64,
            scales: 2,
            refine_iters: 4,
            downsample_factor: 4,
            enc_channels: [16, 32],
            layers: 2,
            heads: 4,
            ff_mult: 4,
            input_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_mels", self.n_mels),
            ("d_z", self.d_z),
            ("d_h", self.d_h),
            ("d", self.d),
            ("scales", self.scales),
            ("refine_iters", self.refine_iters),
            ("downsample_factor", self.downsample_factor),
            ("enc_channels[0]", self.enc_channels[0]),
            ("enc_channels[1]", self.enc_channels[1]),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!("d ({}) is not divisible by heads ({})", self.d, self.heads)));
        }
        if self.scales > 16 {
            return Err(ModelError::InvalidConfig("at most 16 scales".into()));
        }
        Ok(())
    }

    /// Minimum input length in frames.
    pub fn min_frames(&self) -> usize {
        1 << (self.scales - 1)
    }

    /// Refined sequence length for `t` input frames.
    pub fn refined_len(&self, t: usize) -> usize {
        t.div_ceil(self.downsample_factor)
    }

    pub(crate) fn to_words(self) -> Vec<u32> {
        let c = self;
        [
            c.n_mels,
            c.d_z,
            c.d_h,
            c.d,
            c.scales,
            c.refine_iters,
            c.downsample_factor,
            c.enc_channels[0],
            c.enc_channels[1],
            c.layers,
            c.heads,
            c.ff_mult,
            usize::from(c.input_norm),
        ]
        .iter()
        .map(|&v| v as u32)
        .collect()
    }

    pub(crate) fn from_words(w: &[u32]) -> Option<Self> {
        if w.len() != 13 || w[12] > 1 {
            return None;
        }
        let u = |i: usize| w[i] as usize;
        Some(Self {
            n_mels: u(0),
            d_z: u(1),
            d_h: u(2),
            d: u(3),
            scales: u(4),
            refine_iters: u(5),
            downsample_factor: u(6),
            enc_channels: [u(7), u(8)],
            layers: u(9),
            heads: u(10),
            ff_mult: u(11),
            input_norm: w[12] == 1,
        })
    }

    /// Every parameter name with its shape and initialization fan-in
    /// (`None` for layer-norm scale/shift).
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Option<usize>)> {
        let (dz, dh, d) = (self.d_z, self.d_h, self.d);
        let mut v: Vec<(String, Vec<usize>, Option<usize>)> = Vec::new();
        let mut p = |name: String, shape: Vec<usize>, fan: Option<usize>| v.push((name, shape, fan));
        p("fusion.w".into(), vec![dz, 2], Some(2));
        p("fusion.b".into(), vec![dz], Some(2));
        let chans = [1, self.enc_channels[0], self.enc_channels[1], dh];
        for i in 0..3 {
            p(format!("encoder.conv{i}.weight"), vec![chans[i + 1], chans[i], 3, 3], Some(chans[i] * 9));
            p(format!("encoder.conv{i}.bias"), vec![chans[i + 1]], Some(chans[i] * 9));
        }
        p("attn.wq".into(), vec![d, dh], Some(dh));
        p("attn.wk".into(), vec![d, dz], Some(dz));
        p("attn.wv".into(), vec![d, dz], Some(dz));
        for s in 0..self.scales {
            for k in ["w_r", "u_r", "w_u", "u_u", "w_cand", "u_cand"] {
                p(format!("refine.scale{s}.{k}"), vec![d, d, 3], Some(3 * d));
            }
        }
        p("agg.cls".into(), vec![d], Some(d));
        let ff = self.ff_mult * d;
        for l in 0..self.layers {
            let pre = format!("agg.layer{l}");
            for ln in ["ln1", "ln2"] {
                p(format!("{pre}.{ln}.gamma"), vec![d], None);
                p(format!("{pre}.{ln}.beta"), vec![d], None);
            }
            for k in ["wq", "wk", "wv", "wo"] {
                p(format!("{pre}.attn.{k}"), vec![d, d], Some(d));
            }
            p(format!("{pre}.ff.w1"), vec![d, ff], Some(d));
            p(format!("{pre}.ff.b1"), vec![ff], Some(d));
            p(format!("{pre}.ff.w2"), vec![ff, d], Some(ff));
            p(format!("{pre}.ff.b2"), vec![d], Some(ff));
        }
        p("agg.ln_f.gamma".into(), vec![d], None);
        p("agg.ln_f.beta".into(), vec![d], None);
        p("clf.w".into(), vec![2, d], Some(d));
        p("clf.b".into(), vec![2], Some(d));
        v
    }
}

/// Weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_temp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_cls: 1.0, lambda_temp: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda_cls >= 0.0 && self.lambda_temp >= 0.0) || self.lambda_cls + self.lambda_temp == 0.0 {
            return Err(ModelError::InvalidConfig("loss weights must be >= 0 and not both zero".into()));
        }
        Ok(())
    }
}

/// All learnable tensors keyed by hierarchical name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Uniform(-a, a) with `a = sqrt(1 / fan_in)`; layer-norm scales start at
    /// 1 and shifts at 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan) in config.param_specs() {
            let t = match fan {
                Some(fan) => {
                    let a = (1.0 / fan as f64).sqrt();
                    Tensor::from_fn(&shape, |_| F::from_f64_lossy(rng.random_range(-a..a)))
                }
                None if name.ends_with("gamma") => Tensor::full(&shape, F::one()),
                None => Tensor::zeros(&shape),
            };
            tensors.insert(name, t);
        }
        Ok(Self { config, tensors })
    }

    /// Every tensor zero, including layer-norm scales.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = config.param_specs().into_iter().map(|(n, s, _)| (n, Tensor::zeros(&s))).collect();
        Ok(Self { config, tensors })
    }

    /// Checks that names and shapes are exactly those the config requires.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(ModelError::ParamMismatch(format!("expected {} tensors, found {}", specs.len(), self.tensors.len())));
        }
        for (name, shape, _) in specs {
            match self.tensors.get(&name) {
                None => return Err(ModelError::ParamMismatch(format!("missing `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::ParamMismatch(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())))
                }
                Some(t) if !t.is_finite() => return Err(ModelError::ParamMismatch(format!("`{name}` has non-finite entries"))),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.tensors.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams { config: self.config, tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Places every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    fn encoder(&self) -> EncoderVars {
        EncoderVars {
            convs: (0..3).map(|i| (self.var(&format!("encoder.conv{i}.weight")), self.var(&format!("encoder.conv{i}.bias")))).collect(),
        }
    }

    fn gru(&self, s: usize) -> GruVars {
        let v = |k: &str| self.var(&format!("refine.scale{s}.{k}"));
        GruVars { w_r: v("w_r"), u_r: v("u_r"), w_u: v("w_u"), u_u: v("u_u"), w_cand: v("w_cand"), u_cand: v("u_cand") }
    }

    fn aggregator(&self, cfg: &ModelConfig) -> AggregatorVars {
        let layers = (0..cfg.layers)
            .map(|l| {
                let v = |k: &str| self.var(&format!("agg.layer{l}.{k}"));
                LayerVars {
                    ln1: (v("ln1.gamma"), v("ln1.beta")),
                    wq: v("attn.wq"),
                    wk: v("attn.wk"),
                    wv: v("attn.wv"),
                    wo: v("attn.wo"),
                    ln2: (v("ln2.gamma"), v("ln2.beta")),
                    w1: v("ff.w1"),
                    b1: v("ff.b1"),
                    w2: v("ff.w2"),
                    b2: v("ff.b2"),
                }
            })
            .collect();
        AggregatorVars { cls: self.var("agg.cls"), layers, ln_f: (self.var("agg.ln_f.gamma"), self.var("agg.ln_f.beta")), heads: cfg.heads }
    }
}

/// One utterance in model precision: `log_mel` is `[T, n_mels]`, the prosody
/// tracks are `[T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<F> {
    pub log_mel: Tensor<F>,
    pub pitch_norm: Tensor<F>,
    pub pause_prob: Tensor<F>,
}

impl<F: Real> ModelInput<F> {
    pub fn new(log_mel: Tensor<F>, pitch_norm: Tensor<F>, pause_prob: Tensor<F>) -> Result<Self, ModelError> {
        let ok = log_mel.rank() == 2 && pitch_norm.shape() == [log_mel.shape()[0]] && pause_prob.shape() == pitch_norm.shape();
        if !ok {
            return Err(ModelError::ShapeMismatch(format!(
                "log_mel {:?}, pitch {:?}, pause {:?}",
                log_mel.shape(),
                pitch_norm.shape(),
                pause_prob.shape()
            )));
        }
        Ok(Self { log_mel, pitch_norm, pause_prob })
    }

    pub fn from_features(f: &UtteranceFeatures) -> Result<Self, ModelError> {
        let cast = |v: &[f32]| v.iter().map(|&x| F::from_f64_lossy(f64::from(x))).collect::<Vec<F>>();
        Self::new(
            Tensor::new(vec![f.frames, f.n_mels], cast(&f.log_mel))?,
            Tensor::from_vec(cast(&f.pitch_norm)),
            Tensor::from_vec(cast(&f.pause_prob)),
        )
    }

    pub fn frames(&self) -> usize {
        self.log_mel.shape()[0]
    }
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Class probabilities `[2]`.
    pub yhat: Var,
    /// Refined, pre-transformer sequence `[T', d]`.
    pub h_seq: Var,
    /// Cross-attention weights `[T, T]`.
    pub cross_attn: Var,
    /// Per layer, per head self-attention weights `[T'+1, T'+1]`.
    pub agg_attn: Vec<Vec<Var>>,
}

fn standardize<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    let n = F::from_usize(t.len()).unwrap();
    let mean = t.data().iter().copied().sum::<F>() / n;
    let var = t.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv = F::one() / var.sqrt().max(F::from_f64_lossy(1e-6));
    t.map(|v| (v - mean) * inv)
}

/// Builds the forward graph for one utterance on `tape`.
pub fn forward_on_tape<F: Real>(
    tape: &mut Tape<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    input: &ModelInput<F>,
) -> Result<ForwardTrace, ModelError> {
    let t = input.frames();
    if input.log_mel.shape()[1] != cfg.n_mels {
        return Err(ModelError::ShapeMismatch(format!("input has {} mel bins, model expects {}", input.log_mel.shape()[1], cfg.n_mels)));
    }
    if t < cfg.min_frames() {
        return Err(ModelError::SequenceTooShort { len: t, need: cfg.min_frames() });
    }
    let s = if cfg.input_norm { standardize(&input.log_mel) } else { input.log_mel.clone() };
    let s = tape.constant(s);
    let pitch = tape.constant(input.pitch_norm.clone());
    let pause = tape.constant(input.pause_prob.clone());

    let z = fuse_prosody(tape, pitch, pause, p.var("fusion.w"), p.var("fusion.b"))?;
    let h = spectral_encode(tape, s, &p.encoder())?;
    let (h_att, cross_attn) = cross_attend(tape, h, z, p.var("attn.wq"), p.var("attn.wk"), p.var("attn.wv"))?;
    let grus: Vec<GruVars> = (0..cfg.scales).map(|s| p.gru(s)).collect();
    let h_seq = iterative_refine(tape, h_att, &grus, cfg.refine_iters, cfg.downsample_factor)?;
    let (u_cls, agg_attn) = aggregate(tape, h_seq, &p.aggregator(cfg))?;
    let yhat = classify(tape, u_cls, p.var("clf.w"), p.var("clf.b"))?;
    Ok(ForwardTrace { yhat, h_seq, cross_attn, agg_attn })
}

/// Class probabilities `[p_control, p_dementia]` and the refined sequence.
pub fn forward<F: Real>(params: &ModelParams<F>, input: &ModelInput<F>) -> Result<([F; 2], Tensor<F>), ModelError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let tr = forward_on_tape(&mut tape, &p, &params.config, input)?;
    let y = tape.value(tr.yhat).data();
    Ok(([y[0], y[1]], tape.value(tr.h_seq).clone()))
}

/// Loss value, class probabilities and the gradient of every parameter.
pub struct LossGrad<F> {
    pub loss: F,
    pub yhat: [F; 2],
    pub grads: BTreeMap<String, Tensor<F>>,
}

pub fn loss_and_grad<F: Real>(
    params: &ModelParams<F>,
    input: &ModelInput<F>,
    label: u8,
    loss_cfg: &LossConfig,
) -> Result<LossGrad<F>, ModelError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let tr = forward_on_tape(&mut tape, &p, &params.config, input)?;
    let loss = joint_loss(&mut tape, tr.yhat, label, tr.h_seq, loss_cfg)?;
    let mut g = tape.backward(loss)?;
    let grads =
        p.vars.iter().map(|(name, &v)| (name.clone(), g.take(v).unwrap_or_else(|| Tensor::zeros(params.get(name).shape())))).collect();
    let y = tape.value(tr.yhat).data();
    Ok(LossGrad { loss: tape.value(loss).item(), yhat: [y[0], y[1]], grads })
}
