//! Finite-difference check of the whole loss graph on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, forward_on_tape, joint_loss, BoundParams, LossConfig, ModelConfig, ModelError, ModelInput, ModelParams};
use crate::autodiff::{grad_check_detailed, Tape, Tensor, TensorError, Var};

/// Frames in the checked input.
pub const CHECK_FRAMES: usize = 6;

/// Model small enough that every parameter can be differenced numerically.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        n_mels: 8,
        d_z: 3,
        d_h: 4,
        d: 4,
        scales: 2,
        refine_iters: 2,
        downsample_factor: 2,
        enc_channels: [2, 3],
        layers: 1,
        heads: 2,
        ff_mult: 2,
        input_norm: true,
    }
}

/// Parameters and input for one check point.
///
/// Weights are the usual init scaled by 1.5 and the fusion bias is shifted by
/// +1 so that the prosody units are not all clipped by the ReLU (a dead fusion
/// layer makes every key identical and flattens the whole graph). The label is
/// the class the model currently considers less likely, which keeps the
/// cross-entropy away from its flat tail.
pub fn check_point(seed: u64) -> Result<(ModelParams<f64>, ModelInput<f64>, u8), ModelError> {
    let cfg = check_config();
    let mut params = ModelParams::<f64>::init(cfg, seed)?;
    for (name, t) in params.tensors.iter_mut() {
        if !name.contains(".ln") {
            *t = t.map(|v| v * 1.5);
        }
        if name == "fusion.b" {
            *t = t.map(|v| v + 1.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let input = ModelInput::new(
        Tensor::from_fn(&[CHECK_FRAMES, cfg.n_mels], |_| rng.random_range(-3.0..1.0)),
        Tensor::from_fn(&[CHECK_FRAMES], |_| rng.random_range(-1.5..1.5)),
        Tensor::from_fn(&[CHECK_FRAMES], |_| rng.random_range(0.0..1.0)),
    )?;
    let (yhat, _) = forward(&params, &input)?;
    let label = if yhat[0] < yhat[1] { 0 } else { 1 };
    Ok((params, input, label))
}

fn unwrap_tensor(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::ShapeMismatch { op: "forward", detail: other.to_string() },
    }
}

/// Max relative error between reverse-mode and central-difference gradients
/// of `joint_loss(forward(x))` over every parameter entry. `perturb` is added
/// to the first analytic entry before comparing (0 for a real check).
pub fn full_graph_check(seed: u64, eps: f64, perturb: f64) -> Result<f64, ModelError> {
    let cfg = check_config();
    let (params, input, label) = check_point(seed)?;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let values: Vec<Tensor<f64>> = params.tensors.values().cloned().collect();
    let loss_cfg = LossConfig { lambda_cls: 1.0, lambda_temp: 1.0 };
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let bound = BoundParams { vars: names.iter().cloned().zip(vars.iter().copied()).collect() };
        let tr = forward_on_tape(tape, &bound, &cfg, &input).map_err(unwrap_tensor)?;
        joint_loss(tape, tr.yhat, label, tr.h_seq, &loss_cfg).map_err(unwrap_tensor)
    };
    let mut gc = grad_check_detailed(f, &values, eps)?;
    if perturb != 0.0 {
        gc.analytic[0].data_mut()[0] += perturb;
    }
    Ok(gc.max_rel_error())
}

/// Outcome of the full-graph check over a fixed list of seeds.
#[derive(Clone, Debug)]
pub struct FullGraphReport {
    pub errors: Vec<(u64, f64)>,
    pub tolerance: f64,
}

impl FullGraphReport {
    pub fn passing(&self) -> usize {
        self.errors.iter().filter(|(_, e)| *e < self.tolerance).count()
    }

    pub fn worst(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Seeds 0..n at eps 1e-5.
pub fn full_graph_report(n_seeds: u64, perturb: f64) -> Result<FullGraphReport, ModelError> {
    let errors = (0..n_seeds).map(|s| full_graph_check(s, 1e-5, perturb).map(|e| (s, e))).collect::<Result<_, _>>()?;
    Ok(FullGraphReport { errors, tolerance: 1e-5 })
}
