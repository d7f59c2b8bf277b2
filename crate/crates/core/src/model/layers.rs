use super::{LossConfig, ModelError};
use crate::autodiff::{Real, Tape, Tensor, Var};

/// `(kernel [C_out, C_in, 3, 3], bias [C_out])` per convolution.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub convs: Vec<(Var, Var)>,
}

/// Gate kernels `[d, d, K]` of one scale.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_r: Var,
    pub u_r: Var,
    pub w_u: Var,
    pub u_u: Var,
    pub w_cand: Var,
    pub u_cand: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct AggregatorVars {
    pub cls: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f: (Var, Var),
    pub heads: usize,
}

fn shape<F: Real>(tape: &Tape<F>, v: Var) -> Vec<usize> {
    tape.value(v).shape().to_vec()
}

/// `z(n) = ReLU(W_f [p(n), q(n)] + b_f)`, returned as `[T, d_z]`.
pub fn fuse_prosody<F: Real>(tape: &mut Tape<F>, pitch: Var, pause: Var, w_f: Var, b_f: Var) -> Result<Var, ModelError> {
    let (ps, qs) = (shape(tape, pitch), shape(tape, pause));
    if ps.len() != 1 || ps != qs || ps[0] == 0 {
        return Err(ModelError::ShapeMismatch(format!("prosody tracks {ps:?} and {qs:?}")));
    }
    let t = ps[0];
    let p = tape.reshape(pitch, &[t, 1])?;
    let q = tape.reshape(pause, &[t, 1])?;
    let x = tape.concat(&[p, q], 1)?;
    let wt = tape.transpose(w_f)?;
    let a = tape.matmul(x, wt)?;
    let a = tape.add(a, b_f)?;
    Ok(tape.relu(a)?)
}

/// Three `3x3` convolutions over `[T, n_mels]` with stride 2 along mel and 1
/// along time, each followed by ReLU, then a mean over the remaining mel
/// positions. Returns `[T, d_h]`.
pub fn spectral_encode<F: Real>(tape: &mut Tape<F>, s: Var, enc: &EncoderVars) -> Result<Var, ModelError> {
    let ss = shape(tape, s);
    if ss.len() != 2 || ss[0] == 0 {
        return Err(ModelError::ShapeMismatch(format!("spectrogram {ss:?}")));
    }
    let mut x = tape.reshape(s, &[1, ss[0], ss[1]])?;
    for &(k, b) in &enc.convs {
        x = tape.conv2d(x, k, Some(b), (1, 2), (1, 1))?;
        x = tape.relu(x)?;
    }
    let pooled = tape.mean(x, 2)?;
    Ok(tape.transpose(pooled)?)
}

/// Single-head `softmax(Q K^T / sqrt(d)) V` with `Q = h W_q^T`, `K = z W_k^T`,
/// `V = z W_v^T`. Returns the attended sequence `[T, d]` and the weights.
pub fn cross_attend<F: Real>(tape: &mut Tape<F>, h: Var, z: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var), ModelError> {
    let (hs, zs) = (shape(tape, h), shape(tape, z));
    if hs.len() != 2 || zs.len() != 2 || hs[0] != zs[0] {
        return Err(ModelError::ShapeMismatch(format!("cross attention over {hs:?} and {zs:?}")));
    }
    let d = shape(tape, wq)[0];
    let t = tape.transpose(wq)?;
    let q = tape.matmul(h, t)?;
    let t = tape.transpose(wk)?;
    let k = tape.matmul(z, t)?;
    let t = tape.transpose(wv)?;
    let v = tape.matmul(z, t)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.affine(scores, F::one() / F::from_usize(d).unwrap().sqrt(), F::zero())?;
    let attn = tape.softmax(scores, 1)?;
    Ok((tape.matmul(attn, v)?, attn))
}

fn same_conv<F: Real>(tape: &mut Tape<F>, x: Var, k: Var) -> Result<Var, ModelError> {
    let width = shape(tape, k)[2];
    Ok(tape.conv1d(x, k, 1, width / 2)?)
}

/// One ConvGRU update on channel-major `[d, T]` tensors:
/// `r = s(W_r*x + U_r*H)`, `u = s(W_u*x + U_u*H)`, `C = tanh(W*x + U*(r.H))`,
/// `H' = u.H + (1-u).C`.
pub fn convgru_step<F: Real>(tape: &mut Tape<F>, x: Var, h_prev: Var, g: &GruVars) -> Result<Var, ModelError> {
    let proj = InputProj::new(tape, x, g)?;
    gru_update(tape, &proj, Some(h_prev), g)
}

/// The input-side convolutions, which stay fixed while the hidden state is
/// refined.
struct InputProj {
    r: Var,
    u: Var,
    cand: Var,
}

impl InputProj {
    fn new<F: Real>(tape: &mut Tape<F>, x: Var, g: &GruVars) -> Result<Self, ModelError> {
        Ok(Self { r: same_conv(tape, x, g.w_r)?, u: same_conv(tape, x, g.w_u)?, cand: same_conv(tape, x, g.w_cand)? })
    }
}

/// `h_prev = None` stands for an all-zero state.
fn gru_update<F: Real>(tape: &mut Tape<F>, px: &InputProj, h_prev: Option<Var>, g: &GruVars) -> Result<Var, ModelError> {
    let xs = shape(tape, px.u);
    let Some(h) = h_prev else {
        let u = tape.sigmoid(px.u)?;
        let c = tape.tanh(px.cand)?;
        let keep = tape.affine(u, -F::one(), F::one())?;
        return Ok(tape.mul(keep, c)?);
    };
    if shape(tape, h) != xs {
        return Err(ModelError::ShapeMismatch(format!("hidden state {:?} vs input {xs:?}", shape(tape, h))));
    }
    let a = same_conv(tape, h, g.u_r)?;
    let a = tape.add(px.r, a)?;
    let r = tape.sigmoid(a)?;
    let a = same_conv(tape, h, g.u_u)?;
    let a = tape.add(px.u, a)?;
    let u = tape.sigmoid(a)?;
    let rh = tape.mul(r, h)?;
    let a = same_conv(tape, rh, g.u_cand)?;
    let a = tape.add(px.cand, a)?;
    let c = tape.tanh(a)?;
    let uh = tape.mul(u, h)?;
    let keep = tape.affine(u, -F::one(), F::one())?;
    let kc = tape.mul(keep, c)?;
    Ok(tape.add(uh, kc)?)
}

/// Multi-scale refinement of `x` (`[T, d]`). Scale `s` sees `x` average-pooled
/// in time by `2^s`, starts from a zero state and applies `iters` updates
/// with `x` as the fixed input; coarse results are upsampled and summed into
/// the finest, then the sum is average-pooled by `downsample`. Returns
/// `[ceil(T / downsample), d]`.
pub fn iterative_refine<F: Real>(tape: &mut Tape<F>, x: Var, grus: &[GruVars], iters: usize, downsample: usize) -> Result<Var, ModelError> {
    let xs = shape(tape, x);
    if xs.len() != 2 {
        return Err(ModelError::ShapeMismatch(format!("refinement input {xs:?}")));
    }
    let t = xs[0];
    let need = 1usize << grus.len().saturating_sub(1);
    if grus.is_empty() || iters == 0 || downsample == 0 {
        return Err(ModelError::InvalidConfig("refinement needs at least one scale, one iteration and downsample >= 1".into()));
    }
    if t < need {
        return Err(ModelError::SequenceTooShort { len: t, need });
    }
    let xc = tape.transpose(x)?;
    let mut total: Option<Var> = None;
    for (s, g) in grus.iter().enumerate() {
        let factor = 1usize << s;
        let xs = if factor == 1 { xc } else { tape.avg_pool_last(xc, factor)? };
        let proj = InputProj::new(tape, xs, g)?;
        let mut h = None;
        for _ in 0..iters {
            h = Some(gru_update(tape, &proj, h, g)?);
        }
        let mut h = h.unwrap();
        if factor > 1 {
            h = tape.upsample_last(h, factor, t)?;
        }
        total = Some(match total {
            None => h,
            Some(acc) => tape.add(acc, h)?,
        });
    }
    let mut out = total.unwrap();
    if downsample > 1 {
        out = tape.avg_pool_last(out, downsample)?;
    }
    Ok(tape.transpose(out)?)
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<F: Real>(len: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(&[len, d], |idx| {
        let (pos, j) = ((idx / d) as f64, idx % d);
        let angle = pos / 10000f64.powf((j - j % 2) as f64 / d as f64);
        F::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn layer_norm<F: Real>(tape: &mut Tape<F>, x: Var, (gamma, beta): (Var, Var)) -> Result<Var, ModelError> {
    let n = tape.layer_norm(x, 1, F::from_f64_lossy(1e-5))?;
    let n = tape.mul(n, gamma)?;
    Ok(tape.add(n, beta)?)
}

/// Prepends the classification token, adds positions and runs pre-norm
/// transformer encoder layers followed by a final layer norm. Returns the
/// token's output row `[1, d]` and every attention map.
pub fn aggregate<F: Real>(tape: &mut Tape<F>, h_seq: Var, agg: &AggregatorVars) -> Result<(Var, Vec<Vec<Var>>), ModelError> {
    let hs = shape(tape, h_seq);
    let d = shape(tape, agg.cls)[0];
    if hs.len() != 2 || hs[1] != d || hs[0] == 0 {
        return Err(ModelError::ShapeMismatch(format!("aggregator input {hs:?} for width {d}")));
    }
    if agg.heads == 0 || !d.is_multiple_of(agg.heads) {
        return Err(ModelError::InvalidConfig(format!("{} heads for width {d}", agg.heads)));
    }
    let n = hs[0] + 1;
    let cls = tape.reshape(agg.cls, &[1, d])?;
    let x = tape.concat(&[cls, h_seq], 0)?;
    let pe = tape.constant(sinusoidal_positions(n, d));
    let mut x = tape.add(x, pe)?;
    let dh = d / agg.heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut maps = Vec::with_capacity(agg.layers.len());
    for l in &agg.layers {
        let a = layer_norm(tape, x, l.ln1)?;
        let q = tape.matmul(a, l.wq)?;
        let k = tape.matmul(a, l.wk)?;
        let v = tape.matmul(a, l.wv)?;
        let mut heads = Vec::with_capacity(agg.heads);
        let mut layer_maps = Vec::with_capacity(agg.heads);
        for hd in 0..agg.heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.affine(s, scale, F::zero())?;
            let w = tape.softmax(s, 1)?;
            heads.push(tape.matmul(w, vh)?);
            layer_maps.push(w);
        }
        maps.push(layer_maps);
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let o = tape.matmul(cat, l.wo)?;
        x = tape.add(x, o)?;
        let b = layer_norm(tape, x, l.ln2)?;
        let f = tape.matmul(b, l.w1)?;
        let f = tape.add(f, l.b1)?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, l.w2)?;
        let f = tape.add(f, l.b2)?;
        x = tape.add(x, f)?;
    }
    let x = layer_norm(tape, x, agg.ln_f)?;
    Ok((tape.slice(x, 0, 0, 1)?, maps))
}

/// `softmax(W_c u + b_c)` for `u` of shape `[1, d]` or `[d]`; returns `[2]`.
pub fn classify<F: Real>(tape: &mut Tape<F>, u: Var, w_c: Var, b_c: Var) -> Result<Var, ModelError> {
    let d = shape(tape, w_c)[1];
    let u = tape.reshape(u, &[1, d])?;
    let wt = tape.transpose(w_c)?;
    let logits = tape.matmul(u, wt)?;
    let logits = tape.add(logits, b_c)?;
    let y = tape.softmax(logits, 1)?;
    Ok(tape.reshape(y, &[2])?)
}

/// `lambda_cls * -ln(max(yhat[y], 1e-12)) + lambda_temp * mean_t |h_t - h_{t-1}|^2`;
/// the temporal term is 0 for a single-row sequence.
pub fn joint_loss<F: Real>(tape: &mut Tape<F>, yhat: Var, label: u8, h_seq: Var, cfg: &LossConfig) -> Result<Var, ModelError> {
    if label > 1 {
        return Err(ModelError::BadLabel(label));
    }
    let hs = shape(tape, h_seq);
    if hs.len() != 2 || hs[0] == 0 || shape(tape, yhat) != [2] {
        return Err(ModelError::ShapeMismatch(format!("loss over yhat {:?} and sequence {hs:?}", shape(tape, yhat))));
    }
    let l = label as usize;
    let p = tape.slice(yhat, 0, l, l + 1)?;
    let logp = tape.log_clamped(p, F::from_f64_lossy(1e-12))?;
    let ce = tape.sum(logp)?;
    let mut loss = tape.affine(ce, -F::from_f64_lossy(cfg.lambda_cls), F::zero())?;
    let t = hs[0];
    if t > 1 && cfg.lambda_temp != 0.0 {
        let later = tape.slice(h_seq, 0, 1, t)?;
        let earlier = tape.slice(h_seq, 0, 0, t - 1)?;
        let diff = tape.sub(later, earlier)?;
        let sq = tape.sum_squares(diff)?;
        let temp = tape.affine(sq, F::from_f64_lossy(cfg.lambda_temp / (t - 1) as f64), F::zero())?;
        loss = tape.add(loss, temp)?;
    }
    Ok(loss)
}
