//! Built-in self-checks run by `tai verify`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::{Waveform, CANONICAL_RATE};
use crate::autodiff::{primitive_suite, Tape, Tensor};
use crate::dsp::{pause_probability, pitch_track, stft, Frontend, FrontendConfig, PitchConfig, StftConfig, VadConfig};
use crate::metrics::{auc, stratified_folds, ScoredExample};
use crate::model::check::{check_config, full_graph_report};
use crate::model::{self, convgru_step, cross_attend, joint_loss, GruVars, LossConfig, ModelInput, ModelParams};

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Added to one analytic gradient entry of the full-graph check so the
    /// suite can be seen to fail.
    pub perturb_gradient: f64,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: &'static str,
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { name: name.into(), passed, detail: detail.into() }
}

fn failed(name: &str, err: impl std::fmt::Display) -> CheckResult {
    check(name, false, format!("error: {err}"))
}

pub fn primitive_gradients() -> Vec<CheckResult> {
    match primitive_suite(20) {
        Ok(rows) => rows.into_iter().map(|(name, err)| check(name, err < 1e-6, format!("max rel err {err:.2e} over 20 seeds"))).collect(),
        Err(e) => vec![failed("primitives", e)],
    }
}

pub fn full_graph_gradient(perturb: f64) -> Vec<CheckResult> {
    match full_graph_report(16, perturb) {
        Ok(r) => {
            let passing = r.passing();
            let worst = r.worst();
            vec![
                check("seeds under 1e-5", passing >= 5, format!("{passing}/16 seeds below 1e-5 (need 5)")),
                check("no seed above 1e-3", worst < 1e-3, format!("worst seed {worst:.2e}")),
            ]
        }
        Err(e) => vec![failed("full graph", e)],
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

/// `H'` stays in [-1, 1] and between `H` and the candidate, elementwise.
pub fn gru_invariants() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_bound = 0.0f64;
    let mut worst_between = 0.0f64;
    for _ in 0..1000 {
        let (d, t) = (rng.random_range(1..4), rng.random_range(1..6));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(&mut rng, &[d, t], 2.0));
        let h = tape.constant(rand_tensor(&mut rng, &[d, t], 1.0));
        let ks: Vec<Tensor<f64>> = (0..6).map(|_| tape_kernel(&mut rng, d)).collect();
        let v: Vec<_> = ks.into_iter().map(|k| tape.constant(k)).collect();
        let g = GruVars { w_r: v[0], u_r: v[1], w_u: v[2], u_u: v[3], w_cand: v[4], u_cand: v[5] };
        let out = match convgru_step(&mut tape, x, h, &g) {
            Ok(o) => tape.value(o).clone(),
            Err(e) => return vec![failed("gru step", e)],
        };
        // candidate from the same kernels
        let cand = (|| -> Result<Tensor<f64>, crate::autodiff::TensorError> {
            let a = tape.conv1d(x, g.w_r, 1, 1)?;
            let b = tape.conv1d(h, g.u_r, 1, 1)?;
            let s = tape.add(a, b)?;
            let r = tape.sigmoid(s)?;
            let rh = tape.mul(r, h)?;
            let a = tape.conv1d(x, g.w_cand, 1, 1)?;
            let b = tape.conv1d(rh, g.u_cand, 1, 1)?;
            let s = tape.add(a, b)?;
            let c = tape.tanh(s)?;
            Ok(tape.value(c).clone())
        })();
        let cand = match cand {
            Ok(c) => c,
            Err(e) => return vec![failed("gru candidate", e)],
        };
        let hv = tape.value(h).clone();
        for ((&o, &hp), &c) in out.data().iter().zip(hv.data()).zip(cand.data()) {
            worst_bound = worst_bound.max(o.abs() - 1.0);
            let (lo, hi) = (hp.min(c), hp.max(c));
            worst_between = worst_between.max(lo - o).max(o - hi);
        }
    }
    // zero parameters: u = 1/2 and C = 0, so H' = H/2
    let mut tape = Tape::<f64>::new();
    let h = rand_tensor(&mut rng, &[3, 7], 1.0);
    let hv = tape.constant(h.clone());
    let x = tape.constant(rand_tensor(&mut rng, &[3, 7], 1.0));
    let z: Vec<_> = (0..6).map(|_| tape.constant(Tensor::zeros(&[3, 3, 3]))).collect();
    let g = GruVars { w_r: z[0], u_r: z[1], w_u: z[2], u_u: z[3], w_cand: z[4], u_cand: z[5] };
    let exact = match convgru_step(&mut tape, x, hv, &g) {
        Ok(o) => tape.value(o).data().iter().zip(h.data()).all(|(&a, &b)| a == 0.5 * b),
        Err(_) => false,
    };
    vec![
        check("|H'| <= 1 over 1000 draws", worst_bound <= 0.0, format!("max |H'| - 1 = {worst_bound:.1e}")),
        check("H' between H and candidate", worst_between <= 1e-15, format!("max excursion {worst_between:.1e}")),
        check("zero parameters give H/2", exact, "bitwise"),
    ]
}

fn tape_kernel(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    rand_tensor(rng, &[d, d, 3], 1.5)
}

fn row_sum_error(t: &Tensor<f64>) -> f64 {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data().chunks(cols.max(1)).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

pub fn attention_rows() -> Vec<CheckResult> {
    let mut worst = 0.0f64;
    let mut err = None;
    for seed in 0..100u64 {
        let cfg = check_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Ok(mut params) = ModelParams::<f64>::init(cfg, seed) else { continue };
        for t in params.tensors.values_mut() {
            *t = t.map(|v| v * 3.0);
        }
        let t = rng.random_range(2..12);
        let input = ModelInput::new(
            rand_tensor(&mut rng, &[t, cfg.n_mels], 4.0),
            rand_tensor(&mut rng, &[t], 2.0),
            rand_tensor(&mut rng, &[t], 1.0),
        );
        let res = input.map_err(|e| e.to_string()).and_then(|input| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let tr = model::forward_on_tape(&mut tape, &b, &cfg, &input).map_err(|e| e.to_string())?;
            let mut w = row_sum_error(tape.value(tr.yhat)).max(row_sum_error(tape.value(tr.cross_attn)));
            for layer in &tr.agg_attn {
                for &m in layer {
                    w = w.max(row_sum_error(tape.value(m)));
                }
            }
            Ok(w)
        });
        match res {
            Ok(w) => worst = worst.max(w),
            Err(e) => err = Some(e),
        }
    }
    if let Some(e) = err {
        return vec![failed("random draws", e)];
    }
    // zero key projection: every key is the same, so each output row is the mean value row
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(rand_tensor(&mut rng, &[6, 3], 1.0));
    let z = tape.constant(rand_tensor(&mut rng, &[6, 2], 1.0));
    let wq = tape.constant(rand_tensor(&mut rng, &[3, 3], 1.0));
    let wk = tape.constant(Tensor::zeros(&[3, 2]));
    let wv_t = rand_tensor(&mut rng, &[3, 2], 1.0);
    let wv = tape.constant(wv_t.clone());
    let mean_err = match cross_attend(&mut tape, h, z, wq, wk, wv) {
        Ok((out, _)) => {
            let zv = tape.value(z).clone();
            let mut mean = [0.0; 3];
            for r in 0..6 {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += (0..2).map(|c| zv.at2(r, c) * wv_t.at2(j, c)).sum::<f64>() / 6.0;
                }
            }
            let o = tape.value(out);
            (0..6).flat_map(|r| (0..3).map(move |j| (r, j))).map(|(r, j)| (o.at2(r, j) - mean[j]).abs()).fold(0.0, f64::max)
        }
        Err(e) => return vec![failed("identical keys", e)],
    };
    vec![
        check("rows of attention and y sum to 1 (100 draws)", worst < 1e-6, format!("max |sum - 1| = {worst:.1e}")),
        check("identical keys average the values", mean_err < 1e-6, format!("max deviation {mean_err:.1e}")),
    ]
}

fn loss_value(yhat: [f64; 2], label: u8, rows: &[Vec<f64>], cfg: &LossConfig) -> Result<f64, model::ModelError> {
    let mut tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::from_vec(yhat.to_vec()));
    let h = tape.constant(Tensor::from_rows(rows)?);
    let l = joint_loss(&mut tape, y, label, h, cfg)?;
    Ok(tape.value(l).item())
}

pub fn loss_cases() -> Vec<CheckResult> {
    let temporal = LossConfig { lambda_cls: 0.0, lambda_temp: 1.0 };
    let run = || -> Result<Vec<CheckResult>, model::ModelError> {
        let hand = loss_value([0.5, 0.5], 1, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]], &temporal)?;
        let constant = loss_value([0.5, 0.5], 0, &vec![vec![0.3, -0.2]; 5], &temporal)?;
        let varying = loss_value([0.5, 0.5], 0, &[vec![0.3, -0.2], vec![0.3, -0.2], vec![0.3, -0.2 + 1e-3]], &temporal)?;
        let ce = loss_value([0.5, 0.5], 1, &[vec![0.0]], &LossConfig { lambda_cls: 1.0, lambda_temp: 0.0 })?;
        Ok(vec![
            check("temporal hand case = 1", (hand - 1.0).abs() <= 1e-12, format!("{hand:.15}")),
            check("temporal term of a constant sequence = 0", constant == 0.0, format!("{constant:e}")),
            check("temporal term of a varying sequence > 0", varying > 0.0, format!("{varying:e}")),
            check("CE of a uniform prediction = ln 2", (ce - std::f64::consts::LN_2).abs() <= 1e-9, format!("{ce:.12}")),
        ])
    };
    run().unwrap_or_else(|e| vec![failed("loss", e)])
}

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Every label and score arrangement of length 2..=`max_len` on a 5-point grid.
pub fn auc_exhaustive(max_len: u32) -> (u64, f64) {
    const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    (2..=max_len)
        .map(|n| {
            (0..5u64.pow(n))
                .into_par_iter()
                .map(|code| {
                    let mut c = code;
                    let scores: Vec<f64> = (0..n)
                        .map(|_| {
                            let s = GRID[(c % 5) as usize];
                            c /= 5;
                            s
                        })
                        .collect();
                    let mut cases = 0u64;
                    let mut worst = 0.0f64;
                    for mask in 1..(1u32 << n) - 1 {
                        let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                        let ex: Vec<ScoredExample> = scores.iter().zip(&labels).map(|(&s, &l)| ScoredExample::new(s, l)).collect();
                        let a = auc(&ex).unwrap_or(f64::NAN);
                        let diff = (a - pair_count_auc(&scores, &labels)).abs();
                        worst = if diff.is_nan() { f64::INFINITY } else { worst.max(diff) };
                        cases += 1;
                    }
                    (cases, worst)
                })
                .reduce(|| (0, 0.0), |a, b| (a.0 + b.0, a.1.max(b.1)))
        })
        .fold((0, 0.0), |a, b| (a.0 + b.0, a.1.max(b.1)))
}

pub fn auc_oracle() -> Vec<CheckResult> {
    let (cases, worst) = auc_exhaustive(8);
    vec![check("rank AUC equals pair counting, length <= 8", worst <= 1e-12, format!("{cases} arrangements, max diff {worst:.1e}"))]
}

fn sine(freq: f64, amp: f64, seconds: f64) -> Waveform {
    let sr = CANONICAL_RATE as f64;
    let n = (seconds * sr) as usize;
    Waveform::new((0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin()).collect(), CANONICAL_RATE)
        .expect("finite")
}

pub fn dsp_oracles() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let stft_cfg = StftConfig::default();

    let w = sine(220.0, 0.5, 1.0);
    match pitch_track(&w, &stft_cfg, &PitchConfig::default()) {
        Ok(t) => {
            let voiced: Vec<f64> = t.f0.iter().zip(&t.voiced).filter(|(_, &v)| v).map(|(&f, _)| f).collect();
            let worst = voiced.iter().map(|f| (f - 220.0).abs()).fold(0.0, f64::max);
            let ok = voiced.len() * 10 >= t.f0.len() * 9 && worst <= 2.0;
            out.push(check("220 Hz sine pitch", ok, format!("{}/{} frames voiced, max error {worst:.3} Hz", voiced.len(), t.f0.len())));
        }
        Err(e) => out.push(failed("220 Hz sine pitch", e)),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Waveform::new((0..4000).map(|_| rng.random_range(-0.5..0.5)).collect(), CANONICAL_RATE).expect("finite");
    match stft(&noise, &stft_cfg) {
        Ok(s) => {
            let win = stft_cfg.window();
            let mut worst = 0.0f64;
            for n in 0..s.frames {
                let frame = &noise.samples()[n * stft_cfg.hop_len..n * stft_cfg.hop_len + stft_cfg.window_len];
                let te: f64 = frame.iter().zip(&win).map(|(x, h)| (x * h).powi(2)).sum();
                let last = s.bins - 1;
                let se: f64 = s
                    .frame(n)
                    .iter()
                    .enumerate()
                    .map(|(k, c)| if k == 0 || k == last { c.norm_sqr() } else { 2.0 * c.norm_sqr() })
                    .sum::<f64>()
                    / stft_cfg.n_fft as f64;
                worst = worst.max((te - se).abs() / te);
            }
            out.push(check("Parseval per frame", worst <= 1e-6, format!("max relative gap {worst:.1e}")));
        }
        Err(e) => out.push(failed("Parseval per frame", e)),
    }

    match Frontend::new(FrontendConfig::default()) {
        Ok(fe) => {
            let mut wrong = Vec::new();
            for m in [5usize, 12, 20, 31, 40, 50, 60] {
                let w = sine(fe.filterbank().centers_hz[m], 0.5, 0.2);
                match fe.analyze(&w) {
                    Ok((lm, _)) => {
                        let row = lm.frame(lm.frames / 2);
                        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                        if arg != m {
                            wrong.push(format!("{m}->{arg}"));
                        }
                    }
                    Err(e) => wrong.push(e.to_string()),
                }
            }
            out.push(check(
                "tone at filter centre peaks in that filter",
                wrong.is_empty(),
                if wrong.is_empty() { "7 filters".into() } else { wrong.join(", ") },
            ));
        }
        Err(e) => out.push(failed("mel filterbank", e)),
    }

    let silence = Waveform::new(vec![0.0; 8000], CANONICAL_RATE).expect("finite");
    match pause_probability(&silence, &stft_cfg, &VadConfig::default()) {
        Ok(q) => {
            let min = q.iter().copied().fold(f64::INFINITY, f64::min);
            out.push(check("silence pause probability >= 0.95", min >= 0.95, format!("min q = {min:.4}")));
        }
        Err(e) => out.push(failed("silence pause probability", e)),
    }
    out
}

pub fn stratification() -> Vec<CheckResult> {
    let labels: Vec<u8> = (0..477).map(|i| u8::from(i >= 222)).collect();
    let mut out = Vec::new();
    match (stratified_folds(&labels, 5, 7, None), stratified_folds(&labels, 5, 7, None)) {
        (Ok(a), Ok(b)) => {
            let mut worst = 0.0f64;
            for f in 0..5 {
                let m = a.members(f);
                for (class, total) in [(0u8, 222.0), (1, 255.0)] {
                    let have = m.iter().filter(|&&i| labels[i] == class).count() as f64;
                    worst = worst.max((have - total / 5.0).abs());
                }
            }
            out.push(check("222/255 per-fold counts within 1", worst <= 1.0, format!("max deviation {worst:.1}")));
            out.push(check("same seed, same folds", a == b, ""));
        }
        (Err(e), _) | (_, Err(e)) => out.push(failed("ungrouped folds", e)),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let groups: Vec<String> = (0..300).map(|_| format!("s{}", rng.random_range(0..90))).collect();
    let mut subject_label = BTreeMap::new();
    let glabels: Vec<u8> = groups.iter().map(|g| *subject_label.entry(g.clone()).or_insert_with(|| rng.random_range(0..2u8))).collect();
    match stratified_folds(&glabels, 5, 3, Some(&groups)) {
        Ok(a) => {
            let mut fold_of = BTreeMap::new();
            let split = groups.iter().zip(&a.fold_of).any(|(g, &f)| *fold_of.entry(g).or_insert(f) != f);
            out.push(check("grouped folds never split a subject", !split, format!("{} subjects", fold_of.len())));
        }
        Err(e) => out.push(failed("grouped folds", e)),
    }
    out
}

type CheckGroup<'a> = Box<dyn Fn() -> Vec<CheckResult> + 'a>;

/// Runs every group, in order.
pub fn run_suite(opts: &VerifyOptions) -> Vec<GroupResult> {
    let groups: Vec<(&'static str, CheckGroup<'_>)> = vec![
        ("primitive gradients", Box::new(primitive_gradients)),
        ("full-graph gradient", Box::new(move || full_graph_gradient(opts.perturb_gradient))),
        ("ConvGRU bounds", Box::new(gru_invariants)),
        ("attention and softmax", Box::new(attention_rows)),
        ("loss", Box::new(loss_cases)),
        ("AUC oracle", Box::new(auc_oracle)),
        ("DSP oracles", Box::new(dsp_oracles)),
        ("stratification", Box::new(stratification)),
    ];
    groups
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let checks = f();
            GroupResult { name, checks, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}
