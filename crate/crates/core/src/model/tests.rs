use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type T64 = Tensor<f64>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> T64 {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

fn small_config() -> ModelConfig {
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

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------- plain-loop reference implementations ----------

/// Same-padded 1-D cross-correlation of `x` (`[c][t]`) with `k[o][c][j]`.
fn ref_conv1d(x: &[Vec<f64>], k: &T64) -> Vec<Vec<f64>> {
    let (co, ci, kw) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let t = x[0].len();
    let pad = kw as isize / 2;
    (0..co)
        .map(|o| {
            (0..t)
                .map(|n| {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for j in 0..kw {
                            let src = n as isize + j as isize - pad;
                            if (0..t as isize).contains(&src) {
                                s += k.data()[(o * ci + c) * kw + j] * x[c][src as usize];
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

struct RefGru {
    w_r: T64,
    u_r: T64,
    w_u: T64,
    u_u: T64,
    w: T64,
    u: T64,
}

fn zip2(a: &[Vec<f64>], b: &[Vec<f64>], f: impl Fn(f64, f64) -> f64) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()).collect()
}

/// Returns (H_t, candidate).
fn ref_gru_step(x: &[Vec<f64>], h: &[Vec<f64>], g: &RefGru) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let r = zip2(&ref_conv1d(x, &g.w_r), &ref_conv1d(h, &g.u_r), |a, b| sigmoid(a + b));
    let u = zip2(&ref_conv1d(x, &g.w_u), &ref_conv1d(h, &g.u_u), |a, b| sigmoid(a + b));
    let rh = zip2(&r, h, |a, b| a * b);
    let c = zip2(&ref_conv1d(x, &g.w), &ref_conv1d(&rh, &g.u), |a, b| (a + b).tanh());
    let uh = zip2(&u, h, |a, b| a * b);
    let out = zip2(&uh, &zip2(&u, &c, |uu, cc| (1.0 - uu) * cc), |a, b| a + b);
    (out, c)
}

fn ref_pool(x: &[Vec<f64>], f: usize) -> Vec<Vec<f64>> {
    x.iter().map(|row| row.chunks(f).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()).collect()
}

fn rand_gru(rng: &mut ChaCha8Rng, d: usize, kw: usize, a: f64) -> RefGru {
    let mut k = || rand_tensor(rng, &[d, d, kw], a);
    RefGru { w_r: k(), u_r: k(), w_u: k(), u_u: k(), w: k(), u: k() }
}

fn zero_gru(d: usize) -> RefGru {
    let z = || Tensor::zeros(&[d, d, 3]);
    RefGru { w_r: z(), u_r: z(), w_u: z(), u_u: z(), w: z(), u: z() }
}

fn bind_gru(tape: &mut Tape<f64>, g: &RefGru) -> GruVars {
    GruVars {
        w_r: tape.leaf(g.w_r.clone()),
        u_r: tape.leaf(g.u_r.clone()),
        w_u: tape.leaf(g.w_u.clone()),
        u_u: tape.leaf(g.u_u.clone()),
        w_cand: tape.leaf(g.w.clone()),
        u_cand: tape.leaf(g.u.clone()),
    }
}

fn to_rows(t: &T64) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn from_rows(r: &[Vec<f64>]) -> T64 {
    Tensor::from_rows(r).unwrap()
}

// ---------- fusion ----------

#[test]
fn fusion_zero_params_and_hand_case() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::from_vec(vec![0.3, -1.0, 2.0]));
    let q = tape.constant(Tensor::from_vec(vec![0.1, 0.9, 0.5]));
    let w = tape.leaf(Tensor::zeros(&[4, 2]));
    let b = tape.leaf(Tensor::zeros(&[4]));
    let z = fuse_prosody(&mut tape, p, q, w, b).unwrap();
    assert_eq!(tape.value(z).shape(), &[3, 4]);
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

    let p = tape.constant(Tensor::from_vec(vec![-0.5]));
    let q = tape.constant(Tensor::from_vec(vec![0.2]));
    let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::zeros(&[1]));
    let z = fuse_prosody(&mut tape, p, q, w, b).unwrap();
    assert_eq!(tape.value(z).data(), &[0.0]);
}

#[test]
fn fusion_matches_per_frame_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (t, dz) = (7, 5);
    let pv = rand_tensor(&mut rng, &[t], 2.0);
    let qv = Tensor::from_fn(&[t], |_| rng.random_range(0.0..1.0));
    let wv = rand_tensor(&mut rng, &[dz, 2], 1.0);
    let bv = rand_tensor(&mut rng, &[dz], 0.5);
    let mut tape = Tape::<f64>::new();
    let (p, q, w, b) = (tape.constant(pv.clone()), tape.constant(qv.clone()), tape.leaf(wv.clone()), tape.leaf(bv.clone()));
    let z = fuse_prosody(&mut tape, p, q, w, b).unwrap();
    for n in 0..t {
        for j in 0..dz {
            let e = (wv.at2(j, 0) * pv.data()[n] + wv.at2(j, 1) * qv.data()[n] + bv.data()[j]).max(0.0);
            assert!((tape.value(z).at2(n, j) - e).abs() < 1e-14);
        }
    }
    let bad = tape.constant(Tensor::from_vec(vec![0.0; 6]));
    assert!(matches!(fuse_prosody(&mut tape, p, bad, w, b), Err(ModelError::ShapeMismatch(_))));
}

// ---------- encoder ----------

fn encoder_vars(tape: &mut Tape<f64>, params: &ModelParams<f64>) -> EncoderVars {
    EncoderVars {
        convs: (0..3)
            .map(|i| {
                (
                    tape.leaf(params.get(&format!("encoder.conv{i}.weight")).clone()),
                    tape.leaf(params.get(&format!("encoder.conv{i}.bias")).clone()),
                )
            })
            .collect(),
    }
}

#[test]
fn encoder_zero_input_and_time_length() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::<f64>::init(cfg, 3).unwrap();
    for i in 0..3 {
        params.get_mut(&format!("encoder.conv{i}.bias")).data_mut().iter_mut().for_each(|b| *b = 0.0);
    }
    for t in [1usize, 2, 5, 100] {
        let mut tape = Tape::<f64>::new();
        let enc = encoder_vars(&mut tape, &params);
        let s = tape.constant(Tensor::zeros(&[t, 64]));
        let h = spectral_encode(&mut tape, s, &enc).unwrap();
        assert_eq!(tape.value(h).shape(), &[t, 64]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn single_conv_encoder_matches_hand_convolution() {
    let s = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0, 2.0]).unwrap();
    let k = Tensor::new(vec![1, 1, 3, 3], vec![0.2, -0.1, 0.4, 0.3, 0.5, -0.6, 0.1, 0.7, -0.2]).unwrap();
    let bias: f64 = 0.05;
    let mut tape = Tape::<f64>::new();
    let sv = tape.constant(s.clone());
    let enc = EncoderVars { convs: vec![(tape.leaf(k.clone()), tape.leaf(Tensor::from_vec(vec![bias])))] };
    let h = spectral_encode(&mut tape, sv, &enc).unwrap();
    // stride 2 along mel with pad 1 on a width-4 input gives mel positions 0 and 2
    let at = |t: isize, m: isize| if (0..2).contains(&t) && (0..4).contains(&m) { s.at2(t as usize, m as usize) } else { 0.0 };
    for t in 0..2isize {
        let mut acc = 0.0;
        for mo in [0isize, 1] {
            let mut v = bias;
            for i in 0..3isize {
                for j in 0..3isize {
                    v += k.data()[(i * 3 + j) as usize] * at(t + i - 1, 2 * mo + j - 1);
                }
            }
            acc += v.max(0.0);
        }
        let expected = acc / 2.0;
        assert!((tape.value(h).at2(t as usize, 0) - expected).abs() < 1e-14, "frame {t}");
    }
}

// ---------- cross attention ----------

#[test]
fn identical_keys_give_the_common_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, dh, dz, d) = (6, 5, 3, 4);
    let zrow: Vec<f64> = (0..dz).map(|_| rng.random_range(-1.0..1.0)).collect();
    let zv = from_rows(&vec![zrow.clone(); t]);
    let wv = rand_tensor(&mut rng, &[d, dz], 1.0);
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(rand_tensor(&mut rng, &[t, dh], 1.0));
    let z = tape.constant(zv);
    let wq = tape.leaf(rand_tensor(&mut rng, &[d, dh], 1.0));
    let wk = tape.leaf(rand_tensor(&mut rng, &[d, dz], 1.0));
    let wvv = tape.leaf(wv.clone());
    let (out, attn) = cross_attend(&mut tape, h, z, wq, wk, wvv).unwrap();
    let vrow: Vec<f64> = (0..d).map(|i| (0..dz).map(|j| wv.at2(i, j) * zrow[j]).sum()).collect();
    for n in 0..t {
        for i in 0..d {
            assert!((tape.value(out).at2(n, i) - vrow[i]).abs() < 1e-12);
        }
        assert!((tape.value(attn).row(n).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_frame_attention_returns_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f64>::new();
    let zv = rand_tensor(&mut rng, &[1, 3], 1.0);
    let wv = rand_tensor(&mut rng, &[4, 3], 1.0);
    let h = tape.constant(rand_tensor(&mut rng, &[1, 2], 1.0));
    let z = tape.constant(zv.clone());
    let wq = tape.leaf(rand_tensor(&mut rng, &[4, 2], 1.0));
    let wk = tape.leaf(rand_tensor(&mut rng, &[4, 3], 1.0));
    let wvv = tape.leaf(wv.clone());
    let (out, _) = cross_attend(&mut tape, h, z, wq, wk, wvv).unwrap();
    for i in 0..4 {
        let v: f64 = (0..3).map(|j| wv.at2(i, j) * zv.data()[j]).sum();
        assert!((tape.value(out).data()[i] - v).abs() < 1e-14);
    }
}

#[test]
fn two_frame_scalar_attention_by_hand() {
    // d = 1: Q = 2h, K = z, V = -z
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap());
    let z = tape.constant(Tensor::new(vec![2, 1], vec![0.3, 1.2]).unwrap());
    let wq = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let wk = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let wv = tape.leaf(Tensor::new(vec![1, 1], vec![-1.0]).unwrap());
    let (out, _) = cross_attend(&mut tape, h, z, wq, wk, wv).unwrap();
    let (q, k, v): ([f64; 2], [f64; 2], [f64; 2]) = ([2.0, -1.0], [0.3, 1.2], [-0.3, -1.2]);
    for n in 0..2 {
        let e0 = (q[n] * k[0]).exp();
        let e1 = (q[n] * k[1]).exp();
        let expected = (e0 * v[0] + e1 * v[1]) / (e0 + e1);
        assert!((tape.value(out).data()[n] - expected).abs() < 1e-14);
    }
}

// ---------- ConvGRU ----------

#[test]
fn zero_parameter_gru_halves_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (d, t) = (4, 9);
    let zero = zero_gru(d);
    let hv = rand_tensor(&mut rng, &[d, t], 1.0);
    let mut tape = Tape::<f64>::new();
    let g = bind_gru(&mut tape, &zero);
    let x = tape.constant(rand_tensor(&mut rng, &[d, t], 1.0));
    let h = tape.constant(hv.clone());
    let out = convgru_step(&mut tape, x, h, &g).unwrap();
    for (o, hh) in tape.value(out).data().iter().zip(hv.data()) {
        assert_eq!(*o, 0.5 * hh);
    }
    let h0 = tape.constant(Tensor::zeros(&[d, t]));
    let out = convgru_step(&mut tape, x, h0, &g).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn scalar_gru_by_hand() {
    let k = |v: f64| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
    let g = RefGru { w_r: k(0.5), u_r: k(-0.3), w_u: k(0.8), u_u: k(0.2), w: k(1.1), u: k(-0.7) };
    let (x, h) = (0.6, -0.4);
    let r = sigmoid(0.5 * x - 0.3 * h);
    let u = sigmoid(0.8 * x + 0.2 * h);
    let c = (1.1 * x - 0.7 * r * h).tanh();
    let expected = u * h + (1.0 - u) * c;
    let mut tape = Tape::<f64>::new();
    let gv = bind_gru(&mut tape, &g);
    let xv = tape.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
    let hv = tape.constant(Tensor::new(vec![1, 1], vec![h]).unwrap());
    let out = convgru_step(&mut tape, xv, hv, &gv).unwrap();
    assert!((tape.value(out).item() - expected).abs() < 1e-15);
}

#[test]
fn gru_is_bounded_and_convex_over_1000_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for draw in 0..1000 {
        let d = rng.random_range(1..5);
        let t = rng.random_range(1..7);
        let g = rand_gru(&mut rng, d, 3, 2.0);
        let x = to_rows(&rand_tensor(&mut rng, &[d, t], 3.0));
        let h = to_rows(&rand_tensor(&mut rng, &[d, t], 1.0));
        let mut tape = Tape::<f64>::new();
        let gv = bind_gru(&mut tape, &g);
        let xv = tape.constant(from_rows(&x));
        let hv = tape.constant(from_rows(&h));
        let out = convgru_step(&mut tape, xv, hv, &gv).unwrap();
        let out = to_rows(tape.value(out));
        let (expected, cand) = ref_gru_step(&x, &h, &g);
        for c in 0..d {
            for n in 0..t {
                let v = out[c][n];
                assert!((-1.0..=1.0).contains(&v), "draw {draw}: {v}");
                let (lo, hi) = (h[c][n].min(cand[c][n]), h[c][n].max(cand[c][n]));
                assert!(lo - 1e-12 <= v && v <= hi + 1e-12, "draw {draw}");
                assert!((v - expected[c][n]).abs() < 1e-12);
            }
        }
    }
}

// ---------- refinement ----------

fn refine_with(x: &T64, grus: &[RefGru], iters: usize, down: usize) -> T64 {
    let mut tape = Tape::<f64>::new();
    let gv: Vec<GruVars> = grus.iter().map(|g| bind_gru(&mut tape, g)).collect();
    let xv = tape.constant(x.clone());
    let out = iterative_refine(&mut tape, xv, &gv, iters, down).unwrap();
    tape.value(out).clone()
}

#[test]
fn refine_zero_case_and_single_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, d) = (10, 3);
    let out = refine_with(&Tensor::zeros(&[t, d]), &[zero_gru(d), zero_gru(d)], 3, 4);
    assert_eq!(out.shape(), &[3, d]);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let g = rand_gru(&mut rng, d, 3, 1.0);
    let x = rand_tensor(&mut rng, &[t, d], 1.0);
    let out = refine_with(&x, std::slice::from_ref(&g), 1, 4);
    let xc = to_rows(&transpose(&x));
    let (step, _) = ref_gru_step(&xc, &vec![vec![0.0; t]; d], &g);
    let expected = transpose(&from_rows(&ref_pool(&step, 4)));
    assert!(out.max_abs_diff(&expected) < 1e-14);
}

fn transpose(x: &T64) -> T64 {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[c, r], |i| x.at2(i % r, i / r))
}

#[test]
fn two_scale_refinement_matches_straight_line_schedule() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, d) = (8, 3);
    let grus = [rand_gru(&mut rng, d, 3, 1.0), rand_gru(&mut rng, d, 3, 1.0)];
    let x = rand_tensor(&mut rng, &[t, d], 1.0);
    let out = refine_with(&x, &grus, 2, 1);

    let xc = to_rows(&transpose(&x));
    // scale 0
    let mut h0 = vec![vec![0.0; t]; d];
    for _ in 0..2 {
        h0 = ref_gru_step(&xc, &h0, &grus[0]).0;
    }
    // scale 1 on the pair-averaged sequence
    let x1 = ref_pool(&xc, 2);
    let mut h1 = vec![vec![0.0; t / 2]; d];
    for _ in 0..2 {
        h1 = ref_gru_step(&x1, &h1, &grus[1]).0;
    }
    let mut expected = vec![vec![0.0; t]; d];
    for c in 0..d {
        for n in 0..t {
            expected[c][n] = h0[c][n] + h1[c][n / 2];
        }
    }
    let expected = transpose(&from_rows(&expected));
    assert!(out.max_abs_diff(&expected) < 1e-13);
}

#[test]
fn refinement_rejects_short_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grus: Vec<RefGru> = (0..3).map(|_| rand_gru(&mut rng, 2, 3, 1.0)).collect();
    let mut tape = Tape::<f64>::new();
    let gv: Vec<GruVars> = grus.iter().map(|g| bind_gru(&mut tape, g)).collect();
    let x = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(iterative_refine(&mut tape, x, &gv, 1, 1), Err(ModelError::SequenceTooShort { len: 3, need: 4 })));
    // odd lengths pool with a partial last window and still upsample back
    let x = tape.constant(rand_tensor(&mut rng, &[5, 2], 1.0));
    let out = iterative_refine(&mut tape, x, &gv, 1, 2).unwrap();
    assert_eq!(tape.value(out).shape(), &[3, 2]);
}

// ---------- aggregation and classification ----------

#[test]
fn zero_weight_transformer_reduces_to_token_norm() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::<f64>::zeros(cfg).unwrap();
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with("gamma") {
            *t = Tensor::full(t.shape(), 1.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cls = rand_tensor(&mut rng, &[64], 1.0);
    *params.get_mut("agg.cls") = cls.clone();
    let mut tape = Tape::<f64>::new();
    let p = params.bind(&mut tape);
    let h = tape.constant(rand_tensor(&mut rng, &[5, 64], 1.0));
    let (u, maps) = aggregate(&mut tape, h, &p.aggregator(&cfg)).unwrap();
    let pe = sinusoidal_positions::<f64>(1, 64);
    let x: Vec<f64> = cls.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();
    let mean = x.iter().sum::<f64>() / 64.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    for (o, xi) in tape.value(u).data().iter().zip(&x) {
        assert!((o - (xi - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
    }
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[0].len(), 4);
}

#[test]
fn attention_rows_sum_to_one_and_order_matters() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f64>::init(cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seq = rand_tensor(&mut rng, &[7, 64], 1.0);
    let mut rev_rows = to_rows(&seq);
    rev_rows.reverse();
    let run = |s: T64| {
        let mut tape = Tape::<f64>::new();
        let p = params.bind(&mut tape);
        let h = tape.constant(s);
        let (u, maps) = aggregate(&mut tape, h, &p.aggregator(&cfg)).unwrap();
        for m in maps.iter().flatten() {
            let w = tape.value(*m);
            for r in 0..w.shape()[0] {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(w.row(r).iter().all(|&v| v >= 0.0));
            }
        }
        tape.value(u).clone()
    };
    let a = run(seq);
    let b = run(from_rows(&rev_rows));
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn classifier_cases() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::from_vec(vec![0.3, -1.0, 2.0]));
    let w0 = tape.leaf(Tensor::zeros(&[2, 3]));
    let b0 = tape.leaf(Tensor::zeros(&[2]));
    let y = classify(&mut tape, u, w0, b0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let b = tape.leaf(Tensor::from_vec(vec![10.0, -10.0]));
    let y = classify(&mut tape, u, w0, b).unwrap();
    let yv = tape.value(y).data();
    assert!((yv[0] - 1.0).abs() < 1e-8 && (yv[1] - 2.061e-9).abs() < 1e-11);
    assert!((yv[0] + yv[1] - 1.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let wv = rand_tensor(&mut rng, &[2, 3], 1.0);
    let bv = rand_tensor(&mut rng, &[2], 1.0);
    let w = tape.leaf(wv.clone());
    let bb = tape.leaf(bv.clone());
    let y = classify(&mut tape, u, w, bb).unwrap();
    let uv = [0.3, -1.0, 2.0];
    let l: Vec<f64> = (0..2).map(|i| (0..3).map(|j| wv.at2(i, j) * uv[j]).sum::<f64>() + bv.data()[i]).collect();
    let p1 = 1.0 / (1.0 + (l[0] - l[1]).exp());
    assert!((tape.value(y).data()[1] - p1).abs() < 1e-14);
    // shifting both logits leaves the prediction unchanged
    let shifted = tape.leaf(Tensor::from_vec(vec![bv.data()[0] + 7.0, bv.data()[1] + 7.0]));
    let y2 = classify(&mut tape, u, w, shifted).unwrap();
    assert!(tape.value(y2).max_abs_diff(tape.value(y)) < 1e-14);
}

// ---------- loss ----------

fn loss_of(y: [f64; 2], label: u8, rows: &[Vec<f64>], cfg: LossConfig) -> f64 {
    let mut tape = Tape::<f64>::new();
    let yv = tape.leaf(Tensor::from_vec(y.to_vec()));
    let h = tape.leaf(from_rows(rows));
    let l = joint_loss(&mut tape, yv, label, h, &cfg).unwrap();
    tape.value(l).item()
}

#[test]
fn loss_hand_cases() {
    let c = LossConfig { lambda_cls: 1.0, lambda_temp: 1.0 };
    assert_eq!(loss_of([1.0, 0.0], 0, &vec![vec![0.5, 0.5]; 4], c), 0.0);
    let ce = loss_of([0.5, 0.5], 1, &[vec![0.0, 1.0], vec![3.0, 1.0]], LossConfig { lambda_cls: 1.0, lambda_temp: 0.0 });
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-9);
    let temp = loss_of([0.5, 0.5], 0, &[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]], LossConfig { lambda_cls: 0.0, lambda_temp: 1.0 });
    assert!((temp - 1.0).abs() < 1e-12);
    // a single row has no temporal term
    assert_eq!(loss_of([0.0, 1.0], 1, &[vec![4.0, 2.0]], c), 0.0);
    // clamped log for a zero probability
    assert!((loss_of([1.0, 0.0], 1, &[vec![0.0]], c) - 1e12f64.ln()).abs() < 1e-9);
}

#[test]
fn temporal_term_positive_unless_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = LossConfig { lambda_cls: 0.0, lambda_temp: 1.0 };
    for _ in 0..50 {
        let rows = to_rows(&rand_tensor(&mut rng, &[5, 3], 1.0));
        assert!(loss_of([0.5, 0.5], 0, &rows, c) > 0.0);
    }
    let mut tape = Tape::<f64>::new();
    let y = tape.leaf(Tensor::from_vec(vec![0.5, 0.5]));
    let h = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(joint_loss(&mut tape, y, 2, h, &c), Err(ModelError::BadLabel(2))));
}

// ---------- whole model ----------

#[test]
fn zero_model_predicts_one_half() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f64>::zeros(cfg).unwrap();
    let input = ModelInput::new(Tensor::zeros(&[12, 64]), Tensor::zeros(&[12]), Tensor::zeros(&[12])).unwrap();
    let (y, _) = forward(&params, &input).unwrap();
    assert_eq!(y, [0.5, 0.5]);
}

#[test]
fn forward_shapes_and_probability_rows() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(cfg, 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for t in [4usize, 17, 256] {
        let input = ModelInput::new(
            Tensor::from_fn(&[t, 64], |_| rng.random_range(-20.0..2.0)),
            Tensor::from_fn(&[t], |_| rng.random_range(-2.0..2.0)),
            Tensor::from_fn(&[t], |_| rng.random_range(0.0..1.0)),
        )
        .unwrap();
        let mut tape = Tape::<f32>::new();
        let p = params.bind(&mut tape);
        let tr = forward_on_tape(&mut tape, &p, &cfg, &input).unwrap();
        assert_eq!(tape.value(tr.h_seq).shape(), &[t.div_ceil(4), 64]);
        assert_eq!(tape.value(tr.cross_attn).shape(), &[t, t]);
        let y = tape.value(tr.yhat).data();
        assert!((y[0] + y[1] - 1.0).abs() < 1e-6);
    }
    let short = ModelInput::new(Tensor::zeros(&[1, 64]), Tensor::zeros(&[1]), Tensor::zeros(&[1])).unwrap();
    assert!(matches!(forward(&params, &short), Err(ModelError::SequenceTooShort { len: 1, need: 2 })));
    let wrong = ModelInput::new(Tensor::zeros(&[8, 40]), Tensor::zeros(&[8]), Tensor::zeros(&[8])).unwrap();
    assert!(matches!(forward(&params, &wrong), Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn full_graph_gradient_check() {
    // Entries whose gradient is below ~1e-6 sit at the roundoff floor of a
    // 1e-5 central difference, so not every draw can meet the bound. Require
    // five clean seeds out of a fixed list, and bound the rest loosely so a
    // wrong derivative (relative error of order one) still fails.
    let report = check::full_graph_report(16, 0.0).unwrap();
    assert!(report.passing() >= 5, "{:?}", report.errors);
    assert!(report.worst() < 1e-3, "{:?}", report.errors);
}

#[test]
fn full_graph_roundoff_shrinks_with_larger_step() {
    // On the worst seed the disagreement drops when the step grows, which is
    // the signature of cancellation error rather than a wrong gradient.
    let report = check::full_graph_report(16, 0.0).unwrap();
    let (seed, err) = report.errors.iter().copied().fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let coarse = check::full_graph_check(seed, 1e-4, 0.0).unwrap();
    assert!(coarse < err / 3.0, "seed {seed}: {err} at 1e-5, {coarse} at 1e-4");
}

#[test]
fn perturbed_gradient_is_detected() {
    let err = check::full_graph_check(0, 1e-5, 1e-3).unwrap();
    assert!(err > 1e-3, "{err}");
}

#[test]
fn loss_and_grad_agree_with_tape() {
    let cfg = small_config();
    let params = ModelParams::<f64>::init(cfg, 21).unwrap();
    let input =
        ModelInput::new(Tensor::full(&[5, 8], -1.0), Tensor::from_vec(vec![0.1, 0.2, 0.0, -0.3, 0.5]), Tensor::full(&[5], 0.4)).unwrap();
    let lg = loss_and_grad(&params, &input, 1, &LossConfig::default()).unwrap();
    assert_eq!(lg.grads.len(), params.tensors.len());
    for (name, g) in &lg.grads {
        assert_eq!(g.shape(), params.get(name).shape());
    }
    let (y, _) = forward(&params, &input).unwrap();
    assert_eq!(y, lg.yhat);
}

// ---------- parameter files ----------

fn reference_crc32(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn params_round_trip_and_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    let params = ModelParams::<f32>::init(ModelConfig::default(), 16).unwrap();
    save_params(&params, &path).unwrap();
    let back: ModelParams<f32> = load_params(&path).unwrap();
    assert_eq!(back, params);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"TAIM");
    let n_words = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let crc_at = 12 + 4 * n_words;
    let stored = u32::from_le_bytes(bytes[crc_at..crc_at + 4].try_into().unwrap());
    assert_eq!(stored, reference_crc32(&bytes[crc_at + 4..]));

    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_params::<f32>(&path), Err(ModelError::CorruptFile(_))));
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_params::<f32>(&path), Err(ModelError::CorruptFile(_))));
    let mut v2 = bytes.clone();
    v2[4] = 9;
    std::fs::write(&path, &v2).unwrap();
    assert!(matches!(load_params::<f32>(&path), Err(ModelError::VersionMismatch { found: 9, expected: 1 })));
    std::fs::write(&path, &bytes[..10]).unwrap();
    assert!(matches!(load_params::<f32>(&path), Err(ModelError::CorruptFile(_))));
}
