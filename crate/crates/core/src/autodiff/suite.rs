//! Finite-difference check of every differentiable primitive on random
//! shapes and values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Tape, Tensor, TensorError, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Each primitive reduced to a scalar through a random positive weighting, so
/// every output entry contributes a distinct sensitivity. Positive weights
/// (and positive operands for the linear ops) keep gradient entries away from
/// cancellation, where central differences lose all relative accuracy.
fn weighted_sum(tp: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let shape = tp.value(y).shape().to_vec();
    let w = tp.constant(rand_tensor(&mut rng, &shape, 0.5, 1.5));
    let p = tp.mul(y, w)?;
    tp.sum(p)
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

struct Suite {
    n_seeds: u64,
    results: Vec<(&'static str, f64)>,
}

impl Suite {
    fn check(&mut self, name: &'static str, build: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Op)) -> Result<(), TensorError> {
        let mut worst = 0.0f64;
        for seed in 0..self.n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = build(&mut rng);
            let err = grad_check(
                |tp, v| {
                    let y = f(tp, v)?;
                    weighted_sum(tp, y, seed)
                },
                &inputs,
                1e-5,
            )?;
            worst = worst.max(err);
        }
        self.results.push((name, worst));
        Ok(())
    }
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Worst relative error per primitive over seeds `0..n_seeds` (eps 1e-5, f64).
pub fn primitive_suite(n_seeds: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut suite = Suite { n_seeds, results: Vec::new() };
    suite.check("matmul", |rng| {
        let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
        (vec![rand_tensor(rng, &[m, k], 0.1, 1.0), rand_tensor(rng, &[k, n], 0.1, 1.0)], Box::new(|tp, v| tp.matmul(v[0], v[1])))
    })?;
    suite.check("conv1d", |rng| {
        let (ci, co, l, k) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 3, 8), dim(rng, 1, 3));
        let stride = dim(rng, 1, 2);
        let pad = dim(rng, 0, 1);
        (
            vec![rand_tensor(rng, &[ci, l], 0.1, 1.0), rand_tensor(rng, &[co, ci, k], 0.1, 1.0)],
            Box::new(move |tp, v| tp.conv1d(v[0], v[1], stride, pad)),
        )
    })?;
    suite.check("conv2d", |rng| {
        let (ci, co, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 3, 6), dim(rng, 3, 6));
        let stride = (dim(rng, 1, 2), dim(rng, 1, 2));
        (
            vec![rand_tensor(rng, &[ci, h, w], 0.1, 1.0), rand_tensor(rng, &[co, ci, 3, 3], 0.1, 1.0), rand_tensor(rng, &[co], 0.1, 1.0)],
            Box::new(move |tp, v| tp.conv2d(v[0], v[1], Some(v[2]), stride, (1, 1))),
        )
    })?;
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        suite.check(name, move |rng| {
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let broadcast = rng.random_bool(0.5);
            let bshape = if broadcast { vec![b] } else { vec![a, b] };
            (
                vec![rand_tensor(rng, &[a, b], 0.1, 2.0), rand_tensor(rng, &bshape, 0.1, 2.0)],
                Box::new(move |tp, v| match op {
                    0 => tp.add(v[0], v[1]),
                    1 => tp.sub(v[0], v[1]),
                    _ => tp.mul(v[0], v[1]),
                }),
            )
        })?;
    }
    suite.check("affine", |rng| {
        let n = dim(rng, 1, 6);
        (vec![rand_tensor(rng, &[n], -2.0, 2.0)], Box::new(|tp, v| tp.affine(v[0], -0.7, 0.3)))
    })?;
    suite.check("sigmoid", |rng| {
        let n = dim(rng, 1, 6);
        (vec![rand_tensor(rng, &[n, 2], -2.0, 2.0)], Box::new(|tp, v| tp.sigmoid(v[0])))
    })?;
    suite.check("tanh", |rng| {
        let n = dim(rng, 1, 6);
        (vec![rand_tensor(rng, &[n, 2], -2.0, 2.0)], Box::new(|tp, v| tp.tanh(v[0])))
    })?;
    suite.check("relu", |rng| {
        let n = dim(rng, 1, 6);
        // keep entries away from the kink
        let x = Tensor::from_fn(&[n, 3], |_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        (vec![x], Box::new(|tp, v| tp.relu(v[0])))
    })?;
    suite.check("log", |rng| {
        let n = dim(rng, 1, 6);
        (vec![rand_tensor(rng, &[n], 0.2, 3.0)], Box::new(|tp, v| tp.log_clamped(v[0], 1e-12)))
    })?;
    suite.check("softmax", |rng| {
        let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
        let axis = dim(rng, 0, 2);
        (vec![rand_tensor(rng, &[a, b, c], -2.0, 2.0)], Box::new(move |tp, v| tp.softmax(v[0], axis)))
    })?;
    suite.check("layer_norm", |rng| {
        // a length-2 axis normalizes to +-1 whatever the input, leaving only
        // eps-sized gradients
        let (a, b) = (dim(rng, 1, 3), dim(rng, 3, 6));
        let axis = dim(rng, 0, 1);
        let shape = if axis == 0 { [b, a] } else { [a, b] };
        (vec![rand_tensor(rng, &shape, -2.0, 2.0)], Box::new(move |tp, v| tp.layer_norm(v[0], axis, 1e-5)))
    })?;
    suite.check("mean", |rng| {
        let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
        let axis = dim(rng, 0, 2);
        (vec![rand_tensor(rng, &[a, b, c], -2.0, 2.0)], Box::new(move |tp, v| tp.mean(v[0], axis)))
    })?;
    suite.check("sum_squares", |rng| {
        let n = dim(rng, 1, 6);
        (vec![rand_tensor(rng, &[n, 2], -2.0, 2.0)], Box::new(|tp, v| tp.sum_squares(v[0])))
    })?;
    suite.check("concat", |rng| {
        let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
        let axis = dim(rng, 0, 1);
        let (s1, s2) = if axis == 0 { ([a, c], [b, c]) } else { ([c, a], [c, b]) };
        (vec![rand_tensor(rng, &s1, -2.0, 2.0), rand_tensor(rng, &s2, -2.0, 2.0)], Box::new(move |tp, v| tp.concat(v, axis)))
    })?;
    suite.check("slice", |rng| {
        let (a, b) = (dim(rng, 2, 5), dim(rng, 2, 5));
        let axis = dim(rng, 0, 1);
        let n = if axis == 0 { a } else { b };
        let start = dim(rng, 0, n - 1);
        let end = dim(rng, start + 1, n);
        (vec![rand_tensor(rng, &[a, b], -2.0, 2.0)], Box::new(move |tp, v| tp.slice(v[0], axis, start, end)))
    })?;
    suite.check("transpose", |rng| {
        let (a, b) = (dim(rng, 1, 5), dim(rng, 1, 5));
        (vec![rand_tensor(rng, &[a, b], -2.0, 2.0)], Box::new(|tp, v| tp.transpose(v[0])))
    })?;
    suite.check("avg_pool", |rng| {
        let (a, l, f) = (dim(rng, 1, 3), dim(rng, 1, 9), dim(rng, 1, 4));
        (vec![rand_tensor(rng, &[a, l], -2.0, 2.0)], Box::new(move |tp, v| tp.avg_pool_last(v[0], f)))
    })?;
    suite.check("upsample", |rng| {
        let (a, l, f) = (dim(rng, 1, 3), dim(rng, 2, 9), dim(rng, 1, 4));
        let len = l.div_ceil(f);
        (vec![rand_tensor(rng, &[a, len], -2.0, 2.0)], Box::new(move |tp, v| tp.upsample_last(v[0], f, l)))
    })?;
    Ok(suite.results)
}
