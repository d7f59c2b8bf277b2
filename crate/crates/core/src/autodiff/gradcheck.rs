use super::{Real, Tape, Tensor, TensorError, Var};

/// Analytic and central-difference gradients for every input of a scalar function.
#[derive(Clone, Debug)]
pub struct GradCheck<F> {
    pub analytic: Vec<Tensor<F>>,
    pub numeric: Vec<Tensor<F>>,
}

impl<F: Real> GradCheck<F> {
    /// Largest `|a - n| / max(1e-8, |a| + |n|)` over all entries.
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .flat_map(|(a, n)| a.data().iter().zip(n.data()))
            .map(|(&a, &n)| relative_error(a.as_f64(), n.as_f64()))
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F: Real, Fun>(f: &Fun, inputs: &[Tensor<F>]) -> Result<F, TensorError>
where
    Fun: Fn(&mut Tape<F>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Runs `f` once with reverse mode and once per input entry with central
/// differences of step `eps`.
pub fn grad_check_detailed<F: Real, Fun>(f: Fun, inputs: &[Tensor<F>], eps: F) -> Result<GradCheck<F>, TensorError>
where
    Fun: Fn(&mut Tape<F>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic = vars.iter().zip(inputs).map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    drop(tape);

    let two_eps = eps + eps;
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for which in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[which].shape());
        for e in 0..inputs[which].len() {
            let orig = inputs[which].data()[e];
            work[which].data_mut()[e] = orig + eps;
            let plus = eval(&f, &work)?;
            work[which].data_mut()[e] = orig - eps;
            let minus = eval(&f, &work)?;
            work[which].data_mut()[e] = orig;
            num.data_mut()[e] = (plus - minus) / two_eps;
        }
        numeric.push(num);
    }
    Ok(GradCheck { analytic, numeric })
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of the scalar function `f` over all entries of `inputs`.
pub fn grad_check<F: Real, Fun>(f: Fun, inputs: &[Tensor<F>], eps: F) -> Result<f64, TensorError>
where
    Fun: Fn(&mut Tape<F>, &[Var]) -> Result<Var, TensorError>,
{
    Ok(grad_check_detailed(f, inputs, eps)?.max_rel_error())
}
