use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over all input scalars of |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (input index, element index) of the worst scalar.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Autodiff("gradient check needs a scalar function".into()));
    }
    Ok(tape.value(out).data()[0])
}

/// Compares reverse-mode gradients of scalar `f` against central differences
/// with step `eps`, over every scalar of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_selected(f, inputs, eps, |_, grad| (0..grad.numel()).collect())
}

/// Like [`grad_check`] but visits at most `per_input` scalars of each input:
/// the one with the largest analytic gradient plus a seeded random sample.
/// For models too large to perturb every scalar.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_selected(f, inputs, eps, |i, grad| {
        let n = grad.numel();
        if n <= per_input {
            return (0..n).collect();
        }
        let largest = (0..n)
            .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()))
            .unwrap_or(0);
        let mut rng = SeedStream::new(seed).split_index("grad-check", i as u64).rng();
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, n, per_input.max(1)).into_vec();
        if !picked.contains(&largest) {
            picked[0] = largest;
        }
        picked.sort_unstable();
        picked
    })
}

fn check_selected<F, S>(f: F, inputs: &[Tensor<f64>], eps: f64, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    S: Fn(usize, &Tensor<f64>) -> Vec<usize>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("inputs require grad"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in select(i, grad) {
            let original = inputs[i].data()[j];
            probe[i].data_mut()[j] = original + eps;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = original - eps;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
