//! Central finite-difference checks for taped computations, run in `f64`.
//!
//! The numeric side only evaluates the forward function; it shares nothing
//! with the backward implementations it checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_of, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;

/// Relative error with an absolute floor for gradients that are ~0.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Probes redrawn because they straddle a non-differentiable point.
    pub rejected: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e >= self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
    }
}

/// Which entries of the inputs get a numeric derivative.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many random entries per input.
    PerInput(usize),
    /// This many random `(input, entry)` pairs overall; inputs are drawn
    /// uniformly, so small tensors are not starved.
    Sampled(usize),
    /// Like `Sampled`, but a probe whose central differences at `h` and
    /// `h/2` disagree is taken to straddle a kink (ReLU, |x|) and is redrawn,
    /// at most `max_rejects` times in total. Gradient bugs survive this
    /// filter because both step sizes agree with each other, not with the
    /// analytic value.
    SampledSmooth { count: usize, max_rejects: usize },
}

/// Agreement required between the `h` and `h/2` differences of a smooth probe.
const KINK_TOL: f64 = FD_REL_TOL / 10.0;

/// Compares tape gradients of `<u, f(inputs)>` against central differences
/// for a random upstream `u`.
pub fn check<F>(inputs: &[(&str, Tensor<f64>)], f: F, coverage: Coverage, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |vals: &[(&str, Tensor<f64>)]| -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|(n, t)| tape.param(n, t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };
    let out = eval(inputs)?;
    let upstream = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
    let analytic = gradient_of(inputs, &upstream, &f)?;
    let dot = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum() };

    let mut report = GradCheckReport::default();
    let mut work: Vec<(&str, Tensor<f64>)> = inputs.to_vec();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (k, (_, t)) in inputs.iter().enumerate() {
        let len = t.len();
        match coverage {
            Coverage::All => picks.extend((0..len).map(|i| (k, i))),
            Coverage::PerInput(n) if n >= len => picks.extend((0..len).map(|i| (k, i))),
            Coverage::PerInput(n) => picks.extend(sample(&mut rng, len, n).into_iter().map(|i| (k, i))),
            Coverage::Sampled(_) | Coverage::SampledSmooth { .. } => {}
        }
    }
    if let Coverage::Sampled(n) = coverage {
        for _ in 0..n {
            let k = rng.random_range(0..inputs.len());
            picks.push((k, rng.random_range(0..inputs[k].1.len())));
        }
    }
    let mut central = |k: usize, i: usize, h: f64| -> Result<f64> {
        let orig = work[k].1.data()[i];
        work[k].1.data_mut()[i] = orig + h;
        let plus = dot(&eval(&work)?);
        work[k].1.data_mut()[i] = orig - h;
        let minus = dot(&eval(&work)?);
        work[k].1.data_mut()[i] = orig;
        Ok((plus - minus) / (2.0 * h))
    };
    for (k, i) in picks {
        let name = inputs[k].0;
        report.record(name, i, analytic.grads[name].data()[i], central(k, i, FD_STEP)?);
    }
    if let Coverage::SampledSmooth { count, max_rejects } = coverage {
        while report.checked < count {
            let k = rng.random_range(0..inputs.len());
            let i = rng.random_range(0..inputs[k].1.len());
            let full = central(k, i, FD_STEP)?;
            let half = central(k, i, FD_STEP / 2.0)?;
            if rel_error(full, half) > KINK_TOL && report.rejected < max_rejects {
                report.rejected += 1;
                continue;
            }
            let name = inputs[k].0;
            report.record(name, i, analytic.grads[name].data()[i], full);
        }
    }
    Ok(report)
}
