//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Probe step; `None` uses the element type's default (1e-3 for f32, 1e-5 for f64).
    pub step: Option<f64>,
    /// Coordinates probed per input; inputs at most this large are probed exhaustively.
    pub max_probes_per_input: usize,
    /// Gradients smaller than this are compared in absolute rather than relative terms.
    pub abs_floor: f64,
    pub seed: u64,
    /// Combines central differences at `h` and `h/2` as `(4 D(h/2) - D(h)) / 3`,
    /// cancelling the `h^2` error term. Useful when sharp curvature and
    /// roundoff leave no single step accurate enough.
    pub richardson: bool,
    /// When set, a coordinate whose differences at `h` and `h/2` disagree by
    /// more than this relative amount is taken to have a kink (a PReLU or
    /// absolute-value breakpoint) inside the stencil. It is counted in
    /// [`GradCheckReport::skipped`] instead of being compared, since no
    /// finite difference estimates the derivative there. A wrong analytic
    /// gradient cannot trigger this: the test looks only at the differences.
    pub kink_guard: Option<f64>,
    /// Before a coordinate is skipped by the kink guard, the step is halved
    /// up to this many more times. Strong but smooth curvature settles as
    /// the step shrinks, while a breakpoint inside the stencil does not
    /// until the stencil no longer contains it.
    pub refinements: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over the compared coordinates.
    pub worst: f64,
    pub compared: usize,
    pub skipped: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: None,
            max_probes_per_input: 16,
            abs_floor: 1e-3,
            seed: 0,
            richardson: false,
            kink_guard: None,
            refinements: 0,
        }
    }
}

fn eval<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(NnError::Dimension(format!(
            "grad_check function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    let y = v.data()[0].as_f64();
    if !y.is_finite() {
        return Err(NnError::Numeric(format!("function value {y}")));
    }
    Ok(y)
}

/// Worst relative error between analytic and central-difference gradients
/// of the scalar function `f` over sampled coordinates of every input.
pub fn grad_check<T: Scalar, F>(f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, inputs, cfg)?.worst)
}

/// [`grad_check`] with counts of compared and skipped coordinates.
pub fn grad_check_report<T: Scalar, F>(f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let h = cfg.step.unwrap_or(T::FD_STEP);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { worst: 0.0, compared: 0, skipped: 0 };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        if !analytic.is_finite() {
            return Err(NnError::Numeric(format!("non-finite gradient for input {i}")));
        }
        let coords: Vec<usize> = if input.len() <= cfg.max_probes_per_input {
            (0..input.len()).collect()
        } else {
            (0..cfg.max_probes_per_input)
                .map(|_| rng.gen_range(0..input.len()))
                .collect()
        };
        for k in coords {
            let x0 = input.data()[k];
            let mut central = |h: f64| -> Result<f64> {
                probe[i].data_mut()[k] = T::of_f64(x0.as_f64() + h);
                let up = eval(&f, &probe)?;
                probe[i].data_mut()[k] = T::of_f64(x0.as_f64() - h);
                let down = eval(&f, &probe)?;
                probe[i].data_mut()[k] = x0;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = if cfg.richardson || cfg.kink_guard.is_some() {
                let (mut d1, mut d2) = (central(h)?, central(h / 2.0)?);
                if let Some(limit) = cfg.kink_guard {
                    let disagree = |d1: f64, d2: f64| {
                        let scale = d1.abs().max(d2.abs()).max(cfg.abs_floor);
                        (d1 - d2).abs() / scale > limit
                    };
                    let mut step = h / 2.0;
                    for _ in 0..cfg.refinements {
                        if !disagree(d1, d2) {
                            break;
                        }
                        step /= 2.0;
                        (d1, d2) = (d2, central(step)?);
                    }
                    if disagree(d1, d2) {
                        report.skipped += 1;
                        continue;
                    }
                }
                if cfg.richardson {
                    (4.0 * d2 - d1) / 3.0
                } else {
                    d1
                }
            } else {
                central(h)?
            };
            let a = analytic.data()[k].as_f64();
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.worst = report.worst.max((a - numeric).abs() / denom);
            report.compared += 1;
        }
    }
    Ok(report)
}
