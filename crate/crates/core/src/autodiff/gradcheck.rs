//! Central finite-difference checks of tape gradients.
//!
//! The numerical derivative uses the five-point stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, whose fourth-order
//! truncation error allows a step large enough to keep cancellation noise
//! well below the tolerances of interest.
//!
//! Coordinates whose perturbation flips a ReLU gate or an absolute-value
//! sign (see [`Graph::kink_signature`]) are skipped and replaced by a fresh
//! draw: the derivative there is one-sided and the difference quotient
//! meaningless.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Stencil spacing `h`.
    pub step: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// zero up to rounding do not divide by zero.
    pub abs_floor: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub per_input: Option<usize>,
    /// Replacement draws allowed per input when coordinates hit a kink.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_floor: 1e-6,
            per_input: None,
            max_resample: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates dropped because a perturbation crossed a kink.
    pub kinks: usize,
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences. `f` records its computation on the given graph, reading the
/// inputs through the supplied handles.
pub fn gradcheck<E, F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64), E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        if g.shape(loss).iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(g.shape(loss).to_vec()).into());
        }
        Ok((g.value(loss).data()[0], g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut values = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let want = cfg.per_input.map_or(n, |k| k.min(n));
        let mut order: Vec<usize> = if want == n { (0..n).collect() } else { sample(&mut rng, n, want).into_vec() };
        let mut resampled = 0;
        let mut done = 0;
        let mut pos = 0;
        while done < want && pos < order.len() {
            let j = order[pos];
            pos += 1;
            let x0 = input.data()[j];
            let mut f = [0.0; 4];
            let mut crossed = false;
            for (k, o) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                values[i].data_mut()[j] = x0 + o * cfg.step;
                let (v, sig) = eval(&values)?;
                f[k] = v;
                crossed |= sig != base_sig;
            }
            values[i].data_mut()[j] = x0;
            if crossed {
                report.kinks += 1;
                if resampled < cfg.max_resample && want < n {
                    resampled += 1;
                    order.push(rng.gen_range(0..n));
                }
                continue;
            }
            let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * cfg.step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, cfg.abs_floor);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j, a, numeric));
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}
