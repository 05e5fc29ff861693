//! Central finite-difference verification of analytic gradients.

use super::{Module, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Evaluate the loss only.
    Forward,
    /// Evaluate the loss and accumulate gradients into the module's params.
    Backward,
}

/// Result of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub loss: f64,
    /// Branch signature (see [`Module::kink_signature`]); a probe whose
    /// signature differs from the unperturbed one crossed a kink.
    pub signature: u64,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// How many times the step is divided by `shrink` after a kink crossing
    /// before the element is skipped.
    pub retries: u32,
    pub shrink: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            retries: 3,
            shrink: 10.0,
            max_elements_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    /// `||analytic - numeric|| / (||analytic|| + ||numeric||)` over checked elements.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Euclidean norms over checked elements.
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub diff_norm: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    /// Relative error of the whole gradient vector, all parameters concatenated.
    pub fn overall_rel_error(&self) -> f64 {
        let sq = |f: fn(&ParamGradError) -> f64| self.params.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
        let denom = sq(|p| p.analytic_norm) + sq(|p| p.numeric_norm);
        if denom == 0.0 {
            0.0
        } else {
            sq(|p| p.diff_norm) / denom
        }
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn worst(&self) -> Option<&ParamGradError> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

struct Norms {
    rel: f64,
    max_abs: f64,
    analytic: f64,
    numeric: f64,
    diff: f64,
}

fn norm_rel_error(analytic: &[f64], numeric: &[f64]) -> Norms {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = na.sqrt() + nn.sqrt();
    Norms {
        rel: if denom == 0.0 { 0.0 } else { diff.sqrt() / denom },
        max_abs,
        analytic: na.sqrt(),
        numeric: nn.sqrt(),
        diff: diff.sqrt(),
    }
}

/// Compares the gradients produced by `objective(model, Pass::Backward)` with
/// central differences of `objective(model, Pass::Forward)` for every trainable
/// parameter of `model`.
pub fn grad_check<T, M, F>(model: &mut M, mut objective: F, config: &GradCheckConfig) -> GradCheckReport
where
    T: Scalar,
    M: Module<T>,
    F: FnMut(&mut M, Pass) -> Probe,
{
    model.zero_grad();
    let base = objective(model, Pass::Backward);
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.into_f64()).collect())
        .collect();
    let names: Vec<(String, bool)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.trainable))
        .collect();

    let mut report = GradCheckReport { params: Vec::new() };
    for (pi, (name, trainable)) in names.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let len = analytic[pi].len();
        let stride = match config.max_elements_per_param {
            Some(max) if max > 0 && len > max => len.div_ceil(max),
            _ => 1,
        };
        let mut checked_analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut skipped = 0;
        for j in (0..len).step_by(stride) {
            let original = model.params()[pi].value.data()[j];
            let mut h = config.step;
            let mut estimate = None;
            for _ in 0..=config.retries {
                let plus = original + T::from_f64(h);
                let minus = original - T::from_f64(h);
                model.params_mut()[pi].value.data_mut()[j] = plus;
                let up = objective(model, Pass::Forward);
                model.params_mut()[pi].value.data_mut()[j] = minus;
                let down = objective(model, Pass::Forward);
                model.params_mut()[pi].value.data_mut()[j] = original;
                if up.signature == base.signature && down.signature == base.signature {
                    let span = (plus - minus).into_f64();
                    estimate = Some((up.loss - down.loss) / span);
                    break;
                }
                h /= config.shrink;
            }
            match estimate {
                Some(n) => {
                    checked_analytic.push(analytic[pi][j]);
                    numeric.push(n);
                }
                None => skipped += 1,
            }
        }
        let norms = norm_rel_error(&checked_analytic, &numeric);
        report.params.push(ParamGradError {
            name,
            rel_error: norms.rel,
            max_abs_error: norms.max_abs,
            analytic_norm: norms.analytic,
            numeric_norm: norms.numeric,
            diff_norm: norms.diff,
            checked: numeric.len(),
            skipped,
        });
    }
    report
}
