use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GraphError, Tape, Tensor, Var};

/// Worst coordinate found by a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
    /// Per parameter, `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)` over the probed coordinates.
    pub tensor_errors: BTreeMap<String, f64>,
}

impl GradCheckReport {
    /// Largest per-parameter vector error.
    pub fn max_tensor_error(&self) -> f64 {
        self.tensor_errors.values().fold(0.0, |m, &e| m.max(e))
    }
}

/// Which coordinates of each parameter to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per parameter, drawn without replacement.
    Sampled {
        per_param: usize,
        seed: u64,
    },
}

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares reverse-mode gradients of `loss` against central differences with
/// step `h`, over every coordinate of every parameter in `params`.
///
/// The tape is replayed at `params` first, so it is left evaluated there.
pub fn grad_check(
    tape: &mut Tape,
    loss: Var,
    params: &BTreeMap<String, Tensor>,
    h: f64,
) -> Result<GradCheckReport, GraphError> {
    grad_check_with(tape, loss, params, h, Coverage::All)
}

pub fn grad_check_with(
    tape: &mut Tape,
    loss: Var,
    params: &BTreeMap<String, Tensor>,
    h: f64,
    coverage: Coverage,
) -> Result<GradCheckReport, GraphError> {
    if !(h > 0.0) {
        return Err(GraphError::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    tape.replay(params)?;
    let analytic = tape.adjoints(loss)?;
    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: 0,
        tensor_errors: BTreeMap::new(),
    };
    let mut probe = params.clone();
    for (name, base) in params {
        let var = tape
            .leaf_var(name)
            .ok_or_else(|| GraphError::UnknownLeaf(name.clone()))?;
        let grad = analytic.get(var);
        let indices: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_param, .. }, Some(rng)) if per_param < base.len() => {
                let mut idx = sample(rng, base.len(), per_param).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..base.len()).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in indices {
            let mut eval_at = |delta: f64| -> Result<f64, GraphError> {
                let mut data = base.to_vec();
                data[i] += delta;
                probe.insert(
                    name.clone(),
                    Tensor::from_parts(base.shape().to_vec(), data),
                );
                tape.replay(&probe)?;
                tape.scalar(loss)
            };
            let plus = eval_at(h)?;
            let minus = eval_at(-h)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GraphError::NonFinite {
                    node: loss.0,
                    op: "perturbed loss",
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            report.coordinates_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        let tensor_err = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12);
        report.tensor_errors.insert(name.clone(), tensor_err);
        probe.insert(name.clone(), base.clone());
    }
    tape.replay(params)?;
    Ok(report)
}
