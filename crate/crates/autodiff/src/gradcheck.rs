//! Central finite-difference gradient checking.

use crate::graph::{Graph, Var};

/// Outcome of a gradient check. Never an error: failures are data.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// `(parameter position, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements whose probes straddled a non-differentiable point at every
    /// step tried.
    pub skipped: usize,
    pub error: Option<String>,
}

impl GradCheckReport {
    fn failed(tolerance: f64, msg: String) -> Self {
        Self {
            passed: false,
            tolerance,
            max_rel_error: f64::INFINITY,
            worst: None,
            checked: 0,
            skipped: 0,
            error: Some(msg),
        }
    }
}

/// Compares backprop gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero are compared in absolute terms.
    pub floor: f64,
    /// Upper bound on probed elements per parameter (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_param: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    /// Check `d root / d params` where the numeric side differentiates
    /// `root` itself.
    pub fn run(&self, g: &mut Graph, root: Var, params: &[Var]) -> GradCheckReport {
        self.run_against(g, root, root, params)
    }

    /// Backprop from `root`, but finite-difference `oracle`. The two differ
    /// when the graph contains gradient reversal: the oracle is then the
    /// scalar whose true derivative the reversed gradients should equal.
    pub fn run_against(&self, g: &mut Graph, root: Var, oracle: Var, params: &[Var]) -> GradCheckReport {
        let tol = self.tolerance;
        if let Err(e) = g.eval_forward(root).and_then(|_| g.backprop(root)) {
            return GradCheckReport::failed(tol, e.to_string());
        }
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| g.grad(*p).into_data()).collect();
        let mut report = GradCheckReport {
            passed: true,
            tolerance: tol,
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            skipped: 0,
            error: None,
        };
        let eval = |g: &mut Graph| -> Result<(f64, u64), String> {
            let v = g.eval_forward(oracle).map_err(|e| e.to_string())?;
            let sig = g.branch_signature(oracle).map_err(|e| e.to_string())?;
            Ok((v.item(), sig))
        };
        let base_sig = match eval(g) {
            Ok((_, s)) => s,
            Err(e) => return GradCheckReport::failed(tol, e),
        };
        for (pi, &p) in params.iter().enumerate() {
            let n = g.value_data(p).len();
            let stride = match self.max_per_param {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            for k in (0..n).step_by(stride) {
                let orig = g.value_data(p)[k];
                let probe = |g: &mut Graph, x: f64| -> Result<(f64, u64), String> {
                    g.leaf_data_mut(p).map_err(|e| e.to_string())?[k] = x;
                    eval(g)
                };
                // central difference where both probes stay on the base
                // branch, else a second-order one-sided difference on the
                // side that does, else a smaller step
                let mut found = None;
                let mut failure = None;
                'steps: for h in [self.step, 0.1 * self.step, 0.01 * self.step] {
                    let mut at = |m: f64| match probe(g, orig + m * h) {
                        Ok((f, sig)) => Ok((sig == base_sig).then_some(f)),
                        Err(e) => Err(e),
                    };
                    let (plus, minus) = match (at(1.0), at(-1.0)) {
                        (Ok(p), Ok(m)) => (p, m),
                        (Err(e), _) | (_, Err(e)) => {
                            failure = Some(e);
                            break;
                        }
                    };
                    if let (Some(fp), Some(fm)) = (plus, minus) {
                        found = Some((fp - fm) / (2.0 * h));
                        break;
                    }
                    for (side, near) in [(1.0, plus), (-1.0, minus)] {
                        let Some(f1) = near else { continue };
                        match at(2.0 * side) {
                            Ok(Some(f2)) => {
                                let f0 = match probe(g, orig) {
                                    Ok((f, _)) => f,
                                    Err(e) => {
                                        failure = Some(e);
                                        break 'steps;
                                    }
                                };
                                found = Some(side * (4.0 * f1 - f2 - 3.0 * f0) / (2.0 * h));
                                break 'steps;
                            }
                            Ok(None) => {}
                            Err(e) => {
                                failure = Some(e);
                                break 'steps;
                            }
                        }
                    }
                }
                if let Some(e) = failure {
                    if let Ok(d) = g.leaf_data_mut(p) {
                        d[k] = orig;
                    }
                    return GradCheckReport::failed(tol, e);
                }
                if let Ok(d) = g.leaf_data_mut(p) {
                    d[k] = orig;
                }
                let Some(numeric) = found else {
                    report.skipped += 1;
                    continue;
                };
                let err = relative_error(analytic[pi][k], numeric, self.floor);
                report.checked += 1;
                if !(err <= report.max_rel_error) {
                    report.max_rel_error = err;
                    report.worst = Some((pi, k));
                }
            }
        }
        // restore payloads for callers that keep using the graph
        let _ = g.eval_forward(oracle);
        let _ = g.eval_forward(root);
        report.passed = report.max_rel_error <= tol;
        report
    }
}
