//! Finite-difference gradient verification.
//!
//! `check_gradients` rebuilds a scalar-valued computation twice per input
//! coordinate (central differences) and compares against the analytic
//! gradients from `backward`. All checks run at `f64`: the comparison has to
//! resolve relative errors of 1e-4 at step 1e-5, which single precision
//! cannot represent reliably.

use super::{Graph, Tensor, Var};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude both gradients count as "near zero" and are
/// compared absolutely instead, avoiding 0/0 blowups.
pub const ABS_TOL: f64 = 1e-6;

/// One gradient coordinate that failed the comparison.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} coord {}: analytic {:.6e} vs numeric {:.6e} (rel err {:.3e})",
            self.input, self.coord, self.analytic, self.numeric, self.rel_err
        )
    }
}

/// Verify the analytic gradient of `build` with central differences.
///
/// `build` must construct the computation from leaf inputs to a scalar loss
/// inside the graph it is given; it is called `1 + 2·Σ numel` times. Inputs
/// are passed by value each call so perturbations never leak between
/// evaluations. Returns every failing coordinate (empty = pass).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> Vec<GradMismatch>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "gradient check requires a scalar loss");
    g.backward(loss).expect("backward failed during gradient check");
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| g.grad(v).expect("missing gradient").clone()).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut mismatches = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + FD_STEP;
            let plus = eval(&work);
            work[ti].data_mut()[ci] = orig - FD_STEP;
            let minus = eval(&work);
            work[ti].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[ci];
            if a.abs() < ABS_TOL && numeric.abs() < ABS_TOL {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_TOL);
            if rel >= REL_TOL {
                mismatches.push(GradMismatch { input: ti, coord: ci, analytic: a, numeric, rel_err: rel });
            }
        }
    }
    mismatches
}

/// Panic with a readable report if any coordinate fails.
pub fn assert_gradients<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let bad = check_gradients(inputs, build);
    if !bad.is_empty() {
        let lines: Vec<String> = bad.iter().take(10).map(|m| m.to_string()).collect();
        panic!("{} gradient mismatches:\n{}", bad.len(), lines.join("\n"));
    }
}
