//! Central finite-difference checks of analytic gradients.

use ndarray::ArrayD;

use super::graph::{Graph, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with the given step, for every entry of every input.
///
/// The relative error uses `floor` as the smallest denominator so entries with
/// vanishing gradient do not turn rounding noise into large ratios.
pub fn check_gradients<Fn_>(f: Fn_, inputs: &[ArrayD<f64>], step: f64, floor: f64) -> GradCheck
where
    Fn_: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(inputs[k].raw_dim()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].as_slice().expect("contiguous")[i];
            work[k].as_slice_mut().expect("contiguous")[i] = orig + step;
            let up = eval(&work);
            work[k].as_slice_mut().expect("contiguous")[i] = orig - step;
            let down = eval(&work);
            work[k].as_slice_mut().expect("contiguous")[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice().expect("contiguous")[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries += 1;
        }
    }
    report
}
