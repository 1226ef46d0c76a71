use super::{invalid, Graph, Result, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Checks the reverse-mode gradient of the scalar function `f` at `point`
/// against central finite differences with the given `step`.
///
/// `f` receives a fresh graph and one leaf per entry of `point` and must
/// return a one-element node.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid("grad_check", format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&mut g, &leaves)?;
    let grads = g.backward(root)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &leaves)?;
        Ok(g.item(root))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (input, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).map(|t| t.data().to_vec());
        for coord in 0..point[input].numel() {
            let base = point[input].data()[coord];
            probe[input].data_mut()[coord] = base + step;
            let plus = eval(&probe)?;
            probe[input].data_mut()[coord] = base - step;
            let minus = eval(&probe)?;
            probe[input].data_mut()[coord] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite { input, coord });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |d| d[coord]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = input;
                report.worst_coord = coord;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
