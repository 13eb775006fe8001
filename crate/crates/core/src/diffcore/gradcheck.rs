use super::{Bound, DiffError, Graph, NodeId, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// [`Graph::kink_margin`] of the unperturbed objective.
    pub kink_margin: f64,
}

/// Compares backpropagated gradients against central differences.
///
/// `build` constructs the scalar objective from bound parameters; it must be
/// deterministic. Every entry of every parameter in `params` is perturbed by `±step` and
/// `±2·step`, and the five-point central stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` is compared; its truncation error
/// is fourth order, so strongly curved objectives do not need a tiny step.
/// The per-entry error is `|analytic − central| / max(|analytic|, |central|, 1e-12)`.
///
/// Perturbed passes replay the unperturbed outputs of every `stop_gradient` node, so
/// the central difference differentiates the same function backpropagation does.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    step: f64,
    build: F,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId, DiffError>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let b = work.bind(&mut g);
    let loss = build(&mut g, &b)?;
    g.backward(loss)?;
    work.accumulate(&g, &b);
    let analytic: Vec<_> = params.iter().map(|&p| work.grad(p).clone()).collect();
    let stopped = g.stopped_values();
    let kink_margin = g.kink_margin();

    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        g.replay_stopped(stopped.clone());
        let b = s.bind_frozen(&mut g);
        let loss = build(&mut g, &b)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
        kink_margin,
    };
    for (k, &p) in params.iter().enumerate() {
        for j in 0..work.value(p).len() {
            let orig = work.value(p).data()[j];
            let mut at = |offset: f64| -> Result<f64, DiffError> {
                work.value_mut(p).data_mut()[j] = orig + offset;
                eval(&work)
            };
            let near = at(step)? - at(-step)?;
            let far = at(2.0 * step)? - at(-2.0 * step)?;
            work.value_mut(p).data_mut()[j] = orig;
            let central = (8.0 * near - far) / (12.0 * step);
            let a = analytic[k].data()[j];
            let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((work.name(p).to_string(), j));
            }
        }
    }
    Ok(report)
}
