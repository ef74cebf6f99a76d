use super::{Matrix, NodeId, Tape};
use crate::error::{FslError, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index)` pairs skipped because the ±h step changed
    /// the sign of some ReLU input.
    pub excluded: Vec<(usize, usize)>,
}

struct Eval {
    value: f64,
    relu: Vec<i8>,
}

fn evaluate<F>(f: &F, point: &[Matrix]) -> Result<(Tape, Vec<NodeId>, NodeId, Eval)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let params: Vec<NodeId> = point.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &params)?;
    let value = tape.scalar(out);
    let relu = tape.relu_signs();
    Ok((tape, params, out, Eval { value, relu }))
}

/// Builds `f` at `point`, then checks every parameter entry against
/// `(f(x + h) - f(x - h)) / 2h`. Relative error per entry is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, point: &[Matrix], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    check(&f, point, h, &[(h, 1.0)])
}

/// Like [`grad_check`], but the numeric derivative is the Richardson
/// combination `(4 D(h/2) - D(h)) / 3` of two central differences, which
/// cancels the `h^2` truncation term.
pub fn grad_check_extrapolated<F>(f: F, point: &[Matrix], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    check(&f, point, h, &[(h / 2.0, 4.0 / 3.0), (h, -1.0 / 3.0)])
}

fn check<F>(f: &F, point: &[Matrix], h: f64, steps: &[(f64, f64)]) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(FslError::InvalidSpec { field: "h", reason: "must be > 0".into() });
    }
    let (tape, params, out, base) = evaluate(f, point)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, excluded: Vec::new() };
    let mut shifted = point.to_vec();
    for (pi, &node) in params.iter().enumerate() {
        let analytic = grads.get(node).expect("parameter leaf");
        'entries: for (flat, &a) in analytic.iter().enumerate() {
            let orig = point[pi].as_slice().expect("standard layout")[flat];
            let mut numeric = 0.0;
            for &(step, weight) in steps {
                shifted[pi].as_slice_mut().unwrap()[flat] = orig + step;
                let plus = evaluate(f, &shifted)?.3;
                shifted[pi].as_slice_mut().unwrap()[flat] = orig - step;
                let minus = evaluate(f, &shifted)?.3;
                shifted[pi].as_slice_mut().unwrap()[flat] = orig;
                if plus.relu != base.relu || minus.relu != base.relu {
                    report.excluded.push((pi, flat));
                    continue 'entries;
                }
                numeric += weight * (plus.value - minus.value) / (2.0 * step);
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
