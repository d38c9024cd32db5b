use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative errors are taken against `max(|tape|, |numeric|, REL_FLOOR)`,
/// so entries whose true gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst relative deviation.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare tape gradients of a scalar function against central differences.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
        tol,
    )
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    let mut pts = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(points[pi].shape());
        let analytic = tape.grad(*var).unwrap_or(&zeros).data().to_vec();
        for j in 0..points[pi].numel() {
            let orig = pts[pi].data()[j];
            pts[pi].data_mut()[j] = orig + step;
            let up = eval(&pts)?;
            pts[pi].data_mut()[j] = orig - step;
            let down = eval(&pts)?;
            pts[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = relative_error(analytic[j], numeric);
            report.max_abs_err = report.max_abs_err.max((analytic[j] - numeric).abs());
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (pi, j);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
