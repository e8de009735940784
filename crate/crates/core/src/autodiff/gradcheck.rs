use super::{AutodiffError, NodeId, Tape, Tensor};

/// Denominator floor for the relative error, so that gradients that are
/// numerically zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    /// Coordinates whose ±eps probe crosses a relu/leaky-relu/abs kink.
    pub excluded: Vec<usize>,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `backward` against `(f(x+eps) - f(x-eps)) / (2 eps)` for every
/// coordinate of `point`.
///
/// `f` records a scalar function of its input node on the given tape.
/// Evaluation failures surface as errors; gradient disagreement only marks
/// the report as failed.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, AutodiffError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |x: &Tensor| -> Result<(f64, Vec<i8>), AutodiffError> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone())?;
        let out = f(&mut tape, input)?;
        Ok((tape.scalar(out)?, tape.kink_pattern()))
    };

    let mut tape = Tape::new();
    let input = tape.leaf(point.clone())?;
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(input, point);
    let base_kinks = tape.kink_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        excluded: Vec::new(),
        checked: 0,
        pass: true,
    };
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (fp, kp) = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (fm, km) = eval(&probe)?;
        probe.data_mut()[i] = orig;

        if kp != base_kinks || km != base_kinks {
            report.excluded.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic.data()[i], numeric);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report.pass = report.max_rel_error < tol;
    Ok(report)
}
