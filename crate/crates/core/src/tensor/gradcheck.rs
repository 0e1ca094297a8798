use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing taped gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} at coord {} (analytic {:.6e}, numeric {:.6e}, {} coords, tol {:.1e})",
            self.max_rel_err, self.worst_index, self.analytic, self.numeric, self.checked, self.tol
        )
    }
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient is zero do not divide by zero.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Checks every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, &coords, h, tol)
}

/// Checks only the listed flat coordinates, for functions too expensive to
/// difference in every direction.
pub fn grad_check_coords<F>(
    f: F,
    x: &Tensor,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        tol,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = rel_err(a, numeric);
        if err > report.max_rel_err || i == report.worst_index {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
