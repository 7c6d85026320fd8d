//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;

use super::{Matrix, Tape, Var};
use crate::error::Result;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Largest entry-wise relative error among checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error of one coordinate. The denominator is floored at
/// `1e-3 · ‖analytic‖∞` (and 1e-12) so coordinates whose true derivative is
/// essentially zero are judged on the scale of the whole gradient.
fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares an analytic gradient of `f` at `x` with central differences.
/// `coords` restricts the check to a subset of flat indices.
pub fn compare_gradient(
    f: impl Fn(&Matrix) -> Result<f64>,
    x: &Matrix,
    analytic: &Matrix,
    h: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<FdReport> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let floor = (1e-3 * analytic.max_abs()).max(1e-12);
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut probe = x.clone();
    for &k in coords {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let fp = f(&probe)?;
        probe.as_mut_slice()[k] = orig - h;
        let fm = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.as_slice()[k];
        max_abs = max_abs.max((a - numeric).abs());
        max_rel = max_rel.max(rel_error(a, numeric, floor));
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        coords_checked: coords.len(),
        tol,
        passed: max_rel < tol,
    })
}

/// Records `f` on a fresh tape with `x` as the differentiable leaf, takes the
/// reverse-mode gradient and checks it against central differences.
pub fn finite_difference_check<F>(f: F, x: &Matrix, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_impl(&f, x, h, tol, None)
}

/// As [`finite_difference_check`], but probes at most `max_coords` seeded
/// random coordinates.
pub fn finite_difference_check_sampled<F>(
    f: F,
    x: &Matrix,
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        let mut rng = stream(seed, Stream::Eval, 0);
        let mut c = sample(&mut rng, x.len(), max_coords).into_vec();
        c.sort_unstable();
        c
    };
    check_impl(&f, x, h, tol, Some(&coords))
}

fn check_impl<F>(f: &F, x: &Matrix, h: f64, tol: f64, coords: Option<&[usize]>) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.gradient(loss, &[xv])?.remove(0);
    let eval = |p: &Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.var(p.clone());
        let l = f(&mut t, v)?;
        Ok(t.item(l))
    };
    compare_gradient(eval, x, &analytic, h, tol, coords)
}
