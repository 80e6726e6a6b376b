//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Relative error bound.
    pub tol: f64,
    /// Coordinates checked per tensor; tensors at most this large are
    /// checked exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            coords_per_tensor: 200,
            seed: 0,
        }
    }
}

/// Location of a checked coordinate: (input tensor, flat index).
pub type Coord = (usize, usize);

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Coord>,
    pub checked: usize,
    /// First coordinate whose analytic or numeric derivative was NaN.
    pub nan_at: Option<Coord>,
    pub pass: bool,
}

/// Relative error `|a - n| / (max(|a|, |n|) + 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

fn eval<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_check_finite(false);
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage("grad_check function must return a scalar".into()));
    }
    Ok(g.value(out).item())
}

/// Compares the reverse-mode gradient of the scalar function `f` at `points`
/// with central differences `(f(x+h) - f(x-h)) / 2h`.
///
/// `f` receives one graph variable per entry of `points`. It must be
/// deterministic and evaluated away from non-differentiable loci.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_check_finite(false);
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        nan_at: None,
        pass: true,
    };
    let mut work = points.to_vec();
    for ti in 0..points.len() {
        let n = points[ti].numel();
        let mut coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_tensor).into_vec()
        };
        coords.sort_unstable();
        for ci in coords {
            let x0 = points[ti].data()[ci];
            work[ti].data_mut()[ci] = x0 + opts.h;
            let fp = eval(&f, &work)?;
            work[ti].data_mut()[ci] = x0 - opts.h;
            let fm = eval(&f, &work)?;
            work[ti].data_mut()[ci] = x0;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[ti][ci];
            report.checked += 1;
            if a.is_nan() || numeric.is_nan() {
                report.nan_at.get_or_insert((ti, ci));
                report.pass = false;
                continue;
            }
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ti, ci));
            }
        }
    }
    if report.max_rel_err > opts.tol {
        report.pass = false;
    }
    Ok(report)
}
