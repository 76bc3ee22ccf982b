use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares tape gradients with central finite differences.
///
/// The relative error at coordinate `i` is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
/// Coordinates whose perturbations change the branch signature of the tape
/// (a relu switching sides, a different max position) straddle a
/// non-differentiable point and are skipped.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub h: f64,
    pub floor: f64,
    /// Check a random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub stencil: Stencil,
}

/// Finite-difference formula for the numeric derivative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    #[default]
    Central,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error `O(h^4)`.
    /// Pairs well with a larger `h` (around 1e-3) when round-off dominates.
    FivePoint,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            stencil: Stencil::Central,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn with_h(h: f64) -> Self {
        Self { h, ..Self::default() }
    }

    pub fn run<F>(&self, mut f: F, point: &Tensor) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        tape.track_branches();
        let x = tape.param(point.clone());
        let y = f(&mut tape, x)?;
        let signature = tape.branch_signature();
        tape.backward(y)?;
        let analytic = tape
            .grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; point.numel()]);

        let n = point.numel();
        let coords: Vec<usize> = match self.max_coords {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };

        let mut eval = |shifted: Tensor| -> Result<(f64, Option<u64>)> {
            let mut tape = Tape::new();
            tape.track_branches();
            let x = tape.param(shifted);
            let y = f(&mut tape, x)?;
            Ok((tape.value(y).item()?, tape.branch_signature()))
        };

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst_coord: None,
            checked: 0,
            skipped: 0,
        };
        for i in coords {
            let offsets: &[f64] = match self.stencil {
                Stencil::Central => &[1.0, -1.0],
                Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
            };
            let mut values = Vec::with_capacity(offsets.len());
            let mut crossed = false;
            for &k in offsets {
                let mut shifted = point.clone();
                shifted.data_mut()[i] += k * self.h;
                let (v, sig) = eval(shifted)?;
                crossed |= sig != signature;
                values.push(v);
            }
            if crossed {
                report.skipped += 1;
                continue;
            }
            let numeric = match self.stencil {
                Stencil::Central => (values[0] - values[1]) / (2.0 * self.h),
                Stencil::FivePoint => (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12.0 * self.h),
            };
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
            report.checked += 1;
            if report.worst_coord.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = Some(i);
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between tape and central-difference gradients of
/// the scalar function `f` at `point`, over every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    GradCheck::with_h(h).run(f, point).map(|r| r.max_rel_err)
}
