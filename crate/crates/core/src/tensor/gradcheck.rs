//! Central finite-difference check of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward rules it audits.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst match.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.max_rel_err.is_finite()
    }
}

/// Relative error with denominator `max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compare analytic and central-difference gradients of the scalar built by
/// `f` at up to `coords` random coordinates across `inputs` (every coordinate
/// when there are fewer).
pub fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F, coords: usize, step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), v)| tape.leaf(shape, v.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::<f64>::new();
    let vars = inputs
        .iter()
        .map(|(shape, v)| tape.leaf(shape, v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_f64(v)).collect();

    let mut all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, v))| (0..v.len()).map(move |j| (i, j)))
        .collect();
    if all.len() > coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // partial Fisher-Yates
        for i in 0..coords {
            let j = rng.random_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(coords);
    }

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (i, j) in all {
        let orig = values[i][j];
        values[i][j] = orig + step;
        let plus = eval(&values)?;
        values[i][j] = orig - step;
        let minus = eval(&values)?;
        values[i][j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i][j], numeric);
        report.checked += 1;
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst = Some((i, j, analytic[i][j], numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agrees_on_simple_functions() {
        let inputs = vec![(vec![1], vec![2.0])];
        let report = check(&inputs, |t, v| Ok(t.clamp(v[0], 0.0, 1.0)), 1, 1e-5, 0).unwrap();
        assert!(report.passes(1e-4));
        let report = check(
            &inputs,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            1,
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }
}
