use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, points, h, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `max_coords` seeded-random
/// coordinates per input, which keeps large composites tractable.
pub fn grad_check_sampled<F>(
    f: F,
    points: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut work = points.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = points[i].numel();
        let analytic = grads
            .get(*var)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = points[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            if numeric.is_nan() || a.is_nan() {
                return Err(Error::Numerical(format!(
                    "NaN gradient estimate at input {i}, coordinate {j}"
                )));
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
