//! Cross-modal projection matching (CMPM) and classification (CMPC) losses.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Guard added to the true-match distribution inside the log.
    pub eps: f64,
    pub cmpm: bool,
    pub cmpc: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            cmpm: true,
            cmpc: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("loss epsilon must be positive, got {}", self.eps)));
        }
        if !self.cmpm && !self.cmpc {
            return Err(Error::Config("at least one of cmpm and cmpc must be enabled".into()));
        }
        Ok(())
    }
}

/// Same-identity indicator `m` and its row-normalized form `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchMatrix {
    n: usize,
    m: Vec<u8>,
    q: Vec<f64>,
}

impl MatchMatrix {
    pub fn new(labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let m: Vec<u8> = labels
            .iter()
            .flat_map(|a| labels.iter().map(move |b| u8::from(a == b)))
            .collect();
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            let row = &m[i * n..(i + 1) * n];
            let count = row.iter().map(|&x| x as usize).sum::<usize>() as f64;
            for j in 0..n {
                q[i * n + j] = row[j] as f64 / count;
            }
        }
        Ok(Self { n, m, q })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn m(&self, i: usize, j: usize) -> u8 {
        self.m[i * self.n + j]
    }

    pub fn q(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.n + j]
    }

    pub fn q_rows(&self) -> &[f64] {
        &self.q
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, v: Var, t: Var) -> Result<(usize, usize)> {
    let (sv, st) = (tape.shape(v), tape.shape(t));
    match (sv, st) {
        ([n, c], [n2, c2]) if n == n2 && c == c2 => Ok((*n, *c)),
        _ => Err(Error::Dimension(format!(
            "descriptor batches must both be N×C, got {sv:?} and {st:?}"
        ))),
    }
}

/// Row-wise `log softmax(a · b̄ᵀ)`: for each `a_i`, how its scalar
/// projections onto every normalized `b_j` share probability mass.
pub fn projection_log_probs<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b)?;
    let b_bar = tape.l2_normalize_rows(b)?;
    let logits = tape.matmul_t(a, b_bar, false, true)?;
    tape.log_softmax(logits)
}

/// One CMPM direction: `(1/N) Σ p·(log p − log(q + ε))` with
/// `p = softmax(a · b̄ᵀ)` row-wise.
pub fn cmpm_direction<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    matches: &MatchMatrix,
    eps: f64,
) -> Result<Var> {
    let (n, _) = check_pair(tape, a, b)?;
    if matches.len() != n {
        return Err(Error::Dimension(format!(
            "match matrix is {0}×{0} for a batch of {n}",
            matches.len()
        )));
    }
    let log_p = projection_log_probs(tape, a, b)?;
    let p = tape.exp(log_p)?;
    let log_q = Tensor::from_f64_slice(
        vec![n, n],
        &matches.q_rows().iter().map(|&q| (q + eps).ln()).collect::<Vec<_>>(),
    )?;
    let log_q = tape.constant(log_q);
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, T::from_f64(1.0 / n as f64).unwrap())
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub image_to_text: Var,
    pub text_to_image: Var,
    pub total: Var,
}

/// Bidirectional CMPM over image descriptors `v` and text descriptors `t`.
pub fn cmpm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    t: Var,
    labels: &[usize],
    eps: f64,
) -> Result<LossParts> {
    let matches = MatchMatrix::new(labels)?;
    let image_to_text = cmpm_direction(tape, v, t, &matches, eps)?;
    let text_to_image = cmpm_direction(tape, t, v, &matches, eps)?;
    let total = tape.add(image_to_text, text_to_image)?;
    Ok(LossParts {
        image_to_text,
        text_to_image,
        total,
    })
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index(format!("label {y} outside {classes} classes")));
        }
        data[i * classes + y] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// One CMPC branch: project `a_i` onto the unit vector of its partner
/// `b_i`, classify with unit-norm columns of `w`, and average the NLL.
pub fn cmpc_branch<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    w: Var,
    labels: &[usize],
) -> Result<Var> {
    let (n, c) = check_pair(tape, a, b)?;
    let classes = match *tape.shape(w) {
        [rows, m] if rows == c => m,
        ref s => {
            return Err(Error::Dimension(format!(
                "classifier must be {c}×M, got {s:?}"
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for a batch of {n}", labels.len())));
    }
    let target = tape.constant(one_hot(labels, classes)?);
    let b_bar = tape.l2_normalize_rows(b)?;
    let ab = tape.mul(a, b_bar)?;
    let coef = tape.sum_last(ab)?;
    let proj = tape.scale_rows(b_bar, coef)?;
    let w_hat = tape.l2_normalize(w, 0)?;
    let logits = tape.matmul(proj, w_hat)?;
    let log_p = tape.log_softmax(logits)?;
    let picked = tape.mul(log_p, target)?;
    let total = tape.sum(picked)?;
    tape.scale(total, T::from_f64(-1.0 / n as f64).unwrap())
}

/// Image branch plus text branch, sharing the classifier `w`.
pub fn cmpc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    t: Var,
    w: Var,
    labels: &[usize],
) -> Result<LossParts> {
    let image_to_text = cmpc_branch(tape, v, t, w, labels)?;
    let text_to_image = cmpc_branch(tape, t, v, w, labels)?;
    let total = tape.add(image_to_text, text_to_image)?;
    Ok(LossParts {
        image_to_text,
        text_to_image,
        total,
    })
}

/// Sum of the enabled losses.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    t: Var,
    w: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let cmpm = if cfg.cmpm {
        Some(cmpm_loss(tape, v, t, labels, cfg.eps)?.total)
    } else {
        None
    };
    let cmpc = if cfg.cmpc {
        Some(cmpc_loss(tape, v, t, w, labels)?.total)
    } else {
        None
    };
    match (cmpm, cmpc) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => unreachable!("validated above"),
    }
}
