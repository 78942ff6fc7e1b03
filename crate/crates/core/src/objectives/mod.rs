//! Training losses: temperature-scaled cosine logits, InfoNCE over in-batch
//! negatives, next-token NLL, the two-sided token-weighted LM loss and the
//! weighted joint objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{contract, Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.03;

/// `cos(Q_i, T_j) / tau`, kept as logits so nothing is exponentiated.
pub fn temp_scaled_logits<T: Scalar>(tape: &mut Tape<T>, q: Var, t: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let cos = tape.cosine_similarity_matrix(q, t)?;
    Ok(tape.scale(cos, 1.0 / tau))
}

/// Mean over rows of `-log softmax(cos(Q_i, T_.) / tau)_i`: row `i` of `t`
/// is the positive for row `i` of `q`, every other row a negative.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, q: Var, t: Var, tau: f64) -> Result<Var> {
    let b = tape.value(q).rows();
    if b < 2 {
        return Err(Error::Batch(b));
    }
    if tape.value(t).rows() != b {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(t).shape().to_vec(),
        });
    }
    let logits = temp_scaled_logits(tape, q, t, tau)?;
    let lp = tape.log_softmax(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let picked = tape.pick(lp, &diag)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0))
}

/// Mean negative log-likelihood of `targets[i]` under row `i` of `logits`.
pub fn nll_rows<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(contract("no supervised positions"));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, targets)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0))
}

/// Next-token loss over the positions where `mask` is set: row `i` of
/// `logits` predicts `targets[i]`. Returns the loss and the number of
/// supervised positions.
pub fn lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<(Var, usize)> {
    let rows = tape.value(logits).rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(contract(format!(
            "lm_loss: {rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let keep: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Err(contract("lm_loss: empty mask"));
    }
    let sel = tape.select_rows(logits, &keep)?;
    let t: Vec<usize> = keep.iter().map(|&i| targets[i]).collect();
    Ok((nll_rows(tape, sel, &t)?, keep.len()))
}

/// `(N_q * L_q + N_t * L_t) / (N_q + N_t)`: the per-token mean over the
/// supervised positions of both sides.
pub fn weighted_lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    query: (Var, usize),
    target: (Var, usize),
) -> Result<Var> {
    let ((lq, nq), (lt, nt)) = (query, target);
    if nq == 0 || nt == 0 {
        return Err(contract(format!(
            "weighted_lm_loss with token counts {nq} and {nt}"
        )));
    }
    let total = (nq + nt) as f64;
    let a = tape.scale(lq, nq as f64 / total);
    let b = tape.scale(lt, nt as f64 / total);
    tape.add(a, b)
}

/// Loss weights normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alpha {
    pub lm: f64,
    pub con: f64,
}

impl Alpha {
    pub fn new(lm: f64, con: f64) -> Result<Self> {
        if !(lm >= 0.0 && con >= 0.0 && lm.is_finite() && con.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {lm}:{con}"
            )));
        }
        if lm + con == 0.0 {
            return Err(Error::Config("both loss weights are zero".into()));
        }
        Ok(Self {
            lm: lm / (lm + con),
            con: con / (lm + con),
        })
    }

    /// Only the language-modeling term.
    pub fn lm_only() -> Self {
        Self { lm: 1.0, con: 0.0 }
    }
}

/// A `lm:con` weight ratio such as `1:10`; a bare `0` means contrastive only.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRatio {
    text: String,
    lm: f64,
    con: f64,
}

impl AlphaRatio {
    pub fn alpha(&self) -> Alpha {
        Alpha::new(self.lm, self.con).expect("validated on parse")
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl Default for AlphaRatio {
    fn default() -> Self {
        "1:10".parse().expect("valid default")
    }
}

impl FromStr for AlphaRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad loss ratio {s:?}")))
        };
        let (lm, con) = match s.split_once(':') {
            Some((a, b)) => (num(a)?, num(b)?),
            None if num(s)? == 0.0 => (0.0, 1.0),
            None => {
                return Err(Error::Config(format!(
                    "loss ratio {s:?} must look like lm:con or 0"
                )))
            }
        };
        Alpha::new(lm, con)?;
        Ok(Self {
            text: s.to_string(),
            lm,
            con,
        })
    }
}

impl fmt::Display for AlphaRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for AlphaRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for AlphaRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Component losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_loss: f64,
    pub con_loss: f64,
    pub total: f64,
    pub n_q_tokens: usize,
    pub n_t_tokens: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.lm_loss.is_finite() && self.con_loss.is_finite() && self.total.is_finite()
    }
}

/// `alpha.lm * lm + alpha.con * con` on the tape.
pub fn joint_loss<T: Scalar>(tape: &mut Tape<T>, lm: Var, con: Var, alpha: Alpha) -> Result<Var> {
    let a = tape.scale(lm, alpha.lm);
    let b = tape.scale(con, alpha.con);
    tape.add(a, b)
}

/// Scalar form of [`joint_loss`].
pub fn joint_breakdown(
    lm: f64,
    con: f64,
    alpha: Alpha,
    n_q_tokens: usize,
    n_t_tokens: usize,
) -> LossBreakdown {
    LossBreakdown {
        lm_loss: lm,
        con_loss: con,
        total: alpha.lm * lm + alpha.con * con,
        n_q_tokens,
        n_t_tokens,
    }
}

#[cfg(test)]
mod tests;
