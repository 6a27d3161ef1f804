//! Training objectives: categorical cross-entropy, the NAD pair loss,
//! the MSE/MAE/ordinal-CE ablation arms, and the combined total loss.
//!
//! Each loss exists in two forms: a tape builder that participates in
//! the differentiation graph, and a pointwise closed form over
//! d = r - r̂ used for the loss-curve table.

use crate::autodiff::{Scalar, Tape, TensorId};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Which loss drives the differential arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffLossKind {
    Nad,
    Mse,
    Mae,
    /// MSE plus ordinal cross-entropy.
    MseCeo,
    /// MAE plus ordinal cross-entropy.
    MaeCeo,
    /// Categorical-only baseline; the differential arm is disabled.
    None,
}

impl DiffLossKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "nad" => Self::Nad,
            "mse" => Self::Mse,
            "mae" => Self::Mae,
            "mse+ceo" => Self::MseCeo,
            "mae+ceo" => Self::MaeCeo,
            "none" => Self::None,
            other => {
                return Err(Error::Config(format!("unknown diff loss kind `{other}`")))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Nad => "nad",
            Self::Mse => "mse",
            Self::Mae => "mae",
            Self::MseCeo => "mse+ceo",
            Self::MaeCeo => "mae+ceo",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the differential loss in the total.
    pub lambda: f64,
    /// NAD stabilizer.
    pub epsilon: f64,
    /// Label span |c_Nc - c_1|.
    pub span: i32,
    pub kind: DiffLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 6.5,
            epsilon: 1e-5,
            span: 3,
            kind: DiffLossKind::Nad,
        }
    }
}

/// -(1/N) sum_i log p̂_i at the true class. `probs` is [N, N_c];
/// labels are 1-based.
pub fn cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    probs: TensorId,
    labels: &[u8],
) -> Result<TensorId> {
    let cols = labels.iter().map(|&y| y as usize - 1).collect();
    let picked = tape.gather_rows(probs, cols)?;
    let logs = tape.log(picked).map_err(|_| Error::NumericDomain {
        op: "cross_entropy",
        detail: "non-positive probability at the true class".into(),
    })?;
    let m = tape.mean_all(logs);
    Ok(tape.neg(m))
}

/// NAD over a pair batch: -(1/|P|) sum log(1 - u/(2K+eps)),
/// u = min(|r - r̂|, 2K). `rhat` is [|P|].
pub fn nad<S: Scalar>(
    tape: &mut Tape<S>,
    rhat: TensorId,
    r: &[i32],
    span: i32,
    epsilon: f64,
) -> Result<TensorId> {
    let diffs = pair_residuals(tape, rhat, r)?;
    let u0 = tape.abs(diffs);
    let two_k = S::from_f64(2.0 * span as f64);
    let u = tape.clamp_max(u0, two_k);
    let scaled = tape.scale(u, -S::one() / (two_k + S::from_f64(epsilon)));
    let arg = tape.offset(scaled, S::one());
    let logs = tape.log(arg)?;
    let m = tape.mean_all(logs);
    Ok(tape.neg(m))
}

/// Mean over pairs of (r - r̂)^2 or |r - r̂|.
pub fn regression_loss<S: Scalar>(
    tape: &mut Tape<S>,
    rhat: TensorId,
    r: &[i32],
    squared: bool,
) -> Result<TensorId> {
    let diffs = pair_residuals(tape, rhat, r)?;
    let per_pair = if squared {
        tape.mul(diffs, diffs)?
    } else {
        tape.abs(diffs)
    };
    Ok(tape.mean_all(per_pair))
}

/// Ordinal cross-entropy: softmax over the 2K+1 integer candidates of
/// the negative absolute distance to r̂, evaluated at the true r.
pub fn ordinal_ce<S: Scalar>(
    tape: &mut Tape<S>,
    rhat: TensorId,
    r: &[i32],
    span: i32,
) -> Result<TensorId> {
    check_pairs(tape, rhat, r)?;
    if let Some(&bad) = r.iter().find(|v| v.abs() > span) {
        return Err(Error::Contract {
            op: "ordinal_ce",
            detail: format!("label {bad} outside [-{span}, {span}]"),
        });
    }
    let n = r.len();
    let mut cols = Vec::with_capacity(2 * span as usize + 1);
    for k in -span..=span {
        let shifted = tape.offset(rhat, S::from_f64(-k as f64));
        let dist = tape.abs(shifted);
        let logit = tape.neg(dist);
        cols.push(tape.reshape(logit, vec![n, 1])?);
    }
    let logits = tape.concat(&cols, 1)?;
    let probs = tape.softmax(logits, 1)?;
    let truth_cols = r.iter().map(|&v| (v + span) as usize).collect();
    let picked = tape.gather_rows(probs, truth_cols)?;
    let logs = tape.log(picked)?;
    let m = tape.mean_all(logs);
    Ok(tape.neg(m))
}

/// L_total = L_cat + lambda * L_diff.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    l_cat: TensorId,
    l_diff: Option<TensorId>,
    lambda: f64,
) -> Result<TensorId> {
    match l_diff {
        Some(l_diff) => {
            let weighted = tape.scale(l_diff, S::from_f64(lambda));
            tape.add(l_cat, weighted)
        }
        None => Ok(l_cat),
    }
}

/// Differential loss for the configured ablation arm; `None` for the
/// categorical-only baseline.
pub fn diff_loss<S: Scalar>(
    tape: &mut Tape<S>,
    rhat: TensorId,
    r: &[i32],
    cfg: &LossConfig,
) -> Result<Option<TensorId>> {
    Ok(match cfg.kind {
        DiffLossKind::Nad => Some(nad(tape, rhat, r, cfg.span, cfg.epsilon)?),
        DiffLossKind::Mse => Some(regression_loss(tape, rhat, r, true)?),
        DiffLossKind::Mae => Some(regression_loss(tape, rhat, r, false)?),
        DiffLossKind::MseCeo => {
            let a = regression_loss(tape, rhat, r, true)?;
            let b = ordinal_ce(tape, rhat, r, cfg.span)?;
            Some(tape.add(a, b)?)
        }
        DiffLossKind::MaeCeo => {
            let a = regression_loss(tape, rhat, r, false)?;
            let b = ordinal_ce(tape, rhat, r, cfg.span)?;
            Some(tape.add(a, b)?)
        }
        DiffLossKind::None => None,
    })
}

fn check_pairs<S: Scalar>(tape: &Tape<S>, rhat: TensorId, r: &[i32]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::Contract {
            op: "pair_loss",
            detail: "empty pair set".into(),
        });
    }
    if tape.values(rhat).len() != r.len() {
        return Err(Error::ShapeMismatch {
            op: "pair_loss",
            left: tape.shape(rhat).to_vec(),
            right: vec![r.len()],
        });
    }
    Ok(())
}

fn pair_residuals<S: Scalar>(
    tape: &mut Tape<S>,
    rhat: TensorId,
    r: &[i32],
) -> Result<TensorId> {
    check_pairs(tape, rhat, r)?;
    let rv: Vec<S> = r.iter().map(|&v| S::from_f64(v as f64)).collect();
    let rconst = tape.constant(vec![r.len()], rv)?;
    tape.sub(rconst, rhat)
}

// ---------------------------------------------------------------------
// Pointwise closed forms over d = r - r̂ (loss-curve table).

pub fn nad_pointwise(d: f64, span: i32, epsilon: f64) -> f64 {
    let two_k = 2.0 * span as f64;
    let u = d.abs().min(two_k);
    -(1.0 - u / (two_k + epsilon)).ln()
}

pub fn mse_pointwise(d: f64) -> f64 {
    d * d
}

pub fn mae_pointwise(d: f64) -> f64 {
    d.abs()
}

/// Per-pair ordinal CE at true label r = 0 and prediction r̂ = -d.
pub fn ordinal_ce_pointwise(d: f64, span: i32) -> f64 {
    let rhat = -d;
    let mut denom = 0.0;
    let mut truth = 0.0;
    let max_logit = -(-span..=span)
        .map(|k| (rhat - k as f64).abs())
        .fold(f64::INFINITY, f64::min);
    for k in -span..=span {
        let logit = -(rhat - k as f64).abs();
        let e = (logit - max_logit).exp();
        denom += e;
        if k == 0 {
            truth = e;
        }
    }
    -(truth / denom).ln()
}

/// One loss-curve row per d in [d_min, d_max] at the given step.
pub fn loss_curve_table(
    span: i32,
    epsilon: f64,
    d_min: f64,
    d_max: f64,
    step: f64,
) -> Result<Vec<(f64, f64, f64, f64, f64)>> {
    if step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let n = ((d_max - d_min) / step).round() as i64;
    let mut rows = Vec::with_capacity(n as usize + 1);
    for i in 0..=n {
        let d = d_min + i as f64 * step;
        rows.push((
            d,
            mse_pointwise(d),
            mae_pointwise(d),
            ordinal_ce_pointwise(d, span),
            nad_pointwise(d, span, epsilon),
        ));
    }
    Ok(rows)
}

/// CSV emission: header `d,mse,mae,ce_o,nad`, six decimal places.
pub fn write_loss_curve_csv<W: Write>(
    mut w: W,
    rows: &[(f64, f64, f64, f64, f64)],
) -> std::io::Result<()> {
    writeln!(w, "d,mse,mae,ce_o,nad")?;
    for &(d, mse, mae, ceo, nad) in rows {
        // +0.0 folds IEEE negative zeros (e.g. -ln(1) = -0.0) into "0.000000"
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            d + 0.0,
            mse + 0.0,
            mae + 0.0,
            ceo + 0.0,
            nad + 0.0
        )?;
    }
    Ok(())
}
