//! Tokens saved by a candidate run relative to a baseline at matched loss.

use crate::error::{Error, Result};

/// EMA weight used to smooth loss curves before comparing them.
pub const LOSS_SMOOTHING_ALPHA: f64 = 0.05;

/// EMA (first sample initializes it) followed by a running minimum, so
/// the result is non-increasing.
pub fn smooth_loss(series: &[(f64, f64)], alpha: f64) -> Result<Vec<(f64, f64)>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing alpha must be in (0, 1], got {alpha}"
        )));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut ema = None;
    let mut best = f64::INFINITY;
    for &(tokens, loss) in series {
        let e = match ema {
            None => loss,
            Some(prev) => (1.0 - alpha) * prev + alpha * loss,
        };
        ema = Some(e);
        best = best.min(e);
        out.push((tokens, best));
    }
    Ok(out)
}

fn check_monotone(series: &[(f64, f64)], what: &str) -> Result<()> {
    for w in series.windows(2) {
        if !(w[1].0 > w[0].0) || w[1].1 > w[0].1 {
            return Err(Error::InvalidArgument(format!(
                "{what} must have increasing tokens and non-increasing loss"
            )));
        }
    }
    if series.iter().any(|(t, l)| !t.is_finite() || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} has non-finite values")));
    }
    Ok(())
}

/// Tokens at which a non-increasing curve first reaches `level`, by linear
/// interpolation in loss. `None` outside the curve's loss range.
pub fn interp_tokens(series: &[(f64, f64)], level: f64) -> Option<f64> {
    let (first, last) = (series.first()?, series.last()?);
    if level > first.1 || level < last.1 {
        return None;
    }
    let i = series.iter().position(|&(_, l)| l <= level)?;
    if i == 0 {
        return Some(first.0);
    }
    let (t0, l0) = series[i - 1];
    let (t1, l1) = series[i];
    Some(t0 + (l0 - level) / (l0 - l1) * (t1 - t0))
}

/// `(loss_level, tokens_saved)` for every baseline point that first
/// reaches a new loss level and lies inside the candidate's loss range.
///
/// Both curves must already be smoothed (see [`smooth_loss`]).
pub fn tokens_saved(baseline: &[(f64, f64)], candidate: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    check_monotone(baseline, "baseline")?;
    check_monotone(candidate, "candidate")?;
    let mut out = Vec::new();
    let mut prev_level = f64::INFINITY;
    for &(tok_b, level) in baseline {
        if level >= prev_level {
            continue;
        }
        prev_level = level;
        if let Some(tok_c) = interp_tokens(candidate, level) {
            out.push((level, tok_b - tok_c));
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(
            "baseline and candidate loss ranges do not overlap".into(),
        ));
    }
    Ok(out)
}

/// Pointwise mean of several loss curves sharing one token grid.
pub fn mean_curve(curves: &[Vec<(f64, f64)>]) -> Result<Vec<(f64, f64)>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InsufficientData("no curves to average".into()))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Shape("curves differ in length".into()));
    }
    let n = curves.len() as f64;
    (0..first.len())
        .map(|i| {
            let tokens = first[i].0;
            if curves.iter().any(|c| c[i].0 != tokens) {
                return Err(Error::Shape(format!("curves disagree on the token grid at step {i}")));
            }
            Ok((tokens, curves.iter().map(|c| c[i].1).sum::<f64>() / n))
        })
        .collect()
}
