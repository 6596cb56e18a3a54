use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "dequantization alpha must lie in [0, 0.5), got {alpha}"
        )));
    }
    Ok(())
}

/// Logit dequantization of 8-bit values, `y = logit(α + (1 − α)·x/256)`.
/// Returns `y` and `log|det ∂y/∂x|`.
pub fn dequantize(x: &[u8], alpha: f64) -> Result<(Vec<f64>, f64)> {
    check_alpha(alpha)?;
    let mut log_det = 0.0;
    let y = x
        .iter()
        .map(|&v| {
            let p = alpha + (1.0 - alpha) * f64::from(v) / 256.0;
            log_det += (1.0 - alpha).ln() - 256f64.ln() - p.ln() - (1.0 - p).ln();
            (p / (1.0 - p)).ln()
        })
        .collect::<Vec<_>>();
    if !log_det.is_finite() || y.iter().any(|v| !v.is_finite()) {
        // alpha = 0 and x = 0 puts p at 0.
        return Err(Error::NonFinite("dequantized value at the boundary".into()));
    }
    Ok((y, log_det))
}

/// Inverse of [`dequantize`] on reals: `x = 256·(sigmoid(y) − α)/(1 − α)`.
pub fn dequantize_inverse(y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    Ok(y
        .iter()
        .map(|&v| 256.0 * (1.0 / (1.0 + (-v).exp()) - alpha) / (1.0 - alpha))
        .collect())
}
