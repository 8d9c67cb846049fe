use crate::error::{DefError, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep embedding with interleaved `[sin, cos]` pairs at
/// geometrically spaced frequencies `MAX_PERIOD^(-k / (width/2))`.
pub fn time_embedding(t: f64, width: usize) -> Result<Vec<f64>> {
    if width == 0 || width % 2 != 0 {
        return Err(DefError::InvalidConfig(format!(
            "time embedding width must be even and positive, got {width}"
        )));
    }
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for k in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
        let arg = t * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}
