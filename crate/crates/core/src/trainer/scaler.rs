use crate::error::{Error, Result};

/// Dynamic loss scaling: halve on overflow, double after `window` clean steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LossScaler {
    pub scale: f64,
    /// Consecutive steps without overflow.
    pub good_steps: u64,
    pub window: u64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self {
            scale: 128.0,
            good_steps: 0,
            window: 256,
            min_scale: 2f64.powi(-5),
            max_scale: 2f64.powi(15),
        }
    }
}

impl LossScaler {
    pub fn new(scale: f64, window: u64, min_scale: f64, max_scale: f64) -> Result<Self> {
        let pow2 = |v: f64| v > 0.0 && v.is_finite() && v.log2().fract() == 0.0;
        if !pow2(scale) || !pow2(min_scale) || !pow2(max_scale) || !(min_scale..=max_scale).contains(&scale) {
            return Err(Error::Invalid(format!(
                "loss scales must be powers of two with min <= scale <= max (got {min_scale} <= {scale} <= {max_scale})"
            )));
        }
        if window < 1 {
            return Err(Error::Invalid("loss scale window must be at least 1".into()));
        }
        Ok(Self {
            scale,
            good_steps: 0,
            window,
            min_scale,
            max_scale,
        })
    }

    /// Records one step's outcome. Returns whether the scale changed.
    pub fn update(&mut self, overflowed: bool) -> Result<bool> {
        if overflowed {
            self.good_steps = 0;
            let next = self.scale / 2.0;
            if next < self.min_scale {
                return Err(Error::Divergence {
                    attempted: next,
                    min: self.min_scale,
                });
            }
            self.scale = next;
            return Ok(true);
        }
        self.good_steps += 1;
        if self.good_steps >= self.window {
            self.good_steps = 0;
            let next = (self.scale * 2.0).min(self.max_scale);
            let changed = next != self.scale;
            self.scale = next;
            return Ok(changed);
        }
        Ok(false)
    }
}
