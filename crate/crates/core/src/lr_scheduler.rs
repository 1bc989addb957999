//! Learning-rate schedules as pure functions of the 1-based update index.

use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};
use crate::registry::{Config, KeySpec, Plugin, Registry, Schedulers};

pub trait LrScheduler: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Learning rate for update number `step` (1-based).
    fn lr(&self, step: u64) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Warmup {
    pub base_lr: f64,
    pub steps: u64,
    pub init_lr: f64,
}

impl Warmup {
    /// Linear ramp from `init_lr` to `base_lr`, exact at `step == steps`.
    fn at(&self, step: u64) -> Option<f64> {
        (self.steps > 0 && step <= self.steps).then(|| {
            let frac = step as f64 / self.steps as f64;
            self.base_lr * frac + self.init_lr * (1.0 - frac)
        })
    }

    fn from_config(c: &Config) -> Result<Self> {
        let w = Self {
            base_lr: c.get_real("lr")?,
            steps: c.get_usize("warmup")? as u64,
            init_lr: c.get_real("warmup_init_lr")?,
        };
        if w.base_lr.is_nan() || w.base_lr <= 0.0 {
            return Err(Error::ConfigValue {
                key: "lr".into(),
                message: format!("{} must be positive", w.base_lr),
            });
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseSqrt {
    pub warmup: Warmup,
}

impl LrScheduler for InverseSqrt {
    fn name(&self) -> &str {
        "inverse_sqrt"
    }

    fn lr(&self, step: u64) -> f64 {
        let step = step.max(1);
        self.warmup.at(step).unwrap_or_else(|| {
            let w = self.warmup.steps.max(1) as f64;
            self.warmup.base_lr * (w / step as f64).sqrt()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineRestart {
    pub warmup: Warmup,
    pub period: u64,
    pub t_mult: f64,
    pub eta_min: f64,
}

impl CosineRestart {
    /// Rate at `t` updates past warmup.
    pub fn at_offset(&self, t: u64) -> f64 {
        let mut t_cur = t as f64;
        let mut t_i = self.period as f64;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.t_mult;
        }
        let base = self.warmup.base_lr;
        let lr = self.eta_min + 0.5 * (base - self.eta_min) * (1.0 + (PI * t_cur / t_i).cos());
        lr.clamp(self.eta_min.min(base), base.max(self.eta_min))
    }
}

impl LrScheduler for CosineRestart {
    fn name(&self) -> &str {
        "cosine_restart"
    }

    fn lr(&self, step: u64) -> f64 {
        let step = step.max(1);
        self.warmup
            .at(step)
            .unwrap_or_else(|| self.at_offset(step - 1 - self.warmup.steps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixed {
    pub warmup: Warmup,
}

impl Fixed {
    /// A constant rate with no warmup.
    pub fn new(lr: f64) -> Self {
        Self {
            warmup: Warmup {
                base_lr: lr,
                steps: 0,
                init_lr: 0.0,
            },
        }
    }
}

impl LrScheduler for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }

    fn lr(&self, step: u64) -> f64 {
        self.warmup.at(step.max(1)).unwrap_or(self.warmup.base_lr)
    }
}

fn warmup_keys() -> Vec<KeySpec> {
    vec![
        KeySpec::new("lr", 5e-4, "peak learning rate"),
        KeySpec::new("warmup", 400i64, "linear warmup updates"),
        KeySpec::new("warmup_init_lr", 0.0, "learning rate at the start of warmup"),
    ]
}

pub fn register_builtins(registry: &mut Registry) -> Result<()> {
    registry.register::<Schedulers>(
        "inverse_sqrt",
        Plugin::new("seqforge", warmup_keys(), |c, _| {
            Ok(Box::new(InverseSqrt {
                warmup: Warmup::from_config(c)?,
            }) as Box<dyn LrScheduler>)
        }),
    )?;
    let mut cosine_keys = warmup_keys();
    cosine_keys.extend([
        KeySpec::new("lr_period", 1000i64, "length of the first cosine cycle"),
        KeySpec::new("t_mult", 1.0, "cycle length multiplier after each restart"),
        KeySpec::new("eta_min", 0.0, "floor of the cosine cycle"),
    ]);
    registry.register::<Schedulers>(
        "cosine_restart",
        Plugin::new("seqforge", cosine_keys, |c, _| {
            let s = CosineRestart {
                warmup: Warmup::from_config(c)?,
                period: c.get_usize("lr_period")? as u64,
                t_mult: c.get_real("t_mult")?,
                eta_min: c.get_real("eta_min")?,
            };
            if s.period < 1 {
                return Err(Error::ConfigValue {
                    key: "lr_period".into(),
                    message: "must be at least 1".into(),
                });
            }
            if s.t_mult.is_nan() || s.t_mult < 1.0 {
                return Err(Error::ConfigValue {
                    key: "t_mult".into(),
                    message: format!("{} must be at least 1", s.t_mult),
                });
            }
            Ok(Box::new(s) as Box<dyn LrScheduler>)
        }),
    )?;
    registry.register::<Schedulers>(
        "fixed",
        Plugin::new("seqforge", warmup_keys(), |c, _| {
            Ok(Box::new(Fixed {
                warmup: Warmup::from_config(c)?,
            }) as Box<dyn LrScheduler>)
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{BuildContext, Provenance, Value};
    use proptest::prelude::*;

    fn inv(base: f64, warmup: u64) -> InverseSqrt {
        InverseSqrt {
            warmup: Warmup {
                base_lr: base,
                steps: warmup,
                init_lr: 0.0,
            },
        }
    }

    fn cosine(period: u64, t_mult: f64) -> CosineRestart {
        CosineRestart {
            warmup: Warmup {
                base_lr: 1.0,
                steps: 0,
                init_lr: 0.0,
            },
            period,
            t_mult,
            eta_min: 0.1,
        }
    }

    #[test]
    fn inverse_sqrt_examples() {
        let s = inv(5e-4, 4000);
        assert_eq!(s.lr(4000), 5e-4);
        assert_eq!(s.lr(16000), 2.5e-4);
        let z = inv(5e-4, 0);
        assert_eq!(z.lr(1), 5e-4);
        assert!(z.lr(2) < z.lr(1));
    }

    #[test]
    fn inverse_sqrt_through_registry() {
        let r = Registry::with_builtins();
        let mut c = Config::from_schema(&r.keys::<Schedulers>("inverse_sqrt").unwrap());
        c.set("warmup", Value::Int(4000), Provenance::User).unwrap();
        let s = r
            .instantiate::<Schedulers>("inverse_sqrt", &c, &BuildContext::default())
            .unwrap();
        assert_eq!(s.lr(4000), 5e-4);
    }

    #[test]
    fn cosine_examples() {
        let s = cosine(10, 2.0);
        assert_eq!(s.at_offset(0), 1.0);
        assert!((s.at_offset(5) - 0.55).abs() < 1e-12);
        assert_eq!(s.at_offset(10), 1.0);
        assert_eq!(s.at_offset(30), 1.0);
        assert!((s.at_offset(20) - 0.55).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn inverse_sqrt_continuous_then_decreasing(warmup in 1u64..5000, base in 1e-5f64..1.0, k in 1u64..10000) {
            let s = inv(base, warmup);
            prop_assert_eq!(s.lr(warmup), base);
            let after = s.lr(warmup + 1);
            prop_assert!((after - base).abs() <= base * (1.0 - (warmup as f64 / (warmup + 1) as f64).sqrt()) + 1e-15);
            prop_assert!(s.lr(warmup + k + 1) < s.lr(warmup + k));
        }

        #[test]
        fn cosine_stays_in_band(period in 1u64..50, t_mult in 1.0f64..3.0, step in 1u64..5000) {
            let s = cosine(period, t_mult);
            let lr = s.lr(step);
            prop_assert!((0.1..=1.0).contains(&lr));
        }
    }
}
