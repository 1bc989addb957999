//! Parameter update rules. All arithmetic is FP32 on the master copy.

use std::fmt;

use crate::error::{Error, Result};
use crate::registry::{KeySpec, Optimizers, Plugin, Registry};

/// Serializable optimizer state: update count plus named per-parameter buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub buffers: Vec<(String, Vec<f32>)>,
}

pub trait Optimizer: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Applies one update. Non-finite gradients are rejected before any change.
    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()>;

    /// Updates applied so far.
    fn steps(&self) -> u64;

    fn state(&self) -> OptimizerState;

    fn load_state(&mut self, state: OptimizerState) -> Result<()>;
}

fn check(params: &[f32], grads: &[f32]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {i} is {}", grads[i])));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct Sgd {
    t: u64,
}

impl Optimizer for Sgd {
    fn name(&self) -> &str {
        "sgd"
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        check(params, grads)?;
        let lr = lr as f32;
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
        self.t += 1;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.t,
            buffers: vec![],
        }
    }

    fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        self.t = state.step;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Result<Self> {
        for (key, b) in [("adam_beta1", beta1), ("adam_beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ConfigValue {
                    key: key.into(),
                    message: format!("{b} outside [0, 1)"),
                });
            }
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::ConfigValue {
                key: "adam_eps".into(),
                message: format!("{eps} must be positive"),
            });
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.m, &self.v)
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &str {
        "adam"
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        check(params, grads)?;
        if self.m.len() != params.len() {
            if self.t != 0 {
                return Err(Error::Shape(format!(
                    "moments hold {} values but {} params were given",
                    self.m.len(),
                    params.len()
                )));
            }
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = (1.0 - f64::from(self.beta1).powi(t)) as f32;
        let c2 = (1.0 - f64::from(self.beta2).powi(t)) as f32;
        let lr = lr as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.t,
            buffers: vec![
                ("exp_avg".into(), self.m.clone()),
                ("exp_avg_sq".into(), self.v.clone()),
            ],
        }
    }

    fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        let mut m = None;
        let mut v = None;
        for (name, buf) in state.buffers {
            match name.as_str() {
                "exp_avg" => m = Some(buf),
                "exp_avg_sq" => v = Some(buf),
                other => return Err(Error::Integrity(format!("unexpected adam buffer '{other}'"))),
            }
        }
        let (m, v) = (m.unwrap_or_default(), v.unwrap_or_default());
        if m.len() != v.len() {
            return Err(Error::Integrity("adam moment buffers differ in length".into()));
        }
        self.t = state.step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

pub fn register_builtins(registry: &mut Registry) -> Result<()> {
    registry.register::<Optimizers>(
        "sgd",
        Plugin::new("seqforge", vec![], |_, _| {
            Ok(Box::new(Sgd::default()) as Box<dyn Optimizer>)
        }),
    )?;
    registry.register::<Optimizers>(
        "adam",
        Plugin::new(
            "seqforge",
            vec![
                KeySpec::new("adam_beta1", 0.9, "first-moment decay"),
                KeySpec::new("adam_beta2", 0.98, "second-moment decay"),
                KeySpec::new("adam_eps", 1e-8, "denominator epsilon"),
            ],
            |c, _| {
                let adam = Adam::new(
                    c.get_real("adam_beta1")? as f32,
                    c.get_real("adam_beta2")? as f32,
                    c.get_real("adam_eps")? as f32,
                )?;
                Ok(Box::new(adam) as Box<dyn Optimizer>)
            },
        ),
    )?;
    registry.register::<Optimizers>(
        "adafactor",
        Plugin::new("seqforge", vec![], |_, _| {
            Err(Error::Construction {
                component: "optimizer 'adafactor'".into(),
                message: "name is reserved; no implementation ships".into(),
            })
        }),
    )
}
