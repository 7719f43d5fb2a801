use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

pub trait Optimizer {
    /// Applies one update to every non-frozen parameter. Frozen parameters
    /// are never written.
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()>;
    fn steps(&self) -> u64;
}

fn check_grads(params: &ParamStore, grads: &ParamGrads) -> Result<()> {
    for (id, p) in params.iter() {
        if p.frozen {
            continue;
        }
        match grads.get(id) {
            None => return Err(Error::MissingGradient(p.name.clone())),
            Some(g) if g.shape() != p.tensor.shape() => {
                return Err(Error::shape("optimizer", p.tensor.shape(), g.shape()))
            }
            Some(g) if !g.is_finite() => {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}`", p.name),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    step: u64,
}

impl Sgd {
    pub fn new(learning_rate: f32) -> Self {
        Sgd {
            learning_rate,
            step: 0,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        check_grads(params, grads)?;
        let ids: Vec<_> = params.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        for id in ids {
            let g = grads.get(id).expect("checked");
            let p = params.get_mut(id);
            for (w, &gv) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                *w -= self.learning_rate * gv;
            }
        }
        self.step += 1;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with bias correction. Moment buffers exist only for parameters that
/// were trainable when the optimizer was created.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| {
                (!p.frozen).then(|| Moments {
                    m: vec![0.0; p.tensor.numel()],
                    v: vec![0.0; p.tensor.numel()],
                })
            })
            .collect();
        Adam {
            config,
            step: 0,
            moments,
        }
    }

    pub fn has_moments(&self, id: super::ParamId) -> bool {
        self.moments.get(id.index()).is_some_and(Option::is_some)
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        check_grads(params, grads)?;
        let t = self.step + 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - f64::from(beta1).powi(t as i32);
        let bc2 = 1.0 - f64::from(beta2).powi(t as i32);
        let ids: Vec<_> = params.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        for id in ids {
            let mo = self.moments[id.index()].as_mut().ok_or_else(|| {
                Error::invalid(format!(
                    "parameter `{}` was frozen when the optimizer was built",
                    params.get(id).name
                ))
            })?;
            let g = grads.get(id).expect("checked");
            let p = params.get_mut(id);
            for (((w, &gv), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let m_hat = f64::from(*m) / bc1;
                let v_hat = f64::from(*v) / bc2;
                let update = f64::from(learning_rate) * m_hat / (v_hat.sqrt() + f64::from(eps));
                *w = (f64::from(*w) - update) as f32;
            }
        }
        self.step = t;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn build(self, params: &ParamStore, learning_rate: f32) -> Box<dyn Optimizer + Send> {
        match self {
            OptimizerKind::Adam => Box::new(Adam::new(
                params,
                AdamConfig {
                    learning_rate,
                    ..AdamConfig::default()
                },
            )),
            OptimizerKind::Sgd => Box::new(Sgd::new(learning_rate)),
        }
    }
}
