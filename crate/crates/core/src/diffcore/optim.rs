use super::store::ParamStore;
use super::tape::Tensor;
use super::DiffError;

/// First-order update rule. Learning rates can be rescaled per parameter via
/// the `scales` argument of [`OptimizerState::step`]; a scale of zero freezes
/// that parameter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    SgdMomentum {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        nesterov: bool,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-7
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerSpec::SgdMomentum {
            lr,
            momentum,
            nesterov: false,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::SgdMomentum { lr, .. } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer with its moment buffers. Buffers align with the indices of the
/// [`ParamStore`] the state was created for.
pub struct OptimizerState {
    spec: OptimizerSpec,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = (0..store.len())
            .map(|i| Tensor::zeros(store.value(i).shape().to_vec()))
            .collect();
        OptimizerState {
            spec,
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn spec(&self) -> OptimizerSpec {
        self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update in place. `grads[i]` of `None` counts as a zero
    /// gradient; momentum still decays and Adam's clock still advances, so a
    /// parameter that stops receiving gradients coasts to a stop instead of
    /// being pinned. A non-finite gradient is an error naming the parameter.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        scales: &[f64],
    ) -> Result<(), DiffError> {
        assert_eq!(grads.len(), params.len(), "gradient slots misaligned");
        assert_eq!(scales.len(), params.len(), "scale slots misaligned");
        for (i, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(DiffError::NonFiniteGrad {
                        param: params.name(i).to_string(),
                    });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for i in 0..params.len() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(params.value(i).shape().to_vec());
                    &zero
                }
            };
            let scale = scales[i];
            match self.spec {
                OptimizerSpec::SgdMomentum {
                    lr,
                    momentum,
                    nesterov,
                } => {
                    let buf = &mut self.m[i];
                    buf.zip_mut_with(g, |b, &gv| *b = momentum * *b + gv);
                    let eff_lr = lr * scale;
                    let value = params.value_mut(i);
                    if nesterov {
                        ndarray::Zip::from(value)
                            .and(&*buf)
                            .and(g)
                            .for_each(|p, &b, &gv| *p -= eff_lr * (gv + momentum * b));
                    } else {
                        ndarray::Zip::from(value)
                            .and(&*buf)
                            .for_each(|p, &b| *p -= eff_lr * b);
                    }
                }
                OptimizerSpec::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    m.zip_mut_with(g, |mm, &gv| *mm = beta1 * *mm + (1.0 - beta1) * gv);
                    v.zip_mut_with(g, |vv, &gv| *vv = beta2 * *vv + (1.0 - beta2) * gv * gv);
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    let eff_lr = lr * scale;
                    let value = params.value_mut(i);
                    ndarray::Zip::from(value)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &mm, &vv| {
                            let mhat = mm / bc1;
                            let vhat = vv / bc2;
                            *p -= eff_lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}
