use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer over a fixed list of tensors.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|n| vec![0.0; *n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum,
                velocity: zeros(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                for ((p, g), vel) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
                    if *momentum == 0.0 {
                        for (p, g) in p.iter_mut().zip(g) {
                            *p -= lr * g;
                        }
                    } else {
                        for ((p, g), v) in p.iter_mut().zip(g).zip(vel.iter_mut()) {
                            *v = *momentum * *v + g;
                            *p -= lr * *v;
                        }
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = *beta1 * *m + (1.0 - *beta1) * g;
                        *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut x = vec![3.0, -2.0];
            let mut opt = Optimizer::new(kind, 0.5, &[2]);
            for _ in 0..500 {
                let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
                opt.step(vec![&mut x], vec![&g], 0.05);
            }
            assert!(x.iter().all(|v| v.abs() < 1e-2), "{kind:?}: {x:?}");
        }
    }
}
