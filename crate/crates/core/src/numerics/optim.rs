use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "plain-sgd" => Ok(Self::Sgd),
            "adamw" | "adaptive-moment" => Ok(Self::AdamW),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Plain SGD or AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::build(OptimizerKind::Sgd, lr, 0.0)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::build(OptimizerKind::AdamW, lr, weight_decay)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::AdamW => Self::adamw(lr, 0.0),
        }
    }

    fn build(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}'",
                params.name(i)
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::AdamW => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.v = self.m.clone();
                }
                self.step += 1;
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let d = g.data()[i];
                        md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * d;
                        vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * d * d;
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        pd[i] -=
                            self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shuffled minibatch descent over `n` items. `loss` records the batch loss
/// for the given item indices; returns the mean loss of every epoch.
///
/// Aborts with a divergence error when an epoch mean exceeds ten times the
/// first epoch's.
pub fn fit_minibatches<F>(
    params: &mut ParamSet,
    opt: &mut Optimizer,
    n: usize,
    batch_size: usize,
    epochs: usize,
    rng: &mut RngStream,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: for<'a> FnMut(&mut Graph<'a>, &[Var], &[usize]) -> Result<Var>,
{
    if n == 0 || batch_size == 0 {
        return Err(Error::EmptyInput(
            "minibatch training needs items and a positive batch size".into(),
        ));
    }
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let perm = rng.permutation(n);
        let mut total = 0.0;
        for chunk in perm.chunks(batch_size) {
            let (value, grads) = {
                let mut g = Graph::new();
                let vars = params.bind(&mut g);
                let l = loss(&mut g, &vars, chunk)?;
                let value = g.value(l).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss {value} in epoch {epoch}")));
                }
                let mut grads = g.backward(l)?;
                (value, ParamSet::collect_grads(&mut grads, &vars))
            };
            opt.step(params, &grads)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / n as f64;
        if let Some(&first) = curve.first() {
            if mean > 10.0 * first {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} loss {mean} vs initial {first}"
                )));
            }
        }
        curve.push(mean);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(mut opt: Optimizer) -> f64 {
        let mut p = ParamSet::new();
        p.push("x", Tensor::vector(vec![3.0, -2.0]));
        for _ in 0..500 {
            let g = vec![p.get(0).clone()];
            opt.step(&mut p, &g).unwrap();
        }
        p.get(0).norm()
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        assert!(quadratic_descent(Optimizer::sgd(0.1)) < 1e-6);
        assert!(quadratic_descent(Optimizer::adamw(0.05, 0.0)) < 1e-2);
    }

    #[test]
    fn non_finite_gradient_leaves_params_untouched() {
        let mut p = ParamSet::new();
        p.push("x", Tensor::vector(vec![1.0]));
        let mut opt = Optimizer::adamw(0.1, 0.0);
        assert!(opt.step(&mut p, &[Tensor::vector(vec![f64::NAN])]).is_err());
        assert_eq!(p.get(0).data(), &[1.0]);
    }
}
