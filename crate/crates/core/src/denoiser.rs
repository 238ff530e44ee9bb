//! Conditional noise-prediction network `ε_θ(z_t, t, y)` and its training
//! loop with classifier-free label dropout.
//!
//! The network is a residual MLP over flattened latents. Time enters through
//! sinusoidal features and a two-layer projection; the class enters through a
//! learnable embedding table whose last row is the null label. Both are
//! summed into a conditioning vector that is added inside every block. The
//! output head starts at zero, so an untrained model predicts `ε̂ = 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{
    sinusoidal_features, Graph, Linear, Optimizer, OptimizerKind, ParamSet, RngStream, Tensor, Var,
};
use crate::schedule::NoiseSchedule;

/// Conditioning label: a class index or the null label `∅`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Null,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Null => None,
        }
    }
}

/// Anything that predicts the noise component of `z_t`.
///
/// `z` is `[d]` or `[B, d]`; `labels` has one entry per row.
pub trait NoisePredictor: Sync {
    fn predict(&self, z: &Tensor, t: usize, labels: &[Label]) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub class_dim: usize,
    pub time_dim: usize,
    pub num_classes: usize,
    pub horizon: usize,
}

impl DenoiserConfig {
    pub fn new(data_dim: usize, num_classes: usize, horizon: usize) -> Self {
        Self {
            data_dim,
            width: 128,
            blocks: 2,
            class_dim: 32,
            time_dim: 32,
            num_classes,
            horizon,
        }
    }
}

pub const TIME_BASE: f64 = 1e4;
const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    time1: Linear,
    time2: Linear,
    class_table: usize,
    class_proj: Linear,
    blocks: Vec<(Linear, Linear)>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamSet,
    layout: Layout,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut RngStream) -> Self {
        let (params, layout) = Self::build(&config, rng);
        Self {
            config,
            params,
            layout,
        }
    }

    fn build(c: &DenoiserConfig, rng: &mut RngStream) -> (ParamSet, Layout) {
        let mut p = ParamSet::new();
        let w = c.width;
        let input = Linear::init(&mut p, "input", c.data_dim, w, 1.0, rng);
        let time1 = Linear::init(&mut p, "time1", c.time_dim, w, 1.0, rng);
        let time2 = Linear::init(&mut p, "time2", w, w, 1.0, rng);
        let table = rng
            .gaussian(&[c.num_classes + 1, c.class_dim])
            .expect("extents");
        let class_table = p.push("class_embed", table);
        let class_proj = Linear::init(&mut p, "class_proj", c.class_dim, w, 1.0, rng);
        let blocks = (0..c.blocks)
            .map(|i| {
                let l1 = Linear::init(&mut p, &format!("block{i}.fc1"), w, w, 1.0, rng);
                let l2 = Linear::init(&mut p, &format!("block{i}.fc2"), w, w, 0.5, rng);
                (l1, l2)
            })
            .collect();
        let head = Linear::zeros(&mut p, "head", w, c.data_dim);
        (
            p,
            Layout {
                input,
                time1,
                time2,
                class_table,
                class_proj,
                blocks,
                head,
            },
        )
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        let (template, layout) = Self::build(&config, &mut RngStream::new(0, 0));
        if template.len() != params.len() {
            return Err(Error::Format(format!(
                "denoiser expects {} tensors, found {}",
                template.len(),
                params.len()
            )));
        }
        for ((tn, tt), (pn, pt)) in template.iter().zip(params.iter()) {
            if tn != pn || tt.shape() != pt.shape() {
                return Err(Error::Format(format!(
                    "tensor '{pn}' {:?} does not match expected '{tn}' {:?}",
                    pt.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn class_table_index(&self) -> usize {
        self.layout.class_table
    }

    pub fn null_index(&self) -> usize {
        self.config.num_classes
    }

    fn label_rows(&self, labels: &[Label]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| match *l {
                Label::Null => Ok(self.config.num_classes),
                Label::Class(c) if c < self.config.num_classes => Ok(c),
                Label::Class(c) => Err(Error::Label {
                    label: c,
                    num_classes: self.config.num_classes,
                }),
            })
            .collect()
    }

    fn time_features(&self, ts: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ts.len() * self.config.time_dim);
        for &t in ts {
            if t == 0 || t > self.config.horizon {
                return Err(Error::Range(format!(
                    "time step {t} outside 1..={}",
                    self.config.horizon
                )));
            }
            data.extend(sinusoidal_features(t, self.config.time_dim, TIME_BASE));
        }
        Tensor::new(&[ts.len(), self.config.time_dim], data)
    }

    /// Records the network on `g`. `z` is a `[B, d]` node; `ts` and `labels`
    /// carry one entry per row.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        vars: &[Var],
        z: Var,
        ts: &[usize],
        labels: &[Label],
    ) -> Result<Var> {
        let rows = g.value(z).rows();
        if g.value(z).cols() != self.config.data_dim {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input {:?} vs data_dim {}",
                g.value(z).shape(),
                self.config.data_dim
            )));
        }
        if ts.len() != rows || labels.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "{rows} rows with {} time steps and {} labels",
                ts.len(),
                labels.len()
            )));
        }
        let l = &self.layout;
        let idx = self.label_rows(labels)?;
        let tf = g.constant(self.time_features(ts)?);

        let te = l.time1.forward(g, vars, tf);
        let te = g.silu(te);
        let te = l.time2.forward(g, vars, te);
        let ce = g.gather(vars[l.class_table], idx);
        let ce = l.class_proj.forward(g, vars, ce);
        let cond = g.add(te, ce);

        let h = l.input.forward(g, vars, z);
        let mut h = g.add(h, cond);
        for (fc1, fc2) in &l.blocks {
            let a = g.silu(h);
            let u = fc1.forward(g, vars, a);
            let u = g.add(u, cond);
            let u = g.silu(u);
            let u = fc2.forward(g, vars, u);
            h = g.add(h, u);
        }
        let a = g.silu(h);
        Ok(l.head.forward(g, vars, a))
    }

    /// `ε̂` for each row of `z` with per-row time steps.
    pub fn predict_rows(&self, z: &Tensor, ts: &[usize], labels: &[Label]) -> Result<Tensor> {
        let shape = z.shape().to_vec();
        let z = z.as_matrix();
        let rows = z.rows();
        if ts.len() != rows || labels.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "{rows} rows with {} time steps and {} labels",
                ts.len(),
                labels.len()
            )));
        }
        let starts: Vec<usize> = (0..rows).step_by(INFER_CHUNK).collect();
        let parts: Vec<Result<Tensor>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + INFER_CHUNK).min(rows);
                let idx: Vec<usize> = (s..e).collect();
                let chunk = z.select_rows(&idx);
                let mut g = Graph::new();
                let vars = self.params.bind_frozen(&mut g);
                let x = g.constant(chunk);
                let out = self.forward(&mut g, &vars, x, &ts[s..e], &labels[s..e])?;
                Ok(g.value(out).clone())
            })
            .collect();
        let mut data = Vec::with_capacity(z.len());
        for p in parts {
            data.extend_from_slice(p?.data());
        }
        Tensor::new(&shape, data)
    }

    /// `ε_θ(z_t, t, y)` for a single time step.
    pub fn predict_eps(&self, z: &Tensor, t: usize, labels: &[Label]) -> Result<Tensor> {
        let ts = vec![t; z.rows()];
        self.predict_rows(z, &ts, labels)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z: &Tensor, t: usize, labels: &[Label]) -> Result<Tensor> {
        self.predict_eps(z, t, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub p_uncond: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.2,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!(
                "p_uncond={} outside [0,1]",
                self.p_uncond
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "learning_rate, batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(self.learning_rate),
            OptimizerKind::AdamW => Optimizer::adamw(self.learning_rate, self.weight_decay),
        }
    }
}

/// Random quantities of one training step, drawn up front so the loss is a
/// deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct TrainDraws {
    pub z_t: Tensor,
    pub eps: Tensor,
    pub ts: Vec<usize>,
    pub labels: Vec<Label>,
}

impl TrainDraws {
    /// `t ~ U{1..T}`, `ε ~ N(0, I)` and label dropout with probability
    /// `p_uncond` for every row of `z0`.
    pub fn sample(
        z0: &Tensor,
        classes: &[usize],
        schedule: &NoiseSchedule,
        p_uncond: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let z0 = z0.as_matrix();
        let (b, d) = (z0.rows(), z0.cols());
        if b == 0 || classes.len() != b {
            return Err(Error::EmptyInput(format!(
                "batch of {b} rows with {} labels",
                classes.len()
            )));
        }
        let horizon = schedule.horizon();
        let ts: Vec<usize> = (0..b).map(|_| rng.uniform_int(1, horizon)).collect();
        let eps = rng.gaussian(&[b, d])?;
        let labels = classes
            .iter()
            .map(|&c| {
                if rng.bernoulli(p_uncond) {
                    Label::Null
                } else {
                    Label::Class(c)
                }
            })
            .collect();
        let mut z_t = Tensor::zeros(&[b, d]);
        for (i, &t) in ts.iter().enumerate() {
            let ab = schedule.alpha_bar(t);
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            for ((o, x), e) in z_t.row_mut(i).iter_mut().zip(z0.row(i)).zip(eps.row(i)) {
                *o = s * x + n * e;
            }
        }
        Ok(Self {
            z_t,
            eps,
            ts,
            labels,
        })
    }
}

/// Mean squared noise-prediction error recorded on `g`.
pub fn training_loss<'a>(
    model: &Denoiser,
    g: &mut Graph<'a>,
    vars: &[Var],
    draws: &'a TrainDraws,
) -> Result<Var> {
    let z = g.constant_ref(&draws.z_t);
    let eps = g.constant_ref(&draws.eps);
    let pred = model.forward(g, vars, z, &draws.ts, &draws.labels)?;
    let diff = g.sub(pred, eps);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// One optimizer update on a batch; returns the pre-update loss.
pub fn train_step(
    model: &mut Denoiser,
    opt: &mut Optimizer,
    z0: &Tensor,
    classes: &[usize],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let draws = TrainDraws::sample(z0, classes, schedule, p_uncond, rng)?;
    let (loss, grads) = {
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let loss = training_loss(model, &mut g, &vars, &draws)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} (batch {}, t range {:?}..{:?})",
                draws.ts.len(),
                draws.ts.iter().min(),
                draws.ts.iter().max()
            )));
        }
        let mut grads = g.backward(loss)?;
        (value, ParamSet::collect_grads(&mut grads, &vars))
    };
    opt.step(&mut model.params, &grads)?;
    Ok(loss)
}

/// Trains on `data` (`[N, d]`) for `config.epochs` shuffled passes; returns
/// the loss of every step.
pub fn train(
    model: &mut Denoiser,
    data: &Tensor,
    classes: &[usize],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    config.validate()?;
    let n = data.rows();
    if n == 0 || classes.len() != n {
        return Err(Error::EmptyInput("denoiser training set".into()));
    }
    let mut opt = config.optimizer();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        let perm = rng.permutation(n);
        for chunk in perm.chunks(config.batch_size) {
            let batch = data.select_rows(chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
            losses.push(train_step(
                model,
                &mut opt,
                &batch,
                &ys,
                schedule,
                config.p_uncond,
                rng,
            )?);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rng: &mut RngStream) -> Denoiser {
        let mut c = DenoiserConfig::new(4, 3, 50);
        c.width = 8;
        c.class_dim = 4;
        c.time_dim = 8;
        Denoiser::new(c, rng)
    }

    #[test]
    fn prediction_is_pure_and_shape_preserving() {
        let mut rng = RngStream::new(1, 0);
        let mut m = tiny(&mut rng);
        // give the head weights so the output is non-trivial
        let h = m.layout.head.w;
        *m.params.get_mut(h) = rng.gaussian(&[8, 4]).unwrap();
        let z = rng.gaussian(&[4]).unwrap();
        let a = m.predict_eps(&z, 7, &[Label::Class(1)]).unwrap();
        let b = m.predict_eps(&z, 7, &[Label::Class(1)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4]);
        let zb = rng.gaussian(&[5, 4]).unwrap();
        let out = m.predict_eps(&zb, 3, &[Label::Null; 5]).unwrap();
        assert_eq!(out.shape(), &[5, 4]);
    }

    #[test]
    fn bad_label_and_time_are_rejected() {
        let mut rng = RngStream::new(1, 0);
        let m = tiny(&mut rng);
        let z = Tensor::zeros(&[4]);
        assert!(matches!(
            m.predict_eps(&z, 1, &[Label::Class(3)]),
            Err(Error::Label {
                label: 3,
                num_classes: 3
            })
        ));
        assert!(m.predict_eps(&z, 0, &[Label::Null]).is_err());
        assert!(m.predict_eps(&z, 51, &[Label::Null]).is_err());
    }

    #[test]
    fn zero_head_baseline_loss_is_noise_energy() {
        let mut rng = RngStream::new(2, 0);
        let m = tiny(&mut rng);
        let z0 = rng.gaussian(&[4096, 4]).unwrap();
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let classes = vec![0; 4096];
        let draws = TrainDraws::sample(&z0, &classes, &schedule, 0.2, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g);
        let loss = training_loss(&m, &mut g, &vars, &draws).unwrap();
        // ε̂ = 0 so the loss is the empirical E[ε²] per coordinate
        assert!((g.value(loss).item() - 1.0).abs() < 0.05);
    }

    #[test]
    fn full_dropout_leaves_class_rows_without_gradient() {
        let mut rng = RngStream::new(3, 0);
        let mut m = tiny(&mut rng);
        let h = m.layout.head.w;
        *m.params.get_mut(h) = rng.gaussian(&[8, 4]).unwrap();
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let z0 = rng.gaussian(&[16, 4]).unwrap();
        let classes: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let draws = TrainDraws::sample(&z0, &classes, &schedule, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g);
        let loss = training_loss(&m, &mut g, &vars, &draws).unwrap();
        let grads = g.backward(loss).unwrap();
        let table = grads.wrt(vars[m.class_table_index()]);
        for c in 0..3 {
            assert!(table.row(c).iter().all(|&x| x == 0.0));
        }
        assert!(table.row(3).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn dropout_frequency_matches_p_uncond() {
        let mut rng = RngStream::new(4, 0);
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let z0 = Tensor::zeros(&[10_000, 1]);
        let classes = vec![0; 10_000];
        let draws = TrainDraws::sample(&z0, &classes, &schedule, 0.2, &mut rng).unwrap();
        let nulls = draws.labels.iter().filter(|l| **l == Label::Null).count() as f64 / 1e4;
        assert!((nulls - 0.2).abs() <= 0.012, "null fraction {nulls}");
    }

    #[test]
    fn from_params_rejects_mismatched_layout() {
        let mut rng = RngStream::new(5, 0);
        let m = tiny(&mut rng);
        let mut other = *m.config();
        other.width = 16;
        assert!(Denoiser::from_params(other, m.params().clone()).is_err());
        assert!(Denoiser::from_params(*m.config(), m.params().clone()).is_ok());
    }
}
