//! Directional-embedding finetuning of the denoiser toward one target class.
//!
//! Each step regenerates stored inverted latents with a short DDIM chain
//! recorded on the autodiff graph, decodes, and minimizes
//! `λ_dir·L_dir + λ_id·L_id + λ_ℓ2·ℓ2` by backpropagating through every
//! sampling step into the denoiser weights.

use std::path::Path;

use crate::denoiser::{Denoiser, Label};
use crate::diffusion::{ddim_invert, ddim_update, guided_eps, GuidanceSpec};
use crate::error::{Error, Result};
use crate::first_stage::FirstStage;
use crate::io::{read_file, sha256_hex, split_header, write_file};
use crate::numerics::{cosine_similarity, Graph, Optimizer, ParamSet, RngStream, Tensor, Var};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::toyworld::{Dataset, EmotionOracle, IdentityEmbedder, NORM_EPS, NUM_EMOTIONS};

pub const LATENT_MAGIC: &str = "DIFFEDIT-LATENTS 1";

/// Keeps graph norms strictly positive; degenerate rows are masked anyway.
const GRAPH_NORM_EPS: f64 = 1e-24;

/// Image/class embedding pair driving the directional loss.
pub trait EmbedderOracle: Sync {
    fn embed_params(&self) -> &ParamSet;
    /// Unit-norm embeddings of `[B, D]` image rows recorded on `g`, with
    /// `vars` bound from [`EmbedderOracle::embed_params`].
    fn record_image_embed(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Var;
    fn image_embed(&self, images: &Tensor) -> Result<Tensor>;
    fn class_embed(&self, label: usize) -> Result<Tensor>;
}

impl EmbedderOracle for EmotionOracle {
    fn embed_params(&self) -> &ParamSet {
        self.params()
    }

    fn record_image_embed(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Var {
        self.record_embed(g, vars, x)
    }

    fn image_embed(&self, images: &Tensor) -> Result<Tensor> {
        EmotionOracle::image_embed(self, images)
    }

    fn class_embed(&self, label: usize) -> Result<Tensor> {
        EmotionOracle::class_embed(self, label)
    }
}

/// A loss value with a flag for the degenerate fallback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub flagged: bool,
}

fn direction_norm_ok(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>().sqrt() >= NORM_EPS
}

/// `1 − cos(e_gen − e_src, p_trg − p_src)`; 1 and flagged when either
/// direction has norm below `1e-12`.
pub fn directional_from_embeddings(
    e_gen: &[f64],
    e_src: &[f64],
    p_trg: &[f64],
    p_src: &[f64],
) -> Result<LossValue> {
    let n = e_gen.len();
    if e_src.len() != n || p_trg.len() != n || p_src.len() != n {
        return Err(Error::ShapeMismatch("embedding lengths differ".into()));
    }
    let d_img: Vec<f64> = e_gen.iter().zip(e_src).map(|(a, b)| a - b).collect();
    let d_cls: Vec<f64> = p_trg.iter().zip(p_src).map(|(a, b)| a - b).collect();
    if !direction_norm_ok(&d_img) || !direction_norm_ok(&d_cls) {
        return Ok(LossValue {
            value: 1.0,
            flagged: true,
        });
    }
    let c = cosine_similarity(&Tensor::vector(d_img), &Tensor::vector(d_cls))?;
    Ok(LossValue {
        value: 1.0 - c,
        flagged: false,
    })
}

/// Directional loss of one edited image against its source.
pub fn directional_loss<O: EmbedderOracle + ?Sized>(
    oracle: &O,
    x_gen: &Tensor,
    x_src: &Tensor,
    y_trg: usize,
    y_src: usize,
) -> Result<LossValue> {
    if x_gen.shape() != x_src.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x_gen.shape(),
            x_src.shape()
        )));
    }
    let e = oracle.image_embed(&Tensor::stack_rows(&[x_gen.data(), x_src.data()])?)?;
    let (pt, ps) = (oracle.class_embed(y_trg)?, oracle.class_embed(y_src)?);
    directional_from_embeddings(e.row(0), e.row(1), pt.data(), ps.data())
}

/// `1 − cos` of identity embeddings; 1 and flagged for degenerate ones.
pub fn identity_loss(
    embedder: &IdentityEmbedder,
    x_gen: &Tensor,
    x_src: &Tensor,
) -> Result<LossValue> {
    if x_gen.shape() != x_src.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x_gen.shape(),
            x_src.shape()
        )));
    }
    let e = embedder.embed(&Tensor::stack_rows(&[x_gen.data(), x_src.data()])?)?;
    match cosine_similarity(
        &Tensor::vector(e.row(0).to_vec()),
        &Tensor::vector(e.row(1).to_vec()),
    ) {
        Ok(c) => Ok(LossValue {
            value: 1.0 - c,
            flagged: false,
        }),
        Err(Error::Degenerate(_)) => Ok(LossValue {
            value: 1.0,
            flagged: true,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lambda_dir: f64,
    pub lambda_id: f64,
    pub lambda_l2: f64,
    pub t_tune: usize,
    pub t0: usize,
    /// Steps of the inversion that produces the stored latents.
    pub t_ddim: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub per_class: usize,
    pub subsample: usize,
    /// Backpropagate through only the last `k` sampling steps.
    pub grad_depth: Option<usize>,
    pub l2_reduction: L2Reduction,
}

/// Per-image reduction of the squared pixel error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L2Reduction {
    /// `‖x_gen − x_src‖²`.
    Sum,
    /// `‖x_gen − x_src‖² / D`.
    Mean,
}

impl L2Reduction {
    fn divisor(self, dim: usize) -> usize {
        match self {
            L2Reduction::Sum => 1,
            L2Reduction::Mean => dim,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda_dir: 1.0,
            lambda_id: 1.0,
            lambda_l2: 1.0,
            t_tune: 6,
            t0: 50,
            t_ddim: 40,
            gamma: 1.0,
            epochs: 20,
            learning_rate: 5e-6,
            batch_size: 20,
            per_class: 50,
            subsample: 100,
            grad_depth: None,
            l2_reduction: L2Reduction::Mean,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        for (name, v) in [
            ("lambda_dir", self.lambda_dir),
            ("lambda_id", self.lambda_id),
            ("lambda_l2", self.lambda_l2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "finetune.{name}={v} must be finite and >= 0"
                )));
            }
        }
        if self.t_tune < 2 || self.t_tune > self.t0 {
            return Err(Error::Config(format!(
                "need 2 <= T_tune ({}) <= t0 ({})",
                self.t_tune, self.t0
            )));
        }
        if self.t0 > horizon || self.t_ddim < 2 || self.t_ddim > self.t0 {
            return Err(Error::Config(format!(
                "t0={} / T_ddim={} invalid for T={horizon}",
                self.t0, self.t_ddim
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "gamma must be >= 0 and learning rate > 0".into(),
            ));
        }
        if self.batch_size == 0 || self.per_class == 0 || self.subsample == 0 {
            return Err(Error::Config(
                "batch size and instance counts must be positive".into(),
            ));
        }
        if self.grad_depth == Some(0) {
            return Err(Error::Config("grad_depth must be positive".into()));
        }
        Ok(())
    }
}

/// `λ_dir·dir + λ_id·id + λ_ℓ2·l2`.
pub fn total_loss(dir: f64, id: f64, l2: f64, config: &FinetuneConfig) -> f64 {
    config.lambda_dir * dir + config.lambda_id * id + config.lambda_l2 * l2
}

/// Inverted latents `z_{t0}` of a fixed instance set.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStore {
    pub config_hash: String,
    pub t0: usize,
    pub t_ddim: usize,
    pub gamma: f64,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// Source images, `[N, D]`.
    pub sources: Tensor,
    /// `[N, d]`.
    pub latents: Tensor,
}

/// Digest identifying a latent store: plan, guidance, model weights and
/// the instance list.
pub fn latent_config_hash(
    t0: usize,
    t_ddim: usize,
    gamma: f64,
    model_digest: &str,
    ids: &[usize],
) -> String {
    let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    let text = format!(
        "t0={t0}\nt_ddim={t_ddim}\ngamma={gamma:?}\nmodel={model_digest}\nids={}\n",
        ids.join(",")
    );
    sha256_hex(text.as_bytes())
}

/// `per_class` random items of every class, in class order.
pub fn select_instances(
    data: &Dataset,
    per_class: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let labels = data.labels();
    let mut out = Vec::new();
    for c in 0..NUM_EMOTIONS {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < per_class {
            return Err(Error::EmptyInput(format!(
                "class {c} has {} items, need {per_class}",
                idx.len()
            )));
        }
        let perm = rng.permutation(idx.len());
        out.extend(perm[..per_class].iter().map(|&p| idx[p]));
    }
    Ok(out)
}

/// Deterministic (η = 0) inversion of `data[ids]` under their own labels.
#[allow(clippy::too_many_arguments)]
pub fn precompute_latents(
    model: &Denoiser,
    first_stage: &FirstStage,
    data: &Dataset,
    ids: &[usize],
    schedule: &NoiseSchedule,
    t0: usize,
    t_ddim: usize,
    gamma: f64,
    model_digest: &str,
) -> Result<LatentStore> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("no instances to invert".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Range(format!(
            "instance {bad} outside dataset of {}",
            data.len()
        )));
    }
    let plan = StepPlan::build(t_ddim, t0, schedule.horizon())?;
    let sources = data.images.select_rows(ids);
    let all = data.labels();
    let labels: Vec<usize> = ids.iter().map(|&i| all[i]).collect();
    let z0 = first_stage.encode(&sources)?;
    let guidance = GuidanceSpec::new(gamma, labels.iter().map(|&y| Label::Class(y)).collect());
    let (latents, _) = ddim_invert(model, &z0, &plan, schedule, &guidance)?;
    Ok(LatentStore {
        config_hash: latent_config_hash(t0, t_ddim, gamma, model_digest, ids),
        t0,
        t_ddim,
        gamma,
        ids: ids.to_vec(),
        labels,
        sources,
        latents,
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl LatentStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let head = format!(
            "{LATENT_MAGIC}\nconfig_hash {}\nt0 {}\nt_ddim {}\ngamma {:?}\nrows {}\nimage_dim {}\nlatent_dim {}\nids {}\nlabels {}\nend\n",
            self.config_hash,
            self.t0,
            self.t_ddim,
            self.gamma,
            self.len(),
            self.sources.cols(),
            self.latents.cols(),
            join(&self.ids),
            join(&self.labels)
        );
        let mut out = head.into_bytes();
        for v in self.sources.data().iter().chain(self.latents.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (lines, blob) = split_header(bytes)?;
        let bad = |what: &str| Error::Format(format!("latent store: bad {what}"));
        if lines.first().map(String::as_str) != Some(LATENT_MAGIC) || lines.len() != 10 {
            return Err(bad("header"));
        }
        let get = |i: usize, key: &str| -> Result<&str> {
            lines[i]
                .strip_prefix(&format!("{key} "))
                .ok_or_else(|| bad(key))
        };
        let num =
            |i: usize, key: &str| -> Result<usize> { get(i, key)?.parse().map_err(|_| bad(key)) };
        let list = |i: usize, key: &str| -> Result<Vec<usize>> {
            get(i, key)?
                .split(',')
                .map(|s| s.parse().map_err(|_| bad(key)))
                .collect()
        };
        let config_hash = get(1, "config_hash")?.to_string();
        let (t0, t_ddim) = (num(2, "t0")?, num(3, "t_ddim")?);
        let gamma: f64 = get(4, "gamma")?.parse().map_err(|_| bad("gamma"))?;
        let (rows, dx, dz) = (num(5, "rows")?, num(6, "image_dim")?, num(7, "latent_dim")?);
        let (ids, labels) = (list(8, "ids")?, list(9, "labels")?);
        if ids.len() != rows || labels.len() != rows || blob.len() != rows * (dx + dz) * 8 {
            return Err(bad("row counts"));
        }
        let vals: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let sources = Tensor::new(&[rows, dx], vals[..rows * dx].to_vec())?;
        let latents = Tensor::new(&[rows, dz], vals[rows * dx..].to_vec())?;
        Ok(Self {
            config_hash,
            t0,
            t_ddim,
            gamma,
            ids,
            labels,
            sources,
            latents,
        })
    }

    /// Writes the store; an existing file with another config hash is a
    /// staleness error.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.exists() {
            let old = Self::from_bytes(&read_file(path)?)?;
            if old.config_hash != self.config_hash {
                return Err(Error::Stale(format!(
                    "{} holds latents for config {}, not {}",
                    path.display(),
                    old.config_hash,
                    self.config_hash
                )));
            }
        }
        write_file(path, &self.to_bytes())
    }

    /// Loads a store and checks its config hash.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let s = Self::from_bytes(&read_file(path)?)?;
        if s.config_hash != expected_hash {
            return Err(Error::Stale(format!(
                "{} was computed for config {}, expected {expected_hash}",
                path.display(),
                s.config_hash
            )));
        }
        Ok(s)
    }
}

/// Frozen components of the finetuning objective.
pub struct TuneContext<'a, O: EmbedderOracle + ?Sized> {
    pub first_stage: &'a FirstStage,
    pub oracle: &'a O,
    pub identity: &'a IdentityEmbedder,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a FinetuneConfig,
}

/// Stored latents, their sources and labels for one optimizer step.
#[derive(Clone, Debug)]
pub struct TuneBatch {
    pub z_t0: Tensor,
    pub x_src: Tensor,
    pub y_src: Vec<usize>,
    pub y_trg: usize,
}

impl TuneBatch {
    pub fn from_store(store: &LatentStore, rows: &[usize], y_trg: usize) -> Self {
        Self {
            z_t0: store.latents.select_rows(rows),
            x_src: store.sources.select_rows(rows),
            y_src: rows.iter().map(|&r| store.labels[r]).collect(),
            y_trg,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub dir: f64,
    pub id: f64,
    pub l2: f64,
    pub flagged: usize,
}

fn record_eps<'a>(
    model: &Denoiser,
    g: &mut Graph<'a>,
    vars: &[Var],
    z: Var,
    t: usize,
    labels: &[Label],
    gamma: f64,
) -> Result<Var> {
    let ts = vec![t; labels.len()];
    let cond = model.forward(g, vars, z, &ts, labels)?;
    if gamma == 1.0 {
        return Ok(cond);
    }
    let nulls = vec![Label::Null; labels.len()];
    let uncond = model.forward(g, vars, z, &ts, &nulls)?;
    Ok(g.lincomb(uncond, 1.0 - gamma, cond, gamma))
}

/// Records the T_tune-step chain, decoding and loss on `g`; `vars` are the
/// bound denoiser parameters.
fn record_objective<'a, O: EmbedderOracle + ?Sized>(
    model: &Denoiser,
    g: &mut Graph<'a>,
    vars: &[Var],
    ctx: &'a TuneContext<'a, O>,
    batch: &TuneBatch,
) -> Result<(Var, LossParts)> {
    let cfg = ctx.config;
    let s = ctx.schedule;
    let b = batch.z_t0.rows();
    if b == 0 || batch.x_src.rows() != b || batch.y_src.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "tuning batch of {b} latents, {} sources",
            batch.x_src.rows()
        )));
    }
    let plan = StepPlan::build(cfg.t_tune, cfg.t0, s.horizon())?;
    let taus = plan.taus();
    let depth = cfg.grad_depth.unwrap_or(taus.len()).min(taus.len());
    let labels = vec![Label::Class(batch.y_trg); b];

    let mut z_num = batch.z_t0.clone();
    let frozen = GuidanceSpec::new(cfg.gamma, labels.clone());
    for i in (depth..taus.len()).rev() {
        let eps = guided_eps(model, &z_num, taus[i], &frozen)?;
        z_num = ddim_update(&z_num, &eps, taus[i], taus[i - 1], 0.0, s, None)?;
    }
    let mut z = g.constant(z_num);
    for i in (0..depth).rev() {
        let (cur, prev) = (taus[i], if i == 0 { 0 } else { taus[i - 1] });
        let eps = record_eps(model, g, vars, z, cur, &labels, cfg.gamma)?;
        let (ab, abp) = (s.alpha_bar(cur), s.alpha_bar(prev));
        let x0 = g.lincomb(z, 1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt());
        z = g.lincomb(x0, abp.sqrt(), eps, (1.0 - abp).sqrt());
    }
    let fvars = ctx.first_stage.params().bind_frozen(g);
    let x = ctx.first_stage.record_decode(g, &fvars, z)?;
    let xs = g.constant(batch.x_src.clone());

    let ovars = ctx.oracle.embed_params().bind_frozen(g);
    let e_gen = ctx.oracle.record_image_embed(g, &ovars, x);
    let e_src = ctx.oracle.image_embed(&batch.x_src)?;
    let p_trg = ctx.oracle.class_embed(batch.y_trg)?;
    let mut d_cls = Tensor::zeros(e_src.shape());
    let mut mask = vec![0.0; b];
    let mut flagged = 0;
    for r in 0..b {
        let p_src = ctx.oracle.class_embed(batch.y_src[r])?;
        let d: Vec<f64> = p_trg
            .data()
            .iter()
            .zip(p_src.data())
            .map(|(a, c)| a - c)
            .collect();
        let d_img: Vec<f64> = g
            .value(e_gen)
            .row(r)
            .iter()
            .zip(e_src.row(r))
            .map(|(a, c)| a - c)
            .collect();
        if direction_norm_ok(&d) && direction_norm_ok(&d_img) {
            mask[r] = 1.0;
            d_cls.row_mut(r).copy_from_slice(&d);
        } else {
            flagged += 1;
            d_cls.row_mut(r).iter_mut().for_each(|v| *v = 1.0);
        }
    }
    let e_src = g.constant(e_src);
    let d_img = g.sub(e_gen, e_src);
    let d_cls = g.constant(d_cls);
    let cos = g.row_cosine(d_img, d_cls, GRAPH_NORM_EPS);
    let one_minus = g.scale(cos, -1.0);
    let one_minus = g.offset(one_minus, 1.0);
    let mask = g.constant(Tensor::new(&[b, 1], mask)?);
    let masked = g.mul(one_minus, mask);
    let dir = g.sum(masked);
    let dir = g.offset(dir, flagged as f64);
    let dir = g.scale(dir, 1.0 / b as f64);

    let ivars = ctx.identity.params().bind_frozen(g);
    let i_gen = ctx.identity.record_embed(g, &ivars, x);
    let i_src = g.constant(ctx.identity.embed(&batch.x_src)?);
    let icos = g.row_cosine(i_gen, i_src, GRAPH_NORM_EPS);
    let icos = g.mean(icos);
    let id = g.scale(icos, -1.0);
    let id = g.offset(id, 1.0);

    let diff = g.sub(x, xs);
    let sq = g.square(diff);
    let l2 = g.sum(sq);
    let l2 = g.scale(
        l2,
        1.0 / (b * cfg.l2_reduction.divisor(batch.x_src.cols())) as f64,
    );

    let a = g.scale(dir, cfg.lambda_dir);
    let c = g.scale(id, cfg.lambda_id);
    let e = g.scale(l2, cfg.lambda_l2);
    let total = g.add(a, c);
    let total = g.add(total, e);
    let parts = LossParts {
        total: g.value(total).item(),
        dir: g.value(dir).item(),
        id: g.value(id).item(),
        l2: g.value(l2).item(),
        flagged,
    };
    Ok((total, parts))
}

/// Value of the finetuning objective for `model` on `batch`.
pub fn objective<O: EmbedderOracle + ?Sized>(
    model: &Denoiser,
    ctx: &TuneContext<'_, O>,
    batch: &TuneBatch,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let vars = model.params().bind_frozen(&mut g);
    Ok(record_objective(model, &mut g, &vars, ctx, batch)?.1)
}

/// Objective value and its gradient with respect to every denoiser tensor.
pub fn objective_and_grads<O: EmbedderOracle + ?Sized>(
    model: &Denoiser,
    ctx: &TuneContext<'_, O>,
    batch: &TuneBatch,
) -> Result<(LossParts, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let (loss, parts) = record_objective(model, &mut g, &vars, ctx, batch)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("finetuning loss {parts:?}")));
    }
    let mut grads = g.backward(loss)?;
    Ok((parts, ParamSet::collect_grads(&mut grads, &vars)))
}

/// Mean loss parts of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossParts,
}

/// Tunes a copy of `base` toward `y_trg`; `base` itself is never modified.
pub fn finetune<O: EmbedderOracle + ?Sized>(
    base: &Denoiser,
    store: &LatentStore,
    y_trg: usize,
    ctx: &TuneContext<'_, O>,
    rng: &mut RngStream,
) -> Result<(Denoiser, Vec<EpochStats>)> {
    let cfg = ctx.config;
    cfg.validate(ctx.schedule.horizon())?;
    if y_trg >= base.config().num_classes {
        return Err(Error::Label {
            label: y_trg,
            num_classes: base.config().num_classes,
        });
    }
    if store.t0 != cfg.t0 {
        return Err(Error::Stale(format!(
            "latents inverted to t0={}, finetuning expects {}",
            store.t0, cfg.t0
        )));
    }
    let candidates: Vec<usize> = (0..store.len())
        .filter(|&r| store.labels[r] != y_trg)
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no stored latents with a source other than class {y_trg}"
        )));
    }
    let perm = rng.permutation(candidates.len());
    let rows: Vec<usize> = perm
        .iter()
        .take(cfg.subsample)
        .map(|&p| candidates[p])
        .collect();

    let mut model = base.clone();
    let mut opt = Optimizer::adamw(cfg.learning_rate, 0.0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(rows.len());
        let mut acc = LossParts::default();
        let mut steps = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&k| rows[k]).collect();
            let batch = TuneBatch::from_store(store, &idx, y_trg);
            let (parts, grads) = objective_and_grads(&model, ctx, &batch)?;
            opt.step(model.params_mut(), &grads)?;
            if !model.params().is_finite() {
                return Err(Error::NonFinite(format!(
                    "denoiser weights after finetuning epoch {epoch}"
                )));
            }
            acc.total += parts.total;
            acc.dir += parts.dir;
            acc.id += parts.id;
            acc.l2 += parts.l2;
            acc.flagged += parts.flagged;
            steps += 1.0;
        }
        acc.total /= steps;
        acc.dir /= steps;
        acc.id /= steps;
        acc.l2 /= steps;
        history.push(EpochStats { epoch, loss: acc });
    }
    Ok((model, history))
}

/// Identifies one tuned model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneKey {
    pub y_trg: usize,
    pub gamma: f64,
    pub lambda_dir: f64,
}

impl TuneKey {
    pub fn meta(&self) -> [(&'static str, String); 3] {
        [
            ("tune.y_trg", self.y_trg.to_string()),
            ("tune.gamma", format!("{:?}", self.gamma)),
            ("tune.lambda_dir", format!("{:?}", self.lambda_dir)),
        ]
    }

    /// Fails loudly unless `meta` records exactly this key.
    pub fn check(&self, meta: &std::collections::BTreeMap<String, String>) -> Result<()> {
        for (k, v) in self.meta() {
            match meta.get(k) {
                Some(found) if *found == v => {}
                found => {
                    return Err(Error::Config(format!(
                        "tuned checkpoint key mismatch: {k} is {found:?}, requested {v}"
                    )))
                }
            }
        }
        Ok(())
    }
}
