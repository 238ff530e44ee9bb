//! One function per subcommand.

use std::path::Path;

use diffedit::denoiser::{self, Denoiser, DenoiserConfig, TrainConfig};
use diffedit::editing::{
    aggregate, all_direction_jobs, edit_batch, edit_rows_with, sort_rows, write_ablation_csv,
    write_metrics_csv, EditConfig, EditJob, Evaluators, GridCell, GridRow,
};
use diffedit::first_stage::{FirstStage, FirstStageConfig, FirstStageMode};
use diffedit::guidance_finetune::{
    finetune, latent_config_hash, precompute_latents, select_instances, FinetuneConfig,
    L2Reduction, LatentStore, TuneContext, TuneKey,
};
use diffedit::io::{self, params_digest, sha256_hex};
use diffedit::numerics::{RngStream, Tensor};
use diffedit::schedule::NoiseSchedule;
use diffedit::toyworld::{
    format_psnr, Dataset, EmbedderConfig, EmotionOracle, IdentityEmbedder, OracleConfig,
    SsimConfig, EMOTIONS, MIN_SIZE, NUM_EMOTIONS,
};
use diffedit::{Error, Result};

use crate::artifacts::*;

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_HELDOUT_DATA: u64 = 2;
const STREAM_ORACLE: u64 = 3;
const STREAM_EMBEDDER: u64 = 4;
const STREAM_FIRST_STAGE: u64 = 5;
const STREAM_LDM: u64 = 6;
const STREAM_FINETUNE: u64 = 7;
const STREAM_EDIT: u64 = 8;
const STREAM_ABLATE: u64 = 9;

const FIRST_STAGE_CKPT: &str = "checkpoints/first_stage.ckpt";
const DENOISER_CKPT: &str = "checkpoints/denoiser.ckpt";
const ORACLE_CKPT: &str = "checkpoints/oracle.ckpt";
const EMBEDDER_CKPT: &str = "checkpoints/embedder.ckpt";

fn file_digest(wd: &Workdir, rel: &str) -> Result<String> {
    Ok(sha256_hex(&io::read_file(&wd.path(rel))?))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn epoch_csv(losses: &[f64]) -> Vec<u8> {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        s.push_str(&format!("{e},{l:.10e}\n"));
    }
    s.into_bytes()
}

pub fn gen_data(wd: &Workdir) -> Result<()> {
    let c = &wd.config;
    let size = c.count("data.size", MIN_SIZE)?;
    let seed = wd.seed();
    let sets = [
        (
            train_data_rel(),
            "data/train",
            c.count("data.identities", 1)?,
            STREAM_TRAIN_DATA,
        ),
        (
            heldout_data_rel(),
            "data/heldout",
            c.count("data.heldout_identities", 1)?,
            STREAM_HELDOUT_DATA,
        ),
    ];
    for (rel, dir, identities, stream) in sets {
        let data = Dataset::generate(identities, size, &mut RngStream::new(seed, stream))?;
        for i in 0..data.len() {
            let pgm = io::encode_pnm(data.images.row(i), size, size, 1)?;
            io::write_file(&wd.path(&format!("{dir}/{i:05}.pgm")), &pgm)?;
        }
        wd.write(rel, dataset_csv(&data, dir).as_bytes(), &[])?;
        eprintln!("{rel}: {} identities, {} images", identities, data.len());
    }
    Ok(())
}

fn oracle_config(wd: &Workdir) -> Result<OracleConfig> {
    let c = &wd.config;
    Ok(OracleConfig {
        epochs: c.count("oracle.epochs", 1)?,
        learning_rate: c.float("oracle.lr"),
        augment_noise: c.float("oracle.noise"),
        ..OracleConfig::default()
    })
}

fn embedder_config(wd: &Workdir) -> Result<EmbedderConfig> {
    let c = &wd.config;
    Ok(EmbedderConfig {
        epochs: c.count("embedder.epochs", 1)?,
        learning_rate: c.float("embedder.lr"),
        ..EmbedderConfig::default()
    })
}

pub fn calibrate(wd: &Workdir) -> Result<()> {
    let train = load_dataset(wd, train_data_rel())?;
    let held = load_dataset(wd, heldout_data_rel())?;
    let inputs = [
        ("train_data", file_digest(wd, train_data_rel())?),
        ("heldout_data", file_digest(wd, heldout_data_rel())?),
    ];
    let (hash, seed) = (wd.config.hash(), wd.seed());
    let d = train.size * train.size;

    let ocfg = oracle_config(wd)?;
    let (oracle, acc) = EmotionOracle::calibrate(
        &train,
        &held,
        &ocfg,
        &mut RngStream::new(seed, STREAM_ORACLE),
    )?;
    wd.save_checkpoint(
        ORACLE_CKPT,
        &oracle_checkpoint(&oracle, &ocfg.hidden, d, &hash, seed),
        &inputs,
    )?;
    eprintln!("emotion oracle held-out accuracy {acc:.4}");

    let ecfg = embedder_config(wd)?;
    let (emb, rate) = IdentityEmbedder::calibrate(
        &train,
        &held,
        &ecfg,
        &mut RngStream::new(seed, STREAM_EMBEDDER),
    )?;
    wd.save_checkpoint(
        EMBEDDER_CKPT,
        &embedder_checkpoint(&emb, &ecfg.hidden, d, &hash, seed),
        &inputs,
    )?;
    eprintln!("identity embedder triple rate {rate:.4}");

    let csv = format!(
        "evaluator,metric,value,threshold\nemotion_oracle,heldout_accuracy,{acc:.6},{}\nidentity_embedder,triple_rate,{rate:.6},{}\n",
        diffedit::toyworld::ORACLE_MIN_ACCURACY,
        diffedit::toyworld::EMBEDDER_MIN_AUC
    );
    wd.write("logs/calibration.csv", csv.as_bytes(), &inputs)?;
    Ok(())
}

fn first_stage_config(wd: &Workdir) -> Result<FirstStageConfig> {
    let c = &wd.config;
    let image = wd.image_shape()?;
    let mode: FirstStageMode = c.str("first_stage.mode").parse()?;
    let base = match mode {
        FirstStageMode::Identity => FirstStageConfig::identity(image),
        FirstStageMode::Ae | FirstStageMode::VqAe => FirstStageConfig {
            mode,
            factor: c.count("first_stage.factor", 1)?,
            latent_channels: c.count("first_stage.latent_channels", 1)?,
            hidden: c.count("first_stage.hidden", 1)?,
            codebook_size: c.count("first_stage.codebook_size", 1)?,
            commit_weight: c.float("first_stage.commit_weight"),
            ..FirstStageConfig::vq(image)
        },
    };
    let cfg = FirstStageConfig {
        epochs: c.count("first_stage.epochs", 1)?,
        learning_rate: c.float("first_stage.lr"),
        batch_size: c.count("first_stage.batch_size", 1)?,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_first_stage(wd: &Workdir) -> Result<()> {
    let train = load_dataset(wd, train_data_rel())?;
    let held = load_dataset(wd, heldout_data_rel())?;
    let inputs = [("train_data", file_digest(wd, train_data_rel())?)];
    let mut rng = RngStream::new(wd.seed(), STREAM_FIRST_STAGE);
    let mut fs = FirstStage::new(first_stage_config(wd)?, &mut rng)?;
    let curve = fs.train(&train.images, &mut rng)?;
    let digest = wd.save_checkpoint(
        FIRST_STAGE_CKPT,
        &first_stage_checkpoint(&fs, &wd.config.hash(), wd.seed()),
        &inputs,
    )?;
    wd.write(
        "logs/first_stage_loss.csv",
        &epoch_csv(&curve),
        &[("first_stage", digest.clone())],
    )?;

    let rec = fs.reconstruct(&held.images)?;
    let l1 = rec
        .sub(&held.images)
        .data()
        .iter()
        .map(|v| v.abs())
        .sum::<f64>()
        / rec.len() as f64;
    let mut eval = format!("metric,value\nheldout_l1,{l1:.6e}\n");
    if fs.mode() == FirstStageMode::VqAe {
        eval.push_str(&format!(
            "codebook_usage,{:.6}\n",
            fs.codebook_usage(&held.images)?
        ));
    }
    wd.write(
        "logs/first_stage_eval.csv",
        eval.as_bytes(),
        &[("first_stage", digest)],
    )?;
    eprintln!("first stage ({}) held-out per-pixel l1 {l1:.4e}", fs.mode());
    Ok(())
}

fn load_first_stage(wd: &Workdir) -> Result<(FirstStage, String)> {
    let ck = wd.load_checkpoint(FIRST_STAGE_CKPT, "first_stage", "train-first-stage")?;
    let digest = ck.digest()?;
    let fs = first_stage_from(ck)?;
    if fs.config().image != wd.image_shape()? {
        return Err(Error::Config(format!(
            "first stage trained on {:?} images, data.size gives {:?}",
            fs.config().image,
            wd.image_shape()?
        )));
    }
    Ok((fs, digest))
}

pub fn train_ldm(wd: &Workdir) -> Result<()> {
    let c = &wd.config;
    let (fs, fs_digest) = load_first_stage(wd)?;
    let train = load_dataset(wd, train_data_rel())?;
    let schedule = wd.schedule()?;
    let z = fs.encode(&train.images)?;
    let mut dcfg = DenoiserConfig::new(fs.latent_dim(), NUM_EMOTIONS, schedule.horizon());
    dcfg.width = c.count("denoiser.width", 1)?;
    dcfg.blocks = c.count("denoiser.blocks", 0)?;
    dcfg.class_dim = c.count("denoiser.class_dim", 1)?;
    dcfg.time_dim = c.count("denoiser.time_dim", 2)?;
    let tcfg = TrainConfig {
        p_uncond: c.float("train.p_uncond"),
        learning_rate: c.float("train.lr"),
        batch_size: c.count("train.batch_size", 1)?,
        epochs: c.count("train.epochs", 1)?,
        ..TrainConfig::default()
    };
    let mut rng = RngStream::new(wd.seed(), STREAM_LDM);
    let mut model = Denoiser::new(dcfg, &mut rng);
    let steps = denoiser::train(&mut model, &z, &train.labels(), &schedule, &tcfg, &mut rng)?;
    let per_epoch = steps.len() / tcfg.epochs;
    let curve: Vec<f64> = steps
        .chunks(per_epoch)
        .map(|ch| ch.iter().sum::<f64>() / ch.len() as f64)
        .collect();
    let ck = denoiser_checkpoint(&model, &c.hash(), wd.seed()).with_meta("first_stage", &fs_digest);
    let digest = wd.save_checkpoint(DENOISER_CKPT, &ck, &[("first_stage", fs_digest.clone())])?;
    wd.write(
        "logs/ldm_loss.csv",
        &epoch_csv(&curve),
        &[("denoiser", digest)],
    )?;
    eprintln!(
        "denoiser trained: final epoch loss {:.4}",
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Trained artifacts shared by finetune, edit and ablate.
struct Models {
    first_stage: FirstStage,
    denoiser: Denoiser,
    oracle: EmotionOracle,
    embedder: IdentityEmbedder,
    schedule: NoiseSchedule,
    digests: Vec<(&'static str, String)>,
}

impl Models {
    fn load(wd: &Workdir) -> Result<Self> {
        let ck = wd.load_checkpoint(DENOISER_CKPT, "denoiser", "train-ldm")?;
        let (first_stage, fs_digest) = load_first_stage(wd)?;
        let dn_digest = ck.digest()?;
        if ck.meta("first_stage")? != fs_digest {
            return Err(Error::Stale(
                "denoiser was trained on a different first stage; rerun train-ldm".into(),
            ));
        }
        let denoiser = denoiser_from(ck)?;
        let schedule = wd.schedule()?;
        if denoiser.config().horizon != schedule.horizon() {
            return Err(Error::Config(format!(
                "denoiser trained with T={}, config has schedule.T={}",
                denoiser.config().horizon,
                schedule.horizon()
            )));
        }
        let ock = wd.load_checkpoint(ORACLE_CKPT, "emotion_oracle", "calibrate")?;
        let eck = wd.load_checkpoint(EMBEDDER_CKPT, "identity_embedder", "calibrate")?;
        let digests = vec![
            ("first_stage", fs_digest),
            ("denoiser", dn_digest),
            ("oracle", ock.digest()?),
            ("embedder", eck.digest()?),
        ];
        Ok(Self {
            first_stage,
            denoiser,
            oracle: oracle_from(ock)?,
            embedder: embedder_from(eck)?,
            schedule,
            digests,
        })
    }

    fn evaluators(&self, size: usize) -> Evaluators<'_> {
        Evaluators {
            oracle: &self.oracle,
            embedder: &self.embedder,
            height: size,
            width: size,
            ssim: SsimConfig::default(),
        }
    }

    fn inputs(&self) -> Vec<(&str, String)> {
        self.digests.iter().map(|(k, v)| (*k, v.clone())).collect()
    }
}

fn finetune_config(wd: &Workdir) -> Result<FinetuneConfig> {
    let c = &wd.config;
    let depth = c.count("finetune.grad_depth", 0)?;
    Ok(FinetuneConfig {
        lambda_dir: c.float("finetune.lambda_dir"),
        lambda_id: c.float("finetune.lambda_id"),
        lambda_l2: c.float("finetune.lambda_l2"),
        t_tune: c.count("finetune.t_tune", 1)?,
        t0: c.count("finetune.t0", 1)?,
        t_ddim: c.count("finetune.T_ddim", 1)?,
        gamma: c.float("finetune.gamma"),
        epochs: c.count("finetune.epochs", 1)?,
        learning_rate: c.float("finetune.lr"),
        batch_size: c.count("finetune.batch_size", 1)?,
        per_class: c.count("finetune.per_class", 1)?,
        subsample: c.count("finetune.subsample", 1)?,
        grad_depth: (depth > 0).then_some(depth),
        l2_reduction: match c.str("finetune.l2_reduction") {
            "sum" => L2Reduction::Sum,
            _ => L2Reduction::Mean,
        },
    })
}

fn labels_in_range(name: &str, v: &[usize]) -> Result<()> {
    match v.iter().find(|&&y| y >= NUM_EMOTIONS) {
        Some(&y) => Err(Error::Config(format!(
            "{name} entry {y} is not a class index below {NUM_EMOTIONS}"
        ))),
        None => Ok(()),
    }
}

pub fn finetune_cmd(wd: &Workdir) -> Result<()> {
    let m = Models::load(wd)?;
    let cfg = finetune_config(wd)?;
    cfg.validate(m.schedule.horizon())?;
    let targets = wd.config.counts("finetune.targets", 0)?;
    labels_in_range("finetune.targets", &targets)?;
    let train = load_dataset(wd, train_data_rel())?;
    let seed = wd.seed();
    let root = RngStream::new(seed, STREAM_FINETUNE);

    let ids = select_instances(&train, cfg.per_class, &mut root.split(0))?;
    let model_digest = params_digest(m.denoiser.params());
    let hash = latent_config_hash(cfg.t0, cfg.t_ddim, cfg.gamma, &model_digest, &ids);
    let rel = format!("latents/{hash}.bin");
    let store = if wd.path(&rel).exists() {
        LatentStore::load(&wd.path(&rel), &hash)?
    } else {
        let s = precompute_latents(
            &m.denoiser,
            &m.first_stage,
            &train,
            &ids,
            &m.schedule,
            cfg.t0,
            cfg.t_ddim,
            cfg.gamma,
            &model_digest,
        )?;
        wd.write(&rel, &s.to_bytes(), &m.inputs())?;
        eprintln!("inverted {} instances to t0={}", s.len(), cfg.t0);
        s
    };

    let ctx = TuneContext {
        first_stage: &m.first_stage,
        oracle: &m.oracle,
        identity: &m.embedder,
        schedule: &m.schedule,
        config: &cfg,
    };
    let mut log = String::from("target,epoch,total,dir,id,l2,flagged\n");
    for &y in &targets {
        let (tuned, history) =
            finetune(&m.denoiser, &store, y, &ctx, &mut root.split(1 + y as u64))?;
        for h in &history {
            let l = &h.loss;
            log.push_str(&format!(
                "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{}\n",
                EMOTIONS[y], h.epoch, l.total, l.dir, l.id, l.l2, l.flagged
            ));
        }
        let key = TuneKey {
            y_trg: y,
            gamma: cfg.gamma,
            lambda_dir: cfg.lambda_dir,
        };
        let mut ck = denoiser_checkpoint(&tuned, &wd.config.hash(), seed)
            .with_meta("first_stage", &m.digests[0].1);
        for (k, v) in key.meta() {
            ck = ck.with_meta(k, v);
        }
        let mut inputs = m.inputs();
        inputs.push(("latents", hash.clone()));
        wd.save_checkpoint(&tuned_rel(y, cfg.gamma, cfg.lambda_dir), &ck, &inputs)?;
        let last = history.last().map(|h| h.loss.total).unwrap_or(f64::NAN);
        eprintln!("tuned toward {}: final epoch loss {last:.4}", EMOTIONS[y]);
    }
    let log_rel = format!(
        "logs/finetune_loss_g{:?}_l{:?}.csv",
        cfg.gamma, cfg.lambda_dir
    );
    wd.write(&log_rel, log.as_bytes(), &m.inputs())?;
    Ok(())
}

fn load_tuned(wd: &Workdir, m: &Models, y_trg: usize) -> Result<Denoiser> {
    let cfg = finetune_config(wd)?;
    let key = TuneKey {
        y_trg,
        gamma: cfg.gamma,
        lambda_dir: cfg.lambda_dir,
    };
    let ck = wd.load_checkpoint(
        &tuned_rel(y_trg, cfg.gamma, cfg.lambda_dir),
        "denoiser",
        "finetune",
    )?;
    key.check(&ck.meta)?;
    if ck.meta("first_stage")? != m.digests[0].1 {
        return Err(Error::Stale(
            "tuned model belongs to a different first stage; rerun finetune".into(),
        ));
    }
    denoiser_from(ck)
}

/// `n` distinct held-out items spread over identities and emotions: pick `k`
/// is identity `k mod I` with emotion `(k + k / I) mod 7`, or with `src` when
/// given.
pub fn pick_sources(held: &Dataset, n: usize, src: Option<usize>) -> Result<Vec<usize>> {
    let per_id = NUM_EMOTIONS;
    let ids = held.len() / per_id;
    let max = if src.is_some() { ids } else { ids * per_id };
    if n == 0 || n > max {
        return Err(Error::Config(format!(
            "requested {n} sources, held-out set offers {max}"
        )));
    }
    Ok((0..n)
        .map(|k| (k % ids) * per_id + src.unwrap_or((k + k / ids) % per_id))
        .collect())
}

/// Options of the edit command after merging flags over the config.
pub struct EditOptions {
    pub image: Option<std::path::PathBuf>,
    pub t0: Vec<usize>,
    pub gamma: f64,
    pub steps: usize,
    pub eta: f64,
    pub inversion_gamma: Option<f64>,
    pub src: Option<usize>,
    pub trg: Option<usize>,
}

fn check_ranges(
    schedule: &NoiseSchedule,
    t0: &[usize],
    steps: usize,
    gamma: f64,
    eta: f64,
    inversion_gamma: Option<f64>,
) -> Result<()> {
    for &t in t0 {
        EditConfig {
            eta,
            inversion_gamma,
            ..EditConfig::new(steps, t, gamma, 0, 0)
        }
        .validate(schedule.horizon(), NUM_EMOTIONS)?;
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta = {eta} outside [0, 1]")));
    }
    for (name, g) in [
        ("gamma", Some(gamma)),
        ("edit.inversion_gamma", inversion_gamma),
    ] {
        if let Some(g) = g {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("{name} = {g} must be non-negative")));
            }
        }
    }
    Ok(())
}

pub fn edit_cmd(wd: &Workdir, opts: &EditOptions) -> Result<()> {
    let m = Models::load(wd)?;
    check_ranges(
        &m.schedule,
        &opts.t0,
        opts.steps,
        opts.gamma,
        opts.eta,
        opts.inversion_gamma,
    )?;
    if let Some(y) = opts.trg {
        labels_in_range("--trg", &[y])?;
    }
    let size = wd.config.count("data.size", MIN_SIZE)?;
    let (sources, labels) = match &opts.image {
        Some(p) => {
            let y = opts
                .src
                .ok_or_else(|| Error::Config("--image requires --src".into()))?;
            labels_in_range("--src", &[y])?;
            let (px, h, w, ch) = io::decode_pnm(&io::read_file(&wd.path(&p.to_string_lossy()))?)?;
            if (h, w, ch) != (size, size, 1) {
                return Err(Error::Config(format!(
                    "--image is {h}x{w}x{ch}, expected {size}x{size}x1 graymap"
                )));
            }
            (Tensor::new(&[1, size * size], px)?, vec![y])
        }
        None => {
            if let Some(y) = opts.src {
                labels_in_range("--src", &[y])?;
            }
            let held = load_dataset(wd, heldout_data_rel())?;
            let idx = pick_sources(&held, wd.config.count("edit.images", 1)?, opts.src)?;
            let all = held.labels();
            (
                held.images.select_rows(&idx),
                idx.iter().map(|&i| all[i]).collect(),
            )
        }
    };
    let targets: Vec<usize> = match opts.trg {
        Some(y) => vec![y],
        None => (0..NUM_EMOTIONS).collect(),
    };
    let tuned = if wd.config.flag("edit.tuned") {
        targets
            .iter()
            .map(|&y| load_tuned(wd, &m, y))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let eval = m.evaluators(size);
    let n = sources.rows();
    let root = RngStream::new(wd.seed(), STREAM_EDIT);
    let mut rows: Vec<GridRow> = Vec::new();
    for (ci, &t0) in opts.t0.iter().enumerate() {
        let cfg = EditConfig {
            eta: opts.eta,
            inversion_gamma: opts.inversion_gamma,
            ..EditConfig::new(opts.steps, t0, opts.gamma, 0, 0)
        };
        let cell = GridCell {
            t0,
            gamma: opts.gamma,
            t_ddim: opts.steps,
        };
        let mut jobs = Vec::new();
        let mut edited: Vec<f64> = Vec::new();
        let mut columns: Vec<Tensor> = Vec::new();
        for (k, &y) in targets.iter().enumerate() {
            let generator = tuned.get(k).unwrap_or(&m.denoiser);
            let trg = vec![y; n];
            let rng = root.split(ci as u64).split(y as u64);
            let out = edit_rows_with(
                &m.first_stage,
                &m.denoiser,
                generator,
                &m.schedule,
                &sources,
                &labels,
                &trg,
                &cfg,
                &rng,
            )?;
            if !out.is_finite() {
                return Err(Error::NonFinite(format!(
                    "edited images at t0={t0}, target {}",
                    EMOTIONS[y]
                )));
            }
            jobs.extend((0..n).map(|item| EditJob {
                item,
                y_src: labels[item],
                y_trg: y,
            }));
            edited.extend_from_slice(out.data());
            columns.push(out);
        }
        let edited = Tensor::new(&[jobs.len(), size * size], edited)?;
        let idx: Vec<usize> = jobs.iter().map(|j| j.item).collect();
        let scores = eval.score(&edited, &sources.select_rows(&idx))?;
        rows.extend(aggregate(cell, &jobs, &scores));

        let mut tiles = Vec::with_capacity(n * (targets.len() + 1));
        for r in 0..n {
            tiles.push(sources.row(r).to_vec());
            for col in &columns {
                tiles.push(col.row(r).to_vec());
            }
        }
        let (px, gh, gw) = io::tile_grid(&tiles, n, targets.len() + 1, size, size, 1)?;
        let rel = format!("outputs/edit_t0_{t0}.pgm");
        wd.write(&rel, &io::encode_pnm(&px, gh, gw, 1)?, &m.inputs())?;
        eprintln!("{rel}: {n} sources x {} targets", targets.len());
    }
    sort_rows(&mut rows);
    let csv = csv_bytes(|b| write_metrics_csv(b, &rows))?;
    wd.write("outputs/edit_metrics.csv", &csv, &m.inputs())?;
    Ok(())
}

pub fn ablate(wd: &Workdir) -> Result<()> {
    let c = &wd.config;
    let m = Models::load(wd)?;
    let t0s = c.counts("ablate.t0", 1)?;
    let gammas = c.floats("ablate.gamma");
    let steps = c.counts("ablate.T_ddim", 2)?;
    let eta = c.float("edit.eta");
    let inversion_gamma = c.float_or_same("edit.inversion_gamma");
    let mut grid = Vec::new();
    for &t0 in &t0s {
        for &gamma in &gammas {
            for &t_ddim in &steps {
                check_ranges(&m.schedule, &[t0], t_ddim, gamma, eta, inversion_gamma)?;
                grid.push(GridCell { t0, gamma, t_ddim });
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let held = load_dataset(wd, heldout_data_rel())?;
    let size = held.size;
    let idx = pick_sources(&held, c.count("ablate.images", 1)?, None)?;
    let images = held.images.select_rows(&idx);
    let all = held.labels();
    let labels: Vec<usize> = idx.iter().map(|&i| all[i]).collect();
    let jobs = all_direction_jobs(&labels, NUM_EMOTIONS);
    eprintln!("ablating {} cells x {} edits", grid.len(), jobs.len());
    let rng = RngStream::new(wd.seed(), STREAM_ABLATE);
    let sampling = EditConfig {
        eta,
        inversion_gamma,
        ..EditConfig::new(grid[0].t_ddim, grid[0].t0, grid[0].gamma, 0, 0)
    };
    let rows = edit_batch(
        &m.first_stage,
        &m.denoiser,
        &m.schedule,
        &images,
        &jobs,
        &grid,
        &sampling,
        &m.evaluators(size),
        &rng,
    )?;
    let table = csv_bytes(|b| write_ablation_csv(b, &rows))?;
    wd.write("outputs/ablation.csv", &table, &m.inputs())?;
    wd.write(
        "outputs/ablation_metrics.csv",
        &csv_bytes(|b| write_metrics_csv(b, &rows))?,
        &m.inputs(),
    )?;
    for cell in &grid {
        let sel: Vec<&GridRow> = rows.iter().filter(|r| r.cell == *cell).collect();
        let p = diffedit::editing::pool(&sel);
        eprintln!(
            "t0={:>3} gamma={:<4} T_ddim={:>3}  acc {:.3}  psnr {}  ssim {:.3}  csim {:.3}",
            cell.t0,
            cell.gamma,
            cell.t_ddim,
            p.accuracy,
            format_psnr(p.psnr),
            p.ssim,
            p.csim
        );
    }
    Ok(())
}

/// Writes the failure report for numeric aborts.
pub fn write_diagnostics(
    root: &Path,
    command: &str,
    config_hash: &str,
    seed: u64,
    err: &Error,
) -> std::io::Result<std::path::PathBuf> {
    let path = root.join("diagnostics.txt");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = format!(
        "command = {command}\nerror = {err}\nconfig_hash = {config_hash}\nseed = {seed}\ncode_version = {CODE_VERSION}\n"
    );
    std::fs::write(&path, text)?;
    Ok(path)
}
