//! Image translation: encode, invert under the source label, regenerate
//! under the target label, decode.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::denoiser::{Label, NoisePredictor};
use crate::diffusion::{
    ddim_generate, ddim_invert, ddim_update, guided_eps, GuidanceSpec, Trajectory,
};
use crate::error::{Error, Result};
use crate::first_stage::FirstStage;
use crate::numerics::{cosine_similarity, RngStream, Tensor};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::toyworld::{
    psnr, ssim, EmotionOracle, IdentityEmbedder, MetricsRow, SsimConfig, EMOTIONS,
};

pub const METRICS_HEADER: &str = "t0,gamma,T_ddim,y_src,y_trg,accuracy,psnr,ssim,csim";

#[derive(Clone, Debug, PartialEq)]
pub struct EditConfig {
    pub t_ddim: usize,
    pub t0: usize,
    pub eta: f64,
    pub gamma: f64,
    /// Guidance scale of the inversion branch; `None` reuses `gamma`.
    pub inversion_gamma: Option<f64>,
    pub y_src: usize,
    pub y_trg: usize,
}

impl EditConfig {
    pub fn new(t_ddim: usize, t0: usize, gamma: f64, y_src: usize, y_trg: usize) -> Self {
        Self {
            t_ddim,
            t0,
            eta: 0.0,
            gamma,
            inversion_gamma: None,
            y_src,
            y_trg,
        }
    }

    pub fn validate(&self, horizon: usize, num_classes: usize) -> Result<()> {
        if self.t0 > horizon || self.t0 == 0 {
            return Err(Error::Config(format!(
                "t0={} outside 1..={horizon}",
                self.t0
            )));
        }
        if self.t_ddim < 2 || self.t_ddim > self.t0 {
            return Err(Error::Config(format!(
                "need 2 <= T_ddim ({}) <= t0 ({})",
                self.t_ddim, self.t0
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta={} must be finite and >= 0",
                self.eta
            )));
        }
        for g in [Some(self.gamma), self.inversion_gamma]
            .into_iter()
            .flatten()
        {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config(format!(
                    "guidance scale {g} must be finite and >= 0"
                )));
            }
        }
        for y in [self.y_src, self.y_trg] {
            if y >= num_classes {
                return Err(Error::Label {
                    label: y,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn plan(&self, horizon: usize) -> Result<StepPlan> {
        StepPlan::build(self.t_ddim, self.t0, horizon)
    }

    pub fn inversion_scale(&self) -> f64 {
        self.inversion_gamma.unwrap_or(self.gamma)
    }
}

#[derive(Clone, Debug)]
pub struct EditDiagnostics {
    pub z0: Tensor,
    pub z_t0: Tensor,
    pub inversion: Trajectory,
    pub generation: Trajectory,
    /// Decoded regeneration under `y_src` (the matched-label round trip).
    pub reconstruction: Tensor,
    pub round_trip_mse: f64,
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).data().iter().map(|v| v * v).sum::<f64>() / a.len() as f64
}

/// Edits one image; `rng` is only consumed when `eta > 0`.
pub fn edit<M: NoisePredictor + ?Sized>(
    first_stage: &FirstStage,
    model: &M,
    schedule: &NoiseSchedule,
    num_classes: usize,
    image: &Tensor,
    cfg: &EditConfig,
    rng: Option<&mut RngStream>,
) -> Result<(Tensor, EditDiagnostics)> {
    cfg.validate(schedule.horizon(), num_classes)?;
    let plan = cfg.plan(schedule.horizon())?;
    let z0 = first_stage.encode(&image.as_matrix())?;
    let inv = GuidanceSpec::new(cfg.inversion_scale(), vec![Label::Class(cfg.y_src)]);
    let (z_t0, inversion) = ddim_invert(model, &z0, &plan, schedule, &inv)?;
    let gen = GuidanceSpec::new(cfg.gamma, vec![Label::Class(cfg.y_trg)]);
    let (z_hat, generation) = ddim_generate(model, &z_t0, &plan, schedule, &gen, cfg.eta, rng)?;
    let back = GuidanceSpec::new(cfg.gamma, vec![Label::Class(cfg.y_src)]);
    let (z_rec, _) = ddim_generate(model, &z_t0, &plan, schedule, &back, 0.0, None)?;
    let x_gen = first_stage.decode(&z_hat)?.into_reshape(image.shape())?;
    let reconstruction = first_stage.decode(&z_rec)?.into_reshape(image.shape())?;
    let round_trip_mse = mse(&reconstruction, image);
    Ok((
        x_gen,
        EditDiagnostics {
            z0,
            z_t0,
            inversion,
            generation,
            reconstruction,
            round_trip_mse,
        },
    ))
}

/// Batched editing of `[N, D]` images with per-row labels. Inversion is
/// deterministic; with `eta > 0` row `i` draws its noise from
/// `rng.split(i)`, so results do not depend on batching or thread count.
#[allow(clippy::too_many_arguments)]
pub fn edit_rows<M: NoisePredictor + ?Sized>(
    first_stage: &FirstStage,
    model: &M,
    schedule: &NoiseSchedule,
    images: &Tensor,
    y_src: &[usize],
    y_trg: &[usize],
    cfg: &EditConfig,
    rng: &RngStream,
) -> Result<Tensor> {
    edit_rows_with(
        first_stage,
        model,
        model,
        schedule,
        images,
        y_src,
        y_trg,
        cfg,
        rng,
    )
}

/// [`edit_rows`] with separate inversion and generation models, as used
/// for tuned generators over base-model inversions.
#[allow(clippy::too_many_arguments)]
pub fn edit_rows_with<A: NoisePredictor + ?Sized, B: NoisePredictor + ?Sized>(
    first_stage: &FirstStage,
    inverter: &A,
    generator: &B,
    schedule: &NoiseSchedule,
    images: &Tensor,
    y_src: &[usize],
    y_trg: &[usize],
    cfg: &EditConfig,
    rng: &RngStream,
) -> Result<Tensor> {
    let n = images.rows();
    if n == 0 {
        return Err(Error::EmptyInput("no images to edit".into()));
    }
    if y_src.len() != n || y_trg.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} images with {} / {} labels",
            y_src.len(),
            y_trg.len()
        )));
    }
    let plan = cfg.plan(schedule.horizon())?;
    let z0 = first_stage.encode(images)?;
    let inv = GuidanceSpec::new(
        cfg.inversion_scale(),
        y_src.iter().map(|&y| Label::Class(y)).collect(),
    );
    let (z_t0, _) = ddim_invert(inverter, &z0, &plan, schedule, &inv)?;
    let gen = GuidanceSpec::new(cfg.gamma, y_trg.iter().map(|&y| Label::Class(y)).collect());
    let z_hat = if cfg.eta == 0.0 {
        ddim_generate(generator, &z_t0, &plan, schedule, &gen, 0.0, None)?.0
    } else {
        generate_with_row_streams(generator, &z_t0, &plan, schedule, &gen, cfg.eta, rng)?
    };
    first_stage.decode(&z_hat)
}

fn generate_with_row_streams<M: NoisePredictor + ?Sized>(
    model: &M,
    z_t0: &Tensor,
    plan: &StepPlan,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    eta: f64,
    rng: &RngStream,
) -> Result<Tensor> {
    let mut streams: Vec<RngStream> = (0..z_t0.rows()).map(|i| rng.split(i as u64)).collect();
    let taus = plan.taus();
    let mut z = z_t0.clone();
    for i in (0..taus.len()).rev() {
        let (cur, prev) = (taus[i], if i == 0 { 0 } else { taus[i - 1] });
        let eps = guided_eps(model, &z, cur, guidance)?;
        let rows: Vec<Result<Vec<f64>>> = streams
            .par_iter_mut()
            .enumerate()
            .map(|(r, s)| {
                let zr = Tensor::vector(z.row(r).to_vec());
                let er = Tensor::vector(eps.row(r).to_vec());
                Ok(ddim_update(&zr, &er, cur, prev, eta, schedule, Some(s))?.into_data())
            })
            .collect();
        let mut data = Vec::with_capacity(z.len());
        for r in rows {
            data.extend(r?);
        }
        z = Tensor::new(z.shape(), data)?;
    }
    Ok(z)
}

/// Frozen evaluators and image geometry for metrics.
#[derive(Clone, Copy)]
pub struct Evaluators<'a> {
    pub oracle: &'a EmotionOracle,
    pub embedder: &'a IdentityEmbedder,
    pub height: usize,
    pub width: usize,
    pub ssim: SsimConfig,
}

/// Per-item metrics of edited images against their sources.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemMetrics {
    pub predicted: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub csim: Vec<f64>,
}

impl Evaluators<'_> {
    pub fn score(&self, edited: &Tensor, sources: &Tensor) -> Result<ItemMetrics> {
        let predicted = self.oracle.predict(edited)?;
        let ea = self.embedder.embed(edited)?;
        let eb = self.embedder.embed(sources)?;
        let n = edited.rows();
        let per: Vec<Result<(f64, f64, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = Tensor::vector(edited.row(i).to_vec());
                let b = Tensor::vector(sources.row(i).to_vec());
                let p = psnr(&a, &b, 1.0)?;
                let s = ssim(&a, &b, self.height, self.width, &self.ssim)?;
                let c = cosine_similarity(
                    &Tensor::vector(ea.row(i).to_vec()),
                    &Tensor::vector(eb.row(i).to_vec()),
                )
                .unwrap_or(0.0);
                Ok((p, s, c))
            })
            .collect();
        let mut m = ItemMetrics {
            predicted,
            psnr: Vec::new(),
            ssim: Vec::new(),
            csim: Vec::new(),
        };
        for r in per {
            let (p, s, c) = r?;
            m.psnr.push(p);
            m.ssim.push(s);
            m.csim.push(c);
        }
        Ok(m)
    }
}

/// One setting of the editing hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub t0: usize,
    pub gamma: f64,
    pub t_ddim: usize,
}

/// Aggregated metrics of one (cell, source, target) group.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub cell: GridCell,
    pub y_src: usize,
    pub y_trg: usize,
    pub count: usize,
    pub metrics: MetricsRow,
    /// Fraction of edits the oracle assigns to each class.
    pub predicted: Vec<f64>,
}

/// One edit request: source item index and target label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EditJob {
    pub item: usize,
    pub y_src: usize,
    pub y_trg: usize,
}

/// Every ordered `(src, trg)` pair with `src ≠ trg` for each item.
pub fn all_direction_jobs(labels: &[usize], num_classes: usize) -> Vec<EditJob> {
    let mut jobs = Vec::new();
    for (item, &y_src) in labels.iter().enumerate() {
        for y_trg in 0..num_classes {
            if y_trg != y_src {
                jobs.push(EditJob { item, y_src, y_trg });
            }
        }
    }
    jobs
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finite_mean(v: &[f64]) -> f64 {
    crate::toyworld::mean_psnr(v)
}

/// Runs every job in every grid cell and aggregates per
/// `(cell, y_src, y_trg)`. `sampling` supplies η and the inversion scale;
/// each cell overrides `t0`, `γ` and `T_ddim`. Rows come out sorted by
/// `(y_trg, t0, γ, T_ddim, y_src)`.
#[allow(clippy::too_many_arguments)]
pub fn edit_batch<M: NoisePredictor + ?Sized>(
    first_stage: &FirstStage,
    model: &M,
    schedule: &NoiseSchedule,
    images: &Tensor,
    jobs: &[EditJob],
    grid: &[GridCell],
    sampling: &EditConfig,
    eval: &Evaluators<'_>,
    rng: &RngStream,
) -> Result<Vec<GridRow>> {
    if images.rows() == 0 || jobs.is_empty() {
        return Err(Error::EmptyInput(
            "edit batch without images or jobs".into(),
        ));
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("empty editing grid".into()));
    }
    let idx: Vec<usize> = jobs.iter().map(|j| j.item).collect();
    let sources = images.select_rows(&idx);
    let src: Vec<usize> = jobs.iter().map(|j| j.y_src).collect();
    let trg: Vec<usize> = jobs.iter().map(|j| j.y_trg).collect();
    let mut rows = Vec::new();
    for (ci, cell) in grid.iter().enumerate() {
        let cfg = EditConfig {
            t_ddim: cell.t_ddim,
            t0: cell.t0,
            gamma: cell.gamma,
            ..sampling.clone()
        };
        cfg.validate(schedule.horizon(), usize::MAX)?;
        let edited = edit_rows(
            first_stage,
            model,
            schedule,
            &sources,
            &src,
            &trg,
            &cfg,
            &rng.split(ci as u64),
        )?;
        let m = eval.score(&edited, &sources)?;
        rows.extend(aggregate(*cell, jobs, &m));
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Groups per-job metrics of one cell by `(y_src, y_trg)`; `m` is indexed
/// like `jobs`.
pub fn aggregate(cell: GridCell, jobs: &[EditJob], m: &ItemMetrics) -> Vec<GridRow> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, j) in jobs.iter().enumerate() {
        groups.entry((j.y_src, j.y_trg)).or_default().push(k);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((y_src, y_trg), ks) in groups {
        let pick = |v: &[f64]| ks.iter().map(|&k| v[k]).collect::<Vec<f64>>();
        let mut predicted = vec![0.0; EMOTIONS.len()];
        for &k in &ks {
            predicted[m.predicted[k]] += 1.0 / ks.len() as f64;
        }
        rows.push(GridRow {
            cell,
            y_src,
            y_trg,
            count: ks.len(),
            metrics: MetricsRow {
                accuracy: predicted[y_trg],
                psnr: finite_mean(&pick(&m.psnr)),
                ssim: mean(&pick(&m.ssim)),
                csim: mean(&pick(&m.csim)),
            },
            predicted,
        });
    }
    rows
}

/// Sorts by `(y_trg, t0, γ, T_ddim, y_src)`.
pub fn sort_rows(rows: &mut [GridRow]) {
    rows.sort_by(|a, b| {
        (a.y_trg, a.cell.t0, a.cell.gamma, a.cell.t_ddim, a.y_src)
            .partial_cmp(&(b.y_trg, b.cell.t0, b.cell.gamma, b.cell.t_ddim, b.y_src))
            .expect("finite grid values")
    });
}

/// Count-weighted average of rows (PSNR averages finite values only).
pub fn pool(rows: &[&GridRow]) -> MetricsRow {
    let n: usize = rows.iter().map(|r| r.count).sum();
    let w = |f: &dyn Fn(&GridRow) -> f64| {
        rows.iter().map(|r| f(r) * r.count as f64).sum::<f64>() / n as f64
    };
    let finite: Vec<&&GridRow> = rows.iter().filter(|r| r.metrics.psnr.is_finite()).collect();
    let nf: usize = finite.iter().map(|r| r.count).sum();
    let psnr = if nf == 0 {
        f64::INFINITY
    } else {
        finite
            .iter()
            .map(|r| r.metrics.psnr * r.count as f64)
            .sum::<f64>()
            / nf as f64
    };
    MetricsRow {
        accuracy: w(&|r| r.metrics.accuracy),
        psnr,
        ssim: w(&|r| r.metrics.ssim),
        csim: w(&|r| r.metrics.csim),
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[GridRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.6},{},{:.6},{:.6}",
            r.cell.t0,
            r.cell.gamma,
            r.cell.t_ddim,
            EMOTIONS[r.y_src],
            EMOTIONS[r.y_trg],
            r.metrics.accuracy,
            crate::toyworld::format_psnr(r.metrics.psnr),
            r.metrics.ssim,
            r.metrics.csim
        )?;
    }
    Ok(())
}

/// Per-(target, t0, γ, T_ddim) table with the predicted-class distribution
/// followed by pooled quality metrics.
pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[GridRow]) -> Result<()> {
    let classes: Vec<String> = EMOTIONS.iter().map(|e| format!("p_{e}")).collect();
    writeln!(
        w,
        "target,t0,gamma,T_ddim,{},accuracy,psnr,ssim,csim",
        classes.join(",")
    )?;
    let mut groups: Vec<((usize, usize, u64, usize), Vec<&GridRow>)> = Vec::new();
    for r in rows {
        let key = (r.y_trg, r.cell.t0, r.cell.gamma.to_bits(), r.cell.t_ddim);
        match groups.last_mut() {
            Some((k, v)) if *k == key => v.push(r),
            _ => groups.push((key, vec![r])),
        }
    }
    for ((trg, t0, gbits, t_ddim), g) in groups {
        let n: usize = g.iter().map(|r| r.count).sum();
        let dist: Vec<String> = (0..EMOTIONS.len())
            .map(|c| {
                format!(
                    "{:.6}",
                    g.iter()
                        .map(|r| r.predicted[c] * r.count as f64)
                        .sum::<f64>()
                        / n as f64
                )
            })
            .collect();
        let m = pool(&g);
        writeln!(
            w,
            "{},{t0},{},{t_ddim},{},{:.6},{},{:.6},{:.6}",
            EMOTIONS[trg],
            f64::from_bits(gbits),
            dist.join(","),
            m.accuracy,
            crate::toyworld::format_psnr(m.psnr),
            m.ssim,
            m.csim
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::first_stage::FirstStageConfig;

    /// Pulls every coordinate toward a class-dependent level.
    struct Toy;

    impl NoisePredictor for Toy {
        fn predict(&self, z: &Tensor, _t: usize, labels: &[Label]) -> Result<Tensor> {
            let mut out = z.as_matrix();
            for (r, l) in labels.iter().enumerate() {
                let c = l.class().map(|c| c as f64 * 0.1).unwrap_or(0.0);
                out.row_mut(r).iter_mut().for_each(|v| *v = 0.3 * *v - c);
            }
            out.into_reshape(z.shape())
        }
    }

    fn setup() -> (FirstStage, NoiseSchedule, Tensor) {
        let fs = FirstStage::new(
            FirstStageConfig::identity([4, 4, 1]),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let x = RngStream::new(1, 0)
            .uniform_tensor(&[3, 16], 0.0, 1.0)
            .unwrap();
        (fs, s, x)
    }

    #[test]
    fn config_validation() {
        let c = EditConfig::new(10, 50, 3.0, 1, 2);
        assert!(c.validate(100, 7).is_ok());
        assert!(matches!(
            EditConfig::new(10, 150, 3.0, 1, 2).validate(100, 7),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            EditConfig::new(10, 50, 3.0, 1, 9).validate(100, 7),
            Err(Error::Label { .. })
        ));
        assert!(EditConfig::new(60, 50, 3.0, 1, 2).validate(100, 7).is_err());
        assert!(EditConfig { eta: -1.0, ..c }.validate(100, 7).is_err());
    }

    #[test]
    fn edit_is_deterministic_and_self_auditing() {
        let (fs, s, x) = setup();
        let img = Tensor::vector(x.row(0).to_vec());
        let cfg = EditConfig::new(10, 50, 2.0, 1, 3);
        let (a, d) = edit(
            &fs,
            &Toy,
            &s,
            7,
            &img,
            &cfg,
            Some(&mut RngStream::new(1, 0)),
        )
        .unwrap();
        let (b, _) = edit(
            &fs,
            &Toy,
            &s,
            7,
            &img,
            &cfg,
            Some(&mut RngStream::new(2, 0)),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(d.inversion.times(), cfg.plan(100).unwrap().taus());
        assert!(d.round_trip_mse < mse(&a, &img));
        // identity edit equals the diagnostic round trip
        let same = EditConfig { y_trg: 1, ..cfg };
        let (c, d2) = edit(&fs, &Toy, &s, 7, &img, &same, None).unwrap();
        assert_eq!(c, d2.reconstruction);
    }

    #[test]
    fn batched_rows_match_single_edits() {
        let (fs, s, x) = setup();
        let cfg = EditConfig::new(8, 40, 3.0, 0, 0);
        let src = [0, 1, 2];
        let trg = [4, 5, 6];
        let batch = edit_rows(&fs, &Toy, &s, &x, &src, &trg, &cfg, &RngStream::new(0, 0)).unwrap();
        for i in 0..3 {
            let c = EditConfig {
                y_src: src[i],
                y_trg: trg[i],
                ..cfg.clone()
            };
            let (single, _) = edit(
                &fs,
                &Toy,
                &s,
                7,
                &Tensor::vector(x.row(i).to_vec()),
                &c,
                None,
            )
            .unwrap();
            assert_eq!(batch.row(i), single.data());
        }
    }

    #[test]
    fn stochastic_rows_use_their_own_streams() {
        let (fs, s, x) = setup();
        let cfg = EditConfig {
            eta: 1.0,
            ..EditConfig::new(8, 40, 3.0, 0, 0)
        };
        let rng = RngStream::new(5, 0);
        let all = edit_rows(&fs, &Toy, &s, &x, &[0, 1, 2], &[3, 3, 3], &cfg, &rng).unwrap();
        let again = edit_rows(&fs, &Toy, &s, &x, &[0, 1, 2], &[3, 3, 3], &cfg, &rng).unwrap();
        assert_eq!(all, again);
        let det = edit_rows(
            &fs,
            &Toy,
            &s,
            &x,
            &[0, 1, 2],
            &[3, 3, 3],
            &EditConfig { eta: 0.0, ..cfg },
            &rng,
        )
        .unwrap();
        assert_ne!(all, det);
    }

    #[test]
    fn direction_enumeration() {
        let jobs = all_direction_jobs(&[0, 3], 7);
        assert_eq!(jobs.len(), 12);
        assert!(jobs.iter().all(|j| j.y_src != j.y_trg));
    }
}
