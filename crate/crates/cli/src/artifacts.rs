//! Workdir layout, sidecar manifests and checkpoint conversions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffedit::denoiser::{Denoiser, DenoiserConfig};
use diffedit::first_stage::{FirstStage, FirstStageConfig};
use diffedit::io::{self, sha256_hex, Checkpoint};
use diffedit::numerics::{ParamSet, Tensor};
use diffedit::schedule::NoiseSchedule;
use diffedit::toyworld::{
    Dataset, EmotionOracle, FaceSpec, IdentityEmbedder, IDENTITY_DIM, NUM_EMOTIONS,
};
use diffedit::{Error, Result};

use crate::config::RunConfig;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DATA_HEADER: &str = "id,p0,p1,p2,emotion,path";

pub struct Workdir {
    root: PathBuf,
    pub config: RunConfig,
    pub command: &'static str,
}

impl Workdir {
    pub fn new(root: &Path, config: RunConfig, command: &'static str) -> Self {
        Self {
            root: root.to_path_buf(),
            config,
            command,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn seed(&self) -> u64 {
        self.config.seed()
    }

    /// Writes `rel` plus a `rel.manifest` sidecar recording provenance.
    pub fn write(&self, rel: &str, bytes: &[u8], inputs: &[(&str, String)]) -> Result<PathBuf> {
        let path = self.path(rel);
        io::write_file(&path, bytes)?;
        let mut m = format!(
            "artifact = {rel}\ncommand = {}\nconfig_hash = {}\nseed = {}\ncode_version = {CODE_VERSION}\nsha256 = {}\n",
            self.command,
            self.config.hash(),
            self.seed(),
            sha256_hex(bytes)
        );
        for (k, v) in inputs {
            m.push_str(&format!("input.{k} = {v}\n"));
        }
        io::write_file(&self.path(&format!("{rel}.manifest")), m.as_bytes())?;
        Ok(path)
    }

    pub fn save_checkpoint(
        &self,
        rel: &str,
        ckpt: &Checkpoint,
        inputs: &[(&str, String)],
    ) -> Result<String> {
        self.write(rel, &ckpt.to_bytes()?, inputs)?;
        ckpt.digest()
    }

    /// Loads a checkpoint produced by an earlier command, naming that
    /// command when the file is missing.
    pub fn load_checkpoint(&self, rel: &str, module: &str, producer: &str) -> Result<Checkpoint> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing {module} checkpoint {}; run `diffedit {producer}` first",
                path.display()
            )));
        }
        Checkpoint::load_module(&path, module)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let c = &self.config;
        NoiseSchedule::linear(
            c.count("schedule.T", 1)?,
            c.float("schedule.beta_start"),
            c.float("schedule.beta_end"),
        )
    }

    pub fn image_shape(&self) -> Result<[usize; 3]> {
        let s = self.config.count("data.size", 1)?;
        Ok([s, s, 1])
    }
}

pub fn train_data_rel() -> &'static str {
    "data/train.csv"
}

pub fn heldout_data_rel() -> &'static str {
    "data/heldout.csv"
}

pub fn tuned_rel(y_trg: usize, gamma: f64, lambda_dir: f64) -> String {
    format!(
        "tuned/denoiser_{}_g{gamma:?}_l{lambda_dir:?}.ckpt",
        diffedit::toyworld::EMOTIONS[y_trg]
    )
}

/// Dataset CSV with one line per item; identities are recovered from
/// identical parameter triples.
pub fn dataset_csv(data: &Dataset, image_dir: &str) -> String {
    let mut out = format!("{DATA_HEADER}\n");
    for l in data.manifest_lines(|i| format!("{image_dir}/{i:05}.pgm")) {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn parse_dataset_csv(text: &str, size: usize) -> Result<Dataset> {
    let mut lines = text.lines();
    if lines.next() != Some(DATA_HEADER) {
        return Err(Error::Format(format!(
            "dataset CSV must start with '{DATA_HEADER}'"
        )));
    }
    let mut specs = Vec::new();
    let mut ids = Vec::new();
    let mut seen: BTreeMap<[u64; IDENTITY_DIM], usize> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("dataset CSV line {}: '{line}'", n + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        let mut p = [0.0; IDENTITY_DIM];
        for (k, v) in p.iter_mut().enumerate() {
            *v = f[1 + k].parse().map_err(|_| bad())?;
        }
        let e: usize = f[4].parse().map_err(|_| bad())?;
        if e >= NUM_EMOTIONS {
            return Err(bad());
        }
        let next = seen.len();
        ids.push(*seen.entry(p.map(f64::to_bits)).or_insert(next));
        specs.push(FaceSpec::new(p, e));
    }
    Dataset::from_specs(specs, ids, size)
}

pub fn load_dataset(wd: &Workdir, rel: &str) -> Result<Dataset> {
    let path = wd.path(rel);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing dataset {}; run `diffedit gen-data` first",
            path.display()
        )));
    }
    let text = String::from_utf8(io::read_file(&path)?)
        .map_err(|_| Error::Format("dataset CSV is not UTF-8".into()))?;
    parse_dataset_csv(&text, wd.config.count("data.size", 1)?)
}

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta(key)?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint meta {key} is not an integer")))
}

fn meta_f64(ck: &Checkpoint, key: &str) -> Result<f64> {
    ck.meta(key)?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint meta {key} is not a number")))
}

fn meta_list(ck: &Checkpoint, key: &str) -> Result<Vec<usize>> {
    let raw = ck.meta(key)?;
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Format(format!("checkpoint meta {key} is not an integer list")))
        })
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn denoiser_checkpoint(model: &Denoiser, config_hash: &str, seed: u64) -> Checkpoint {
    let c = model.config();
    Checkpoint::new("denoiser", config_hash, seed, model.params().clone())
        .with_meta("data_dim", c.data_dim)
        .with_meta("width", c.width)
        .with_meta("blocks", c.blocks)
        .with_meta("class_dim", c.class_dim)
        .with_meta("time_dim", c.time_dim)
        .with_meta("num_classes", c.num_classes)
        .with_meta("horizon", c.horizon)
}

pub fn denoiser_from(ck: Checkpoint) -> Result<Denoiser> {
    let config = DenoiserConfig {
        data_dim: meta_usize(&ck, "data_dim")?,
        width: meta_usize(&ck, "width")?,
        blocks: meta_usize(&ck, "blocks")?,
        class_dim: meta_usize(&ck, "class_dim")?,
        time_dim: meta_usize(&ck, "time_dim")?,
        num_classes: meta_usize(&ck, "num_classes")?,
        horizon: meta_usize(&ck, "horizon")?,
    };
    Denoiser::from_params(config, ck.params)
}

pub fn first_stage_checkpoint(fs: &FirstStage, config_hash: &str, seed: u64) -> Checkpoint {
    let c = fs.config();
    Checkpoint::new("first_stage", config_hash, seed, fs.params().clone())
        .with_meta("mode", c.mode)
        .with_meta("image", join(&c.image))
        .with_meta("factor", c.factor)
        .with_meta("latent_channels", c.latent_channels)
        .with_meta("hidden", c.hidden)
        .with_meta("codebook_size", c.codebook_size)
        .with_meta("commit_weight", format!("{:?}", c.commit_weight))
        .with_meta("epochs", c.epochs)
        .with_meta("learning_rate", format!("{:?}", c.learning_rate))
        .with_meta("batch_size", c.batch_size)
}

pub fn first_stage_from(ck: Checkpoint) -> Result<FirstStage> {
    let image = meta_list(&ck, "image")?;
    let image: [usize; 3] = image.try_into().map_err(|_| {
        Error::Format("first-stage checkpoint image meta needs three extents".into())
    })?;
    let config = FirstStageConfig {
        mode: ck.meta("mode")?.parse()?,
        image,
        factor: meta_usize(&ck, "factor")?,
        latent_channels: meta_usize(&ck, "latent_channels")?,
        hidden: meta_usize(&ck, "hidden")?,
        codebook_size: meta_usize(&ck, "codebook_size")?,
        commit_weight: meta_f64(&ck, "commit_weight")?,
        epochs: meta_usize(&ck, "epochs")?,
        learning_rate: meta_f64(&ck, "learning_rate")?,
        batch_size: meta_usize(&ck, "batch_size")?,
    };
    FirstStage::from_params(config, ck.params)
}

const PROTOTYPES: &str = "prototypes";

pub fn oracle_checkpoint(
    o: &EmotionOracle,
    hidden: &[usize],
    input_dim: usize,
    config_hash: &str,
    seed: u64,
) -> Checkpoint {
    let mut params = o.params().clone();
    params.push(PROTOTYPES, o.prototypes().clone());
    Checkpoint::new("emotion_oracle", config_hash, seed, params)
        .with_meta("hidden", join(hidden))
        .with_meta("input_dim", input_dim)
}

pub fn oracle_from(ck: Checkpoint) -> Result<EmotionOracle> {
    let hidden = meta_list(&ck, "hidden")?;
    let input_dim = meta_usize(&ck, "input_dim")?;
    let mut params = ParamSet::new();
    let mut prototypes: Option<Tensor> = None;
    for (name, t) in ck.params.iter() {
        if name == PROTOTYPES {
            prototypes = Some(t.clone());
        } else {
            params.push(name, t.clone());
        }
    }
    let prototypes =
        prototypes.ok_or_else(|| Error::Format("oracle checkpoint without prototypes".into()))?;
    EmotionOracle::from_parts(params, &hidden, input_dim, prototypes)
}

pub fn embedder_checkpoint(
    e: &IdentityEmbedder,
    hidden: &[usize],
    input_dim: usize,
    config_hash: &str,
    seed: u64,
) -> Checkpoint {
    Checkpoint::new("identity_embedder", config_hash, seed, e.params().clone())
        .with_meta("hidden", join(hidden))
        .with_meta("input_dim", input_dim)
        .with_meta("features", e.features())
}

pub fn embedder_from(ck: Checkpoint) -> Result<IdentityEmbedder> {
    let hidden = meta_list(&ck, "hidden")?;
    let input_dim = meta_usize(&ck, "input_dim")?;
    let features = meta_usize(&ck, "features")?;
    IdentityEmbedder::from_params(ck.params, &hidden, input_dim, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffedit::numerics::RngStream;

    #[test]
    fn dataset_csv_round_trips_specs_and_identities() {
        let d = Dataset::generate(3, 16, &mut RngStream::new(5, 0)).unwrap();
        let back = parse_dataset_csv(&dataset_csv(&d, "img"), 16).unwrap();
        assert_eq!(back.images, d.images);
        assert_eq!(back.identity_ids, d.identity_ids);
        assert!(parse_dataset_csv("id,x\n", 16).is_err());
        assert!(parse_dataset_csv(&format!("{DATA_HEADER}\n0,1,2,3,9,p\n"), 16).is_err());
    }

    #[test]
    fn model_checkpoints_round_trip() {
        let mut rng = RngStream::new(2, 0);
        let mut c = DenoiserConfig::new(16, 7, 20);
        c.width = 8;
        let m = Denoiser::new(c, &mut rng);
        let back = denoiser_from(
            Checkpoint::from_bytes(&denoiser_checkpoint(&m, "h", 2).to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().get(0), m.params().get(0));

        let fs = FirstStage::new(FirstStageConfig::vq([8, 8, 1]), &mut rng).unwrap();
        let back = first_stage_from(first_stage_checkpoint(&fs, "h", 2)).unwrap();
        assert_eq!(back.config(), fs.config());

        let o = EmotionOracle::random(16, &[6], &mut rng).unwrap();
        let back = oracle_from(oracle_checkpoint(&o, &[6], 16, "h", 2)).unwrap();
        let x = rng.gaussian(&[3, 16]).unwrap();
        assert_eq!(back.logits(&x).unwrap(), o.logits(&x).unwrap());
        assert_eq!(back.prototypes(), o.prototypes());

        let e = IdentityEmbedder::random(16, &[6], 10, &mut rng).unwrap();
        let back = embedder_from(embedder_checkpoint(&e, &[6], 16, "h", 2)).unwrap();
        assert_eq!(back.embed(&x).unwrap(), e.embed(&x).unwrap());
    }
}
