//! `key = value` run configuration with one namespace per module.

use std::collections::BTreeMap;
use std::path::Path;

use diffedit::io::sha256_hex;
use diffedit::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    IntList,
    FloatList,
    /// Float or the literal `same`.
    FloatOrSame,
    Choice(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
    doc: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> Key {
    Key {
        name,
        kind,
        default,
        doc,
    }
}

const KEYS: &[Key] = &[
    key(
        "seed",
        Kind::Int,
        "7",
        "master seed (DIFFEDIT_SEED overrides)",
    ),
    key(
        "data.identities",
        Kind::Int,
        "300",
        "training identities, 7 renders each",
    ),
    key(
        "data.heldout_identities",
        Kind::Int,
        "60",
        "held-out identities for evaluation and editing",
    ),
    key("data.size", Kind::Int, "16", "face image side in pixels"),
    key("schedule.T", Kind::Int, "100", "diffusion horizon"),
    key(
        "schedule.beta_start",
        Kind::Float,
        "0.001",
        "first linear beta",
    ),
    key("schedule.beta_end", Kind::Float, "0.2", "last linear beta"),
    key(
        "first_stage.mode",
        Kind::Choice(&["identity", "ae", "vq-ae"]),
        "identity",
        "latent map",
    ),
    key(
        "first_stage.factor",
        Kind::Int,
        "4",
        "spatial downsampling factor",
    ),
    key(
        "first_stage.latent_channels",
        Kind::Int,
        "3",
        "latent channels",
    ),
    key(
        "first_stage.hidden",
        Kind::Int,
        "256",
        "encoder/decoder hidden width",
    ),
    key(
        "first_stage.codebook_size",
        Kind::Int,
        "64",
        "vq-ae codebook entries",
    ),
    key(
        "first_stage.commit_weight",
        Kind::Float,
        "0.25",
        "vq-ae commitment weight",
    ),
    key(
        "first_stage.epochs",
        Kind::Int,
        "60",
        "first-stage training epochs",
    ),
    key(
        "first_stage.lr",
        Kind::Float,
        "0.002",
        "first-stage learning rate",
    ),
    key(
        "first_stage.batch_size",
        Kind::Int,
        "32",
        "first-stage batch size",
    ),
    key("denoiser.width", Kind::Int, "128", "residual block width"),
    key("denoiser.blocks", Kind::Int, "2", "residual blocks"),
    key(
        "denoiser.class_dim",
        Kind::Int,
        "32",
        "class embedding size",
    ),
    key(
        "denoiser.time_dim",
        Kind::Int,
        "32",
        "timestep feature size",
    ),
    key("train.epochs", Kind::Int, "100", "denoiser training epochs"),
    key("train.lr", Kind::Float, "0.001", "denoiser learning rate"),
    key("train.batch_size", Kind::Int, "64", "denoiser batch size"),
    key(
        "train.p_uncond",
        Kind::Float,
        "0.2",
        "label dropout probability",
    ),
    key("oracle.epochs", Kind::Int, "40", "emotion oracle epochs"),
    key(
        "oracle.lr",
        Kind::Float,
        "0.002",
        "emotion oracle learning rate",
    ),
    key(
        "oracle.noise",
        Kind::Float,
        "0.2",
        "emotion oracle augmentation noise",
    ),
    key(
        "embedder.epochs",
        Kind::Int,
        "60",
        "identity embedder epochs",
    ),
    key(
        "embedder.lr",
        Kind::Float,
        "0.002",
        "identity embedder learning rate",
    ),
    key("edit.t0", Kind::IntList, "50", "editing strength(s)"),
    key("edit.gamma", Kind::Float, "3.0", "guidance scale"),
    key("edit.T_ddim", Kind::Int, "40", "DDIM steps"),
    key("edit.eta", Kind::Float, "0.0", "generation stochasticity"),
    key(
        "edit.inversion_gamma",
        Kind::FloatOrSame,
        "same",
        "guidance scale while inverting (same = edit.gamma)",
    ),
    key("edit.images", Kind::Int, "7", "held-out sources per grid"),
    key(
        "edit.tuned",
        Kind::Bool,
        "false",
        "generate with the finetuned model of each target",
    ),
    key(
        "ablate.t0",
        Kind::IntList,
        "40,50,60",
        "grid editing strengths",
    ),
    key(
        "ablate.gamma",
        Kind::FloatList,
        "1,2,3,4,5",
        "grid guidance scales",
    ),
    key("ablate.T_ddim", Kind::IntList, "40", "grid DDIM steps"),
    key(
        "ablate.images",
        Kind::Int,
        "210",
        "held-out sources per cell",
    ),
    key(
        "finetune.lambda_dir",
        Kind::Float,
        "1.0",
        "directional loss weight",
    ),
    key(
        "finetune.lambda_id",
        Kind::Float,
        "1.0",
        "identity loss weight",
    ),
    key(
        "finetune.lambda_l2",
        Kind::Float,
        "1.0",
        "pixel loss weight",
    ),
    key(
        "finetune.t_tune",
        Kind::Int,
        "6",
        "steps in the differentiated chain",
    ),
    key("finetune.t0", Kind::Int, "50", "inversion depth"),
    key("finetune.T_ddim", Kind::Int, "40", "inversion steps"),
    key(
        "finetune.gamma",
        Kind::Float,
        "1.0",
        "guidance scale during tuning",
    ),
    key("finetune.epochs", Kind::Int, "20", "finetuning epochs"),
    key(
        "finetune.lr",
        Kind::Float,
        "5e-6",
        "finetuning learning rate",
    ),
    key(
        "finetune.batch_size",
        Kind::Int,
        "20",
        "finetuning batch size",
    ),
    key(
        "finetune.per_class",
        Kind::Int,
        "50",
        "instances per class to invert",
    ),
    key(
        "finetune.subsample",
        Kind::Int,
        "100",
        "instances drawn per target",
    ),
    key(
        "finetune.grad_depth",
        Kind::Int,
        "0",
        "differentiated steps, 0 = all",
    ),
    key(
        "finetune.l2_reduction",
        Kind::Choice(&["mean", "sum"]),
        "mean",
        "pixel loss reduction",
    ),
    key(
        "finetune.targets",
        Kind::IntList,
        "0,1,2,3,4,5,6",
        "target classes to tune",
    ),
];

fn spec(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn canonical(k: &Key, raw: &str) -> Result<String> {
    let bad = |what: &str| Error::Config(format!("{} = '{raw}': expected {what}", k.name));
    let int = |s: &str| s.trim().parse::<i64>().map_err(|_| bad("an integer"));
    let float = |s: &str| match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(format!("{v:?}")),
        _ => Err(bad("a finite number")),
    };
    let list = |f: &dyn Fn(&str) -> Result<String>| -> Result<String> {
        let items: Vec<String> = raw.split(',').map(f).collect::<Result<_>>()?;
        Ok(items.join(","))
    };
    match k.kind {
        Kind::Int => Ok(int(raw)?.to_string()),
        Kind::Float => float(raw),
        Kind::Bool => match raw.trim() {
            "true" | "1" | "yes" => Ok("true".into()),
            "false" | "0" | "no" => Ok("false".into()),
            _ => Err(bad("true or false")),
        },
        Kind::IntList => list(&|s| Ok(int(s)?.to_string())),
        Kind::FloatList => list(&float),
        Kind::FloatOrSame if raw.trim() == "same" => Ok("same".into()),
        Kind::FloatOrSame => float(raw).map_err(|_| bad("a finite number or same")),
        Kind::Choice(opts) => {
            let v = raw.trim();
            if opts.contains(&v) {
                Ok(v.to_string())
            } else {
                Err(bad(&format!("one of {}", opts.join("|"))))
            }
        }
    }
}

/// Fully resolved configuration: every documented key with a canonical value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    defaulted: Vec<String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::parse("").expect("documented defaults parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut given = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let k = k.trim();
            let s = spec(k)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key '{k}'", n + 1)))?;
            if given.insert(k.to_string(), canonical(s, v)?).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{k}'",
                    n + 1
                )));
            }
        }
        let mut values = BTreeMap::new();
        let mut defaulted = Vec::new();
        for k in KEYS {
            let v = match given.remove(k.name) {
                Some(v) => v,
                None => {
                    defaulted.push(k.name.to_string());
                    canonical(k, k.default)?
                }
            };
            values.insert(k.name.to_string(), v);
        }
        Ok(Self { values, defaulted })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Keys that were filled from defaults.
    pub fn defaulted(&self) -> &[String] {
        &self.defaulted
    }

    pub fn set(&mut self, name: &str, raw: &str) -> Result<()> {
        let s = spec(name).ok_or_else(|| Error::Config(format!("unknown key '{name}'")))?;
        self.values.insert(name.to_string(), canonical(s, raw)?);
        self.defaulted.retain(|k| k != name);
        Ok(())
    }

    fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("undocumented config key {name}"))
    }

    pub fn str(&self, name: &str) -> &str {
        self.raw(name)
    }

    pub fn int(&self, name: &str) -> Result<i64> {
        Ok(self.raw(name).parse().expect("canonical integer"))
    }

    /// Integer constrained to `min..`.
    pub fn count(&self, name: &str, min: usize) -> Result<usize> {
        let v = self.int(name)?;
        if v < min as i64 {
            return Err(Error::Config(format!(
                "{name} = {v}: must be at least {min}"
            )));
        }
        Ok(v as usize)
    }

    pub fn float(&self, name: &str) -> f64 {
        self.raw(name).parse().expect("canonical float")
    }

    /// `None` for `same`.
    pub fn float_or_same(&self, name: &str) -> Option<f64> {
        match self.raw(name) {
            "same" => None,
            v => Some(v.parse().expect("canonical float")),
        }
    }

    pub fn flag(&self, name: &str) -> bool {
        self.raw(name) == "true"
    }

    pub fn counts(&self, name: &str, min: usize) -> Result<Vec<usize>> {
        self.raw(name)
            .split(',')
            .map(|s| {
                let v: i64 = s.parse().expect("canonical integer");
                if v < min as i64 {
                    Err(Error::Config(format!(
                        "{name} entry {v}: must be at least {min}"
                    )))
                } else {
                    Ok(v as usize)
                }
            })
            .collect()
    }

    pub fn floats(&self, name: &str) -> Vec<f64> {
        self.raw(name)
            .split(',')
            .map(|s| s.parse().expect("canonical float"))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.int("seed").expect("seed") as u64
    }

    /// Sorted canonical `key = value` lines.
    pub fn canonical_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }

    /// Resolved config with a comment per key marking defaults.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let tag = if self.defaulted.iter().any(|d| d == k.name) {
                "default, "
            } else {
                ""
            };
            out.push_str(&format!(
                "{} = {}  # {tag}{}\n",
                k.name,
                self.raw(k.name),
                k.doc
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_every_key() {
        let c = RunConfig::defaults();
        assert_eq!(c.defaulted().len(), KEYS.len());
        assert_eq!(c.count("schedule.T", 1).unwrap(), 100);
        assert_eq!(c.counts("ablate.t0", 1).unwrap(), vec![40, 50, 60]);
        assert_eq!(c.floats("ablate.gamma"), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(!c.flag("edit.tuned"));
        assert_eq!(c.float_or_same("edit.inversion_gamma"), None);
        let d = RunConfig::parse("edit.inversion_gamma = 1").unwrap();
        assert_eq!(d.float_or_same("edit.inversion_gamma"), Some(1.0));
        assert_eq!(c.echo().lines().count(), KEYS.len());
    }

    #[test]
    fn hash_is_stable_under_reordering_and_formatting() {
        let a = RunConfig::parse("schedule.T = 80\nedit.gamma = 2\n").unwrap();
        let b =
            RunConfig::parse("# comment\nedit.gamma=2.0   # inline\n\n  schedule.T =80\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse("schedule.T = 81\nedit.gamma = 2\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn explicit_default_hashes_like_omitted() {
        let a = RunConfig::parse("edit.gamma = 3").unwrap();
        assert_eq!(a.hash(), RunConfig::defaults().hash());
        assert!(!a.defaulted().iter().any(|k| k == "edit.gamma"));
    }

    #[test]
    fn rejects_unknown_malformed_and_duplicate_keys() {
        assert!(matches!(
            RunConfig::parse("edit.zeta = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("edit.t0"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("edit.t0 = fifty"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("edit.gamma = nan"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("edit.inversion_gamma = other"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("first_stage.mode = vae"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn count_enforces_minimum() {
        let c = RunConfig::parse("train.epochs = 0").unwrap();
        assert!(c.count("train.epochs", 1).is_err());
        let c = RunConfig::parse("ablate.t0 = 40,-1").unwrap();
        assert!(c.counts("ablate.t0", 1).is_err());
    }
}
