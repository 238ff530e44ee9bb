//! Image ↔ latent maps. `identity` passes pixels through; `ae` and `vq-ae`
//! use MLP encoder/decoder pairs, the latter snapping every latent vector to
//! its nearest codebook entry before decoding.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{fit_minibatches, Graph, Mlp, Optimizer, ParamSet, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FirstStageMode {
    Identity,
    Ae,
    VqAe,
}

impl FromStr for FirstStageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "ae" => Ok(Self::Ae),
            "vq-ae" => Ok(Self::VqAe),
            other => Err(Error::Config(format!("unknown first-stage mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for FirstStageMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Ae => "ae",
            Self::VqAe => "vq-ae",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstStageConfig {
    pub mode: FirstStageMode,
    /// Image extents `(H, W, C)`.
    pub image: [usize; 3],
    /// Spatial downsampling factor, a power of two (forced to 1 in identity mode).
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub codebook_size: usize,
    pub commit_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl FirstStageConfig {
    pub fn identity(image: [usize; 3]) -> Self {
        Self {
            mode: FirstStageMode::Identity,
            factor: 1,
            latent_channels: image[2],
            ..Self::vq(image)
        }
    }

    pub fn vq(image: [usize; 3]) -> Self {
        Self {
            mode: FirstStageMode::VqAe,
            image,
            factor: 4,
            latent_channels: 3,
            hidden: 256,
            codebook_size: 64,
            commit_weight: 0.25,
            epochs: 100,
            learning_rate: 2e-3,
            batch_size: 32,
        }
    }

    pub fn ae(image: [usize; 3]) -> Self {
        Self {
            mode: FirstStageMode::Ae,
            ..Self::vq(image)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.image;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidShape(
                self.image.to_vec(),
                "image extents must be positive".into(),
            ));
        }
        if self.mode == FirstStageMode::Identity {
            if self.factor != 1 || self.latent_channels != c {
                return Err(Error::Config(
                    "identity mode needs factor 1 and latent_channels = image channels".into(),
                ));
            }
            return Ok(());
        }
        if !self.factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {} is not a power of two",
                self.factor
            )));
        }
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::InvalidShape(
                self.image.to_vec(),
                format!("extents not divisible by factor {}", self.factor),
            ));
        }
        if self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "latent_channels and hidden must be positive".into(),
            ));
        }
        if self.mode == FirstStageMode::VqAe && self.codebook_size < 2 {
            return Err(Error::Config(format!(
                "codebook size {} must be at least 2",
                self.codebook_size
            )));
        }
        Ok(())
    }

    pub fn image_dim(&self) -> usize {
        self.image.iter().product()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.image[0] / self.factor,
            self.image[1] / self.factor,
            self.latent_channels,
        ]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }
}

/// Result of snapping latent vectors to a codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub z_q: Tensor,
    pub indices: Vec<usize>,
    /// `mean ‖z − z_q‖²` over all latent scalars.
    pub commit_loss: f64,
}

/// `K` entries of dimension `c` with per-entry usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Tensor,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() < 2 {
            return Err(Error::InvalidShape(
                entries.shape().to_vec(),
                "codebook needs [K >= 2, c]".into(),
            ));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        let k = entries.rows();
        Ok(Self {
            entries,
            usage: vec![0; k],
        })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// Index of the nearest entry under L2; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.len() {
            let d: f64 = self
                .entries
                .row(k)
                .iter()
                .zip(v)
                .map(|(e, x)| (e - x) * (e - x))
                .sum();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Quantizes a latent whose trailing extent (or row length, grouped by
    /// `c`) is the entry dimension. Records usage.
    pub fn quantize(&mut self, z: &Tensor) -> Result<Quantized> {
        let q = quantize(&self.entries, z)?;
        for &i in &q.indices {
            self.usage[i] += 1;
        }
        Ok(q)
    }

    pub fn used_fraction(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.len() as f64
    }
}

/// Nearest-entry replacement of every consecutive `c`-group of `z`.
pub fn quantize(entries: &Tensor, z: &Tensor) -> Result<Quantized> {
    let c = entries.cols();
    if c == 0
        || !z.len().is_multiple_of(c)
        || (z.shape().len() > 1 && !z.shape()[z.shape().len() - 1].is_multiple_of(c))
    {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs codebook entry dim {c}",
            z.shape()
        )));
    }
    let book = Codebook {
        entries: entries.clone(),
        usage: Vec::new(),
    };
    let mut out = Vec::with_capacity(z.len());
    let mut indices = Vec::with_capacity(z.len() / c);
    let mut commit = 0.0;
    for v in z.data().chunks(c) {
        let k = book.nearest(v);
        let e = entries.row(k);
        commit += v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        out.extend_from_slice(e);
        indices.push(k);
    }
    Ok(Quantized {
        z_q: Tensor::new(z.shape(), out)?,
        indices,
        commit_loss: commit / z.len() as f64,
    })
}

#[derive(Clone, Debug)]
pub struct FirstStage {
    config: FirstStageConfig,
    params: ParamSet,
    nets: Option<(Mlp, Mlp)>,
    codebook: Option<usize>,
    usage: Vec<u64>,
}

impl FirstStage {
    pub fn new(config: FirstStageConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        if config.mode == FirstStageMode::Identity {
            return Ok(Self {
                config,
                params,
                nets: None,
                codebook: None,
                usage: Vec::new(),
            });
        }
        let (d, l, h) = (config.image_dim(), config.latent_dim(), config.hidden);
        let enc = Mlp::init(&mut params, "encoder", &[d, h, l], rng);
        let dec = Mlp::init(&mut params, "decoder", &[l, h, d], rng);
        let codebook = if config.mode == FirstStageMode::VqAe {
            let e = rng.gaussian(&[config.codebook_size, config.latent_channels])?;
            Some(params.push("codebook", e))
        } else {
            None
        };
        let usage = vec![
            0;
            if codebook.is_some() {
                config.codebook_size
            } else {
                0
            }
        ];
        Ok(Self {
            config,
            params,
            nets: Some((enc, dec)),
            codebook,
            usage,
        })
    }

    /// Rebuilds from stored parameters, checking names and shapes.
    pub fn from_params(config: FirstStageConfig, params: ParamSet) -> Result<Self> {
        let mut fs = Self::new(config, &mut RngStream::new(0, 0))?;
        if fs.params.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "first stage expects {} tensors, got {}",
                fs.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if fs.params.name(i) != name || fs.params.get(i).shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "first-stage tensor '{name}' {:?}",
                    t.shape()
                )));
            }
        }
        fs.params = params;
        Ok(fs)
    }

    pub fn config(&self) -> &FirstStageConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn mode(&self) -> FirstStageMode {
        self.config.mode
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn codebook(&self) -> Option<Codebook> {
        self.codebook.map(|i| Codebook {
            entries: self.params.get(i).clone(),
            usage: self.usage.clone(),
        })
    }

    fn check_rows(&self, x: &Tensor, dim: usize, what: &str) -> Result<Tensor> {
        let m = x.as_matrix();
        if m.cols() != dim {
            return Err(Error::InvalidShape(
                x.shape().to_vec(),
                format!("{what} expects {dim} values per row"),
            ));
        }
        Ok(m)
    }

    /// `[N, H·W·C]` (or one flat image) → `[N, h·w·c]` continuous latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.check_rows(x, self.config.image_dim(), "encode")?;
        let Some((enc, _)) = &self.nets else {
            return Ok(x.clone());
        };
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let xv = g.constant(m);
        let z = enc.forward(&mut g, &vars, xv);
        let z = g.value(z).clone();
        if x.shape().len() == 1 {
            z.into_reshape(&[self.latent_dim()])
        } else {
            Ok(z)
        }
    }

    /// Latents → images; vq mode quantizes first.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let m = self.check_rows(z, self.latent_dim(), "decode")?;
        if self.nets.is_none() {
            return Ok(z.clone());
        }
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let zv = g.constant(m);
        let x = self.record_decode(&mut g, &vars, zv)?;
        let x = g.value(x).clone();
        if z.shape().len() == 1 {
            x.into_reshape(&[self.config.image_dim()])
        } else {
            Ok(x)
        }
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Records decoding of a `[B, latent]` node. Quantization is
    /// straight-through: the value is `z_q`, the Jacobian w.r.t. `z` is the
    /// identity.
    pub fn record_decode<'a>(&self, g: &mut Graph<'a>, vars: &[Var], z: Var) -> Result<Var> {
        let Some((_, dec)) = &self.nets else {
            return Ok(z);
        };
        let z = match self.codebook {
            Some(cb) => {
                let q = quantize(self.params.get(cb), g.value(z))?;
                let shift = q.z_q.sub(g.value(z));
                let shift = g.constant(shift);
                g.add(z, shift)
            }
            None => z,
        };
        Ok(dec.forward(g, vars, z))
    }

    /// Codebook quantization of a latent (vq mode only).
    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        let cb = self
            .codebook
            .ok_or_else(|| Error::Contract(format!("{} mode has no codebook", self.mode())))?;
        quantize(self.params.get(cb), z)
    }

    /// Fraction of codebook entries selected by at least one latent of `x`.
    pub fn codebook_usage(&self, x: &Tensor) -> Result<f64> {
        let mut book = self
            .codebook()
            .ok_or_else(|| Error::Contract("no codebook".into()))?;
        book.usage.iter_mut().for_each(|u| *u = 0);
        book.quantize(&self.encode(x)?)?;
        Ok(book.used_fraction())
    }

    /// Minimizes per-pixel ℓ1 reconstruction (plus commitment and codebook
    /// terms in vq mode). Returns the mean loss of every epoch.
    pub fn train(&mut self, data: &Tensor, rng: &mut RngStream) -> Result<Vec<f64>> {
        let data = self.check_rows(data, self.config.image_dim(), "train")?;
        if data.rows() == 0 {
            return Err(Error::EmptyInput("first-stage training set".into()));
        }
        let Some((enc, dec)) = self.nets.clone() else {
            return Ok(vec![0.0; self.config.epochs]);
        };
        let cfg = self.config.clone();
        let c = cfg.latent_channels;
        let mut opt = Optimizer::adamw(cfg.learning_rate, 0.0);
        let mut curve: Vec<f64> = Vec::with_capacity(cfg.epochs);
        if let Some(cb) = self.codebook {
            // seed entries from encoder outputs so every entry starts in range
            let z = self.encode(&data)?;
            let groups = z.len() / c;
            let mut entries = Tensor::zeros(&[cfg.codebook_size, c]);
            for k in 0..cfg.codebook_size {
                let gi = rng.uniform_int(0, groups - 1);
                entries
                    .row_mut(k)
                    .copy_from_slice(&z.data()[gi * c..(gi + 1) * c]);
            }
            *self.params.get_mut(cb) = entries;
        }
        for epoch in 0..cfg.epochs {
            let mut usage = vec![0u64; cfg.codebook_size];
            let codebook = self.codebook;
            let losses = fit_minibatches(
                &mut self.params,
                &mut opt,
                data.rows(),
                cfg.batch_size,
                1,
                rng,
                |g, vars, idx| {
                    let x = g.constant(data.select_rows(idx));
                    let z = enc.forward(g, vars, x);
                    let (zd, extra) = match codebook {
                        None => (z, None),
                        Some(cb) => {
                            let q = quantize(g.value(vars[cb]), g.value(z))?;
                            for &i in &q.indices {
                                usage[i] += 1;
                            }
                            let shift = g.constant(q.z_q.sub(g.value(z)));
                            let st = g.add(z, shift);
                            let rows = q.indices.len();
                            let zg = g.reshape(z, &[rows, c]);
                            let e = g.gather(vars[cb], q.indices);
                            // commitment pulls the encoder, the codebook term pulls entries
                            let zc = g.constant(g.value(zg).clone());
                            let eq = g.constant(g.value(e).clone());
                            let d1 = g.sub(zg, eq);
                            let d1 = g.square(d1);
                            let commit = g.mean(d1);
                            let d2 = g.sub(e, zc);
                            let d2 = g.square(d2);
                            let book = g.mean(d2);
                            let reg = g.lincomb(commit, cfg.commit_weight, book, 1.0);
                            (st, Some(reg))
                        }
                    };
                    let xh = dec.forward(g, vars, zd);
                    let diff = g.sub(xh, x);
                    let a = g.abs(diff);
                    let l1 = g.mean(a);
                    Ok(match extra {
                        Some(r) => g.add(l1, r),
                        None => l1,
                    })
                },
            )?;
            let loss = losses[0];
            if let Some(&first) = curve.first() {
                if loss > 10.0 * first {
                    return Err(Error::Divergence(format!(
                        "first stage epoch {epoch}: loss {loss} vs initial {first}"
                    )));
                }
            }
            curve.push(loss);
            if let Some(cb) = self.codebook {
                self.reseed_dead(cb, &usage, &data, rng)?;
                self.usage = usage;
            }
        }
        Ok(curve)
    }

    /// Entries unused for a whole epoch move to random encoder outputs.
    fn reseed_dead(
        &mut self,
        cb: usize,
        usage: &[u64],
        data: &Tensor,
        rng: &mut RngStream,
    ) -> Result<()> {
        let dead: Vec<usize> = (0..usage.len()).filter(|&k| usage[k] == 0).collect();
        if dead.is_empty() {
            return Ok(());
        }
        let c = self.config.latent_channels;
        let picks: Vec<usize> = dead
            .iter()
            .map(|_| rng.uniform_int(0, data.rows() - 1))
            .collect();
        let z = self.encode(&data.select_rows(&picks))?;
        let per = self.latent_dim() / c;
        let book = self.params.get_mut(cb);
        for (j, &k) in dead.iter().enumerate() {
            let gi = rng.uniform_int(0, per - 1);
            book.row_mut(k)
                .copy_from_slice(&z.row(j)[gi * c..(gi + 1) * c]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_mode_is_exact() {
        let fs = FirstStage::new(
            FirstStageConfig::identity([16, 16, 1]),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        let x = RngStream::new(1, 0)
            .uniform_tensor(&[3, 256], 0.0, 1.0)
            .unwrap();
        assert_eq!(fs.encode(&x).unwrap(), x);
        assert_eq!(fs.decode(&x).unwrap(), x);
        assert_eq!(fs.latent_dim(), 256);
        let mut fs = fs;
        assert_eq!(
            fs.train(&x, &mut RngStream::new(0, 0)).unwrap(),
            vec![0.0; 100]
        );
    }

    #[test]
    fn shapes() {
        let cfg = FirstStageConfig::vq([16, 16, 1]);
        assert_eq!(cfg.latent_shape(), [4, 4, 3]);
        let fs = FirstStage::new(cfg, &mut RngStream::new(0, 0)).unwrap();
        let x = Tensor::zeros(&[256]);
        let z = fs.encode(&x).unwrap();
        assert_eq!(z.shape(), &[48]);
        assert_eq!(fs.decode(&z).unwrap().shape(), &[256]);
        let xb = Tensor::zeros(&[5, 256]);
        assert_eq!(
            fs.decode(&fs.encode(&xb).unwrap()).unwrap().shape(),
            &[5, 256]
        );
        for f in [1, 2, 4, 8, 16] {
            let cfg = FirstStageConfig {
                factor: f,
                ..FirstStageConfig::ae([16, 16, 1])
            };
            let fs = FirstStage::new(cfg, &mut RngStream::new(0, 0)).unwrap();
            assert_eq!(fs.reconstruct(&xb).unwrap().shape(), &[5, 256]);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = FirstStageConfig {
            factor: 3,
            ..FirstStageConfig::vq([16, 16, 1])
        };
        assert!(FirstStage::new(bad, &mut RngStream::new(0, 0)).is_err());
        let bad = FirstStageConfig {
            factor: 8,
            ..FirstStageConfig::vq([12, 12, 1])
        };
        assert!(matches!(
            FirstStage::new(bad, &mut RngStream::new(0, 0)),
            Err(Error::InvalidShape(..))
        ));
        let bad = FirstStageConfig {
            codebook_size: 1,
            ..FirstStageConfig::vq([16, 16, 1])
        };
        assert!(FirstStage::new(bad, &mut RngStream::new(0, 0)).is_err());
        assert!("gan".parse::<FirstStageMode>().is_err());
        assert_eq!(
            "vq-ae".parse::<FirstStageMode>().unwrap(),
            FirstStageMode::VqAe
        );
    }

    #[test]
    fn quantize_examples() {
        let book = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, -1.0, 2.0]).unwrap();
        let q = quantize(&book, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.commit_loss, 0.0);
        let scalar = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        assert_eq!(
            quantize(&scalar, &Tensor::vector(vec![0.2]))
                .unwrap()
                .indices,
            vec![1]
        );
        // equidistant: lowest index wins
        assert_eq!(
            quantize(&scalar, &Tensor::vector(vec![0.0]))
                .unwrap()
                .indices,
            vec![0]
        );
        assert!(quantize(&book, &Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = RngStream::new(4, 0);
        let book = rng.gaussian(&[16, 3]).unwrap();
        let z = rng.gaussian(&[10, 12]).unwrap();
        let q1 = quantize(&book, &z).unwrap();
        let q2 = quantize(&book, &q1.z_q).unwrap();
        assert_eq!(q1.indices, q2.indices);
        assert_eq!(q1.z_q, q2.z_q);
        assert_eq!(q2.commit_loss, 0.0);
    }

    #[test]
    fn straight_through_gradient() {
        // d(sum(w ⊙ decode_input))/dz equals w: the quantizer passes gradients unchanged
        let fs =
            FirstStage::new(FirstStageConfig::vq([8, 8, 1]), &mut RngStream::new(0, 0)).unwrap();
        let z = RngStream::new(2, 0).gaussian(&[2, 12]).unwrap();
        let mut g = Graph::new();
        let vars = fs.params.bind_frozen(&mut g);
        let zv = g.param_owned(z.clone());
        let q = quantize(fs.params.get(fs.codebook.unwrap()), &z).unwrap();
        let shift = g.constant(q.z_q.sub(&z));
        let st = g.add(zv, shift);
        assert!(g.value(st).sub(&q.z_q).max_abs() < 1e-12);
        let w = RngStream::new(3, 0).gaussian(&[2, 12]).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.mul(st, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(zv), w);
        assert!(vars.iter().all(|&v| !g.requires_grad(v)));
    }

    #[test]
    fn from_params_round_trip() {
        let fs =
            FirstStage::new(FirstStageConfig::vq([8, 8, 1]), &mut RngStream::new(5, 0)).unwrap();
        let again = FirstStage::from_params(fs.config().clone(), fs.params().clone()).unwrap();
        let x = RngStream::new(1, 0)
            .uniform_tensor(&[2, 64], 0.0, 1.0)
            .unwrap();
        assert_eq!(fs.reconstruct(&x).unwrap(), again.reconstruct(&x).unwrap());
        assert!(
            FirstStage::from_params(FirstStageConfig::ae([8, 8, 1]), fs.params().clone()).is_err()
        );
    }
}
