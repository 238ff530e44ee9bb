//! Frozen evaluators trained on clean renders: an emotion classifier whose
//! penultimate features double as the embedding oracle, and an identity
//! embedder built from a parameter regressor and a random Fourier head.

use std::f64::consts::PI;

use super::dataset::Dataset;
use super::render::{IDENTITY_DIM, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::numerics::{fit_minibatches, Graph, Mlp, Optimizer, ParamSet, RngStream, Tensor, Var};

/// Added under the square root of row norms recorded on a graph.
pub const NORM_EPS: f64 = 1e-12;
pub const ORACLE_MIN_ACCURACY: f64 = 0.98;
pub const EMBEDDER_MIN_AUC: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Std of Gaussian pixel noise added to training images.
    pub augment_noise: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            epochs: 40,
            learning_rate: 2e-3,
            batch_size: 64,
            augment_noise: 0.2,
        }
    }
}

fn noisy_batch(images: &Tensor, idx: &[usize], noise: f64, rng: &mut RngStream) -> Result<Tensor> {
    let x = images.select_rows(idx);
    if noise == 0.0 {
        return Ok(x);
    }
    let n = rng.gaussian(x.shape())?;
    Ok(x.lincomb(1.0, &n, noise))
}

fn dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(out);
    d
}

/// Emotion classifier; its normalized penultimate activations are the image
/// embedding and per-class mean embeddings are the class prototypes.
#[derive(Clone, Debug)]
pub struct EmotionOracle {
    mlp: Mlp,
    params: ParamSet,
    prototypes: Tensor,
}

impl EmotionOracle {
    /// Trains on `data`; `shuffle_labels` permutes targets (sanity baseline).
    pub fn train(
        data: &Dataset,
        cfg: &OracleConfig,
        rng: &mut RngStream,
        shuffle_labels: bool,
    ) -> Result<(Self, Vec<f64>)> {
        if data.is_empty() {
            return Err(Error::EmptyInput("oracle training set".into()));
        }
        let mut labels = data.labels();
        if shuffle_labels {
            let perm = rng.permutation(labels.len());
            labels = perm.iter().map(|&i| labels[i]).collect();
        }
        let mut params = ParamSet::new();
        let mlp = Mlp::init(
            &mut params,
            "oracle",
            &dims(data.images.cols(), &cfg.hidden, NUM_EMOTIONS),
            rng,
        );
        let mut opt = Optimizer::adamw(cfg.learning_rate, 0.0);
        let mut aug = rng.split(1);
        let curve = fit_minibatches(
            &mut params,
            &mut opt,
            data.len(),
            cfg.batch_size,
            cfg.epochs,
            rng,
            |g, vars, idx| {
                let x = g.constant(noisy_batch(&data.images, idx, cfg.augment_noise, &mut aug)?);
                let logits = mlp.forward(g, vars, x);
                Ok(g.softmax_xent(logits, idx.iter().map(|&i| labels[i]).collect()))
            },
        )?;
        let mut oracle = Self {
            mlp,
            params,
            prototypes: Tensor::zeros(&[NUM_EMOTIONS, 1]),
        };
        oracle.prototypes = oracle.compute_prototypes(data)?;
        Ok((oracle, curve))
    }

    /// Trains and requires held-out accuracy of at least 98 %.
    pub fn calibrate(
        train: &Dataset,
        heldout: &Dataset,
        cfg: &OracleConfig,
        rng: &mut RngStream,
    ) -> Result<(Self, f64)> {
        let (oracle, _) = Self::train(train, cfg, rng, false)?;
        let acc = oracle.accuracy(&heldout.images, &heldout.labels())?;
        if acc < ORACLE_MIN_ACCURACY {
            return Err(Error::Calibration(format!(
                "emotion oracle held-out accuracy {acc:.4} below {ORACLE_MIN_ACCURACY}"
            )));
        }
        Ok((oracle, acc))
    }

    fn compute_prototypes(&self, data: &Dataset) -> Result<Tensor> {
        let emb = self.image_embed(&data.images)?;
        let f = emb.cols();
        let mut sums = Tensor::zeros(&[NUM_EMOTIONS, f]);
        for (i, s) in data.specs.iter().enumerate() {
            for (o, v) in sums.row_mut(s.emotion).iter_mut().zip(emb.row(i)) {
                *o += v;
            }
        }
        for c in 0..NUM_EMOTIONS {
            let row = sums.row_mut(c);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < crate::numerics::DEGENERATE_NORM {
                return Err(Error::Calibration(format!(
                    "class {c} has a degenerate prototype"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(sums)
    }

    /// Untrained oracle with random weights and prototypes, for gradient
    /// checks and plumbing tests.
    pub fn random(input_dim: usize, hidden: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut params = ParamSet::new();
        Mlp::init(
            &mut params,
            "oracle",
            &dims(input_dim, hidden, NUM_EMOTIONS),
            rng,
        );
        let mut protos = rng.gaussian(&[NUM_EMOTIONS, *hidden.last().unwrap_or(&input_dim)])?;
        for c in 0..NUM_EMOTIONS {
            let row = protos.row_mut(c);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::from_parts(params, hidden, input_dim, protos)
    }

    pub fn from_parts(
        params: ParamSet,
        hidden: &[usize],
        input_dim: usize,
        prototypes: Tensor,
    ) -> Result<Self> {
        let mut template = ParamSet::new();
        let mlp = Mlp::init(
            &mut template,
            "oracle",
            &dims(input_dim, hidden, NUM_EMOTIONS),
            &mut RngStream::new(0, 0),
        );
        check_layout(&template, &params)?;
        if prototypes.rows() != NUM_EMOTIONS
            || prototypes.cols() != *hidden.last().unwrap_or(&input_dim)
        {
            return Err(Error::ShapeMismatch(format!(
                "prototype table {:?}",
                prototypes.shape()
            )));
        }
        Ok(Self {
            mlp,
            params,
            prototypes,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.mlp.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "oracle input {:?}, expected {} columns",
                x.shape(),
                self.mlp.input_dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.as_matrix();
        self.check_input(&x)?;
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let out = self.mlp.forward(&mut g, &vars, xv);
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(images)?;
        Ok((0..l.rows())
            .map(|r| {
                let row = l.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.predict(images)?;
        if p.len() != labels.len() || p.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} labels",
                p.len(),
                labels.len()
            )));
        }
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / p.len() as f64)
    }

    /// Records the unit-norm image embedding of the `[B, d]` node `x`.
    pub fn record_embed(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Var {
        let acts = self.mlp.forward_all(g, vars, x);
        let feats = acts[acts.len() - 2];
        g.row_normalize(feats, NORM_EPS)
    }

    /// Unit-norm penultimate features, one row per image.
    pub fn image_embed(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.as_matrix();
        self.check_input(&x)?;
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let e = self.record_embed(&mut g, &vars, xv);
        Ok(g.value(e).clone())
    }

    /// Unit-norm class prototype.
    pub fn class_embed(&self, label: usize) -> Result<Tensor> {
        if label >= NUM_EMOTIONS {
            return Err(Error::Label {
                label,
                num_classes: NUM_EMOTIONS,
            });
        }
        Ok(Tensor::vector(self.prototypes.row(label).to_vec()))
    }
}

fn check_layout(template: &ParamSet, params: &ParamSet) -> Result<()> {
    if template.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tensors, expected {}",
            params.len(),
            template.len()
        )));
    }
    for i in 0..template.len() {
        if template.name(i) != params.name(i) || template.get(i).shape() != params.get(i).shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {i}: '{}' {:?}, expected '{}' {:?}",
                params.name(i),
                params.get(i).shape(),
                template.name(i),
                template.get(i).shape()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub augment_noise: f64,
    /// Random Fourier feature count.
    pub features: usize,
    /// Kernel length scale in identity-parameter units.
    pub length_scale: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 60,
            learning_rate: 2e-3,
            batch_size: 64,
            augment_noise: 0.02,
            features: 128,
            length_scale: 0.35,
        }
    }
}

/// Identity embedding `normalize(cos(r(x)·W + b))`, where `r` regresses the
/// identity parameters of a face.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    mlp: Mlp,
    params: ParamSet,
    rff_w: usize,
    rff_b: usize,
}

impl IdentityEmbedder {
    pub fn train(
        data: &Dataset,
        cfg: &EmbedderConfig,
        rng: &mut RngStream,
    ) -> Result<(Self, Vec<f64>)> {
        if data.is_empty() {
            return Err(Error::EmptyInput("embedder training set".into()));
        }
        let mut params = ParamSet::new();
        let mlp = Mlp::init(
            &mut params,
            "identity",
            &dims(data.images.cols(), &cfg.hidden, IDENTITY_DIM),
            rng,
        );
        let target = Tensor::new(
            &[data.len(), IDENTITY_DIM],
            data.specs.iter().flat_map(|s| s.identity).collect(),
        )?;
        let mut opt = Optimizer::adamw(cfg.learning_rate, 0.0);
        let mut aug = rng.split(2);
        let curve = fit_minibatches(
            &mut params,
            &mut opt,
            data.len(),
            cfg.batch_size,
            cfg.epochs,
            rng,
            |g, vars, idx| {
                let x = g.constant(noisy_batch(&data.images, idx, cfg.augment_noise, &mut aug)?);
                let y = g.constant(target.select_rows(idx));
                let p = mlp.forward(g, vars, x);
                let d = g.sub(p, y);
                let sq = g.square(d);
                Ok(g.mean(sq))
            },
        )?;
        let w = rng
            .gaussian(&[IDENTITY_DIM, cfg.features])?
            .scale(1.0 / cfg.length_scale);
        let b = rng.uniform_tensor(&[cfg.features], 0.0, 2.0 * PI)?;
        let rff_w = params.push("rff.w", w);
        let rff_b = params.push("rff.b", b);
        Ok((
            Self {
                mlp,
                params,
                rff_w,
                rff_b,
            },
            curve,
        ))
    }

    /// Trains and requires the triple ranking rate on `heldout` to reach 0.95.
    pub fn calibrate(
        train: &Dataset,
        heldout: &Dataset,
        cfg: &EmbedderConfig,
        rng: &mut RngStream,
    ) -> Result<(Self, f64)> {
        let (emb, _) = Self::train(train, cfg, rng)?;
        let mut trng = rng.split(3);
        let auc = emb.triple_rate(heldout, 2000, &mut trng)?;
        if auc < EMBEDDER_MIN_AUC {
            return Err(Error::Calibration(format!(
                "identity embedder triple rate {auc:.4} below {EMBEDDER_MIN_AUC}"
            )));
        }
        Ok((emb, auc))
    }

    /// Untrained embedder with random weights.
    pub fn random(
        input_dim: usize,
        hidden: &[usize],
        features: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        Mlp::init(
            &mut params,
            "identity",
            &dims(input_dim, hidden, IDENTITY_DIM),
            rng,
        );
        params.push("rff.w", rng.gaussian(&[IDENTITY_DIM, features])?);
        params.push(
            "rff.b",
            rng.uniform_tensor(&[features], 0.0, std::f64::consts::TAU)?,
        );
        Self::from_params(params, hidden, input_dim, features)
    }

    pub fn from_params(
        params: ParamSet,
        hidden: &[usize],
        input_dim: usize,
        features: usize,
    ) -> Result<Self> {
        let mut template = ParamSet::new();
        let mlp = Mlp::init(
            &mut template,
            "identity",
            &dims(input_dim, hidden, IDENTITY_DIM),
            &mut RngStream::new(0, 0),
        );
        let rff_w = template.push("rff.w", Tensor::zeros(&[IDENTITY_DIM, features]));
        let rff_b = template.push("rff.b", Tensor::zeros(&[features]));
        check_layout(&template, &params)?;
        Ok(Self {
            mlp,
            params,
            rff_w,
            rff_b,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn features(&self) -> usize {
        self.params.get(self.rff_b).len()
    }

    /// Regressed identity parameters, one row per image.
    pub fn regress(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.as_matrix();
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let p = self.mlp.forward(&mut g, &vars, xv);
        Ok(g.value(p).clone())
    }

    pub fn record_embed(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Var {
        let p = self.mlp.forward(g, vars, x);
        let h = g.matmul(p, vars[self.rff_w]);
        let h = g.add_row(h, vars[self.rff_b]);
        let h = g.cos(h);
        g.row_normalize(h, NORM_EPS)
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.as_matrix();
        if x.cols() != self.mlp.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "embedder input {:?}",
                images.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let e = self.record_embed(&mut g, &vars, xv);
        Ok(g.value(e).clone())
    }

    /// Fraction of sampled (anchor, same identity other emotion, other
    /// identity) triples where the positive is closer to the anchor.
    pub fn triple_rate(&self, data: &Dataset, triples: usize, rng: &mut RngStream) -> Result<f64> {
        let emb = self.embed(&data.images)?;
        let groups = identity_groups(data);
        let multi: Vec<usize> = (0..data.len())
            .filter(|&i| groups[&data.identity_ids[i]].len() > 1)
            .collect();
        if multi.is_empty() || groups.len() < 2 || triples == 0 {
            return Err(Error::EmptyInput(
                "triples need two identities with repeated renders".into(),
            ));
        }
        let dot = |i: usize, j: usize| {
            emb.row(i)
                .iter()
                .zip(emb.row(j))
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let mut wins = 0;
        for _ in 0..triples {
            let a = multi[rng.uniform_int(0, multi.len() - 1)];
            let (p, q) = sample_pair(data, &groups, a, rng);
            if dot(a, p) > dot(a, q) {
                wins += 1;
            }
        }
        Ok(wins as f64 / triples as f64)
    }
}

/// Item indices per identity id.
pub fn identity_groups(data: &Dataset) -> std::collections::BTreeMap<usize, Vec<usize>> {
    let mut groups = std::collections::BTreeMap::new();
    for (i, &id) in data.identity_ids.iter().enumerate() {
        groups.entry(id).or_insert_with(Vec::new).push(i);
    }
    groups
}

/// For anchor `a`: another item of the same identity and an item of a
/// different identity.
pub fn sample_pair(
    data: &Dataset,
    groups: &std::collections::BTreeMap<usize, Vec<usize>>,
    a: usize,
    rng: &mut RngStream,
) -> (usize, usize) {
    let same = &groups[&data.identity_ids[a]];
    let p = loop {
        let c = same[rng.uniform_int(0, same.len() - 1)];
        if c != a {
            break c;
        }
    };
    let q = loop {
        let c = rng.uniform_int(0, data.len() - 1);
        if data.identity_ids[c] != data.identity_ids[a] {
            break c;
        }
    };
    (p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_similarity;
    use std::sync::OnceLock;

    struct Fixture {
        heldout: Dataset,
        oracle: EmotionOracle,
        embedder: IdentityEmbedder,
        train: Dataset,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let mut rng = RngStream::new(21, 0);
            let train = Dataset::generate(150, 16, &mut rng).unwrap();
            let heldout = Dataset::generate(40, 16, &mut rng).unwrap();
            let (oracle, _) =
                EmotionOracle::calibrate(&train, &heldout, &OracleConfig::default(), &mut rng)
                    .unwrap();
            let (embedder, _) =
                IdentityEmbedder::calibrate(&train, &heldout, &EmbedderConfig::default(), &mut rng)
                    .unwrap();
            Fixture {
                heldout,
                oracle,
                embedder,
                train,
            }
        })
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn oracle_meets_accuracy_target() {
        let f = fixture();
        let acc = f
            .oracle
            .accuracy(&f.heldout.images, &f.heldout.labels())
            .unwrap();
        assert!(acc >= ORACLE_MIN_ACCURACY, "{acc}");
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let f = fixture();
        let cfg = OracleConfig {
            epochs: 10,
            ..OracleConfig::default()
        };
        let (o, _) = EmotionOracle::train(&f.train, &cfg, &mut RngStream::new(3, 3), true).unwrap();
        let acc = o.accuracy(&f.heldout.images, &f.heldout.labels()).unwrap();
        assert!(acc < 0.35, "{acc}");
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let f = fixture();
        let e = f.oracle.image_embed(&f.heldout.images).unwrap();
        let i = f.embedder.embed(&f.heldout.images).unwrap();
        for r in 0..e.rows() {
            let n1 = e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n2 = i.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n1 - 1.0).abs() < 1e-9 && (n2 - 1.0).abs() < 1e-9);
        }
        for c in 0..NUM_EMOTIONS {
            assert!((f.oracle.class_embed(c).unwrap().norm() - 1.0).abs() < 1e-9);
        }
        assert_eq!(e, f.oracle.image_embed(&f.heldout.images).unwrap());
        assert!(f.oracle.class_embed(NUM_EMOTIONS).is_err());
    }

    #[test]
    fn same_identity_beats_cross_identity_median() {
        let f = fixture();
        let d = &f.heldout;
        let emb = f.embedder.embed(&d.images).unwrap();
        let groups = identity_groups(d);
        let mut rng = RngStream::new(9, 0);
        let row = |i: usize| Tensor::vector(emb.row(i).to_vec());
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for _ in 0..500 {
            let a = rng.uniform_int(0, d.len() - 1);
            let (p, q) = sample_pair(d, &groups, a, &mut rng);
            same.push(cosine_similarity(&row(a), &row(p)).unwrap());
            cross.push(cosine_similarity(&row(a), &row(q)).unwrap());
        }
        let m = median(cross);
        assert!(same.iter().filter(|&&s| s > m).count() as f64 >= 0.95 * same.len() as f64);

        // noise images sit below the same-identity 5th percentile
        let mut sorted = same.clone();
        sorted.sort_by(f64::total_cmp);
        let p5 = sorted[sorted.len() / 20];
        let noise = rng.uniform_tensor(&[20, 256], 0.0, 1.0).unwrap();
        let ne = f.embedder.embed(&noise).unwrap();
        let mut below = 0;
        for r in 0..20 {
            let c = cosine_similarity(&Tensor::vector(ne.row(r).to_vec()), &row(r)).unwrap();
            if c < p5 {
                below += 1;
            }
        }
        assert!(below >= 19, "{below}/20 noise images below p5 {p5}");
    }

    #[test]
    fn from_parts_round_trip_and_mismatch() {
        let f = fixture();
        let o = EmotionOracle::from_parts(
            f.oracle.params().clone(),
            &[64, 32],
            256,
            f.oracle.prototypes().clone(),
        )
        .unwrap();
        assert_eq!(
            o.logits(&f.heldout.images).unwrap(),
            f.oracle.logits(&f.heldout.images).unwrap()
        );
        assert!(EmotionOracle::from_parts(
            f.oracle.params().clone(),
            &[64, 16],
            256,
            f.oracle.prototypes().clone()
        )
        .is_err());
        let e = IdentityEmbedder::from_params(f.embedder.params().clone(), &[64, 64], 256, 128)
            .unwrap();
        assert_eq!(
            e.embed(&f.heldout.images).unwrap(),
            f.embedder.embed(&f.heldout.images).unwrap()
        );
    }
}
