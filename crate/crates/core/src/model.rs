//! Encoder E, mapping network M, domain discriminator D and identity
//! discriminator I, with parameters partitioned into four disjoint groups.
//!
//! E is a stack of stride-2 3 × 3 conv/BN/ReLU stages. M is one more such
//! stage followed by global average pooling; its output is the embedding `m`.
//! D is `FC(hidden) → BN → ReLU → FC(2)` and I is an optional BN neck followed
//! by `FC(num_identities)`.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_synth::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{self, BnCache, MapShape};

/// Two domain classes: index 0 peripheral, index 1 central.
pub const NUM_DOMAIN_CLASSES: usize = 2;
pub const CENTRAL_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: ImageShape,
    /// Output channels of each encoder stage.
    pub encoder_widths: Vec<usize>,
    /// Output channels of the mapping stage, i.e. the embedding width.
    pub embedding_dim: usize,
    pub domain_hidden: usize,
    pub num_identities: usize,
    pub use_bnneck: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(input: ImageShape, num_identities: usize) -> Self {
        Self {
            input,
            encoder_widths: vec![16, 32],
            embedding_dim: 64,
            domain_hidden: 128,
            num_identities,
            use_bnneck: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::InvalidArgument("embedding_dim must be >= 2".into()));
        }
        if self.num_identities < 2 {
            return Err(Error::InvalidArgument("num_identities must be >= 2".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::InvalidArgument("encoder needs at least one non-empty stage".into()));
        }
        if self.domain_hidden == 0 {
            return Err(Error::InvalidArgument("domain_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which parameter group an array belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// θ_e
    Encoder,
    /// θ_m
    Mapping,
    /// θ_d
    Domain,
    /// θ_i
    Identity,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Mapping, Group::Domain, Group::Identity];
}

/// An ordered, named collection of learnable arrays.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    fn push(&mut self, name: String, value: ArrayD<f64>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<ArrayD<f64>> {
        self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect()
    }

    fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values[i].view().into_dimensionality::<Ix1>().expect("1-D parameter")
    }

    fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        self.values[i].view().into_dimensionality::<Ix2>().expect("2-D parameter")
    }
}

/// θ_e, θ_m, θ_d, θ_i. The feature extractor θ_f is θ_e ∪ θ_m.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGroups {
    pub encoder: ParamSet,
    pub mapping: ParamSet,
    pub domain: ParamSet,
    pub identity: ParamSet,
}

impl ParamGroups {
    pub fn group(&self, g: Group) -> &ParamSet {
        match g {
            Group::Encoder => &self.encoder,
            Group::Mapping => &self.mapping,
            Group::Domain => &self.domain,
            Group::Identity => &self.identity,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamSet {
        match g {
            Group::Encoder => &mut self.encoder,
            Group::Mapping => &mut self.mapping,
            Group::Domain => &mut self.domain,
            Group::Identity => &mut self.identity,
        }
    }

    pub fn num_scalars(&self) -> usize {
        Group::ALL.iter().map(|&g| self.group(g).num_scalars()).sum()
    }

    /// Fully qualified names `group/param`, in group order.
    pub fn registry(&self) -> Vec<(Group, String)> {
        Group::ALL
            .iter()
            .flat_map(|&g| self.group(g).names.iter().map(move |n| (g, n.clone())))
            .collect()
    }
}

/// Per-group gradients aligned with [`ParamSet::values`].
pub type GroupGrads = Vec<ArrayD<f64>>;

/// Running mean / variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self {
            mean: Array1::zeros(c),
            var: Array1::ones(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    pub encoder: Vec<RunningStats>,
    pub mapping: RunningStats,
    pub domain: RunningStats,
    pub identity: Option<RunningStats>,
}

/// Batch-norm behaviour; always passed explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Which part of θ_f receives gradients in [`Model::backward_features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScope {
    /// θ_e and θ_m.
    Full,
    /// θ_m only; the encoder output is treated as a constant.
    MappingOnly,
}

#[derive(Debug, Clone)]
struct StageCache {
    in_shape: MapShape,
    cols: Array2<f64>,
    bn: Option<BnCache>,
    out: Array2<f64>,
}

/// Intermediate values of [`Model::forward_features`].
#[derive(Debug, Clone)]
pub struct FeatureCache {
    encoder: Vec<StageCache>,
    mapping: StageCache,
    map_shape: MapShape,
}

#[derive(Debug, Clone)]
pub struct DomainCache {
    input: Array2<f64>,
    bn: Option<BnCache>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct IdentityCache {
    input: Array2<f64>,
    bn: Option<BnCache>,
    neck: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub encoder: Option<GroupGrads>,
    pub mapping: GroupGrads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamGroups,
    pub buffers: Buffers,
}

const STAGE_STRIDE: usize = 2;

fn normal_array(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamGroups::default();

        let mut in_c = config.input.channels;
        let mut enc_stats = Vec::new();
        for (i, &out_c) in config.encoder_widths.iter().enumerate() {
            let std = (2.0 / (9 * in_c) as f64).sqrt();
            params.encoder.push(format!("stage{i}.conv"), normal_array(&mut rng, &[out_c, 9 * in_c], std));
            params.encoder.push(format!("stage{i}.bn.gamma"), ArrayD::ones(IxDyn(&[out_c])));
            params.encoder.push(format!("stage{i}.bn.beta"), ArrayD::zeros(IxDyn(&[out_c])));
            enc_stats.push(RunningStats::new(out_c));
            in_c = out_c;
        }

        let e = config.embedding_dim;
        let std = (2.0 / (9 * in_c) as f64).sqrt();
        params.mapping.push("conv".into(), normal_array(&mut rng, &[e, 9 * in_c], std));
        params.mapping.push("bn.gamma".into(), ArrayD::ones(IxDyn(&[e])));
        params.mapping.push("bn.beta".into(), ArrayD::zeros(IxDyn(&[e])));

        let hdim = config.domain_hidden;
        params.domain.push("fc1.weight".into(), normal_array(&mut rng, &[e, hdim], (2.0 / e as f64).sqrt()));
        params.domain.push("fc1.bias".into(), ArrayD::zeros(IxDyn(&[hdim])));
        params.domain.push("bn.gamma".into(), ArrayD::ones(IxDyn(&[hdim])));
        params.domain.push("bn.beta".into(), ArrayD::zeros(IxDyn(&[hdim])));
        params.domain.push("fc2.weight".into(), normal_array(&mut rng, &[hdim, NUM_DOMAIN_CLASSES], 0.01));
        params.domain.push("fc2.bias".into(), ArrayD::zeros(IxDyn(&[NUM_DOMAIN_CLASSES])));

        if config.use_bnneck {
            params.identity.push("neck.gamma".into(), ArrayD::ones(IxDyn(&[e])));
            params.identity.push("neck.beta".into(), ArrayD::zeros(IxDyn(&[e])));
        }
        params.identity.push("fc.weight".into(), normal_array(&mut rng, &[e, config.num_identities], 0.01));
        params.identity.push("fc.bias".into(), ArrayD::zeros(IxDyn(&[config.num_identities])));

        let buffers = Buffers {
            encoder: enc_stats,
            mapping: RunningStats::new(e),
            domain: RunningStats::new(hdim),
            identity: config.use_bnneck.then(|| RunningStats::new(e)),
        };
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn images_to_rows(&self, images: &Array4<f64>) -> Result<(Array2<f64>, MapShape)> {
        let (n, c, h, w) = images.dim();
        let want = self.config.input;
        if (c, h, w) != (want.channels, want.height, want.width) {
            return Err(Error::Shape(format!(
                "images are {c}x{h}x{w}, model expects {want}"
            )));
        }
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut rows = Array2::<f64>::zeros((n * h * w, c));
        for ((b, ch, y, x), &v) in images.indexed_iter() {
            rows[[(b * h + y) * w + x, ch]] = v;
        }
        Ok((rows, MapShape { n, h, w, c }))
    }

    fn stage_forward(
        x: &Array2<f64>,
        shape: MapShape,
        conv: ArrayView2<f64>,
        gamma: ArrayView1<f64>,
        beta: ArrayView1<f64>,
        stats: &RunningStats,
        mode: Mode,
    ) -> (StageCache, MapShape) {
        let cols = nn::im2col(x, shape, STAGE_STRIDE);
        let pre = cols.dot(&conv.t());
        let (mut out, bn) = match mode {
            Mode::Train => {
                let (y, cache) = nn::bn_forward_train(&pre, gamma, beta);
                (y, Some(cache))
            }
            Mode::Eval => (
                nn::bn_forward_eval(&pre, gamma, beta, stats.mean.view(), stats.var.view()),
                None,
            ),
        };
        nn::relu(&mut out);
        let out_shape = shape.conv_out(STAGE_STRIDE, conv.nrows());
        (
            StageCache {
                in_shape: shape,
                cols,
                bn,
                out,
            },
            out_shape,
        )
    }

    /// Embeddings `m = M(E(x))`, one row per image.
    pub fn forward_features(&self, images: &Array4<f64>, mode: Mode) -> Result<(Array2<f64>, FeatureCache)> {
        let (mut x, mut shape) = self.images_to_rows(images)?;
        let enc = &self.params.encoder;
        let mut caches = Vec::with_capacity(self.config.encoder_widths.len());
        for (i, stats) in self.buffers.encoder.iter().enumerate() {
            let (cache, out_shape) = Self::stage_forward(
                &x,
                shape,
                enc.mat(3 * i),
                enc.vec(3 * i + 1),
                enc.vec(3 * i + 2),
                stats,
                mode,
            );
            x = cache.out.clone();
            shape = out_shape;
            caches.push(cache);
        }
        let map = &self.params.mapping;
        let (mapping, map_shape) = Self::stage_forward(
            &x,
            shape,
            map.mat(0),
            map.vec(1),
            map.vec(2),
            &self.buffers.mapping,
            mode,
        );
        let emb = nn::gap_forward(&mapping.out, map_shape);
        Ok((
            emb,
            FeatureCache {
                encoder: caches,
                mapping,
                map_shape,
            },
        ))
    }

    /// Eval-mode embeddings.
    pub fn embed(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_features(images, Mode::Eval)?.0)
    }

    /// Returns `(d_input, [dconv, dgamma, dbeta])` for one stage.
    fn stage_backward(
        cache: &StageCache,
        dy: Array2<f64>,
        conv: ArrayView2<f64>,
        gamma: ArrayView1<f64>,
        need_input_grad: bool,
    ) -> (Option<Array2<f64>>, GroupGrads) {
        let mut dy = dy;
        nn::relu_backward(&mut dy, &cache.out);
        let bn = cache.bn.as_ref().expect("backward requires a training-mode forward");
        let (dpre, dgamma, dbeta) = nn::bn_backward(&dy, gamma, bn);
        let dconv = dpre.t().dot(&cache.cols);
        let dx = need_input_grad.then(|| nn::col2im(&dpre.dot(&conv), cache.in_shape, STAGE_STRIDE));
        (
            dx,
            vec![dconv.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()],
        )
    }

    /// Back-propagates `d_emb` into θ_m and, for [`FeatureScope::Full`], θ_e.
    pub fn backward_features(&self, cache: &FeatureCache, d_emb: &Array2<f64>, scope: FeatureScope) -> FeatureGrads {
        let dmap = nn::gap_backward(d_emb, cache.map_shape);
        let map = &self.params.mapping;
        let full = scope == FeatureScope::Full;
        let (mut dx, mapping) = Self::stage_backward(&cache.mapping, dmap, map.mat(0), map.vec(1), full);
        if !full {
            return FeatureGrads {
                encoder: None,
                mapping,
            };
        }
        let enc = &self.params.encoder;
        let mut grads: Vec<GroupGrads> = Vec::with_capacity(cache.encoder.len());
        for (i, stage) in cache.encoder.iter().enumerate().rev() {
            let dy = dx.take().expect("input gradient requested");
            let (d_in, g) = Self::stage_backward(stage, dy, enc.mat(3 * i), enc.vec(3 * i + 1), i > 0);
            dx = d_in;
            grads.push(g);
        }
        grads.reverse();
        FeatureGrads {
            encoder: Some(grads.into_iter().flatten().collect()),
            mapping,
        }
    }

    fn check_embedding(&self, emb: &Array2<f64>) -> Result<()> {
        if emb.ncols() != self.config.embedding_dim || emb.nrows() == 0 {
            return Err(Error::Shape(format!(
                "embeddings are {}x{}, expected n x {}",
                emb.nrows(),
                emb.ncols(),
                self.config.embedding_dim
            )));
        }
        Ok(())
    }

    /// D(m): `n × 2` logits, column 1 is the central class.
    pub fn domain_logits(&self, emb: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, DomainCache)> {
        self.check_embedding(emb)?;
        let p = &self.params.domain;
        let pre = nn::linear_forward(emb, p.mat(0), p.vec(1));
        let (mut hidden, bn) = match mode {
            Mode::Train => {
                let (y, c) = nn::bn_forward_train(&pre, p.vec(2), p.vec(3));
                (y, Some(c))
            }
            Mode::Eval => (
                nn::bn_forward_eval(&pre, p.vec(2), p.vec(3), self.buffers.domain.mean.view(), self.buffers.domain.var.view()),
                None,
            ),
        };
        nn::relu(&mut hidden);
        let logits = nn::linear_forward(&hidden, p.mat(4), p.vec(5));
        Ok((
            logits,
            DomainCache {
                input: emb.clone(),
                bn,
                hidden,
            },
        ))
    }

    /// Returns `(d_emb, θ_d gradients)`.
    pub fn domain_backward(&self, cache: &DomainCache, d_logits: &Array2<f64>) -> (Array2<f64>, GroupGrads) {
        let p = &self.params.domain;
        let (mut dh, dw2, db2) = nn::linear_backward(d_logits, &cache.hidden, p.mat(4));
        nn::relu_backward(&mut dh, &cache.hidden);
        let bn = cache.bn.as_ref().expect("backward requires a training-mode forward");
        let (dpre, dgamma, dbeta) = nn::bn_backward(&dh, p.vec(2), bn);
        let (demb, dw1, db1) = nn::linear_backward(&dpre, &cache.input, p.mat(0));
        (
            demb,
            vec![
                dw1.into_dyn(),
                db1.into_dyn(),
                dgamma.into_dyn(),
                dbeta.into_dyn(),
                dw2.into_dyn(),
                db2.into_dyn(),
            ],
        )
    }

    /// I(m): `n × num_identities` logits. With the BN neck enabled the
    /// classifier sees the normalized embedding.
    pub fn identity_logits(&self, emb: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, IdentityCache)> {
        self.check_embedding(emb)?;
        let p = &self.params.identity;
        let (neck, bn, fc) = if self.config.use_bnneck {
            match mode {
                Mode::Train => {
                    let (y, c) = nn::bn_forward_train(emb, p.vec(0), p.vec(1));
                    (y, Some(c), 2)
                }
                Mode::Eval => {
                    let stats = self.buffers.identity.as_ref().expect("bnneck stats");
                    (
                        nn::bn_forward_eval(emb, p.vec(0), p.vec(1), stats.mean.view(), stats.var.view()),
                        None,
                        2,
                    )
                }
            }
        } else {
            (emb.clone(), None, 0)
        };
        let logits = nn::linear_forward(&neck, p.mat(fc), p.vec(fc + 1));
        Ok((
            logits,
            IdentityCache {
                input: emb.clone(),
                bn,
                neck,
            },
        ))
    }

    /// Returns `(d_emb, θ_i gradients)`.
    pub fn identity_backward(&self, cache: &IdentityCache, d_logits: &Array2<f64>) -> (Array2<f64>, GroupGrads) {
        let p = &self.params.identity;
        if self.config.use_bnneck {
            let (dneck, dw, db) = nn::linear_backward(d_logits, &cache.neck, p.mat(2));
            let bn = cache.bn.as_ref().expect("backward requires a training-mode forward");
            let (demb, dgamma, dbeta) = nn::bn_backward(&dneck, p.vec(0), bn);
            (demb, vec![dgamma.into_dyn(), dbeta.into_dyn(), dw.into_dyn(), db.into_dyn()])
        } else {
            let (demb, dw, db) = nn::linear_backward(d_logits, &cache.input, p.mat(0));
            (demb, vec![dw.into_dyn(), db.into_dyn()])
        }
    }

    /// Folds training-mode batch statistics of θ_e and θ_m layers into the running buffers.
    pub fn update_feature_stats(&mut self, cache: &FeatureCache) {
        for (stats, stage) in self.buffers.encoder.iter_mut().zip(&cache.encoder) {
            if let Some(bn) = &stage.bn {
                nn::bn_update_running(&mut stats.mean, &mut stats.var, bn, stage.out.nrows());
            }
        }
        if let Some(bn) = &cache.mapping.bn {
            let m = &mut self.buffers.mapping;
            nn::bn_update_running(&mut m.mean, &mut m.var, bn, cache.mapping.out.nrows());
        }
    }

    pub fn update_domain_stats(&mut self, cache: &DomainCache) {
        if let Some(bn) = &cache.bn {
            let d = &mut self.buffers.domain;
            nn::bn_update_running(&mut d.mean, &mut d.var, bn, cache.input.nrows());
        }
    }

    pub fn update_identity_stats(&mut self, cache: &IdentityCache) {
        if let (Some(bn), Some(stats)) = (&cache.bn, self.buffers.identity.as_mut()) {
            nn::bn_update_running(&mut stats.mean, &mut stats.var, bn, cache.input.nrows());
        }
    }
}
