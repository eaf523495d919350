//! The single-image pose network: residual encoder, attention block, and a
//! two-headed MLP regressor.

use ndarray::{Array1, Array3, ArrayView1, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    attention_backward, attention_forward, embed_dim, AttentionError, AttentionParams,
    AttentionTrace, DEFAULT_RATIO,
};
use crate::geometry::{canonicalize, quat_exp, GeometryError, LogQuaternion, UnitQuaternion, Vec3};
use crate::nn::{
    dropout_mask, global_avg_pool, global_avg_pool_backward, join, max_pool, max_pool_backward,
    relu, relu_backward, ChannelAffine, Conv2d, ConvCache, Linear, Params,
};

pub type FeatureVector = Array1<f64>;

/// A preprocessed `[3, H, W]` image with intensities in `[-1, 1]`.
pub type ImageTensor = Array3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// 34-layer residual network (basic blocks `[3, 4, 6, 3]`).
    Residual34,
    /// Stem plus three basic blocks, for desk-scale runs.
    TinyResidual,
}

impl std::str::FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "residual-34" => Ok(Self::Residual34),
            "tiny-residual" => Ok(Self::TinyResidual),
            other => Err(format!("unknown backbone {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub feature_dim: usize,
    /// Whether the backbone starts from externally supplied weights.
    pub pretrained: bool,
    /// Dropout applied to the regressor's hidden layer during training.
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Residual34,
            feature_dim: 2048,
            pretrained: false,
            dropout_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Disable to get the attention-free baseline network.
    pub attention: bool,
    pub attention_ratio: usize,
    /// Side length of the square input crop.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            attention: true,
            attention_ratio: DEFAULT_RATIO,
            input_size: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self.encoder.feature_dim;
        if c < 2 {
            return Err(ModelError::Config("feature_dim must be at least 2".into()));
        }
        embed_dim(c, self.attention_ratio)?;
        if !(0.0..1.0).contains(&self.encoder.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.encoder.dropout_rate
            )));
        }
        if self.input_size < 16 {
            return Err(ModelError::Config(format!(
                "input_size {} is too small (minimum 16)",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Network output: regressed position and log-quaternion, plus the derived
/// canonical unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNetworkOutput {
    pub p: Vec3,
    pub logq: Vec3,
    pub q: UnitQuaternion,
}

impl PoseNetworkOutput {
    pub fn from_raw(p: Vec3, logq: Vec3) -> Result<Self, GeometryError> {
        let q = canonicalize(&quat_exp(&LogQuaternion(logq))?)?;
        Ok(Self { p, logq, q })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BasicBlock {
    conv1: Conv2d,
    aff1: ChannelAffine,
    conv2: Conv2d,
    aff2: ChannelAffine,
    shortcut: Option<(Conv2d, ChannelAffine)>,
}

struct BlockCache {
    c1: ConvCache,
    z1: Array3<f64>,
    r1: Array3<f64>,
    c2: ConvCache,
    z2: Array3<f64>,
    shortcut: Option<(ConvCache, Array3<f64>)>,
    out: Array3<f64>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(cin, cout, 1, stride, 0, rng),
                ChannelAffine::new(cout, 1.0),
            )
        });
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng),
            aff1: ChannelAffine::new(cout, 1.0),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            // residual branch starts silent so the block begins as an identity map
            aff2: ChannelAffine::new(cout, 0.0),
            shortcut,
        }
    }

    fn forward(&self, x: &ArrayView3<f64>) -> (Array3<f64>, BlockCache) {
        let (z1, c1) = self.conv1.forward(x);
        let r1 = relu(self.aff1.forward(&z1.view()));
        let (z2, c2) = self.conv2.forward(&r1.view());
        let mut sum = self.aff2.forward(&z2.view());
        let shortcut = match &self.shortcut {
            Some((conv, aff)) => {
                let (zs, cs) = conv.forward(x);
                sum += &aff.forward(&zs.view());
                Some((cs, zs))
            }
            None => {
                sum += x;
                None
            }
        };
        let out = relu(sum);
        (
            out.clone(),
            BlockCache {
                c1,
                z1,
                r1,
                c2,
                z2,
                shortcut,
                out,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, grad_out: Array3<f64>, grad: &mut Self) -> Array3<f64> {
        let g = relu_backward(&cache.out, grad_out);
        let g_z2 = self
            .aff2
            .backward(&cache.z2.view(), &g.view(), &mut grad.aff2);
        let g_r1 = self
            .conv2
            .backward(&cache.c2, &g_z2.view(), &mut grad.conv2);
        let g_a1 = relu_backward(&cache.r1, g_r1);
        let g_z1 = self
            .aff1
            .backward(&cache.z1.view(), &g_a1.view(), &mut grad.aff1);
        let mut gin = self
            .conv1
            .backward(&cache.c1, &g_z1.view(), &mut grad.conv1);
        match (&self.shortcut, &cache.shortcut, &mut grad.shortcut) {
            (Some((conv, aff)), Some((cs, zs)), Some((gconv, gaff))) => {
                let g_zs = aff.backward(&zs.view(), &g.view(), gaff);
                gin += &conv.backward(cs, &g_zs.view(), gconv);
            }
            _ => gin += &g,
        }
        gin
    }
}

impl Params for BasicBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.aff1.collect(&join(prefix, "aff1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        self.aff2.collect(&join(prefix, "aff2"), out);
        if let Some((conv, aff)) = &self.shortcut {
            conv.collect(&join(prefix, "shortcut.conv"), out);
            aff.collect(&join(prefix, "shortcut.aff"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.conv1.collect_mut(out);
        self.aff1.collect_mut(out);
        self.conv2.collect_mut(out);
        self.aff2.collect_mut(out);
        if let Some((conv, aff)) = &mut self.shortcut {
            conv.collect_mut(out);
            aff.collect_mut(out);
        }
    }
}

/// Residual convolutional encoder ending in a `C`-dimensional linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    stem: Conv2d,
    stem_aff: ChannelAffine,
    stem_pool: bool,
    blocks: Vec<BasicBlock>,
    fc: Linear,
}

pub struct EncoderCache {
    stem: ConvCache,
    stem_z: Array3<f64>,
    stem_r: Array3<f64>,
    pool: Option<Vec<usize>>,
    blocks: Vec<BlockCache>,
    last_dim: (usize, usize, usize),
    pooled: Array1<f64>,
}

impl Encoder {
    pub fn new(backbone: Backbone, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let (stem, stem_pool, stages): (Conv2d, bool, Vec<(usize, usize)>) = match backbone {
            Backbone::TinyResidual => (
                Conv2d::new(3, 16, 3, 2, 1, rng),
                false,
                vec![(16, 1), (32, 1), (64, 1)],
            ),
            Backbone::Residual34 => (
                Conv2d::new(3, 64, 7, 2, 3, rng),
                true,
                vec![(64, 3), (128, 4), (256, 6), (512, 3)],
            ),
        };
        let mut cin = stem.out_channels();
        let stem_aff = ChannelAffine::new(cin, 1.0);
        let mut blocks = Vec::new();
        for (stage, &(cout, depth)) in stages.iter().enumerate() {
            for i in 0..depth {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, cout, stride, rng));
                cin = cout;
            }
        }
        Self {
            stem,
            stem_aff,
            stem_pool,
            blocks,
            fc: Linear::new(cin, feature_dim, rng),
        }
    }

    /// Number of weight layers along the main path (convolutions plus the final linear).
    pub fn depth(&self) -> usize {
        1 + 2 * self.blocks.len() + 1
    }

    pub fn forward(&self, image: &ArrayView3<f64>) -> (FeatureVector, EncoderCache) {
        let (stem_z, stem) = self.stem.forward(image);
        let stem_r = relu(self.stem_aff.forward(&stem_z.view()));
        let (mut x, pool) = if self.stem_pool {
            let (y, arg) = max_pool(&stem_r.view());
            (y, Some(arg))
        } else {
            (stem_r.clone(), None)
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x.view());
            blocks.push(c);
            x = y;
        }
        let pooled = global_avg_pool(&x.view());
        let features = self.fc.forward(&pooled.view());
        (
            features,
            EncoderCache {
                stem,
                stem_z,
                stem_r,
                pool,
                blocks,
                last_dim: x.dim(),
                pooled,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &EncoderCache,
        grad_out: &ArrayView1<f64>,
        grad: &mut Self,
    ) -> Array3<f64> {
        let g_pooled = self
            .fc
            .backward(&cache.pooled.view(), grad_out, &mut grad.fc);
        let mut g = global_avg_pool_backward(cache.last_dim, &g_pooled.view());
        for (i, b) in self.blocks.iter().enumerate().rev() {
            g = b.backward(&cache.blocks[i], g, &mut grad.blocks[i]);
        }
        if let Some(arg) = &cache.pool {
            g = max_pool_backward(arg, cache.stem_r.dim(), &g.view());
        }
        let g = relu_backward(&cache.stem_r, g);
        let g = self
            .stem_aff
            .backward(&cache.stem_z.view(), &g.view(), &mut grad.stem_aff);
        self.stem.backward(&cache.stem, &g.view(), &mut grad.stem)
    }
}

impl Params for Encoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.stem.collect(&join(prefix, "stem.conv"), out);
        self.stem_aff.collect(&join(prefix, "stem.aff"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("block{i}")), out);
        }
        self.fc.collect(&join(prefix, "fc"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.stem.collect_mut(out);
        self.stem_aff.collect_mut(out);
        for b in &mut self.blocks {
            b.collect_mut(out);
        }
        self.fc.collect_mut(out);
    }
}

/// Shared hidden layer (width `C/2`, ReLU, dropout) feeding a position head
/// and a log-quaternion head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub hidden: Linear,
    pub position: Linear,
    pub rotation: Linear,
}

pub struct RegressorCache {
    input: Array1<f64>,
    hidden: Array1<f64>,
    mask: Array1<f64>,
    dropped: Array1<f64>,
}

impl Regressor {
    pub fn new(feature_dim: usize, rng: &mut impl Rng) -> Self {
        let width = (feature_dim / 2).max(1);
        Self {
            hidden: Linear::new(feature_dim, width, rng),
            position: Linear::new(width, 3, rng),
            rotation: Linear::new(width, 3, rng),
        }
    }

    /// Sets both output heads to zero so that every prediction is the identity pose.
    pub fn zero_heads(&mut self) {
        let width = self.hidden.weight.nrows();
        self.position = Linear::zeros(width, 3);
        self.rotation = Linear::zeros(width, 3);
    }

    fn forward(
        &self,
        x: &ArrayView1<f64>,
        mask: Option<Array1<f64>>,
    ) -> (Vec3, Vec3, RegressorCache) {
        let hidden = relu(self.hidden.forward(x));
        let mask = mask.unwrap_or_else(|| Array1::ones(hidden.len()));
        let dropped = &hidden * &mask;
        let p = self.position.forward(&dropped.view());
        let r = self.rotation.forward(&dropped.view());
        (
            Vec3::new(p[0], p[1], p[2]),
            Vec3::new(r[0], r[1], r[2]),
            RegressorCache {
                input: x.to_owned(),
                hidden,
                mask,
                dropped,
            },
        )
    }

    fn backward(
        &self,
        cache: &RegressorCache,
        d_p: &Vec3,
        d_logq: &Vec3,
        grad: &mut Self,
    ) -> Array1<f64> {
        let dp = Array1::from_vec(d_p.as_slice().to_vec());
        let dr = Array1::from_vec(d_logq.as_slice().to_vec());
        let g_drop = self
            .position
            .backward(&cache.dropped.view(), &dp.view(), &mut grad.position)
            + self
                .rotation
                .backward(&cache.dropped.view(), &dr.view(), &mut grad.rotation);
        let g_hidden = relu_backward(&cache.hidden, g_drop * &cache.mask);
        self.hidden
            .backward(&cache.input.view(), &g_hidden.view(), &mut grad.hidden)
    }
}

impl Params for Regressor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.hidden.collect(&join(prefix, "hidden"), out);
        self.position.collect(&join(prefix, "position"), out);
        self.rotation.collect(&join(prefix, "rotation"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.hidden.collect_mut(out);
        self.position.collect_mut(out);
        self.rotation.collect_mut(out);
    }
}

/// How a forward pass treats dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, mask drawn from a generator seeded with `dropout_seed`.
    Train {
        dropout_seed: u64,
    },
}

/// Everything [`PoseNet::backward`] needs from a forward pass.
pub struct ForwardCache {
    encoder: EncoderCache,
    features: FeatureVector,
    trace: Option<AttentionTrace>,
    regressor: RegressorCache,
}

impl ForwardCache {
    /// Encoder output, before attention.
    pub fn features(&self) -> &FeatureVector {
        &self.features
    }

    pub fn trace(&self) -> Option<&AttentionTrace> {
        self.trace.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNet {
    config: ModelConfig,
    pub encoder: Encoder,
    pub attention: Option<AttentionParams>,
    pub regressor: Regressor,
}

impl PoseNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.encoder.feature_dim;
        let encoder = Encoder::new(config.encoder.backbone, c, &mut rng);
        let attention = if config.attention {
            Some(AttentionParams::init(c, config.attention_ratio, &mut rng)?)
        } else {
            None
        };
        let regressor = Regressor::new(c, &mut rng);
        Ok(Self {
            config,
            encoder,
            attention,
            regressor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the training-time dropout probability of the regressor.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<(), ModelError> {
        let mut config = self.config.clone();
        config.encoder.dropout_rate = rate;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    /// Copies encoder weights from another network with the same backbone and
    /// feature width.
    pub fn load_encoder_from(&mut self, other: &PoseNet) -> Result<(), ModelError> {
        let src = other.encoder.named_params();
        let same = src.len() == self.encoder.named_params().len()
            && src
                .iter()
                .zip(self.encoder.named_params())
                .all(|((a, x), (b, y))| *a == b && x.len() == y.len());
        if !same {
            return Err(ModelError::Config(
                "encoder weights do not match this backbone".into(),
            ));
        }
        for (dst, (_, s)) in self.encoder.params_mut().into_iter().zip(src) {
            dst.copy_from_slice(s);
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.config.encoder.feature_dim
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.config.input_size, self.config.input_size)
    }

    fn check_input(&self, image: &ArrayView3<f64>) -> Result<(), ModelError> {
        if image.dim() != self.input_shape() {
            return Err(ModelError::InputShape {
                expected: self.input_shape(),
                got: image.dim(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, image: &ArrayView3<f64>) -> Result<FeatureVector, ModelError> {
        self.check_input(image)?;
        Ok(self.encoder.forward(image).0)
    }

    /// Applies the attention block, or passes `x` through when attention is disabled.
    pub fn attend(
        &self,
        x: &ArrayView1<f64>,
    ) -> Result<(FeatureVector, Option<AttentionTrace>), ModelError> {
        match &self.attention {
            Some(params) => {
                let (out, trace) = attention_forward(x, params)?;
                Ok((out, Some(trace)))
            }
            None => Ok((x.to_owned(), None)),
        }
    }

    /// Eval-mode pose regression from (attention-guided) features.
    pub fn regress_pose(
        &self,
        features: &ArrayView1<f64>,
    ) -> Result<PoseNetworkOutput, ModelError> {
        if features.len() != self.feature_dim() {
            return Err(ModelError::Config(format!(
                "feature length {} does not match {}",
                features.len(),
                self.feature_dim()
            )));
        }
        let (p, logq, _) = self.regressor.forward(features, None);
        Ok(PoseNetworkOutput::from_raw(p, logq)?)
    }

    pub fn forward(
        &self,
        image: &ArrayView3<f64>,
    ) -> Result<(PoseNetworkOutput, Option<AttentionTrace>), ModelError> {
        let (out, cache) = self.forward_cached(image, Mode::Eval)?;
        Ok((out, cache.trace))
    }

    pub fn forward_batch(
        &self,
        images: &[ImageTensor],
    ) -> Result<Vec<PoseNetworkOutput>, ModelError> {
        images
            .iter()
            .map(|im| self.forward(&im.view()).map(|(o, _)| o))
            .collect()
    }

    pub fn forward_cached(
        &self,
        image: &ArrayView3<f64>,
        mode: Mode,
    ) -> Result<(PoseNetworkOutput, ForwardCache), ModelError> {
        self.check_input(image)?;
        let (features, encoder) = self.encoder.forward(image);
        let (attended, trace) = self.attend(&features.view())?;
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train { dropout_seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let width = self.regressor.hidden.weight.nrows();
                Some(dropout_mask(
                    width,
                    self.config.encoder.dropout_rate,
                    &mut rng,
                ))
            }
        };
        let (p, logq, regressor) = self.regressor.forward(&attended.view(), mask);
        Ok((
            PoseNetworkOutput::from_raw(p, logq)?,
            ForwardCache {
                encoder,
                features,
                trace,
                regressor,
            },
        ))
    }

    /// Back-propagates loss gradients on `(p, logq)`, accumulating parameter
    /// gradients into `grad` and returning the gradient on the input image.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_p: &Vec3,
        d_logq: &Vec3,
        grad: &mut PoseNet,
    ) -> Array3<f64> {
        let g_att = self
            .regressor
            .backward(&cache.regressor, d_p, d_logq, &mut grad.regressor);
        let g_feat = match (&self.attention, &cache.trace, &mut grad.attention) {
            (Some(params), Some(trace), Some(gparams)) => {
                let g = attention_backward(&cache.features.view(), params, trace, &g_att.view());
                for (acc, add) in gparams.tensors_mut().into_iter().zip(g.params.tensors()) {
                    *acc += add.1;
                }
                g.x
            }
            _ => g_att,
        };
        self.encoder
            .backward(&cache.encoder, &g_feat.view(), &mut grad.encoder)
    }
}

impl Params for PoseNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        if let Some(att) = &self.attention {
            for (name, m) in att.tensors() {
                out.push((
                    join(prefix, &format!("attention.{name}")),
                    m.as_slice().expect("standard layout"),
                ));
            }
        }
        self.regressor.collect(&join(prefix, "regressor"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.encoder.collect_mut(out);
        if let Some(att) = &mut self.attention {
            for m in att.tensors_mut() {
                out.push(m.as_slice_mut().expect("standard layout"));
            }
        }
        self.regressor.collect_mut(out);
    }
}
