//! The cross-domain per-pixel CNN: a domain-specific spectral encoder, a
//! shared trunk of pointwise residual modules, and a domain-specific
//! classification head.
//!
//! Two forward modes exist. Embedding mode stops after the last shared
//! layer and L2-normalizes each pixel's feature vector; logits mode applies
//! the domain head and yields one logit vector per sample (the center pixel
//! of the input patch). Backward produces exact gradients for every
//! parameter touched, accumulating trunk gradients across domains.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensorops::{
    conv2d_backward, conv2d_forward, maxpool2d_backward, maxpool2d_forward, relu_backward,
    relu_forward, Conv2dCache, LrGroup, ParamTensor, Pool2dCache, ReluCache, Scalar, Tensor4,
};

/// Initialization standard deviation for all freshly created weights.
pub const INIT_STD: f64 = 0.001;

/// Norm floor used when normalizing embeddings.
pub const NORM_EPS: f64 = 1e-12;

/// Static description of one domain: its band count and class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub domain_id: String,
    pub bands: usize,
    pub num_classes: usize,
}

impl DomainSpec {
    pub fn new(domain_id: impl Into<String>, bands: usize, num_classes: usize) -> Self {
        DomainSpec {
            domain_id: domain_id.into(),
            bands,
            num_classes,
        }
    }

    /// Derive the spec from a cube; the class count comes from the labels.
    pub fn from_cube(cube: &crate::hsdata::HyperCube) -> Self {
        DomainSpec {
            domain_id: cube.domain_id.clone(),
            bands: cube.bands,
            num_classes: cube.num_classes as usize,
        }
    }
}

/// Backbone hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub channels: usize,
    pub encoder_kernel: usize,
    pub encoder_pad: usize,
    /// Number of two-layer pointwise residual modules in the trunk.
    pub n_res_modules: usize,
    /// Use the original multi-scale first layer (1x1 / 3x3 / 5x5 branches
    /// with max pooling and a fusing 1x1) instead of the single 5x5 encoder.
    pub multiscale_encoder: bool,
    /// Gain applied to standardized inputs before the encoder. The tiny
    /// 0.001 weight init expects sensor-magnitude data; unit-variance bands
    /// would let bias terms dominate early training.
    pub input_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: 128,
            encoder_kernel: 5,
            encoder_pad: 2,
            n_res_modules: 5,
            multiscale_encoder: false,
            input_scale: 100.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidArg("ArchConfig: channels must be > 0".into()));
        }
        if self.encoder_kernel == 0 || self.encoder_kernel % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "ArchConfig: encoder kernel must be odd, got {}",
                self.encoder_kernel
            )));
        }
        if !(self.input_scale > 0.0) {
            return Err(Error::InvalidArg(format!(
                "ArchConfig: input_scale must be positive, got {}",
                self.input_scale
            )));
        }
        Ok(())
    }

    /// Spatial context consumed on each side of a region so that every
    /// region pixel keeps a full encoder receptive field without padding.
    pub fn context_margin(&self) -> usize {
        if self.multiscale_encoder {
            2
        } else {
            (self.encoder_kernel - 1) / 2
        }
    }

    /// Patch side for per-pixel classification samples.
    pub fn patch_side(&self) -> usize {
        2 * self.context_margin() + 1
    }
}

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

/// Weight + bias of one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvParams<S> {
    pub weight: ParamTensor<S>,
    pub bias: ParamTensor<S>,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl<S: Scalar> ConvParams<S> {
    fn gaussian(
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        lr_group: LrGroup,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut weight = ParamTensor::zeros(
            format!("{name}/weight"),
            vec![c_out, c_in, k, k],
            lr_group,
            true,
        );
        for v in &mut weight.value {
            *v = S::from_f64(normal.sample(rng));
        }
        // TEMP EXPERIMENT: bias decay toggle
        let bias_decay = std::env::var("HYPERCD_X_BIAS_DECAY").is_ok();
        let bias = ParamTensor::zeros(format!("{name}/bias"), vec![c_out], lr_group, bias_decay);
        ConvParams {
            weight,
            bias,
            c_out,
            c_in,
            k,
        }
    }

    fn forward(&self, x: &Tensor4<S>, pad: usize) -> Result<(Tensor4<S>, Conv2dCache<S>)> {
        conv2d_forward(
            x,
            &self.weight.value,
            &self.bias.value,
            self.c_out,
            self.c_in,
            self.k,
            pad,
        )
    }

    /// Backward through this layer, accumulating into grad buffers.
    fn backward_accum(&mut self, cache: &Conv2dCache<S>, dy: &Tensor4<S>) -> Result<Tensor4<S>> {
        let (dx, dw, db) = conv2d_backward(cache, &self.weight.value, dy)?;
        self.weight.add_to_grad(&dw);
        self.bias.add_to_grad(&db);
        Ok(dx)
    }
}

/// Domain-specific first layer.
#[derive(Debug, Clone)]
pub enum EncoderParams<S> {
    /// The modified backbone: one 5x5 convolution.
    Single(ConvParams<S>),
    /// The original backbone: 1x1 / 3x3 / 5x5 branches (the larger two
    /// max-pooled back to size), channel concat, fused by a 1x1 layer.
    Multiscale {
        b1: ConvParams<S>,
        b3: ConvParams<S>,
        b5: ConvParams<S>,
        fuse: ConvParams<S>,
    },
}

impl<S: Scalar> EncoderParams<S> {
    pub fn input_bands(&self) -> usize {
        match self {
            EncoderParams::Single(c) => c.c_in,
            EncoderParams::Multiscale { b1, .. } => b1.c_in,
        }
    }
}

/// One two-layer pointwise residual module: `y = relu(x + c2(relu(c1(x))))`.
#[derive(Debug, Clone)]
pub struct ResModule<S> {
    pub conv1: ConvParams<S>,
    pub conv2: ConvParams<S>,
}

/// The shared cross-domain trunk.
#[derive(Debug, Clone)]
pub struct TrunkParams<S> {
    pub res_modules: Vec<ResModule<S>>,
    pub c3: ConvParams<S>,
    pub c4: ConvParams<S>,
}

/// Full parameter set: per-domain encoders and heads around one shared trunk.
#[derive(Debug, Clone)]
pub struct CdcnnParams<S> {
    pub arch: ArchConfig,
    pub encoders: BTreeMap<String, EncoderParams<S>>,
    pub trunk: TrunkParams<S>,
    pub heads: BTreeMap<String, ConvParams<S>>,
}

impl<S: Scalar> CdcnnParams<S> {
    pub fn params(&self) -> Vec<&ParamTensor<S>> {
        let mut out = Vec::new();
        for enc in self.encoders.values() {
            match enc {
                EncoderParams::Single(c) => out.extend([&c.weight, &c.bias]),
                EncoderParams::Multiscale { b1, b3, b5, fuse } => {
                    for c in [b1, b3, b5, fuse] {
                        out.extend([&c.weight, &c.bias]);
                    }
                }
            }
        }
        for m in &self.trunk.res_modules {
            out.extend([&m.conv1.weight, &m.conv1.bias, &m.conv2.weight, &m.conv2.bias]);
        }
        out.extend([&self.trunk.c3.weight, &self.trunk.c3.bias]);
        out.extend([&self.trunk.c4.weight, &self.trunk.c4.bias]);
        for head in self.heads.values() {
            out.extend([&head.weight, &head.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut out = Vec::new();
        for enc in self.encoders.values_mut() {
            match enc {
                EncoderParams::Single(c) => out.extend([&mut c.weight, &mut c.bias]),
                EncoderParams::Multiscale { b1, b3, b5, fuse } => {
                    for c in [b1, b3, b5, fuse] {
                        out.push(&mut c.weight);
                        out.push(&mut c.bias);
                    }
                }
            }
        }
        for m in &mut self.trunk.res_modules {
            out.push(&mut m.conv1.weight);
            out.push(&mut m.conv1.bias);
            out.push(&mut m.conv2.weight);
            out.push(&mut m.conv2.bias);
        }
        out.push(&mut self.trunk.c3.weight);
        out.push(&mut self.trunk.c3.bias);
        out.push(&mut self.trunk.c4.weight);
        out.push(&mut self.trunk.c4.bias);
        for head in self.heads.values_mut() {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    pub fn trunk_params(&self) -> Vec<&ParamTensor<S>> {
        self.params()
            .into_iter()
            .filter(|p| p.name.starts_with("trunk/"))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

pub(crate) fn init_encoder<S: Scalar>(
    arch: &ArchConfig,
    spec: &DomainSpec,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> EncoderParams<S> {
    let ch = arch.channels;
    let id = &spec.domain_id;
    if arch.multiscale_encoder {
        EncoderParams::Multiscale {
            b1: ConvParams::gaussian(
                &format!("enc.{id}/c1.b1"),
                ch,
                spec.bands,
                1,
                LrGroup::DomainSpecific,
                rng,
            ),
            b3: ConvParams::gaussian(
                &format!("enc.{id}/c1.b3"),
                ch,
                spec.bands,
                3,
                LrGroup::DomainSpecific,
                rng,
            ),
            b5: ConvParams::gaussian(
                &format!("enc.{id}/c1.b5"),
                ch,
                spec.bands,
                5,
                LrGroup::DomainSpecific,
                rng,
            ),
            fuse: ConvParams::gaussian(
                &format!("enc.{id}/c2"),
                ch,
                3 * ch,
                1,
                LrGroup::DomainSpecific,
                rng,
            ),
        }
    } else {
        EncoderParams::Single(ConvParams::gaussian(
            &format!("enc.{id}/c1"),
            ch,
            spec.bands,
            arch.encoder_kernel,
            LrGroup::DomainSpecific,
            rng,
        ))
    }
}

pub(crate) fn init_head<S: Scalar>(
    arch: &ArchConfig,
    spec: &DomainSpec,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> ConvParams<S> {
    ConvParams::gaussian(
        &format!("head.{}/c5", spec.domain_id),
        spec.num_classes,
        arch.channels,
        1,
        LrGroup::DomainSpecific,
        rng,
    )
}

fn init_trunk<S: Scalar>(arch: &ArchConfig, rng: &mut rand_chacha::ChaCha8Rng) -> TrunkParams<S> {
    let ch = arch.channels;
    let res_modules = (0..arch.n_res_modules)
        .map(|i| ResModule {
            conv1: ConvParams::gaussian(&format!("trunk/r{i}.1"), ch, ch, 1, LrGroup::Shared, rng),
            conv2: ConvParams::gaussian(&format!("trunk/r{i}.2"), ch, ch, 1, LrGroup::Shared, rng),
        })
        .collect();
    TrunkParams {
        res_modules,
        c3: ConvParams::gaussian("trunk/c3", ch, ch, 1, LrGroup::Shared, rng),
        c4: ConvParams::gaussian("trunk/c4", ch, ch, 1, LrGroup::Shared, rng),
    }
}

/// Create a full parameter set: weights ~ N(0, 0.001^2) from the seeded
/// generator, biases and momentum buffers zero. Encoders and heads are
/// tagged domain-specific, the trunk shared.
pub fn init_params<S: Scalar>(
    arch: &ArchConfig,
    domains: &[DomainSpec],
    seed: u64,
) -> Result<CdcnnParams<S>> {
    arch.validate()?;
    if domains.is_empty() {
        return Err(Error::InvalidArg("init_params: no domains given".into()));
    }
    let mut rng = rng_from(seed, "init", 0);
    let mut encoders = BTreeMap::new();
    for spec in domains {
        if spec.bands == 0 {
            return Err(Error::InvalidArg(format!(
                "domain `{}` declares zero bands",
                spec.domain_id
            )));
        }
        encoders.insert(spec.domain_id.clone(), init_encoder(arch, spec, &mut rng));
    }
    let trunk = init_trunk(arch, &mut rng);
    // A zero class count marks an unlabeled domain: it gets an encoder but
    // no classification head.
    let mut heads = BTreeMap::new();
    for spec in domains {
        if spec.num_classes > 0 {
            heads.insert(spec.domain_id.clone(), init_head(arch, spec, &mut rng));
        }
    }
    Ok(CdcnnParams {
        arch: arch.clone(),
        encoders,
        trunk,
        heads,
    })
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// A batch of fixed-dimension embedding vectors with pseudo-group ids.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<S> {
    pub dim: usize,
    /// count x dim, row-major; ordering is sample-major then output pixels
    /// row-major.
    pub vectors: Vec<S>,
    pub groups: Vec<usize>,
}

impl<S: Scalar> EmbeddingBatch<S> {
    pub fn empty(dim: usize) -> Self {
        EmbeddingBatch {
            dim,
            vectors: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.groups.len()
    }

    pub fn vector(&self, i: usize) -> &[S] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Append all vectors of `other` under a single group id.
    pub fn append_group(&mut self, other: &EmbeddingBatch<S>, group: usize) {
        debug_assert_eq!(self.dim, other.dim);
        self.vectors.extend_from_slice(&other.vectors);
        self.groups.extend(std::iter::repeat(group).take(other.count()));
    }
}

enum EncCache<S> {
    Single {
        conv: Conv2dCache<S>,
        relu: ReluCache,
    },
    Multiscale {
        b1: (Conv2dCache<S>, ReluCache),
        b3: (Conv2dCache<S>, ReluCache, Pool2dCache),
        b5: (Conv2dCache<S>, ReluCache, Pool2dCache),
        fuse: (Conv2dCache<S>, ReluCache),
    },
}

struct ResCache<S> {
    conv1: Conv2dCache<S>,
    relu1: ReluCache,
    conv2: Conv2dCache<S>,
    relu_out: ReluCache,
}

struct TrunkCache<S> {
    res: Vec<ResCache<S>>,
    c3: (Conv2dCache<S>, ReluCache),
    c4: Conv2dCache<S>,
}

enum TailCache<S> {
    Embedding {
        /// Pre-normalization vectors, count x dim.
        prenorm: Vec<S>,
        norms: Vec<S>,
        crop_margin: usize,
        full: (usize, usize, usize, usize),
    },
    Logits {
        crop_margin: usize,
        full: (usize, usize, usize, usize),
        head: Conv2dCache<S>,
    },
}

/// Saved activations of one forward pass, consumed by [`backward`].
pub struct ForwardCache<S> {
    domain_id: String,
    enc: EncCache<S>,
    trunk: TrunkCache<S>,
    tail: TailCache<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Pre-normalization feature norms per output pixel (embedding mode).
    pub fn embedding_prenorm_norms(&self) -> Option<&[S]> {
        match &self.tail {
            TailCache::Embedding { norms, .. } => Some(norms),
            TailCache::Logits { .. } => None,
        }
    }
}

fn concat_channels<S: Scalar>(parts: &[&Tensor4<S>]) -> Tensor4<S> {
    let (n, _, h, w) = parts[0].dims();
    let total_c: usize = parts.iter().map(|t| t.channels()).sum();
    let mut out = Tensor4::zeros(n, total_c, h, w);
    for ni in 0..n {
        let mut co = 0;
        for t in parts {
            for ci in 0..t.channels() {
                out.plane_mut(ni, co).copy_from_slice(t.plane(ni, ci));
                co += 1;
            }
        }
    }
    out
}

fn split_channels<S: Scalar>(t: &Tensor4<S>, sizes: &[usize]) -> Vec<Tensor4<S>> {
    let (n, _, h, w) = t.dims();
    let mut out = Vec::with_capacity(sizes.len());
    let mut base = 0;
    for &c in sizes {
        let mut part = Tensor4::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                part.plane_mut(ni, ci).copy_from_slice(t.plane(ni, base + ci));
            }
        }
        base += c;
        out.push(part);
    }
    out
}

fn crop_center<S: Scalar>(t: &Tensor4<S>, margin: usize) -> Tensor4<S> {
    if margin == 0 {
        return t.clone();
    }
    let (n, c, h, w) = t.dims();
    let (oh, ow) = (h - 2 * margin, w - 2 * margin);
    let mut out = Tensor4::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            let src = t.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for r in 0..oh {
                let s = (r + margin) * w + margin;
                dst[r * ow..(r + 1) * ow].copy_from_slice(&src[s..s + ow]);
            }
        }
    }
    out
}

fn scatter_center<S: Scalar>(
    dt: &Tensor4<S>,
    full: (usize, usize, usize, usize),
    margin: usize,
) -> Tensor4<S> {
    if margin == 0 {
        return dt.clone();
    }
    let (n, c, h, w) = full;
    let (_, _, oh, ow) = dt.dims();
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let src = dt.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for r in 0..oh {
                let d = (r + margin) * w + margin;
                dst[d..d + ow].copy_from_slice(&src[r * ow..(r + 1) * ow]);
            }
        }
    }
    out
}

fn encoder_forward<S: Scalar>(
    enc: &EncoderParams<S>,
    x: &Tensor4<S>,
) -> Result<(Tensor4<S>, EncCache<S>)> {
    match enc {
        EncoderParams::Single(c) => {
            let (y, conv) = c.forward(x, 0)?;
            let (y, relu) = relu_forward(&y);
            Ok((y, EncCache::Single { conv, relu }))
        }
        EncoderParams::Multiscale { b1, b3, b5, fuse } => {
            let (y1, c1) = b1.forward(x, 0)?;
            let (y1, r1) = relu_forward(&y1);
            let (y3, c3) = b3.forward(x, 2)?;
            let (y3, r3) = relu_forward(&y3);
            let (y3, p3) = maxpool2d_forward(&y3, 3)?;
            let (y5, c5) = b5.forward(x, 4)?;
            let (y5, r5) = relu_forward(&y5);
            let (y5, p5) = maxpool2d_forward(&y5, 5)?;
            let cat = concat_channels(&[&y1, &y3, &y5]);
            let (y, cf) = fuse.forward(&cat, 0)?;
            let (y, rf) = relu_forward(&y);
            Ok((
                y,
                EncCache::Multiscale {
                    b1: (c1, r1),
                    b3: (c3, r3, p3),
                    b5: (c5, r5, p5),
                    fuse: (cf, rf),
                },
            ))
        }
    }
}

fn encoder_backward<S: Scalar>(
    enc: &mut EncoderParams<S>,
    cache: &EncCache<S>,
    dy: &Tensor4<S>,
) -> Result<Tensor4<S>> {
    match (enc, cache) {
        (EncoderParams::Single(c), EncCache::Single { conv, relu }) => {
            let d = relu_backward(relu, dy)?;
            c.backward_accum(conv, &d)
        }
        (
            EncoderParams::Multiscale { b1, b3, b5, fuse },
            EncCache::Multiscale {
                b1: cb1,
                b3: cb3,
                b5: cb5,
                fuse: cfuse,
            },
        ) => {
            let d = relu_backward(&cfuse.1, dy)?;
            let dcat = fuse.backward_accum(&cfuse.0, &d)?;
            let ch = b1.c_out;
            let parts = split_channels(&dcat, &[ch, ch, ch]);

            let d1 = relu_backward(&cb1.1, &parts[0])?;
            let mut dx = b1.backward_accum(&cb1.0, &d1)?;

            let d3 = maxpool2d_backward(&cb3.2, &parts[1])?;
            let d3 = relu_backward(&cb3.1, &d3)?;
            let dx3 = b3.backward_accum(&cb3.0, &d3)?;

            let d5 = maxpool2d_backward(&cb5.2, &parts[2])?;
            let d5 = relu_backward(&cb5.1, &d5)?;
            let dx5 = b5.backward_accum(&cb5.0, &d5)?;

            for ((a, b), c) in dx
                .data_mut()
                .iter_mut()
                .zip(dx3.data().iter())
                .zip(dx5.data().iter())
            {
                *a += *b + *c;
            }
            Ok(dx)
        }
        _ => Err(Error::ArchMismatch(
            "encoder cache does not match encoder layout".into(),
        )),
    }
}

fn trunk_forward<S: Scalar>(
    trunk: &TrunkParams<S>,
    x: &Tensor4<S>,
) -> Result<(Tensor4<S>, TrunkCache<S>)> {
    let mut cur = x.clone();
    let mut res = Vec::with_capacity(trunk.res_modules.len());
    for m in &trunk.res_modules {
        let (t, conv1) = m.conv1.forward(&cur, 0)?;
        let (t, relu1) = relu_forward(&t);
        let (u, conv2) = m.conv2.forward(&t, 0)?;
        let mut sum = u;
        for (s, xv) in sum.data_mut().iter_mut().zip(cur.data().iter()) {
            *s += *xv;
        }
        let (y, relu_out) = relu_forward(&sum);
        res.push(ResCache {
            conv1,
            relu1,
            conv2,
            relu_out,
        });
        cur = y;
    }
    // C3 and C4 take residual form as well, so the zero-initialized trunk
    // reduces to its skip connections. C4's raw sum is the shared
    // representation read by both the embedding tap and the heads.
    let (t, c3conv) = trunk.c3.forward(&cur, 0)?;
    let mut sum = t;
    for (s, xv) in sum.data_mut().iter_mut().zip(cur.data().iter()) {
        *s += *xv;
    }
    let (y, c3relu) = relu_forward(&sum);
    let (t, c4conv) = trunk.c4.forward(&y, 0)?;
    let mut out = t;
    for (s, xv) in out.data_mut().iter_mut().zip(y.data().iter()) {
        *s += *xv;
    }
    Ok((
        out,
        TrunkCache {
            res,
            c3: (c3conv, c3relu),
            c4: c4conv,
        },
    ))
}

fn trunk_backward<S: Scalar>(
    trunk: &mut TrunkParams<S>,
    cache: &TrunkCache<S>,
    dy: &Tensor4<S>,
) -> Result<Tensor4<S>> {
    // C4 skip: d(y) = conv4-backward(dy) + dy
    let mut d = trunk.c4.backward_accum(&cache.c4, dy)?;
    for (a, b) in d.data_mut().iter_mut().zip(dy.data().iter()) {
        *a += *b;
    }
    // C3 skip
    let dsum = relu_backward(&cache.c3.1, &d)?;
    let mut d = trunk.c3.backward_accum(&cache.c3.0, &dsum)?;
    for (a, b) in d.data_mut().iter_mut().zip(dsum.data().iter()) {
        *a += *b;
    }
    for (m, mc) in trunk
        .res_modules
        .iter_mut()
        .zip(cache.res.iter())
        .rev()
    {
        let dsum = relu_backward(&mc.relu_out, &d)?;
        let dt = m.conv2.backward_accum(&mc.conv2, &dsum)?;
        let dt = relu_backward(&mc.relu1, &dt)?;
        let mut dx = m.conv1.backward_accum(&mc.conv1, &dt)?;
        // skip connection
        for (a, b) in dx.data_mut().iter_mut().zip(dsum.data().iter()) {
            *a += *b;
        }
        d = dx;
    }
    Ok(d)
}

fn shared_forward<'p, S: Scalar>(
    params: &'p CdcnnParams<S>,
    domain_id: &str,
    x: &Tensor4<S>,
) -> Result<(Tensor4<S>, EncCache<S>, TrunkCache<S>)> {
    let enc = params
        .encoders
        .get(domain_id)
        .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))?;
    if x.channels() != enc.input_bands() {
        return Err(Error::shape(
            format!("encoder input channels for `{domain_id}`"),
            enc.input_bands(),
            x.channels(),
        ));
    }
    let (y, enc_cache) = encoder_forward(enc, x)?;
    let (y, trunk_cache) = trunk_forward(&params.trunk, &y)?;
    Ok((y, enc_cache, trunk_cache))
}

/// Run encoder + trunk and L2-normalize each output pixel's feature vector.
/// A (p + 2*margin) x (p + 2*margin) input window yields p*p embeddings.
/// Group ids in the returned batch are zero; assignment is the caller's.
pub fn forward_embedding<S: Scalar>(
    params: &CdcnnParams<S>,
    domain_id: &str,
    x: &Tensor4<S>,
) -> Result<(EmbeddingBatch<S>, ForwardCache<S>)> {
    let (y, enc_cache, trunk_cache) = shared_forward(params, domain_id, x)?;
    let crop_margin = if params.arch.multiscale_encoder { 2 } else { 0 };
    let full = y.dims();
    if full.2 <= 2 * crop_margin || full.3 <= 2 * crop_margin {
        return Err(Error::InvalidArg(format!(
            "embedding window too small: trunk output {}x{} with crop margin {crop_margin}",
            full.2, full.3
        )));
    }
    let cropped = crop_center(&y, crop_margin);
    let (n, c, h, w) = cropped.dims();
    let count = n * h * w;
    let eps = S::from_f64(NORM_EPS);
    let mut prenorm = vec![S::zero(); count * c];
    let mut norms = vec![S::zero(); count];
    let mut vectors = vec![S::zero(); count * c];
    for ni in 0..n {
        for r in 0..h {
            for col in 0..w {
                let e = (ni * h + r) * w + col;
                for ci in 0..c {
                    prenorm[e * c + ci] = cropped.at(ni, ci, r, col);
                }
                let v = &prenorm[e * c..(e + 1) * c];
                let (z, norm) = crate::tensorops::l2_normalize(v, eps);
                vectors[e * c..(e + 1) * c].copy_from_slice(&z);
                norms[e] = norm;
            }
        }
    }
    let batch = EmbeddingBatch {
        dim: c,
        vectors,
        groups: vec![0; count],
    };
    let cache = ForwardCache {
        domain_id: domain_id.to_string(),
        enc: enc_cache,
        trunk: trunk_cache,
        tail: TailCache::Embedding {
            prenorm,
            norms,
            crop_margin,
            full,
        },
    };
    Ok((batch, cache))
}

/// Run encoder + trunk + the domain head, producing one logit vector per
/// sample (N x C x 1 x 1) for the center pixel of each input patch.
pub fn forward_logits<S: Scalar>(
    params: &CdcnnParams<S>,
    domain_id: &str,
    x: &Tensor4<S>,
) -> Result<(Tensor4<S>, ForwardCache<S>)> {
    let (y, enc_cache, trunk_cache) = shared_forward(params, domain_id, x)?;
    let head = params
        .heads
        .get(domain_id)
        .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))?;
    let full = y.dims();
    if full.2 % 2 == 0 || full.3 % 2 == 0 {
        return Err(Error::InvalidArg(format!(
            "logits mode needs odd trunk output, got {}x{}",
            full.2, full.3
        )));
    }
    let crop_margin = (full.2 - 1) / 2;
    if (full.3 - 1) / 2 != crop_margin {
        return Err(Error::InvalidArg(format!(
            "logits mode needs square trunk output, got {}x{}",
            full.2, full.3
        )));
    }
    let center = crop_center(&y, crop_margin);
    let (logits, head_cache) = head.forward(&center, 0)?;
    let cache = ForwardCache {
        domain_id: domain_id.to_string(),
        enc: enc_cache,
        trunk: trunk_cache,
        tail: TailCache::Logits {
            crop_margin,
            full,
            head: head_cache,
        },
    };
    Ok((logits, cache))
}

/// Backpropagate `upstream` through the pass recorded in `cache`,
/// accumulating into the gradient buffers of every parameter touched.
///
/// In embedding mode `upstream` is the gradient w.r.t. the normalized
/// embeddings (count x dim, matching the forward ordering); in logits mode
/// it is the gradient w.r.t. the logits (N x C).
pub fn backward<S: Scalar>(
    params: &mut CdcnnParams<S>,
    cache: &ForwardCache<S>,
    upstream: &[S],
) -> Result<()> {
    let d_trunk_out: Tensor4<S> = match &cache.tail {
        TailCache::Embedding {
            prenorm,
            norms,
            crop_margin,
            full,
        } => {
            if upstream.len() != prenorm.len() {
                return Err(Error::shape(
                    "backward upstream (embedding mode)",
                    prenorm.len(),
                    upstream.len(),
                ));
            }
            let (n, c, h, w) = *full;
            let (ch, cw) = (h - 2 * crop_margin, w - 2 * crop_margin);
            let count = norms.len();
            let eps = S::from_f64(NORM_EPS);
            let mut dcrop = Tensor4::zeros(n, c, ch, cw);
            for e in 0..count {
                let v = &prenorm[e * c..(e + 1) * c];
                let norm = norms[e];
                let denom = norm.max(eps);
                let z: Vec<S> = v.iter().map(|x| *x / denom).collect();
                let dv = crate::tensorops::l2_normalize_backward(
                    &z,
                    norm,
                    eps,
                    &upstream[e * c..(e + 1) * c],
                );
                let ni = e / (ch * cw);
                let r = (e / cw) % ch;
                let col = e % cw;
                for (ci, g) in dv.iter().enumerate() {
                    dcrop.set(ni, ci, r, col, *g);
                }
            }
            scatter_center(&dcrop, *full, *crop_margin)
        }
        TailCache::Logits {
            crop_margin,
            full,
            head,
        } => {
            let hd = params
                .heads
                .get_mut(&cache.domain_id)
                .ok_or_else(|| Error::UnknownDomain(cache.domain_id.clone()))?;
            let n = full.0;
            if upstream.len() != n * hd.c_out {
                return Err(Error::shape(
                    "backward upstream (logits mode)",
                    n * hd.c_out,
                    upstream.len(),
                ));
            }
            let dy = Tensor4::from_vec(n, hd.c_out, 1, 1, upstream.to_vec())?;
            let dcenter = hd.backward_accum(head, &dy)?;
            scatter_center(&dcenter, *full, *crop_margin)
        }
    };
    let d = trunk_backward(&mut params.trunk, &cache.trunk, &d_trunk_out)?;
    let enc = params
        .encoders
        .get_mut(&cache.domain_id)
        .ok_or_else(|| Error::UnknownDomain(cache.domain_id.clone()))?;
    encoder_backward(enc, &cache.enc, &d)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// FLOPs accounting
// ---------------------------------------------------------------------------

/// Per-layer FLOPs (2 per multiply-accumulate) over the valid output
/// positions of a whole image: positions whose encoder window lies fully
/// inside the H x W extent. Pooling and concatenation count zero.
pub fn flops_breakdown(
    arch: &ArchConfig,
    domain: &DomainSpec,
    height: usize,
    width: usize,
) -> Vec<(String, u64)> {
    let ke = if arch.multiscale_encoder {
        5
    } else {
        arch.encoder_kernel
    };
    let valid = (height.saturating_sub(ke - 1) * width.saturating_sub(ke - 1)) as u64;
    let ch = arch.channels as u64;
    let bands = domain.bands as u64;
    let classes = domain.num_classes as u64;
    let conv = |c_out: u64, c_in: u64, k: u64| 2 * c_out * c_in * k * k * valid;

    let mut rows = Vec::new();
    if arch.multiscale_encoder {
        rows.push(("enc/c1.b1 1x1".to_string(), conv(ch, bands, 1)));
        rows.push(("enc/c1.b3 3x3".to_string(), conv(ch, bands, 3)));
        rows.push(("enc/c1.b5 5x5".to_string(), conv(ch, bands, 5)));
        rows.push(("enc/c2 1x1".to_string(), conv(ch, 3 * ch, 1)));
    } else {
        rows.push((
            format!("enc/c1 {0}x{0}", arch.encoder_kernel),
            conv(ch, bands, arch.encoder_kernel as u64),
        ));
    }
    for i in 0..arch.n_res_modules {
        rows.push((format!("trunk/r{i}.1 1x1"), conv(ch, ch, 1)));
        rows.push((format!("trunk/r{i}.2 1x1"), conv(ch, ch, 1)));
    }
    rows.push(("trunk/c3 1x1".to_string(), conv(ch, ch, 1)));
    rows.push(("trunk/c4 1x1".to_string(), conv(ch, ch, 1)));
    rows.push(("head/c5 1x1".to_string(), conv(classes, ch, 1)));
    rows
}

/// Total FLOPs of one full-image forward pass (see [`flops_breakdown`]).
pub fn flops(arch: &ArchConfig, domain: &DomainSpec, height: usize, width: usize) -> u64 {
    flops_breakdown(arch, domain, height, width)
        .iter()
        .map(|(_, f)| f)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(ch: usize, n: usize) -> ArchConfig {
        ArchConfig {
            channels: ch,
            n_res_modules: n,
            ..ArchConfig::default()
        }
    }

    fn one_domain(bands: usize, classes: usize) -> Vec<DomainSpec> {
        vec![DomainSpec::new("d0", bands, classes)]
    }

    fn values_of<S: Scalar>(params: &CdcnnParams<S>) -> Vec<Vec<S>> {
        params.params().iter().map(|p| p.value.clone()).collect()
    }

    #[test]
    fn init_same_seed_is_bit_identical() {
        let arch = tiny_arch(8, 1);
        let a: CdcnnParams<f64> = init_params(&arch, &one_domain(4, 3), 42).unwrap();
        let b: CdcnnParams<f64> = init_params(&arch, &one_domain(4, 3), 42).unwrap();
        assert_eq!(values_of(&a), values_of(&b));
        let c: CdcnnParams<f64> = init_params(&arch, &one_domain(4, 3), 43).unwrap();
        assert_ne!(values_of(&a), values_of(&c));
    }

    #[test]
    fn init_sample_std_near_declared() {
        // 128x128 pointwise weight: 16384 draws from N(0, 0.001^2)
        let arch = ArchConfig {
            n_res_modules: 0,
            ..ArchConfig::default()
        };
        let params: CdcnnParams<f64> = init_params(&arch, &one_domain(4, 3), 7).unwrap();
        let w = &params.trunk.c3.weight.value;
        assert_eq!(w.len(), 128 * 128);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        assert!((0.0008..=0.0012).contains(&std), "sample std {std}");
    }

    #[test]
    fn init_encoder_shape_for_200_band_domain() {
        let params: CdcnnParams<f32> =
            init_params(&ArchConfig::default(), &one_domain(200, 16), 1).unwrap();
        match &params.encoders["d0"] {
            EncoderParams::Single(c) => {
                assert_eq!(c.weight.shape, vec![128, 200, 5, 5]);
            }
            _ => panic!("expected single encoder"),
        }
        assert_eq!(params.heads["d0"].weight.shape, vec![16, 128, 1, 1]);
        assert_eq!(params.trunk.c3.weight.lr_group, LrGroup::Shared);
        match &params.encoders["d0"] {
            EncoderParams::Single(c) => {
                assert_eq!(c.weight.lr_group, LrGroup::DomainSpecific)
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn embedding_shapes_and_unit_norms() {
        // 10x10 window (p=6 plus margin 2 per side), 103 bands -> 36 embeddings
        let params: CdcnnParams<f64> =
            init_params(&ArchConfig::default(), &one_domain(103, 9), 5).unwrap();
        let x = Tensor4::from_vec(1, 103, 10, 10, vec![0.3; 103 * 100]).unwrap();
        let (emb, _) = forward_embedding(&params, "d0", &x).unwrap();
        assert_eq!(emb.count(), 36);
        assert_eq!(emb.dim, 128);
        for i in 0..emb.count() {
            let norm: f64 = emb.vector(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn zeroed_residual_branch_passes_input_through() {
        let arch = tiny_arch(6, 1);
        let mut params: CdcnnParams<f64> = init_params(&arch, &one_domain(3, 2), 2).unwrap();
        for m in &mut params.trunk.res_modules {
            m.conv1.weight.value.iter_mut().for_each(|v| *v = 0.0);
            m.conv1.bias.value.iter_mut().for_each(|v| *v = 0.0);
            m.conv2.weight.value.iter_mut().for_each(|v| *v = 0.0);
            m.conv2.bias.value.iter_mut().for_each(|v| *v = 0.0);
        }
        // non-negative input (post-relu regime)
        let x = Tensor4::from_vec(1, 6, 2, 2, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let m = &params.trunk.res_modules[0];
        let (t, _) = m.conv1.forward(&x, 0).unwrap();
        let (t, _) = relu_forward(&t);
        let (u, _) = m.conv2.forward(&t, 0).unwrap();
        let mut sum = u;
        for (s, xv) in sum.data_mut().iter_mut().zip(x.data().iter()) {
            *s += *xv;
        }
        let (y, _) = relu_forward(&sum);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zeroed_trunk_reduces_to_skip_connections() {
        // with the whole trunk zero-initialized the embedding is exactly the
        // normalized encoder output
        let arch = tiny_arch(5, 2);
        let mut params: CdcnnParams<f64> = init_params(&arch, &one_domain(3, 2), 9).unwrap();
        for m in &mut params.trunk.res_modules {
            for c in [&mut m.conv1, &mut m.conv2] {
                c.weight.value.iter_mut().for_each(|v| *v = 0.0);
                c.bias.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for c in [&mut params.trunk.c3, &mut params.trunk.c4] {
            c.weight.value.iter_mut().for_each(|v| *v = 0.0);
            c.bias.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor4::from_vec(
            1,
            3,
            7,
            7,
            (0..3 * 49).map(|i| (i as f64 * 0.17).sin()).collect(),
        )
        .unwrap();
        let enc = &params.encoders["d0"];
        let (enc_out, _) = encoder_forward(enc, &x).unwrap();
        let (emb, _) = forward_embedding(&params, "d0", &x).unwrap();
        let (_, c, h, w) = enc_out.dims();
        assert_eq!(emb.count(), h * w);
        for r in 0..h {
            for col in 0..w {
                let v: Vec<f64> = (0..c).map(|ci| enc_out.at(0, ci, r, col)).collect();
                let (z, _) = crate::tensorops::l2_normalize(&v, NORM_EPS);
                let got = emb.vector(r * w + col);
                for (a, b) in z.iter().zip(got.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn logits_shape_and_batch_permutation() {
        let arch = tiny_arch(6, 1);
        let params: CdcnnParams<f64> = init_params(&arch, &one_domain(4, 3), 3).unwrap();
        let n = 4;
        let data: Vec<f64> = (0..n * 4 * 25).map(|i| (i as f64 * 0.03).cos()).collect();
        let x = Tensor4::from_vec(n, 4, 5, 5, data.clone()).unwrap();
        let (logits, _) = forward_logits(&params, "d0", &x).unwrap();
        assert_eq!(logits.dims(), (n, 3, 1, 1));

        // reverse the batch; outputs must permute identically
        let mut rev = Vec::new();
        for i in (0..n).rev() {
            rev.extend_from_slice(&data[i * 100..(i + 1) * 100]);
        }
        let xr = Tensor4::from_vec(n, 4, 5, 5, rev).unwrap();
        let (logits_r, _) = forward_logits(&params, "d0", &xr).unwrap();
        for i in 0..n {
            assert_eq!(
                &logits.data()[i * 3..(i + 1) * 3],
                &logits_r.data()[(n - 1 - i) * 3..(n - i) * 3]
            );
        }
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let params: CdcnnParams<f64> =
            init_params(&tiny_arch(4, 0), &one_domain(2, 2), 1).unwrap();
        let x = Tensor4::zeros(1, 2, 5, 5);
        assert!(matches!(
            forward_logits(&params, "nope", &x),
            Err(Error::UnknownDomain(_))
        ));
    }

    #[test]
    fn trunk_grads_accumulate_across_domains() {
        let arch = tiny_arch(5, 1);
        let domains = vec![DomainSpec::new("a", 3, 2), DomainSpec::new("b", 4, 2)];
        let mk_input = |bands: usize, seed: usize| {
            Tensor4::from_vec(
                2,
                bands,
                5,
                5,
                (0..2 * bands * 25)
                    .map(|i| ((i + seed) as f64 * 0.11).sin())
                    .collect(),
            )
            .unwrap()
        };
        let upstream = |n: usize| vec![0.37; n * 2];

        // joint: both domains before reading trunk grads
        let mut joint: CdcnnParams<f64> = init_params(&arch, &domains, 4).unwrap();
        joint.zero_grads();
        let xa = mk_input(3, 0);
        let xb = mk_input(4, 100);
        let (la, ca) = forward_logits(&joint, "a", &xa).unwrap();
        backward(&mut joint, &ca, &upstream(la.batch())).unwrap();
        let (lb, cb) = forward_logits(&joint, "b", &xb).unwrap();
        backward(&mut joint, &cb, &upstream(lb.batch())).unwrap();
        let joint_grads: Vec<Vec<f64>> = joint
            .trunk_params()
            .iter()
            .map(|p| p.grad.clone())
            .collect();

        // separate passes from the same initialization
        let mut single: CdcnnParams<f64> = init_params(&arch, &domains, 4).unwrap();
        single.zero_grads();
        let (la, ca) = forward_logits(&single, "a", &xa).unwrap();
        backward(&mut single, &ca, &upstream(la.batch())).unwrap();
        let grads_a: Vec<Vec<f64>> = single
            .trunk_params()
            .iter()
            .map(|p| p.grad.clone())
            .collect();
        single.zero_grads();
        let (lb, cb) = forward_logits(&single, "b", &xb).unwrap();
        backward(&mut single, &cb, &upstream(lb.batch())).unwrap();
        let grads_b: Vec<Vec<f64>> = single
            .trunk_params()
            .iter()
            .map(|p| p.grad.clone())
            .collect();

        for ((j, a), b) in joint_grads.iter().zip(grads_a.iter()).zip(grads_b.iter()) {
            for ((jv, av), bv) in j.iter().zip(a.iter()).zip(b.iter()) {
                assert!((jv - (av + bv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let arch = tiny_arch(4, 1);
        let mut params: CdcnnParams<f64> = init_params(&arch, &one_domain(3, 2), 8).unwrap();
        params.zero_grads();
        let x = Tensor4::from_vec(1, 3, 5, 5, vec![0.5; 75]).unwrap();
        let (logits, cache) = forward_logits(&params, "d0", &x).unwrap();
        backward(&mut params, &cache, &vec![0.0; logits.batch() * 2]).unwrap();
        for p in params.params() {
            assert!(p.grad.iter().all(|&g| g == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn multiscale_encoder_preserves_spatial_size() {
        let arch = ArchConfig {
            channels: 4,
            n_res_modules: 1,
            multiscale_encoder: true,
            ..ArchConfig::default()
        };
        let params: CdcnnParams<f64> = init_params(&arch, &one_domain(3, 2), 6).unwrap();
        let x = Tensor4::from_vec(
            2,
            3,
            5,
            5,
            (0..150).map(|i| (i as f64 * 0.07).sin()).collect(),
        )
        .unwrap();
        let (logits, _) = forward_logits(&params, "d0", &x).unwrap();
        assert_eq!(logits.dims(), (2, 2, 1, 1));
        // embedding mode on a (p+4) window with p=3
        let xw = Tensor4::from_vec(
            1,
            3,
            7,
            7,
            (0..147).map(|i| (i as f64 * 0.05).cos()).collect(),
        )
        .unwrap();
        let (emb, _) = forward_embedding(&params, "d0", &xw).unwrap();
        assert_eq!(emb.count(), 9);
    }

    #[test]
    fn flops_match_hand_counts() {
        // single 1x1 layer over P pixels contributes exactly 2*128*128*P
        let arch = ArchConfig {
            n_res_modules: 0,
            ..ArchConfig::default()
        };
        let spec = DomainSpec::new("ip", 200, 16);
        let rows = flops_breakdown(&arch, &spec, 145, 145);
        let p = (145 - 4) * (145 - 4);
        let c3 = rows.iter().find(|(n, _)| n.starts_with("trunk/c3")).unwrap();
        assert_eq!(c3.1, 2 * 128 * 128 * p as u64);

        // modified backbone with n = 5 on Indian Pines dimensions
        let modified = ArchConfig::default();
        assert_eq!(flops(&modified, &spec, 145, 145), 33_346_639_872);

        // original multiscale backbone with 2 residual modules
        let original = ArchConfig {
            multiscale_encoder: true,
            n_res_modules: 2,
            ..ArchConfig::default()
        };
        assert_eq!(flops(&original, &spec, 145, 145), 41_571_330_048);

        // Table ordering: original exceeds modified
        assert!(flops(&original, &spec, 145, 145) > flops(&modified, &spec, 145, 145));

        // monotone in n
        let n0 = flops(
            &ArchConfig {
                n_res_modules: 0,
                ..ArchConfig::default()
            },
            &spec,
            145,
            145,
        );
        assert!(n0 < flops(&modified, &spec, 145, 145));
    }
}
