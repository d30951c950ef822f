//! The four networks: the attribute-conditioned forward generator, the
//! unconditional backward generator, the multi-task style discriminator and
//! the content discriminator.
//!
//! Both generators share one macro-structure: a reflection-padded 7x7 stem,
//! `n_downsample` stride-2 convolutions, a stack of residual blocks at the
//! bottleneck, and `n_downsample` nearest-neighbour upsampling stages each
//! followed by a 3x3 convolution, then a 7x7 convolution and `tanh`. The
//! forward generator replaces the instance norms of its last `n_adain_blocks`
//! residual blocks with AdaIN driven by the condition MLP; the backward
//! generator has no conditioning path at all. The decoder uses layer norm so
//! channel statistics injected by AdaIN survive to the output.

use crate::conditioning::{adain_var, ConditionBatch, ConditionMlp, ADAIN_EPS};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::schema::AttributeSchema;
use crate::tensor::{ImageTensor, Tensor};

const CONV_INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;

/// Structural description of a layer, for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize },
    ReflectionPad,
    InstanceNorm,
    LayerNorm,
    AdaIn,
    Relu,
    LeakyRelu,
    Tanh,
    UpsampleNearest,
    ResidualAdd,
    GlobalAvgPool,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Padding {
    Reflect(usize),
    Zero(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[cout, cin, kernel, kernel], std, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[cout]);
        ConvLayer {
            weight,
            bias,
            kernel,
            stride,
            padding,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        match self.padding {
            Padding::Reflect(0) | Padding::Zero(0) => g.conv2d(x, w, Some(b), self.stride, 0),
            Padding::Reflect(p) => {
                let padded = g.reflect_pad(x, p);
                g.conv2d(padded, w, Some(b), self.stride, 0)
            }
            Padding::Zero(p) => g.conv2d(x, w, Some(b), self.stride, p),
        }
    }

    fn kinds(&self, out: &mut Vec<LayerKind>) {
        if let Padding::Reflect(p) = self.padding {
            if p > 0 {
                out.push(LayerKind::ReflectionPad);
            }
        }
        out.push(LayerKind::Conv {
            kernel: self.kernel,
            stride: self.stride,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockNorm {
    Instance,
    /// Index into the AdaIN parameter blocks.
    AdaIn(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    norm: BlockNorm,
}

impl ResBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, adain: &[(Var, Var)]) -> Var {
        let eps = T::lit(ADAIN_EPS);
        let norm = |g: &mut Graph<T>, h: Var| match self.norm {
            BlockNorm::Instance => g.instance_norm(h, eps),
            BlockNorm::AdaIn(i) => adain_var(g, h, adain[i].0, adain[i].1, eps),
        };
        let h = self.conv1.forward(g, store, x);
        let h = norm(g, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let h = norm(g, h);
        g.add(x, h)
    }

    fn kinds(&self, out: &mut Vec<LayerKind>) {
        let norm = match self.norm {
            BlockNorm::Instance => LayerKind::InstanceNorm,
            BlockNorm::AdaIn(_) => LayerKind::AdaIn,
        };
        self.conv1.kinds(out);
        out.extend([norm, LayerKind::Relu]);
        self.conv2.kinds(out);
        out.extend([norm, LayerKind::ResidualAdd]);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UpStage {
    conv: ConvLayer,
    ln_gamma: usize,
    ln_beta: usize,
}

/// Shared encoder / residual / decoder body of both generators.
#[derive(Clone, Debug, PartialEq)]
struct Translator<T> {
    store: ParamStore<T>,
    stem: ConvLayer,
    down: Vec<ConvLayer>,
    blocks: Vec<ResBlock>,
    up: Vec<UpStage>,
    out: ConvLayer,
    n_downsample: usize,
}

impl<T: Real> Translator<T> {
    fn new(tag: &'static str, cfg: &RunConfig, adain_blocks: usize, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new(tag);
        let base = cfg.channel_base;
        let std = CONV_INIT_STD;
        let stem = ConvLayer::new(&mut store, "stem", 3, base, 7, 1, Padding::Reflect(3), std, rng);
        let mut ch = base;
        let mut down = Vec::new();
        for i in 0..cfg.n_downsample {
            down.push(ConvLayer::new(&mut store, &format!("down{i}"), ch, ch * 2, 3, 2, Padding::Reflect(1), std, rng));
            ch *= 2;
        }
        let total_blocks = cfg.n_res_blocks + cfg.n_adain_blocks;
        let mut blocks = Vec::new();
        for i in 0..total_blocks {
            let norm = if i >= cfg.n_res_blocks && i - cfg.n_res_blocks < adain_blocks {
                BlockNorm::AdaIn(i - cfg.n_res_blocks)
            } else {
                BlockNorm::Instance
            };
            let name = format!("res{i}");
            blocks.push(ResBlock {
                conv1: ConvLayer::new(&mut store, &format!("{name}.conv1"), ch, ch, 3, 1, Padding::Reflect(1), std, rng),
                conv2: ConvLayer::new(&mut store, &format!("{name}.conv2"), ch, ch, 3, 1, Padding::Reflect(1), std, rng),
                norm,
            });
        }
        let mut up = Vec::new();
        for i in 0..cfg.n_downsample {
            let conv = ConvLayer::new(&mut store, &format!("up{i}"), ch, ch / 2, 3, 1, Padding::Reflect(1), std, rng);
            ch /= 2;
            let ln_gamma = store.add_ones(format!("up{i}.ln.gamma"), &[1, ch]);
            let ln_beta = store.add_zeros(format!("up{i}.ln.beta"), &[1, ch]);
            up.push(UpStage {
                conv,
                ln_gamma,
                ln_beta,
            });
        }
        let out = ConvLayer::new(&mut store, "out", ch, 3, 7, 1, Padding::Reflect(3), std, rng);
        Translator {
            store,
            stem,
            down,
            blocks,
            up,
            out,
            n_downsample: cfg.n_downsample,
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, adain: &[(Var, Var)]) -> Var {
        let eps = T::lit(ADAIN_EPS);
        let s = &self.store;
        let mut h = self.stem.forward(g, s, x);
        h = g.instance_norm(h, eps);
        h = g.relu(h);
        for d in &self.down {
            h = d.forward(g, s, h);
            h = g.instance_norm(h, eps);
            h = g.relu(h);
        }
        for b in &self.blocks {
            h = b.forward(g, s, h, adain);
        }
        for u in &self.up {
            h = g.upsample_nearest2x(h);
            h = u.conv.forward(g, s, h);
            h = g.layer_norm(h, eps);
            let gamma = g.param(s, u.ln_gamma);
            let beta = g.param(s, u.ln_beta);
            h = g.channel_affine(h, gamma, beta);
            h = g.relu(h);
        }
        h = self.out.forward(g, s, h);
        g.tanh(h)
    }

    fn kinds(&self) -> Vec<LayerKind> {
        let mut k = Vec::new();
        self.stem.kinds(&mut k);
        k.extend([LayerKind::InstanceNorm, LayerKind::Relu]);
        for d in &self.down {
            d.kinds(&mut k);
            k.extend([LayerKind::InstanceNorm, LayerKind::Relu]);
        }
        for b in &self.blocks {
            b.kinds(&mut k);
        }
        for u in &self.up {
            k.push(LayerKind::UpsampleNearest);
            u.conv.kinds(&mut k);
            k.extend([LayerKind::LayerNorm, LayerKind::Relu]);
        }
        self.out.kinds(&mut k);
        k.push(LayerKind::Tanh);
        k
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        let (_, _, h, w) = x.dims();
        let f = 1 << self.n_downsample;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by {f} (2^n_downsample)"
            )));
        }
        if h <= 3 || w <= 3 {
            return Err(Error::Shape(format!("image {h}x{w} too small")));
        }
        Ok(())
    }
}

/// `G`: translates a content image under an attribute condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardGenerator<T> {
    net: Translator<T>,
    mlp: ConditionMlp<T>,
}

impl<T: Real> ForwardGenerator<T> {
    pub const TAG: &'static str = "gen_forward";

    pub fn new(cfg: &RunConfig, schema: &AttributeSchema, rng: &mut SeededRng) -> Self {
        let net = Translator::new(Self::TAG, cfg, cfg.n_adain_blocks, rng);
        let channels = vec![cfg.bottleneck_channels(); cfg.n_adain_blocks];
        let mlp = ConditionMlp::new(schema.condition_dim(), cfg.mlp_hidden, cfg.mlp_layers, &channels, rng);
        ForwardGenerator { net, mlp }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.net.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.net.store
    }

    pub fn mlp(&self) -> &ConditionMlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut ConditionMlp<T> {
        &mut self.mlp
    }

    /// `cond` is `(B, N_a + N_p + N_g)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Var {
        let params = self.mlp.forward(g, cond);
        let adain = self.mlp.split(g, params);
        self.net.forward(g, x, &adain)
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.net.kinds()
    }

    /// Inference: `y~ = G(x, c)`.
    pub fn generate(&self, x: &ImageTensor, cond: &ConditionBatch) -> Result<ImageTensor> {
        self.net.check_input(x)?;
        if cond.len() != x.batch() {
            return Err(Error::Shape(format!(
                "{} conditions for a batch of {}",
                cond.len(),
                x.batch()
            )));
        }
        if cond.dim() != self.mlp.input_dim() {
            return Err(Error::Shape(format!(
                "condition length {} does not match the schema width {}",
                cond.dim(),
                self.mlp.input_dim()
            )));
        }
        let mut g = frozen_graph();
        let xv = g.constant(x.tensor().cast());
        let cv = g.constant(cond.to_tensor());
        let y = self.forward(&mut g, xv, cv);
        ImageTensor::new(g.value(y).cast())
    }
}

/// `F`: strips attributes, mapping a painting back to the content domain.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardGenerator<T> {
    net: Translator<T>,
}

impl<T: Real> BackwardGenerator<T> {
    pub const TAG: &'static str = "gen_backward";

    pub fn new(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        BackwardGenerator {
            net: Translator::new(Self::TAG, cfg, 0, rng),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.net.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.net.store
    }

    pub fn forward(&self, g: &mut Graph<T>, y: Var) -> Var {
        self.net.forward(g, y, &[])
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.net.kinds()
    }

    pub fn generate(&self, y: &ImageTensor) -> Result<ImageTensor> {
        self.net.check_input(y)?;
        let mut g = frozen_graph();
        let yv = g.constant(y.tensor().cast());
        let x = self.forward(&mut g, yv);
        ImageTensor::new(g.value(x).cast())
    }
}

fn frozen_graph<T: Real>() -> Graph<T> {
    let mut g = Graph::new();
    for tag in [
        ForwardGenerator::<T>::TAG,
        BackwardGenerator::<T>::TAG,
        ConditionMlp::<T>::TAG,
        StyleDiscriminator::<T>::TAG,
        ContentDiscriminator::<T>::TAG,
    ] {
        g.freeze(tag);
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
struct Trunk {
    convs: Vec<ConvLayer>,
    channels: usize,
}

impl Trunk {
    fn new<T: Real>(store: &mut ParamStore<T>, base: usize, layers: usize, rng: &mut SeededRng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        let mut cout = base;
        for i in 0..layers {
            convs.push(ConvLayer::new(store, &format!("trunk{i}"), cin, cout, 4, 2, Padding::Zero(1), CONV_INIT_STD, rng));
            cin = cout;
            cout = (cout * 2).min(base * 8);
        }
        Trunk { convs, channels: cin }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, store, h);
            h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        }
        h
    }
}

/// Graph outputs of the style discriminator.
#[derive(Clone, Copy, Debug)]
pub struct StyleHeads {
    /// `(B, 1)` patch-averaged realness logits.
    pub realness: Var,
    /// `(B, N_a)`, `(B, N_p)`, `(B, N_g)` attribute logits.
    pub logits: [Var; 3],
}

/// Evaluated outputs of the style discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleJudgement {
    /// Probability of "real" per sample, after the logit clamp and sigmoid.
    pub realness: Vec<f64>,
    pub artist: Tensor<f64>,
    pub period: Tensor<f64>,
    pub genre: Tensor<f64>,
}

/// `D_y`: shared trunk, a patch realness head and three attribute heads.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDiscriminator<T> {
    store: ParamStore<T>,
    trunk: Trunk,
    realness: ConvLayer,
    heads: [(usize, usize); 3],
}

impl<T: Real> StyleDiscriminator<T> {
    pub const TAG: &'static str = "disc_style";

    pub fn new(cfg: &RunConfig, schema: &AttributeSchema, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new(Self::TAG);
        let trunk = Trunk::new(&mut store, cfg.channel_base, cfg.disc_layers, rng);
        let c = trunk.channels;
        let realness = ConvLayer::new(&mut store, "realness", c, 1, 3, 1, Padding::Zero(1), CONV_INIT_STD, rng);
        let mut heads = [(0, 0); 3];
        for (i, (name, n)) in ["artist", "period", "genre"].iter().zip(schema.sizes()).enumerate() {
            let w = store.add_normal(format!("{name}_head.weight"), &[n, c], CONV_INIT_STD, rng);
            let b = store.add_zeros(format!("{name}_head.bias"), &[n]);
            heads[i] = (w, b);
        }
        StyleDiscriminator {
            store,
            trunk,
            realness,
            heads,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Indices of the trunk parameters within [`Self::store`].
    pub fn trunk_param_indices(&self) -> Vec<usize> {
        self.trunk.convs.iter().flat_map(|c| [c.weight, c.bias]).collect()
    }

    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> StyleHeads {
        let feats = self.trunk.forward(g, &self.store, img);
        let patch = self.realness.forward(g, &self.store, feats);
        let realness = g.global_avg_pool(patch);
        let pooled = g.global_avg_pool(feats);
        let logits = self.heads.map(|(w, b)| {
            let w = g.param(&self.store, w);
            let b = g.param(&self.store, b);
            g.linear(pooled, w, Some(b))
        });
        StyleHeads { realness, logits }
    }

    pub fn discriminate(&self, img: &ImageTensor) -> StyleJudgement {
        let mut g = frozen_graph();
        let x = g.constant(img.tensor().cast());
        let heads = self.forward(&mut g, x);
        let realness = probabilities(g.value(heads.realness));
        let [a, p, gn] = heads.logits.map(|v| g.value(v).cast());
        StyleJudgement {
            realness,
            artist: a,
            period: p,
            genre: gn,
        }
    }
}

/// `D_x`: realness only.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentDiscriminator<T> {
    store: ParamStore<T>,
    trunk: Trunk,
    realness: ConvLayer,
}

impl<T: Real> ContentDiscriminator<T> {
    pub const TAG: &'static str = "disc_content";

    pub fn new(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new(Self::TAG);
        let trunk = Trunk::new(&mut store, cfg.channel_base, cfg.disc_layers, rng);
        let realness = ConvLayer::new(&mut store, "realness", trunk.channels, 1, 3, 1, Padding::Zero(1), CONV_INIT_STD, rng);
        ContentDiscriminator {
            store,
            trunk,
            realness,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `(B, 1)` realness logits.
    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> Var {
        let feats = self.trunk.forward(g, &self.store, img);
        let patch = self.realness.forward(g, &self.store, feats);
        g.global_avg_pool(patch)
    }

    /// Probability of "real" per sample.
    pub fn discriminate(&self, img: &ImageTensor) -> Vec<f64> {
        let mut g = frozen_graph();
        let x = g.constant(img.tensor().cast());
        let r = self.forward(&mut g, x);
        probabilities(g.value(r))
    }
}

fn probabilities<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let clamp = crate::graph::LOGIT_CLAMP;
    logits
        .data()
        .iter()
        .map(|v| {
            let s = v.to_f64().unwrap_or(f64::NAN).clamp(-clamp, clamp);
            1.0 / (1.0 + (-s).exp())
        })
        .collect()
}

/// All trainable networks of the system.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T> {
    pub gen_forward: ForwardGenerator<T>,
    pub gen_backward: BackwardGenerator<T>,
    pub disc_style: StyleDiscriminator<T>,
    pub disc_content: ContentDiscriminator<T>,
}

impl<T: Real> Networks<T> {
    pub fn new(cfg: &RunConfig, schema: &AttributeSchema, rng: &mut SeededRng) -> Self {
        Networks {
            gen_forward: ForwardGenerator::new(cfg, schema, &mut rng.fork()),
            gen_backward: BackwardGenerator::new(cfg, &mut rng.fork()),
            disc_style: StyleDiscriminator::new(cfg, schema, &mut rng.fork()),
            disc_content: ContentDiscriminator::new(cfg, &mut rng.fork()),
        }
    }

    /// Generator-side stores: G, its condition MLP, F.
    pub fn generator_stores(&self) -> [&ParamStore<T>; 3] {
        [self.gen_forward.store(), self.gen_forward.mlp().store(), self.gen_backward.store()]
    }

    pub fn discriminator_stores(&self) -> [&ParamStore<T>; 2] {
        [self.disc_style.store(), self.disc_content.store()]
    }

    pub fn all_stores(&self) -> [&ParamStore<T>; 5] {
        let [a, b, c] = self.generator_stores();
        let [d, e] = self.discriminator_stores();
        [a, b, c, d, e]
    }

    pub fn store_mut(&mut self, tag: &str) -> Option<&mut ParamStore<T>> {
        match tag {
            t if t == ForwardGenerator::<T>::TAG => Some(self.gen_forward.store_mut()),
            t if t == ConditionMlp::<T>::TAG => Some(self.gen_forward.mlp_mut().store_mut()),
            t if t == BackwardGenerator::<T>::TAG => Some(self.gen_backward.store_mut()),
            t if t == StyleDiscriminator::<T>::TAG => Some(self.disc_style.store_mut()),
            t if t == ContentDiscriminator::<T>::TAG => Some(self.disc_content.store_mut()),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.all_stores().iter().map(|s| s.num_scalars()).sum()
    }

    /// Cast every weight to another element type.
    pub fn cast<U: Real>(&self, cfg: &RunConfig, schema: &AttributeSchema) -> Networks<U> {
        let mut out = Networks::<U>::new(cfg, schema, &mut SeededRng::new(0));
        for store in self.all_stores() {
            let target = out.store_mut(store.tag()).expect("known tag");
            for i in 0..store.len() {
                *target.value_mut(i) = store.value(i).cast();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{AttributeSet, Mode};
    use crate::config::GenrePerturbationParams;

    fn schema() -> AttributeSchema {
        AttributeSchema::from_strs(
            &["cezanne", "monet", "picasso", "vangogh"],
            &["early", "late"],
            &["cubism", "impressionism", "surrealism"],
        )
        .unwrap()
    }

    fn small_cfg() -> RunConfig {
        RunConfig {
            image_size: 16,
            channel_base: 4,
            n_downsample: 2,
            n_res_blocks: 1,
            n_adain_blocks: 2,
            mlp_hidden: 8,
            mlp_layers: 2,
            disc_layers: 2,
            ..RunConfig::default()
        }
    }

    fn cond(labels: [usize; 3]) -> AttributeSet {
        AttributeSet::from_indices(
            labels,
            &schema(),
            Mode::Test,
            &GenrePerturbationParams::disabled(),
            &mut SeededRng::new(0),
        )
        .unwrap()
    }

    fn image(batch: usize, size: usize, seed: u64) -> ImageTensor {
        let mut rng = SeededRng::new(seed);
        ImageTensor::new(Tensor::from_fn(&[batch, 3, size, size], |_| (rng.gaussian() * 0.5).tanh() as f32)).unwrap()
    }

    #[test]
    fn generators_preserve_shape_and_range() {
        let cfg = RunConfig {
            image_size: 64,
            ..small_cfg()
        };
        let nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(1));
        let x = image(2, 64, 2);
        let c = ConditionBatch::from_sets(&[cond([0, 0, 0]), cond([1, 1, 2])]);
        let y = nets.gen_forward.generate(&x, &c).unwrap();
        assert_eq!(y.dims(), (2, 3, 64, 64));
        let xh = nets.gen_backward.generate(&y).unwrap();
        assert_eq!(xh.dims(), x.dims());
        let single = nets.gen_backward.generate(&x.sample(0)).unwrap();
        assert_eq!(single.dims(), (1, 3, 64, 64));
    }

    #[test]
    fn every_admissible_size_is_preserved() {
        let cfg = small_cfg();
        let nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(1));
        for size in [8, 12, 16, 20] {
            let x = image(1, size, 3);
            let y = nets.gen_forward.generate(&x, &ConditionBatch::from_sets(&[cond([2, 0, 1])])).unwrap();
            assert_eq!(y.dims(), (1, 3, size, size));
            assert_eq!(nets.gen_backward.generate(&x).unwrap().dims(), (1, 3, size, size));
        }
    }

    #[test]
    fn generation_is_deterministic_and_condition_sensitive() {
        let cfg = small_cfg();
        let nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(7));
        let x = image(1, 16, 4);
        let a = ConditionBatch::from_sets(&[cond([0, 1, 1])]);
        let b = ConditionBatch::from_sets(&[cond([3, 1, 1])]);
        let ya = nets.gen_forward.generate(&x, &a).unwrap();
        assert_eq!(ya, nets.gen_forward.generate(&x, &a).unwrap());
        assert_ne!(ya, nets.gen_forward.generate(&x, &b).unwrap());
    }

    #[test]
    fn generator_output_bounded_for_extreme_weights() {
        let cfg = small_cfg();
        let mut nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(7));
        for i in 0..nets.gen_forward.store().len() {
            let v = nets.gen_forward.store_mut().value_mut(i);
            *v = v.map(|w| w * 1e3);
        }
        let y = nets.gen_forward.generate(&image(1, 16, 5), &ConditionBatch::from_sets(&[cond([0, 0, 0])])).unwrap();
        let (lo, hi) = y.tensor().min_max();
        assert!(lo >= -1.0 && hi <= 1.0);
    }

    #[test]
    fn generator_rejects_mismatches() {
        let cfg = small_cfg();
        let nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(7));
        let x = image(2, 16, 4);
        let one = ConditionBatch::from_sets(&[cond([0, 0, 0])]);
        assert!(nets.gen_forward.generate(&x, &one).is_err());
        let odd = image(1, 12, 4);
        let cfg3 = RunConfig {
            n_downsample: 3,
            ..small_cfg()
        };
        let deep = BackwardGenerator::<f32>::new(&cfg3, &mut SeededRng::new(0));
        assert!(deep.generate(&odd).is_err());
    }

    #[test]
    fn structure_has_no_transposed_convolution_and_f_is_unconditioned() {
        let cfg = small_cfg();
        let nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(0));
        let g_kinds = nets.gen_forward.layer_kinds();
        let f_kinds = nets.gen_backward.layer_kinds();
        assert!(g_kinds.contains(&LayerKind::AdaIn));
        assert!(!f_kinds.contains(&LayerKind::AdaIn));
        assert!(g_kinds.contains(&LayerKind::UpsampleNearest));
        // upsampling stages are nearest + stride-1 convolutions only
        for k in g_kinds.iter().chain(&f_kinds) {
            if let LayerKind::Conv { stride, .. } = k {
                assert!(*stride <= 2);
            }
        }
        assert!(nets.gen_backward.store().names().iter().all(|n| !n.contains("mlp") && !n.contains("adain")));
    }

    #[test]
    fn discriminator_head_shapes() {
        let cfg = RunConfig {
            image_size: 64,
            disc_layers: 3,
            ..small_cfg()
        };
        let nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(0));
        let j = nets.disc_style.discriminate(&image(4, 64, 1));
        assert_eq!(j.artist.shape(), &[4, 4]);
        assert_eq!(j.period.shape(), &[4, 2]);
        assert_eq!(j.genre.shape(), &[4, 3]);
        assert_eq!(j.realness.len(), 4);
        assert!(j.realness.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
        let r = nets.disc_content.discriminate(&image(4, 64, 1));
        assert_eq!(r.len(), 4);
        assert_eq!(r, nets.disc_content.discriminate(&image(4, 64, 1)));
    }

    #[test]
    fn zero_trunk_gives_uniform_posteriors() {
        let cfg = small_cfg();
        let mut d = StyleDiscriminator::<f32>::new(&cfg, &schema(), &mut SeededRng::new(0));
        for i in d.trunk_param_indices() {
            let v = d.store_mut().value_mut(i);
            *v = Tensor::zeros(&v.shape().to_vec());
        }
        let j = d.discriminate(&image(3, 16, 9));
        for t in [&j.artist, &j.period, &j.genre] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn artist_cross_entropy_gradient_matches_finite_difference() {
        let cfg = small_cfg();
        let d = StyleDiscriminator::<f64>::new(&cfg, &schema(), &mut SeededRng::new(3));
        let x = image(2, 16, 8).tensor().cast::<f64>();
        let labels = [1, 3];
        let loss = |d: &StyleDiscriminator<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let h = d.forward(&mut g, xv);
            let l = g.cross_entropy_mean(h.logits[0], &labels);
            (g, l)
        };
        let (mut g, l) = loss(&d);
        g.backward(l);
        let grads = g.param_grads(d.store());
        let mut rng = SeededRng::new(4);
        let trunk = d.trunk_param_indices();
        for _ in 0..10 {
            let p = trunk[rng.index(trunk.len())];
            let j = rng.index(d.store().value(p).numel());
            let analytic = grads[p].as_ref().unwrap().data()[j];
            let h = 1e-5;
            let mut plus = d.clone();
            plus.store_mut().value_mut(p).data_mut()[j] += h;
            let mut minus = d.clone();
            minus.store_mut().value_mut(p).data_mut()[j] -= h;
            let (gp, lp) = loss(&plus);
            let (gm, lm) = loss(&minus);
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-3, "param {p}[{j}]: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn content_scores_move_after_one_step() {
        use crate::params::{Adam, AdamSettings};
        let cfg = small_cfg();
        let mut d = ContentDiscriminator::<f32>::new(&cfg, &mut SeededRng::new(3));
        let real = image(2, 16, 1);
        let fake = image(2, 16, 2);
        let before = d.discriminate(&real);
        let mut g = Graph::new();
        let r = g.constant(real.tensor().clone());
        let f = g.constant(fake.tensor().clone());
        let sr = d.forward(&mut g, r);
        let sf = d.forward(&mut g, f);
        let lr = g.neg_log_sigmoid_mean(sr, true);
        let lf = g.neg_log_sigmoid_mean(sf, false);
        let loss = g.weighted_sum(&[(lr, 1.0), (lf, 1.0)]);
        g.backward(loss);
        let grads = g.param_grads(d.store());
        let mut opt = Adam::new(AdamSettings::default(), d.store());
        opt.step(d.store_mut(), &grads);
        assert_ne!(before, d.discriminate(&real));
    }

    #[test]
    fn networks_cast_round_trip() {
        let cfg = small_cfg();
        let nets = Networks::<f32>::new(&cfg, &schema(), &mut SeededRng::new(0));
        let wide: Networks<f64> = nets.cast(&cfg, &schema());
        let back: Networks<f32> = wide.cast(&cfg, &schema());
        assert_eq!(back, nets);
    }
}
