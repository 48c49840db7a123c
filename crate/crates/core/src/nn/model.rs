//! The unmixing network: convolutional encoder, pixel tokens with per-phase
//! class tokens, stacked temporal/spatial attention blocks, spectral channel
//! attention, the change-enhancement gate on the class tokens, a softmax
//! abundance head and one linear decoder per phase.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::datamodel::{AbundanceSequence, EndmemberSet, HyperCubeSequence};
use crate::exec::Exec;
use crate::{Error, Result};

/// Negative slope of every leaky rectifier in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Encoder output channels.
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Number of attention blocks.
    pub depth: usize,
    pub dropout: f64,
    /// Change-enhancement gain.
    pub alpha: f64,
    /// Number of endmembers; 0 means "take it from the dataset".
    pub endmembers: usize,
    /// Hidden width of the block MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Channel reduction of the spectral-attention MLP.
    pub spectral_reduction: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            patch_size: 1,
            embed_dim: 128,
            heads: 8,
            depth: 2,
            dropout: 0.1,
            alpha: 0.5,
            endmembers: 0,
            mlp_ratio: 4,
            spectral_reduction: 4,
        }
    }
}

impl ArchitectureConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.embed_dim == 0 || self.heads == 0 || self.patch_size == 0 {
            return bad("channels, embed_dim, heads and patch_size must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if self.endmembers == 0 {
            return bad("endmember count not set".into());
        }
        if self.mlp_ratio == 0 || self.spectral_reduction == 0 {
            return bad("mlp_ratio and spectral_reduction must be positive".into());
        }
        Ok(())
    }

    fn spectral_hidden(&self) -> usize {
        (self.embed_dim / self.spectral_reduction).max(1)
    }
}

/// How the two change maps are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CemMode {
    A1,
    A2,
    A1PlusA2,
    #[default]
    A1TimesA2,
}

impl CemMode {
    pub fn name(self) -> &'static str {
        match self {
            CemMode::A1 => "a1",
            CemMode::A2 => "a2",
            CemMode::A1PlusA2 => "a1_plus_a2",
            CemMode::A1TimesA2 => "a1_times_a2",
        }
    }
}

/// Module on/off switches used by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleSwitches {
    pub use_gam: bool,
    pub use_cem: bool,
    pub cem_mode: CemMode,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        Self { use_gam: true, use_cem: true, cem_mode: CemMode::A1TimesA2 }
    }
}

/// Size of the sequence a model was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub phases: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
}

impl DataDims {
    pub fn of(seq: &HyperCubeSequence) -> Self {
        Self { phases: seq.phases(), bands: seq.bands(), height: seq.height(), width: seq.width() }
    }

    fn tokens(&self, patch: usize) -> usize {
        (self.height / patch) * (self.width / patch) + 1
    }
}

/// Named parameter tensors together with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub arch: ArchitectureConfig,
    pub dims: DataDims,
    tensors: IndexMap<String, Tensor>,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    tensors: IndexMap<String, Tensor>,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensors.insert(name, Tensor::new(shape, data));
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let d = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| d.sample(self.rng)).collect();
        self.tensors.insert(name, Tensor::new(shape, data));
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) {
        self.tensors.insert(name, Tensor::full(shape, v));
    }

    fn linear(&mut self, prefix: &str, inn: usize, out: usize) {
        let b = 1.0 / (inn as f64).sqrt();
        self.uniform(format!("{prefix}.weight"), &[inn, out], b);
        self.uniform(format!("{prefix}.bias"), &[out], b);
    }

    fn conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize) {
        let b = 1.0 / ((ci * k * k) as f64).sqrt();
        self.uniform(format!("{prefix}.weight"), &[co, ci, k, k], b);
        self.uniform(format!("{prefix}.bias"), &[co], b);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.constant(format!("{prefix}.gamma"), &[c], 1.0);
        self.constant(format!("{prefix}.beta"), &[c], 0.0);
    }
}

impl ModelParameters {
    /// Freshly initialised parameters. Decoders start as small positive noise
    /// and are normally overwritten with extracted endmembers before training.
    pub fn init(arch: &ArchitectureConfig, dims: DataDims, seed: u64) -> Result<Self> {
        arch.validate()?;
        if dims.height % arch.patch_size != 0 || dims.width % arch.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide the {}x{} image",
                arch.patch_size, dims.height, dims.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6e6e);
        let mut it = Init { rng: &mut rng, tensors: IndexMap::new() };
        let (c, d, t, p) = (arch.channels, arch.embed_dim, dims.phases, arch.endmembers);
        it.conv("enc.conv1", dims.bands, c, 3);
        it.norm("enc.bn1", c);
        it.conv("enc.conv2", c, c, 3);
        it.norm("enc.bn2", c);
        it.linear("tok.proj", c * arch.patch_size * arch.patch_size, d);
        it.normal("tok.cls".into(), &[t, d], 0.02);
        it.normal("tok.pos".into(), &[t, dims.tokens(arch.patch_size), d], 0.02);
        for i in 0..arch.depth {
            for kind in ["temporal", "spatial"] {
                it.linear(&format!("gam.{i}.{kind}.qkv"), d, 3 * d);
                it.linear(&format!("gam.{i}.{kind}.out"), d, d);
            }
            it.linear(&format!("gam.{i}.mlp.fc1"), d, arch.mlp_ratio * d);
            it.linear(&format!("gam.{i}.mlp.fc2"), arch.mlp_ratio * d, d);
        }
        it.linear("spec.fc1", d, arch.spectral_hidden());
        it.linear("spec.fc2", arch.spectral_hidden(), d);
        for k in [3, 7] {
            it.conv(&format!("cem.conv{k}"), d, d, k);
            it.norm(&format!("cem.bn{k}"), d);
            it.conv(&format!("cem.fuse{k}"), d, 1, 1);
        }
        it.conv("head", d, p, 1);
        let dec: Vec<f64> = (0..t * dims.bands * p).map(|_| it.rng.random_range(0.05..0.5)).collect();
        it.tensors.insert("dec.weight".into(), Tensor::new([t, dims.bands, p], dec));
        Ok(Self { arch: arch.clone(), dims, tensors: it.tensors })
    }

    pub(crate) fn from_parts(arch: ArchitectureConfig, dims: DataDims, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        let reference = Self::init(&arch, dims, 0)?;
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Validation(format!("parameter {name} missing"))),
            }
        }
        if tensors.len() != reference.tensors.len() {
            return Err(Error::Validation("unexpected extra parameters".into()));
        }
        if let Some((name, _)) = tensors.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Validation(format!("parameter {name} is not finite")));
        }
        let tensors = reference.tensors.keys().map(|k| (k.clone(), tensors[k].clone())).collect();
        Ok(Self { arch, dims, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Overwrites the decoder of every phase with the given `L x P` column-major-by-row matrices.
    pub fn set_decoders(&mut self, endmembers: &EndmemberSet) -> Result<()> {
        let (t, l, p) = (self.dims.phases, self.dims.bands, self.arch.endmembers);
        if endmembers.phases() != t || endmembers.bands() != l || endmembers.endmembers() != p {
            return Err(Error::Shape(format!(
                "decoder init needs {t} phases of {l}x{p}, got {}x{}x{}",
                endmembers.phases(),
                endmembers.bands(),
                endmembers.endmembers()
            )));
        }
        let data: Vec<f64> = endmembers.per_phase_data().iter().map(|&v| f64::from(v)).collect();
        self.tensors.insert("dec.weight".into(), Tensor::new([t, l, p], data));
        Ok(())
    }

    /// Decoder weights read out as endmembers, negatives clamped to zero.
    pub fn endmembers(&self) -> Result<EndmemberSet> {
        let w = &self.tensors["dec.weight"];
        let (t, l, p) = (w.dim(0), w.dim(1), w.dim(2));
        let phases: Vec<Vec<f64>> = w.data().chunks_exact(l * p).map(|c| c.iter().map(|v| v.max(0.0)).collect()).collect();
        for (ti, m) in phases.iter().enumerate() {
            for j in 0..p {
                if (0..l).all(|r| m[r * p + j] == 0.0) {
                    return Err(Error::Degenerate(format!("decoder column {j} of phase {ti} is entirely non-positive")));
                }
            }
        }
        debug_assert_eq!(phases.len(), t);
        EndmemberSet::from_f64(l, p, &phases)
    }

    /// Puts every parameter on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect();
        Bound { vars, arch: self.arch.clone(), dims: self.dims }
    }
}

/// Parameters placed on a graph.
pub struct Bound {
    vars: IndexMap<String, Var>,
    pub arch: ArchitectureConfig,
    pub dims: DataDims,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn conv(&self, g: &mut Graph, prefix: &str, x: Var, pad: usize) -> Var {
        g.conv2d(x, self.var(&format!("{prefix}.weight")), Some(self.var(&format!("{prefix}.bias"))), pad)
    }

    fn norm(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        g.batch_norm(x, self.var(&format!("{prefix}.gamma")), self.var(&format!("{prefix}.beta")))
    }

    fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        g.linear(x, self.var(&format!("{prefix}.weight")), Some(self.var(&format!("{prefix}.bias"))))
    }
}

/// Which attention a recorded `qkv` node feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Temporal,
    Spatial,
}

/// Nodes produced by one forward pass.
pub struct ForwardOutput {
    /// `[T, P, H, W]`
    pub abundances: Var,
    /// `[T, L, H, W]`
    pub reconstruction: Var,
    /// `[T, L, P]`
    pub decoder: Var,
    /// Class tokens fed to the head, `[T, D]`.
    pub cls: Var,
    /// Query/key/value inputs of every attention call, in execution order.
    pub attention: Vec<(AttentionKind, Var)>,
    /// Spectral channel weights `[T, D]`, when attention is enabled.
    pub channel_weights: Option<Var>,
    /// Per-pair change gates `[T - 1]`, when the change module runs.
    pub gates: Option<Var>,
}

/// Two 3x3 convolution stages with batch norm, leaky rectifier and dropout.
pub fn encode(g: &mut Graph, b: &Bound, x: Var, mut dropout: Option<&mut ChaCha8Rng>) -> Var {
    let mut h = x;
    for stage in 1..=2 {
        h = b.conv(g, &format!("enc.conv{stage}"), h, 1);
        h = b.norm(g, &format!("enc.bn{stage}"), h);
        h = g.leaky_relu(h, LEAKY_SLOPE);
        if let Some(rng) = dropout.as_deref_mut() {
            h = g.dropout(h, b.arch.dropout, rng);
        }
    }
    h
}

/// Patch embedding plus class token and positional embedding: `[T, C, H, W] -> [T, S, D]`.
pub fn tokenize(g: &mut Graph, b: &Bound, features: Var) -> Var {
    let patches = g.patchify(features, b.arch.patch_size);
    let tokens = b.linear(g, "tok.proj", patches);
    let with_cls = g.prepend_cls(tokens, b.var("tok.cls"));
    g.add(with_cls, b.var("tok.pos"))
}

fn attention_block(g: &mut Graph, b: &Bound, prefix: &str, z: Var, kind: AttentionKind) -> (Var, Var) {
    let qkv = b.linear(g, &format!("{prefix}.qkv"), z);
    let a = match kind {
        AttentionKind::Temporal => g.temporal_attention(qkv, b.arch.heads),
        AttentionKind::Spatial => g.spatial_attention(qkv, b.arch.heads),
    };
    let proj = b.linear(g, &format!("{prefix}.out"), a);
    (g.add(z, proj), qkv)
}

/// Residual temporal attention of block `i`; also returns its `qkv` node.
pub fn temporal_block(g: &mut Graph, b: &Bound, i: usize, z: Var) -> (Var, Var) {
    attention_block(g, b, &format!("gam.{i}.temporal"), z, AttentionKind::Temporal)
}

/// Residual spatial attention of block `i`; also returns its `qkv` node.
pub fn spatial_block(g: &mut Graph, b: &Bound, i: usize, z: Var) -> (Var, Var) {
    attention_block(g, b, &format!("gam.{i}.spatial"), z, AttentionKind::Spatial)
}

/// Residual two-layer token MLP of block `i`.
pub fn mlp_block(g: &mut Graph, b: &Bound, i: usize, z: Var) -> Var {
    let h = b.linear(g, &format!("gam.{i}.mlp.fc1"), z);
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let h = b.linear(g, &format!("gam.{i}.mlp.fc2"), h);
    g.add(z, h)
}

/// Channel reweighting of a `[T, D, h, w]` map; returns the map and the `[T, D]` weights.
pub fn spectral_attention(g: &mut Graph, b: &Bound, map: Var) -> (Var, Var) {
    let avg = g.spatial_mean(map);
    let max = g.spatial_max(map);
    let mlp = |g: &mut Graph, x: Var| {
        let h = b.linear(g, "spec.fc1", x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        b.linear(g, "spec.fc2", h)
    };
    let sa = mlp(g, avg);
    let sm = mlp(g, max);
    let sum = g.add(sa, sm);
    let w = g.sigmoid(sum);
    (g.channel_scale(map, w), w)
}

/// Change map of one kernel scale for all adjacent pairs: `[T - 1, 1, h, w]`.
fn change_map(g: &mut Graph, b: &Bound, k: usize, next: Var, prev: Var) -> Var {
    let c = b.conv(g, &format!("cem.conv{k}"), next, k / 2);
    let c = b.norm(g, &format!("cem.bn{k}"), c);
    let c = g.leaky_relu(c, LEAKY_SLOPE);
    let diff = g.sub(c, prev);
    let logits = b.conv(g, &format!("cem.fuse{k}"), diff, 0);
    g.sigmoid(logits)
}

/// Change enhancement over all adjacent phase pairs of a `[T, D, h, w]` map.
///
/// Returns the updated `[T, D]` class tokens and the `[T - 1]` gates. Needs `T >= 2`.
pub fn cem(g: &mut Graph, b: &Bound, maps: Var, cls: Var, mode: CemMode) -> (Var, Var) {
    let t = g.shape(maps)[0];
    assert!(t >= 2, "change enhancement needs at least two phases");
    let next = g.phase_slice(maps, 1, t - 1);
    let prev = g.phase_slice(maps, 0, t - 1);
    let a = match mode {
        CemMode::A1 => change_map(g, b, 3, next, prev),
        CemMode::A2 => change_map(g, b, 7, next, prev),
        CemMode::A1PlusA2 | CemMode::A1TimesA2 => {
            let a1 = change_map(g, b, 3, next, prev);
            let a2 = change_map(g, b, 7, next, prev);
            if mode == CemMode::A1PlusA2 {
                g.add(a1, a2)
            } else {
                g.mul(a1, a2)
            }
        }
    };
    let gate = g.spatial_mean(a);
    let gate = g.reshape(gate, &[t - 1]);
    (g.cls_gate(cls, gate, b.arch.alpha), gate)
}

/// Class-conditioned pointwise map to `P` logits and softmax: `[T, D, h, w] -> [T, P, H, W]`.
pub fn abundance_head(g: &mut Graph, b: &Bound, map: Var, cls: Var) -> Var {
    let fused = g.add_channel_vector(map, cls);
    let up = g.upsample(fused, b.arch.patch_size);
    let logits = b.conv(g, "head", up, 0);
    g.softmax_channels(logits)
}

/// Per-phase linear mixing with the decoder weights.
pub fn decode(g: &mut Graph, b: &Bound, abundances: Var) -> Var {
    g.phase_decode(abundances, b.var("dec.weight"))
}

/// Full forward pass. Dropout is active only when an RNG is supplied.
pub fn forward(
    g: &mut Graph,
    b: &Bound,
    input: Var,
    switches: &ModuleSwitches,
    dropout: Option<&mut ChaCha8Rng>,
) -> ForwardOutput {
    let dims = b.dims;
    let (hp, wp) = (dims.height / b.arch.patch_size, dims.width / b.arch.patch_size);
    let features = encode(g, b, input, dropout);
    let mut z = tokenize(g, b, features);
    let mut attention = Vec::new();
    let mut channel_weights = None;
    if switches.use_gam {
        for i in 0..b.arch.depth {
            let (z1, q1) = temporal_block(g, b, i, z);
            let (z2, q2) = spatial_block(g, b, i, z1);
            attention.push((AttentionKind::Temporal, q1));
            attention.push((AttentionKind::Spatial, q2));
            z = mlp_block(g, b, i, z2);
        }
    }
    let mut map = g.fold_tokens(z, hp, wp);
    if switches.use_gam {
        let (m, w) = spectral_attention(g, b, map);
        map = m;
        channel_weights = Some(w);
    }
    let mut cls = g.cls_of(z);
    let mut gates = None;
    if switches.use_cem && dims.phases >= 2 {
        let (c, gate) = cem(g, b, map, cls, switches.cem_mode);
        cls = c;
        gates = Some(gate);
    }
    let abundances = abundance_head(g, b, map, cls);
    let reconstruction = decode(g, b, abundances);
    ForwardOutput {
        abundances,
        reconstruction,
        decoder: b.var("dec.weight"),
        cls,
        attention,
        channel_weights,
        gates,
    }
}

/// Model outputs converted to the domain containers.
pub struct Prediction {
    pub abundances: AbundanceSequence,
    pub reconstruction: HyperCubeSequence,
    pub endmembers: EndmemberSet,
}

/// Eval-mode forward pass on a sequence.
pub fn infer(params: &ModelParameters, seq: &HyperCubeSequence, switches: &ModuleSwitches, exec: Exec) -> Result<Prediction> {
    let d = params.dims;
    if DataDims::of(seq) != d {
        return Err(Error::Shape(format!("model built for {:?}, sequence is {:?}", d, DataDims::of(seq))));
    }
    let mut g = Graph::new(exec);
    let b = params.bind(&mut g);
    let x = g.constant(Tensor::new([d.phases, d.bands, d.height, d.width], seq.to_f64()));
    let out = forward(&mut g, &b, x, switches, None);
    let a = g.value(out.abundances);
    let y = g.value(out.reconstruction);
    if !a.all_finite() || !y.all_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    Ok(Prediction {
        abundances: AbundanceSequence::from_f64(d.phases, params.arch.endmembers, d.height, d.width, a.data())?,
        reconstruction: HyperCubeSequence::from_f64(d.phases, d.bands, d.height, d.width, y.data())?,
        endmembers: params.endmembers()?,
    })
}
