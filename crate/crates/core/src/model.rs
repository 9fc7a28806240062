//! U-Net generator and DCGAN-style discriminator shared by teacher and student.
//!
//! Generator, for `depth` stride-2 stages with widths `w_k = base * 2^min(k, 3)`:
//!
//! ```text
//! x -> enc_0 .. enc_{d-1} -> bottleneck conv -> z (latent_dim x 1 x 1)
//! z -> dec_in (up to the bottleneck grid) ++ enc_{d-1}
//!   -> up_{d-1} ++ enc_{d-2} -> ... -> up_1 ++ enc_0 -> out conv -> tanh -> x_hat
//! ```
//!
//! (`++` is channel concatenation, dropped when skip connections are off.)
//! The discriminator reuses the encoder stack; its last feature map is `f(.)`
//! and a full-extent conv plus sigmoid gives the real/fake probability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::config::ExperimentConfig;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub role: Role,
    pub base_width: usize,
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    pub skip_connections: bool,
}

impl NetworkArch {
    /// Architecture whose encoder stops at a 4x4 grid.
    pub fn new(role: Role, base_width: usize, image_size: usize, channels: usize, latent_dim: usize) -> Self {
        let depth = (image_size.max(8).trailing_zeros() as usize).saturating_sub(2);
        Self { role, base_width, image_size, channels, latent_dim, depth, skip_connections: true }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("network arch: {m}")));
        if self.base_width == 0 || self.latent_dim == 0 || self.channels == 0 {
            return bad("widths, channels and latent_dim must be positive".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if !self.image_size.is_multiple_of(1 << self.depth) || self.image_size >> self.depth == 0 {
            return bad(format!("image size {} not divisible by 2^{}", self.image_size, self.depth));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage.min(3)
    }

    /// Spatial size at the end of the encoder.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }

    pub fn feature_channels(&self) -> usize {
        self.width(self.depth - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Activation {
    Leaky,
    Relu,
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
    transposed: bool,
    /// `(gamma, beta)` parameter and `(mean, var)` buffer indices.
    bn: Option<(usize, usize, usize, usize)>,
    act: Activation,
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl TensorStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

struct Builder<'a> {
    params: TensorStore,
    buffers: TensorStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, shape: &[usize], mean: f64) -> Tensor {
        let dist = Normal::new(mean, INIT_STD).expect("valid normal");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        bn: bool,
        act: Activation,
    ) -> Block {
        let wshape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
        let w = self.normal(&wshape, 0.0);
        let weight = self.params.push(format!("{name}.conv.weight"), w);
        let bias = (!bn).then(|| self.params.push(format!("{name}.conv.bias"), Tensor::zeros(&[cout])));
        let bn = bn.then(|| {
            let g = self.normal(&[cout], 1.0);
            let gamma = self.params.push(format!("{name}.bn.weight"), g);
            let beta = self.params.push(format!("{name}.bn.bias"), Tensor::zeros(&[cout]));
            let mean = self.buffers.push(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]));
            let var = self.buffers.push(format!("{name}.bn.running_var"), Tensor::filled(&[cout], 1.0));
            (gamma, beta, mean, var)
        });
        Block { weight, bias, stride, pad, transposed, bn, act }
    }

    /// Encoder stack shared by both networks.
    fn encoder(&mut self, prefix: &str, arch: &NetworkArch) -> Vec<Block> {
        (0..arch.depth)
            .map(|k| {
                let cin = if k == 0 { arch.channels } else { arch.width(k - 1) };
                self.block(&format!("{prefix}.{k}"), cin, arch.width(k), 4, 2, 1, false, k > 0, Activation::Leaky)
            })
            .collect()
    }
}

/// Parameter leaves of one network on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization.
    Train,
    /// Running statistics for normalization.
    Eval,
}

/// Shared plumbing of both network kinds.
pub trait Network {
    fn arch(&self) -> &NetworkArch;
    fn params(&self) -> &TensorStore;
    fn params_mut(&mut self) -> &mut TensorStore;
    fn buffers(&self) -> &TensorStore;
    fn buffers_mut(&mut self) -> &mut TensorStore;
    fn blocks_with_bn(&self) -> Vec<(usize, usize)>;

    fn param_count(&self) -> usize {
        self.params().numel()
    }

    fn layer_names(&self) -> Vec<String> {
        self.params().names.iter().chain(&self.buffers().names).cloned().collect()
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self.params().values.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        Bound { vars }
    }

    /// Fold training-mode batch statistics into the running averages, in block order.
    fn commit_stats(&mut self, stats: &[BatchStats]) {
        let slots = self.blocks_with_bn();
        debug_assert_eq!(slots.len(), stats.len());
        let buffers = self.buffers_mut();
        for (&(mi, vi), s) in slots.iter().zip(stats) {
            for (r, b) in buffers.values[mi].data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in buffers.values[vi].data_mut().iter_mut().zip(&s.var_unbiased) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Byte-level digest of parameters and buffers.
    fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.params().values.iter().chain(&self.buffers().values) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn apply_block(
    tape: &mut Tape,
    b: &Block,
    bound: &Bound,
    buffers: &TensorStore,
    x: Var,
    mode: Mode,
    stats: &mut Vec<BatchStats>,
) -> Result<Var> {
    let w = bound.vars[b.weight];
    let bias = b.bias.map(|i| bound.vars[i]);
    let mut y = if b.transposed {
        tape.conv_transpose2d(x, w, bias, b.stride, b.pad)?
    } else {
        tape.conv2d(x, w, bias, b.stride, b.pad)?
    };
    if let Some((g, be, m, v)) = b.bn {
        let running = (buffers.values[m].data(), buffers.values[v].data());
        let (out, s) = tape.batch_norm(y, bound.vars[g], bound.vars[be], running, mode == Mode::Train)?;
        if let Some(s) = s {
            stats.push(s);
        }
        y = out;
    }
    Ok(match b.act {
        Activation::Leaky => tape.leaky_relu(y, LEAKY_SLOPE),
        Activation::Relu => tape.relu(y),
        Activation::Tanh => tape.tanh(y),
        Activation::Identity => y,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    arch: NetworkArch,
    params: TensorStore,
    buffers: TensorStore,
    encoder: Vec<Block>,
    bottleneck: Block,
    /// `dec_in`, the stride-2 up blocks, then the output block.
    decoder: Vec<Block>,
}

pub struct GeneratorOutput {
    pub x_hat: Var,
    pub z: Var,
    pub stats: Vec<BatchStats>,
}

impl Generator {
    pub fn new(arch: NetworkArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder { params: TensorStore::default(), buffers: TensorStore::default(), rng };
        let encoder = b.encoder("generator.encoder", &arch);
        let d = arch.depth;
        let bs = arch.bottleneck_size();
        let top = arch.width(d - 1);
        let bottleneck =
            b.block("generator.bottleneck", top, arch.latent_dim, bs, 1, 0, false, false, Activation::Identity);
        let skip = |w: usize| if arch.skip_connections { 2 * w } else { w };
        let mut decoder =
            vec![b.block("generator.decoder.in", arch.latent_dim, top, bs, 1, 0, true, true, Activation::Relu)];
        let mut cin = skip(top);
        for k in (1..d).rev() {
            let cout = arch.width(k - 1);
            decoder.push(b.block(
                &format!("generator.decoder.up{k}"),
                cin,
                cout,
                4,
                2,
                1,
                true,
                true,
                Activation::Relu,
            ));
            cin = skip(cout);
        }
        decoder.push(b.block("generator.decoder.out", cin, arch.channels, 4, 2, 1, true, false, Activation::Tanh));
        let Builder { params, buffers, .. } = b;
        Ok(Self { arch, params, buffers, encoder, bottleneck, decoder })
    }

    /// Zero the output layer so `x_hat` is identically 0.
    pub fn zero_output_layer(&mut self) {
        let out = self.decoder.last().expect("output block").clone();
        self.params.values[out.weight].data_mut().fill(0.0);
        if let Some(b) = out.bias {
            self.params.values[b].data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<GeneratorOutput> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.arch.channels || h != self.arch.image_size || w != self.arch.image_size {
            return Err(Error::Shape(format!(
                "generator expects (_, {}, {s}, {s}), got {:?}",
                self.arch.channels,
                tape.value(x).shape(),
                s = self.arch.image_size
            )));
        }
        let mut stats = Vec::new();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for b in &self.encoder {
            h = apply_block(tape, b, bound, &self.buffers, h, mode, &mut stats)?;
            skips.push(h);
        }
        let z = apply_block(tape, &self.bottleneck, bound, &self.buffers, h, mode, &mut stats)?;
        let mut h = z;
        let last = self.decoder.len() - 1;
        for (i, b) in self.decoder.iter().enumerate() {
            h = apply_block(tape, b, bound, &self.buffers, h, mode, &mut stats)?;
            if i < last && self.arch.skip_connections {
                let skip = skips[skips.len() - 1 - i];
                h = tape.concat_channels(h, skip)?;
            }
        }
        Ok(GeneratorOutput { x_hat: h, z, stats })
    }
}

impl Network for Generator {
    fn arch(&self) -> &NetworkArch {
        &self.arch
    }
    fn params(&self) -> &TensorStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut TensorStore {
        &mut self.params
    }
    fn buffers(&self) -> &TensorStore {
        &self.buffers
    }
    fn buffers_mut(&mut self) -> &mut TensorStore {
        &mut self.buffers
    }
    fn blocks_with_bn(&self) -> Vec<(usize, usize)> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(&self.decoder)
            .filter_map(|b| b.bn.map(|(_, _, m, v)| (m, v)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    arch: NetworkArch,
    params: TensorStore,
    buffers: TensorStore,
    features: Vec<Block>,
    classifier: Block,
}

pub struct DiscriminatorOutput {
    /// Penultimate feature map `f(.)`.
    pub features: Var,
    /// Sigmoid real/fake probability, shape `(n,)`.
    pub prob: Var,
    pub stats: Vec<BatchStats>,
}

impl Discriminator {
    pub fn new(arch: NetworkArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder { params: TensorStore::default(), buffers: TensorStore::default(), rng };
        let features = b.encoder("discriminator.features", &arch);
        let bs = arch.bottleneck_size();
        let classifier = b.block(
            "discriminator.classifier",
            arch.feature_channels(),
            1,
            bs,
            1,
            0,
            false,
            false,
            Activation::Identity,
        );
        let Builder { params, buffers, .. } = b;
        Ok(Self { arch, params, buffers, features, classifier })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<DiscriminatorOutput> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != self.arch.channels || h != self.arch.image_size || w != self.arch.image_size {
            return Err(Error::Shape(format!(
                "discriminator expects (_, {}, {s}, {s}), got {:?}",
                self.arch.channels,
                tape.value(x).shape(),
                s = self.arch.image_size
            )));
        }
        let mut stats = Vec::new();
        let mut f = x;
        for b in &self.features {
            f = apply_block(tape, b, bound, &self.buffers, f, mode, &mut stats)?;
        }
        let logit = apply_block(tape, &self.classifier, bound, &self.buffers, f, mode, &mut stats)?;
        let prob = tape.sigmoid(logit);
        let prob = tape.reshape(prob, vec![n])?;
        Ok(DiscriminatorOutput { features: f, prob, stats })
    }
}

impl Network for Discriminator {
    fn arch(&self) -> &NetworkArch {
        &self.arch
    }
    fn params(&self) -> &TensorStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut TensorStore {
        &mut self.params
    }
    fn buffers(&self) -> &TensorStore {
        &self.buffers
    }
    fn buffers_mut(&mut self) -> &mut TensorStore {
        &mut self.buffers
    }
    fn blocks_with_bn(&self) -> Vec<(usize, usize)> {
        self.features
            .iter()
            .chain(std::iter::once(&self.classifier))
            .filter_map(|b| b.bn.map(|(_, _, m, v)| (m, v)))
            .collect()
    }
}

/// A generator and its discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanPair {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl GanPair {
    pub fn new(arch: NetworkArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self { generator: Generator::new(arch, rng)?, discriminator: Discriminator::new(arch, rng)? })
    }

    pub fn arch(&self) -> &NetworkArch {
        self.generator.arch()
    }

    pub fn checksum(&self) -> String {
        format!("{}{}", self.generator.checksum(), self.discriminator.checksum())
    }

    pub fn param_count(&self) -> usize {
        self.generator.param_count() + self.discriminator.param_count()
    }
}

pub fn build_generator(arch: NetworkArch, seed: u64) -> Result<Generator> {
    Generator::new(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn build_discriminator(arch: NetworkArch, seed: u64) -> Result<Discriminator> {
    Discriminator::new(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Everything one forward pass exposes.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs {
    pub x_hat: Tensor,
    /// `(batch, latent_dim)`.
    pub z: Tensor,
    pub f_x: Tensor,
    pub f_xhat: Tensor,
    pub p_real: Tensor,
    pub p_fake: Tensor,
}

/// Evaluation-mode forward of a generator/discriminator pair.
pub fn forward_network(gen: &Generator, disc: &Discriminator, batch: &ImageBatch) -> Result<NetworkOutputs> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.pixels.clone(), false);
    let gb = gen.bind(&mut tape, false);
    let db = disc.bind(&mut tape, false);
    let g = gen.forward(&mut tape, &gb, x, Mode::Eval)?;
    let real = disc.forward(&mut tape, &db, x, Mode::Eval)?;
    let fake = disc.forward(&mut tape, &db, g.x_hat, Mode::Eval)?;
    let n = batch.pixels.shape()[0];
    let z = tape.value(g.z).clone().reshape(vec![n, gen.arch().latent_dim])?;
    Ok(NetworkOutputs {
        x_hat: tape.value(g.x_hat).clone(),
        z,
        f_x: tape.value(real.features).clone(),
        f_xhat: tape.value(fake.features).clone(),
        p_real: tape.value(real.prob).clone(),
        p_fake: tape.value(fake.prob).clone(),
    })
}

/// Whether the student matches the teacher's width in the size ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentSize {
    Smaller,
    Equal,
}

pub fn arch_for(config: &ExperimentConfig, role: Role, size: StudentSize) -> NetworkArch {
    let width = match (role, size) {
        (Role::Teacher, _) | (Role::Student, StudentSize::Equal) => config.teacher_base_width,
        (Role::Student, StudentSize::Smaller) => config.student_base_width,
    };
    let mut arch = NetworkArch::new(role, width, config.image_size, config.channels, config.latent_dim);
    arch.skip_connections = config.skip_connections;
    arch
}

/// Seeded initialization of one network pair. Teacher and student draw from
/// different streams of the same seed.
pub fn init_pair(config: &ExperimentConfig, role: Role, size: StudentSize) -> Result<GanPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(match role {
        Role::Teacher => 1,
        Role::Student => 2,
    });
    GanPair::new(arch_for(config, role, size), &mut rng)
}

/// Seeded initialization of `(student, teacher)`; topology identical, widths differ.
pub fn build_student_teacher(config: &ExperimentConfig, size: StudentSize) -> Result<(GanPair, GanPair)> {
    let teacher = init_pair(config, Role::Teacher, size)?;
    let student = init_pair(config, Role::Student, size)?;
    Ok((student, teacher))
}

/// Bring student and teacher feature maps to a common channel count by
/// averaging consecutive channel groups of the wider one. Fixed, not learned.
pub fn adapt_features(tape: &mut Tape, student: Var, teacher: Var) -> Result<(Var, Var)> {
    let cs = tape.value(student).dims4()?.1;
    let ct = tape.value(teacher).dims4()?.1;
    if cs == ct {
        return Ok((student, teacher));
    }
    let (wide, narrow) = (cs.max(ct), cs.min(ct));
    if wide % narrow != 0 {
        return Err(Error::Shape(format!("feature widths {cs} and {ct} are not commensurate")));
    }
    let group = wide / narrow;
    if cs > ct {
        Ok((tape.channel_group_mean(student, group)?, teacher))
    } else {
        Ok((student, tape.channel_group_mean(teacher, group)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;

    fn arch(size: usize, base: usize) -> NetworkArch {
        NetworkArch::new(Role::Student, base, size, 3, 10)
    }

    fn random_batch(n: usize, c: usize, s: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_distr::Uniform::new(-1.0, 1.0).unwrap();
        let data = (0..n * c * s * s).map(|_| d.sample(&mut rng)).collect();
        ImageBatch {
            pixels: Tensor::new(vec![n, c, s, s], data).unwrap(),
            ids: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    /// Independent parameter count from the layer formula.
    fn expected_generator_params(a: &NetworkArch) -> usize {
        let w = |k: usize| a.base_width << k.min(3);
        let d = a.depth;
        let b = a.bottleneck_size();
        let mut n = a.channels * w(0) * 16 + w(0); // enc0 + bias
        for k in 1..d {
            n += w(k - 1) * w(k) * 16 + 2 * w(k);
        }
        n += w(d - 1) * a.latent_dim * b * b + a.latent_dim;
        n += a.latent_dim * w(d - 1) * b * b + 2 * w(d - 1);
        let m = if a.skip_connections { 2 } else { 1 };
        for k in (1..d).rev() {
            n += m * w(k) * w(k - 1) * 16 + 2 * w(k - 1);
        }
        n += m * w(0) * a.channels * 16 + a.channels;
        n
    }

    #[test]
    fn depth_reaches_four_by_four() {
        let a = arch(64, 8);
        assert_eq!(a.depth, 4);
        assert_eq!(a.bottleneck_size(), 4);
        assert_eq!(NetworkArch::new(Role::Teacher, 8, 32, 3, 10).depth, 3);
    }

    #[test]
    fn generator_shapes_and_range() {
        let g = build_generator(arch(64, 4), 1).unwrap();
        let d = build_discriminator(arch(64, 4), 2).unwrap();
        let batch = random_batch(2, 3, 64, 3);
        let out = forward_network(&g, &d, &batch).unwrap();
        assert_eq!(out.x_hat.shape(), &[2, 3, 64, 64]);
        assert_eq!(out.z.shape(), &[2, 10]);
        assert_eq!(out.f_x.shape(), &[2, 32, 4, 4]);
        assert_eq!(out.f_x.shape(), out.f_xhat.shape());
        assert_eq!(out.p_real.shape(), &[2]);
        assert!(out.x_hat.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(out.p_fake.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn zero_output_layer_gives_zero_image() {
        let mut g = build_generator(arch(32, 4), 1).unwrap();
        g.zero_output_layer();
        let d = build_discriminator(arch(32, 4), 2).unwrap();
        let out = forward_network(&g, &d, &random_batch(2, 3, 32, 9)).unwrap();
        assert!(out.x_hat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_matches_formula_with_and_without_skips() {
        let a = arch(64, 4);
        let g = build_generator(a, 1).unwrap();
        assert_eq!(g.param_count(), expected_generator_params(&a));
        let mut no_skip = a;
        no_skip.skip_connections = false;
        let g2 = build_generator(no_skip, 1).unwrap();
        assert_eq!(g2.param_count(), expected_generator_params(&no_skip));
        assert_ne!(g.param_count(), g2.param_count());
        let d = build_discriminator(no_skip, 2).unwrap();
        let out = forward_network(&g2, &d, &random_batch(1, 3, 64, 4)).unwrap();
        assert_eq!(out.x_hat.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn discriminator_contract() {
        let d = build_discriminator(arch(64, 4), 5).unwrap();
        let g = build_generator(arch(64, 4), 6).unwrap();
        let batch = random_batch(4, 3, 64, 1);
        let a = forward_network(&g, &d, &batch).unwrap();
        let b = forward_network(&g, &d, &batch).unwrap();
        assert_eq!(a.p_real.shape(), &[4]);
        assert_eq!(&a.f_x.shape()[2..], &[4, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn constant_input_stays_finite_and_single_sample_works() {
        let g = build_generator(arch(32, 4), 1).unwrap();
        let d = build_discriminator(arch(32, 4), 2).unwrap();
        let batch = ImageBatch { pixels: Tensor::filled(&[1, 3, 32, 32], 0.3), ids: vec!["a".into()] };
        let out = forward_network(&g, &d, &batch).unwrap();
        assert_eq!(out.x_hat.shape()[0], 1);
        assert!(out.x_hat.all_finite() && out.f_xhat.all_finite());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = build_generator(arch(32, 4), 1).unwrap();
        let d = build_discriminator(arch(32, 4), 2).unwrap();
        assert!(forward_network(&g, &d, &random_batch(1, 3, 64, 0)).is_err());
        assert!(NetworkArch { depth: 0, ..arch(32, 4) }.validate().is_err());
    }

    #[test]
    fn student_teacher_topology() {
        let cfg = ExperimentConfig { teacher_base_width: 8, student_base_width: 2, image_size: 32, ..default_config() };
        let (s, t) = build_student_teacher(&cfg, StudentSize::Smaller).unwrap();
        assert!(s.param_count() < t.param_count());
        assert_eq!(s.generator.layer_names(), t.generator.layer_names());
        assert_eq!(s.discriminator.layer_names(), t.discriminator.layer_names());
        let (s, t) = build_student_teacher(&cfg, StudentSize::Equal).unwrap();
        assert_eq!(s.param_count(), t.param_count());
        assert_ne!(s.checksum(), t.checksum());
    }

    #[test]
    fn generator_input_gradient_matches_finite_differences() {
        // d ||x_hat||^2 / dx on an 8x8 toy generator.
        let a = NetworkArch { depth: 2, ..NetworkArch::new(Role::Student, 3, 8, 1, 4) };
        let mut g = build_generator(a, 21).unwrap();
        // Unit-scale weights so the gradients are well above round-off.
        let store = g.params_mut();
        for (name, t) in store.names.iter().zip(store.values.iter_mut()) {
            if name.ends_with("conv.weight") {
                t.data_mut().iter_mut().for_each(|v| *v *= 15.0);
            }
        }
        let x0 = random_batch(1, 1, 8, 5).pixels;
        let energy = |x: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), grad);
            let b = g.bind(&mut tape, false);
            let out = g.forward(&mut tape, &b, xv, Mode::Eval).unwrap();
            let zero = tape.leaf(Tensor::zeros(tape.value(out.x_hat).shape()), false);
            let e = tape.mean_squared_diff(out.x_hat, zero).unwrap();
            let val = tape.value(e).item();
            let gr = grad.then(|| tape.backward(e).unwrap().get(xv).unwrap().clone());
            (val, gr)
        };
        let (_, grad) = energy(&x0, true);
        let grad = grad.unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (energy(&xp, false).0 - energy(&xm, false).0) / (2.0 * h);
            let g = grad.data()[i];
            if g.abs() > 1e-6 {
                checked += 1;
                assert!((fd - g).abs() / g.abs() < 1e-3, "pixel {i}: fd {fd} vs {g}");
            }
        }
        assert!(checked > 32);
    }

    #[test]
    fn adapter_averages_wider_map() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap(), false);
        let t = tape.leaf(Tensor::new(vec![1, 4, 1, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap(), false);
        let (a, b) = adapt_features(&mut tape, s, t).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(b).data(), &[2.0, 6.0]);
    }
}
