//! Teacher pretraining, student distillation, checkpoints and ablations.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::config::{CriticalLayer, ExperimentConfig};
use crate::data::{load_batch, DatasetIndex, Label, Split};
use crate::error::{Error, Result};
use crate::evaluation::auc_roc;
use crate::losses::{build_discriminator_loss, build_objective, Alphas, LossBreakdown, ObjectiveInputs, TeacherView};
use crate::meta::{write_atomic, write_text_with_meta, Meta};
use crate::model::{arch_for, init_pair, GanPair, Mode, Network, Role, StudentSize};
use crate::optim::Adam;
use crate::scoring::{score_split, ScoringModel};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const TEACHER_SHUFFLE_STREAM: u64 = 3;
const STUDENT_SHUFFLE_STREAM: u64 = 4;

/// Position of the batch-order generator, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn of(rng: &ChaCha8Rng, seed: u64) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub generator: u64,
    pub discriminator: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub role: Role,
    /// Completed epochs.
    pub epoch: usize,
    pub config: ExperimentConfig,
    /// Set once on the first distillation batch; absent for teachers.
    pub alphas: Option<Alphas>,
    pub rng: RngState,
    pub networks: GanPair,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
    pub updates: UpdateCounts,
    /// Checksum of the frozen teacher a student was distilled from.
    pub teacher_checksum: Option<String>,
    /// What the network was trained on.
    pub data_source: String,
    pub meta: Option<Meta>,
}

impl Checkpoint {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(&mut Tensor) -> Result<()>) -> Result<()> {
        let nets = &mut self.networks;
        for t in &mut nets.generator.params_mut().values {
            f(t)?;
        }
        for t in &mut nets.generator.buffers_mut().values {
            f(t)?;
        }
        for t in &mut nets.discriminator.params_mut().values {
            f(t)?;
        }
        for t in &mut nets.discriminator.buffers_mut().values {
            f(t)?;
        }
        for opt in [&mut self.generator_opt, &mut self.discriminator_opt] {
            for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
                f(t)?;
            }
        }
        Ok(())
    }

    /// Error unless this checkpoint holds a network of `role`.
    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::RoleMismatch { expected: role.to_string(), found: self.role.to_string() });
        }
        Ok(())
    }
}

/// Versioned container: magic, version, JSON header, raw little-endian f64
/// tensor data, SHA-256 trailer over everything before it.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut stripped = ckpt.clone();
    let mut blob: Vec<u8> = Vec::new();
    stripped.visit_tensors(&mut |t| {
        for v in t.take_data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    })?;
    let header = serde_json::to_vec(&stripped).map_err(|e| Error::Invalid(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(blob.len() + header.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ckpt)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint { path: path.to_path_buf(), message: m };
    if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (corrupt file)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let mut cur = &body[12..];
    let read_u64 = |cur: &mut &[u8]| -> Result<u64> {
        let mut b = [0u8; 8];
        cur.read_exact(&mut b).map_err(|_| bad("truncated".into()))?;
        Ok(u64::from_le_bytes(b))
    };
    let hlen = read_u64(&mut cur)? as usize;
    if cur.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let mut ckpt: Checkpoint = serde_json::from_slice(&cur[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    cur = &cur[hlen..];
    let blen = read_u64(&mut cur)? as usize;
    if cur.len() != blen || !blen.is_multiple_of(8) {
        return Err(bad("tensor data length mismatch".into()));
    }
    let mut values = cur.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    ckpt.visit_tensors(&mut |t| {
        let n: usize = t.shape().iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        t.restore_data(data)
    })
    .map_err(|e| bad(e.to_string()))?;
    if values.next().is_some() {
        return Err(bad("trailing tensor data".into()));
    }
    ckpt.config = ckpt.config.clone().validated().map_err(|e| bad(format!("config snapshot: {e}")))?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}

/// Load and check the role in one step.
pub fn load_checkpoint_as(path: &Path, role: Role) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    c.expect_role(role)?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLosses {
    pub iteration: usize,
    pub epoch: usize,
    pub parts: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    /// Batch means of every part.
    pub mean: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role: Role,
    pub epochs: Vec<EpochLosses>,
    pub iterations: Vec<IterationLosses>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// Always false: training runs its full epoch budget.
    pub early_stopped: bool,
    pub updates: UpdateCounts,
}

impl TrainReport {
    pub fn log_csv(&self) -> String {
        let mut s =
            String::from("iteration,epoch,l_adv,l_disc,l_con,l_lat,l_kg,l_kd,l_kz,total,alpha_g,alpha_d,alpha_z\n");
        for it in &self.iterations {
            let p = &it.parts;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                it.iteration,
                it.epoch,
                p.l_adv,
                p.l_disc,
                p.l_con,
                p.l_lat,
                p.l_kg,
                p.l_kd,
                p.l_kz,
                p.total,
                p.alpha_g,
                p.alpha_d,
                p.alpha_z
            ));
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Final (and, on abort, last-good) checkpoint location.
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub meta: Option<Meta>,
    /// Print one progress line per epoch on standard output.
    pub progress: bool,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// A trainable pair with its optimizers.
struct Learner {
    pair: GanPair,
    gen_opt: Adam,
    disc_opt: Adam,
    updates: UpdateCounts,
}

enum TeacherInput<'a> {
    /// Frozen teacher with precomputed reconstructions of the batch.
    Cached { pair: &'a GanPair, x_hat: Tensor, z: Tensor },
    /// Teacher evaluated on the fly.
    Live { pair: &'a GanPair },
}

fn non_finite(what: &str, parts: &LossBreakdown) -> Error {
    Error::NonFinite { what: what.into(), detail: format!("{parts:?}") }
}

fn all_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(Tensor::all_finite)
}

impl Learner {
    fn new(pair: GanPair, beta1: f64) -> Self {
        let gen_opt = Adam::new(pair.generator.params(), beta1);
        let disc_opt = Adam::new(pair.discriminator.params(), beta1);
        Self { pair, gen_opt, disc_opt, updates: UpdateCounts::default() }
    }

    /// One generator update then one discriminator update. Nothing is
    /// changed if any loss or gradient is non-finite.
    fn step(
        &mut self,
        config: &ExperimentConfig,
        x: &Tensor,
        teacher: Option<TeacherInput<'_>>,
        alphas: Option<Alphas>,
        lr_g: f64,
        lr_d: f64,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let gb = self.pair.generator.bind(&mut tape, true);
        let db = self.pair.discriminator.bind(&mut tape, false);
        let (t_pair, t_gen, t_disc, cached) = match teacher {
            Some(TeacherInput::Cached { pair, x_hat, z }) => {
                (Some(pair), None, Some(pair.discriminator.bind(&mut tape, false)), Some((x_hat, z)))
            }
            Some(TeacherInput::Live { pair }) => (
                Some(pair),
                Some(pair.generator.bind(&mut tape, false)),
                Some(pair.discriminator.bind(&mut tape, false)),
                None,
            ),
            None => (None, None, None, None),
        };
        let view = match (t_pair, &t_disc) {
            (Some(pair), Some(disc)) => Some(TeacherView { pair, gen: t_gen.as_ref(), disc, mode: Mode::Eval, cached }),
            _ => None,
        };
        let obj = build_objective(
            &mut tape,
            ObjectiveInputs {
                config,
                student: &self.pair,
                student_gen: &gb,
                student_disc: &db,
                student_mode: Mode::Train,
                teacher: view,
                x: xv,
                alphas,
            },
        )?;
        let mut parts = obj.parts;
        if !parts.total.is_finite() {
            return Err(non_finite("generator objective", &parts));
        }
        let mut grads = tape.backward(obj.total)?;
        let g_grads: Vec<Option<Tensor>> = gb.vars().iter().map(|&v| grads.take(v)).collect();
        if !all_finite(&g_grads) {
            return Err(non_finite("generator gradient", &parts));
        }
        let x_hat = tape.value(obj.x_hat).clone();
        let gen_stats = obj.generator_stats;
        drop(grads);
        drop(tape);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let xh = tape.leaf(x_hat, false);
        let db = self.pair.discriminator.bind(&mut tape, true);
        let (d_loss, d_stats) = build_discriminator_loss(&mut tape, &self.pair, &db, xv, xh)?;
        parts.l_disc = tape.value(d_loss).item();
        if !parts.l_disc.is_finite() {
            return Err(non_finite("discriminator loss", &parts));
        }
        let mut grads = tape.backward(d_loss)?;
        let d_grads: Vec<Option<Tensor>> = db.vars().iter().map(|&v| grads.take(v)).collect();
        if !all_finite(&d_grads) {
            return Err(non_finite("discriminator gradient", &parts));
        }

        self.gen_opt.step(self.pair.generator.params_mut(), &g_grads, lr_g)?;
        self.pair.generator.commit_stats(&gen_stats);
        self.updates.generator += 1;
        self.disc_opt.step(self.pair.discriminator.params_mut(), &d_grads, lr_d)?;
        self.pair.discriminator.commit_stats(&d_stats);
        self.updates.discriminator += 1;
        Ok(parts)
    }
}

/// Training images and their ids, checked to be damage-free.
fn train_images(data: &DatasetIndex, config: &ExperimentConfig) -> Result<(Tensor, Vec<String>)> {
    let ids = data.ids(Split::Train);
    if ids.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    for id in &ids {
        let rec = data.get(id).ok_or_else(|| Error::Data(format!("sample {id} not in index")))?;
        if rec.label != Label::NoDamage {
            return Err(Error::Data(format!("damage sample {id} in train split")));
        }
    }
    let batch = load_batch(data, &ids, config)?;
    Ok((batch.pixels, ids))
}

fn describe(data: &DatasetIndex, n: usize) -> String {
    format!("{n} no_damage train images of {}", data.classes().join("+"))
}

/// Batches of indices for one epoch. A trailing single sample is dropped
/// since batch statistics need at least two.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).filter(|c| c.len() >= 2 || n == 1).map(<[usize]>::to_vec).collect()
}

fn mean_parts(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.l_adv += p.l_adv / n;
        m.l_disc += p.l_disc / n;
        m.l_con += p.l_con / n;
        m.l_lat += p.l_lat / n;
        m.l_kg += p.l_kg / n;
        m.l_kd += p.l_kd / n;
        m.l_kz += p.l_kz / n;
        m.total += p.total / n;
    }
    if let Some(last) = parts.last() {
        m.alpha_g = last.alpha_g;
        m.alpha_d = last.alpha_d;
        m.alpha_z = last.alpha_z;
    }
    m
}

fn progress_line(role: Role, epoch: usize, epochs: usize, m: &LossBreakdown, started: Instant) -> String {
    format!(
        "{role} epoch {}/{epochs}: total={:.5} adv={:.4} disc={:.4} con={:.5} lat={:.5} kg={:.5} kd={:.5} elapsed={:.1}s",
        epoch + 1,
        m.total,
        m.l_adv,
        m.l_disc,
        m.l_con,
        m.l_lat,
        m.l_kg,
        m.l_kd,
        started.elapsed().as_secs_f64()
    )
}

fn finish(ckpt: Checkpoint, mut report: TrainReport, opts: &TrainOptions, started: Instant) -> Result<TrainOutcome> {
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(path) = &opts.checkpoint_path {
        save_checkpoint(&ckpt, path)?;
        report.checkpoint_path = Some(path.clone());
    }
    if let Some(path) = &opts.log_path {
        let meta = opts.meta.clone().unwrap_or_else(|| Meta::new("", ckpt.config.hash()));
        write_text_with_meta(path, &meta, &report.log_csv())?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, report })
}

/// On a non-finite abort, keep the untouched (last good) state on disk.
fn abort(err: Error, ckpt: impl FnOnce() -> Checkpoint, opts: &TrainOptions) -> Error {
    if let (Error::NonFinite { .. }, Some(path)) = (&err, &opts.checkpoint_path) {
        if let Err(e) = save_checkpoint(&ckpt(), path) {
            log::error!("could not save last-good checkpoint: {e}");
        } else {
            log::error!("training aborted; last-good checkpoint at {}", path.display());
        }
    }
    err
}

/// Train a teacher pair with the adversarial objective alone.
pub fn pretrain_teacher(config: &ExperimentConfig, data: &DatasetIndex, opts: &TrainOptions) -> Result<TrainOutcome> {
    let config = config.clone().validated()?;
    let (images, _) = train_images(data, &config)?;
    let n = images.shape()[0];
    let pair = init_pair(&config, Role::Teacher, StudentSize::Smaller)?;
    let mut learner = Learner::new(pair, config.momentum_beta1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TEACHER_SHUFFLE_STREAM);
    let started = Instant::now();
    let mut report = new_report(Role::Teacher);
    let snapshot = |l: &Learner, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
        role: Role::Teacher,
        epoch,
        config: config.clone(),
        alphas: None,
        rng: RngState::of(rng, config.seed),
        networks: l.pair.clone(),
        generator_opt: l.gen_opt.clone(),
        discriminator_opt: l.disc_opt.clone(),
        updates: l.updates,
        teacher_checksum: None,
        data_source: describe(data, n),
        meta: opts.meta.clone(),
    };
    for epoch in 0..config.teacher_epochs {
        let lr_g = config.lr_decay.learning_rate(config.teacher_learning_rate, epoch);
        let lr_d = config.lr_decay.learning_rate(config.discriminator_learning_rate, epoch);
        let mut parts = Vec::new();
        for idx in epoch_batches(n, config.batch_size, &mut rng) {
            let x = images.gather(&idx);
            let p = learner
                .step(&config, &x, None, None, lr_g, lr_d)
                .map_err(|e| abort(e, || snapshot(&learner, &rng, epoch), opts))?;
            report.iterations.push(IterationLosses { iteration: report.iterations.len(), epoch, parts: p });
            parts.push(p);
        }
        let mean = mean_parts(&parts);
        if opts.progress {
            println!("{}", progress_line(Role::Teacher, epoch, config.teacher_epochs, &mean, started));
        }
        report.epochs.push(EpochLosses { epoch, mean });
    }
    report.updates = learner.updates;
    let ckpt = snapshot(&learner, &rng, config.teacher_epochs);
    finish(ckpt, report, opts, started)
}

fn new_report(role: Role) -> TrainReport {
    TrainReport {
        role,
        epochs: Vec::new(),
        iterations: Vec::new(),
        wall_clock_secs: 0.0,
        checkpoint_path: None,
        early_stopped: false,
        updates: UpdateCounts::default(),
    }
}

fn check_teacher_fits(config: &ExperimentConfig, teacher: &GanPair) -> Result<()> {
    let a = teacher.arch();
    if a.image_size != config.image_size || a.channels != config.channels || a.latent_dim != config.latent_dim {
        return Err(Error::Invalid(format!(
            "teacher was built for {}x{}x{} images with latent {}, config asks for {}x{}x{} with latent {}",
            a.channels,
            a.image_size,
            a.image_size,
            a.latent_dim,
            config.channels,
            config.image_size,
            config.image_size,
            config.latent_dim
        )));
    }
    let s = arch_for(config, Role::Student, StudentSize::Smaller);
    let (fs, ft) = (s.feature_channels(), a.feature_channels());
    if fs.max(ft) % fs.min(ft) != 0 {
        return Err(Error::Invalid(format!("student feature width {fs} and teacher width {ft} are not commensurate")));
    }
    Ok(())
}

/// Frozen-teacher reconstructions and latents of every training image, in eval mode.
fn teacher_targets(teacher: &GanPair, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
    let n = images.shape()[0];
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk).min(n);
        let mut tape = Tape::new();
        let x = tape.leaf(images.slice_batch(start, end), false);
        let gb = teacher.generator.bind(&mut tape, false);
        let out = teacher.generator.forward(&mut tape, &gb, x, Mode::Eval)?;
        xs.push(tape.value(out.x_hat).clone());
        zs.push(tape.value(out.z).clone());
    }
    Ok((Tensor::concat_batch(&xs)?, Tensor::concat_batch(&zs)?))
}

/// Whether the teacher takes part in this step's objective: always while
/// calibrating, afterwards only if a distillation term carries weight.
fn teacher_needed(config: &ExperimentConfig, calibrated: bool) -> bool {
    !calibrated || config.lambda_kg != 0.0 || config.lambda_kd != 0.0
}

/// Distill a student from a frozen teacher on no-damage training images.
pub fn train_student(
    config: &ExperimentConfig,
    teacher: &Checkpoint,
    data: &DatasetIndex,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let config = config.clone().validated()?;
    teacher.expect_role(Role::Teacher)?;
    let t_pair = &teacher.networks;
    check_teacher_fits(&config, t_pair)?;
    let teacher_sum = t_pair.checksum();
    let (images, _) = train_images(data, &config)?;
    let n = images.shape()[0];
    let (t_xhat, t_z) = teacher_targets(t_pair, &images, config.batch_size)?;

    let pair = init_pair(&config, Role::Student, StudentSize::Smaller)?;
    let mut learner = Learner::new(pair, config.momentum_beta1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STUDENT_SHUFFLE_STREAM);
    let started = Instant::now();
    let mut report = new_report(Role::Student);
    let mut alphas: Option<Alphas> = None;
    let snapshot = |l: &Learner, rng: &ChaCha8Rng, epoch: usize, alphas: Option<Alphas>| Checkpoint {
        role: Role::Student,
        epoch,
        config: config.clone(),
        alphas,
        rng: RngState::of(rng, config.seed),
        networks: l.pair.clone(),
        generator_opt: l.gen_opt.clone(),
        discriminator_opt: l.disc_opt.clone(),
        updates: l.updates,
        teacher_checksum: Some(teacher_sum.clone()),
        data_source: describe(data, n),
        meta: opts.meta.clone(),
    };
    for epoch in 0..config.epochs {
        let lr_g = config.lr_decay.learning_rate(config.learning_rate, epoch);
        let lr_d = config.lr_decay.learning_rate(config.discriminator_learning_rate, epoch);
        let mut parts = Vec::new();
        for idx in epoch_batches(n, config.batch_size, &mut rng) {
            let x = images.gather(&idx);
            let input = teacher_needed(&config, alphas.is_some()).then(|| TeacherInput::Cached {
                pair: t_pair,
                x_hat: t_xhat.gather(&idx),
                z: t_z.gather(&idx),
            });
            let p = learner
                .step(&config, &x, input, alphas, lr_g, lr_d)
                .map_err(|e| abort(e, || snapshot(&learner, &rng, epoch, alphas), opts))?;
            alphas.get_or_insert(Alphas { g: p.alpha_g, d: p.alpha_d, z: p.alpha_z });
            report.iterations.push(IterationLosses { iteration: report.iterations.len(), epoch, parts: p });
            parts.push(p);
        }
        let mean = mean_parts(&parts);
        if opts.progress {
            println!("{}", progress_line(Role::Student, epoch, config.epochs, &mean, started));
        }
        report.epochs.push(EpochLosses { epoch, mean });
    }
    if t_pair.checksum() != teacher_sum {
        return Err(Error::Invalid("teacher parameters changed during distillation".into()));
    }
    report.updates = learner.updates;
    let ckpt = snapshot(&learner, &rng, config.epochs, alphas);
    finish(ckpt, report, opts, started)
}

/// Teacher and student trained together from scratch, distillation active
/// from the first step. Returns `(student, teacher)`.
pub fn train_jointly(config: &ExperimentConfig, data: &DatasetIndex) -> Result<(Checkpoint, Checkpoint)> {
    let config = config.clone().validated()?;
    let (images, _) = train_images(data, &config)?;
    let n = images.shape()[0];
    let mut teacher = Learner::new(init_pair(&config, Role::Teacher, StudentSize::Smaller)?, config.momentum_beta1);
    let mut student = Learner::new(init_pair(&config, Role::Student, StudentSize::Smaller)?, config.momentum_beta1);
    check_teacher_fits(&config, &teacher.pair)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STUDENT_SHUFFLE_STREAM);
    let mut alphas = None;
    let epochs = config.epochs.max(config.teacher_epochs);
    for epoch in 0..epochs {
        let lr_t = config.lr_decay.learning_rate(config.teacher_learning_rate, epoch);
        let lr_s = config.lr_decay.learning_rate(config.learning_rate, epoch);
        let lr_d = config.lr_decay.learning_rate(config.discriminator_learning_rate, epoch);
        for idx in epoch_batches(n, config.batch_size, &mut rng) {
            let x = images.gather(&idx);
            if epoch < config.teacher_epochs {
                teacher.step(&config, &x, None, None, lr_t, lr_d)?;
            }
            if epoch < config.epochs {
                let input =
                    teacher_needed(&config, alphas.is_some()).then_some(TeacherInput::Live { pair: &teacher.pair });
                let p = student.step(&config, &x, input, alphas, lr_s, lr_d)?;
                alphas.get_or_insert(Alphas { g: p.alpha_g, d: p.alpha_d, z: p.alpha_z });
            }
        }
    }
    let make = |l: Learner, role: Role, alphas: Option<Alphas>, tsum: Option<String>, epochs: usize| Checkpoint {
        role,
        epoch: epochs,
        config: config.clone(),
        alphas,
        rng: RngState::of(&rng, config.seed),
        networks: l.pair,
        generator_opt: l.gen_opt,
        discriminator_opt: l.disc_opt,
        updates: l.updates,
        teacher_checksum: tsum,
        data_source: describe(data, n),
        meta: None,
    };
    let tsum = teacher.pair.checksum();
    let t = make(teacher, Role::Teacher, None, None, config.teacher_epochs);
    let s = make(student, Role::Student, alphas, Some(tsum), config.epochs);
    Ok((s, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    TrainingStructure,
    StudentSize,
    CriticalLayers,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training_structure" => Ok(Self::TrainingStructure),
            "student_size" => Ok(Self::StudentSize),
            "critical_layers" => Ok(Self::CriticalLayers),
            other => Err(Error::Invalid(format!(
                "unknown ablation `{other}` (expected training_structure, student_size or critical_layers)"
            ))),
        }
    }
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TrainingStructure => "training_structure",
            Self::StudentSize => "student_size",
            Self::CriticalLayers => "critical_layers",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub class: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant.clone());
            }
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,variant,class,auc\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", self.kind, r.variant, r.class, r.auc));
        }
        s
    }

    /// One row per variant, one column per class.
    pub fn to_table(&self) -> String {
        let mut classes: Vec<String> = self.rows.iter().map(|r| r.class.clone()).collect();
        classes.sort();
        classes.dedup();
        let mut s = format!("{:<28}", self.kind.to_string());
        for c in &classes {
            s.push_str(&format!(" {c:>14}"));
        }
        s.push('\n');
        for v in self.variants() {
            s.push_str(&format!("{v:<28}"));
            for c in &classes {
                match self.rows.iter().find(|r| r.variant == v && &r.class == c) {
                    Some(r) => s.push_str(&format!(" {:>14.4}", r.auc)),
                    None => s.push_str(&format!(" {:>14}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn test_auc(model: &ScoringModel<'_>, data: &DatasetIndex) -> Result<f64> {
    let scores = score_split(model, data, Split::Test)?;
    let raw: Vec<f64> = scores.iter().map(|s| s.raw).collect();
    let labels: Vec<u8> = scores.iter().map(|s| s.label.map_or(0, Label::as_binary)).collect();
    auc_roc(&raw, &labels)
}

fn kd_auc(config: &ExperimentConfig, teacher: &Checkpoint, data: &DatasetIndex) -> Result<f64> {
    let student = train_student(config, teacher, data, &TrainOptions::default())?.checkpoint;
    test_auc(&ScoringModel::distilled(&student, &teacher.networks)?, data)
}

/// Train and score every variant of an ablation on each class of `data`.
/// `teacher` is reused where a pretrained teacher is called for; otherwise
/// one is pretrained per class.
pub fn run_ablation(
    kind: AblationKind,
    config: &ExperimentConfig,
    data: &DatasetIndex,
    teacher: Option<&Checkpoint>,
) -> Result<AblationTable> {
    let config = config.clone().validated()?;
    let mut rows = Vec::new();
    for class in data.classes() {
        let cdata = data.filter_class(&class);
        let pretrained = match teacher {
            Some(t) => {
                t.expect_role(Role::Teacher)?;
                t.clone()
            }
            None => pretrain_teacher(&config, &cdata, &TrainOptions::default())?.checkpoint,
        };
        let mut push = |variant: &str, auc: f64| {
            log::info!("ablation {kind} {class} {variant}: auc {auc:.4}");
            rows.push(AblationRow { variant: variant.into(), class: class.clone(), auc })
        };
        match kind {
            AblationKind::TrainingStructure => {
                push("teacher_only", test_auc(&ScoringModel::single(&pretrained.networks, &config), &cdata)?);

                let plain = ExperimentConfig { lambda_kg: 0.0, lambda_kd: 0.0, ..config.clone() };
                let untrained = Checkpoint {
                    networks: init_pair(&config, Role::Teacher, StudentSize::Smaller)?,
                    epoch: 0,
                    ..pretrained.clone()
                };
                let s = train_student(&plain, &untrained, &cdata, &TrainOptions::default())?.checkpoint;
                push("student_only", test_auc(&ScoringModel::single(&s.networks, &config), &cdata)?);

                let (s, t) = train_jointly(&config, &cdata)?;
                push("both_from_scratch", test_auc(&ScoringModel::distilled(&s, &t.networks)?, &cdata)?);

                push("kd_pretrained_teacher", kd_auc(&config, &pretrained, &cdata)?);
            }
            AblationKind::StudentSize => {
                push("smaller", kd_auc(&config, &pretrained, &cdata)?);
                let t_width = pretrained.networks.arch().base_width;
                let equal = ExperimentConfig { student_base_width: t_width, ..config.clone() };
                push("equal", kd_auc(&equal, &pretrained, &cdata)?);
            }
            AblationKind::CriticalLayers => {
                use CriticalLayer::*;
                let sets: [(&str, &[CriticalLayer]); 3] = [
                    ("x_hat", &[GeneratedImage]),
                    ("x_hat+features", &[GeneratedImage, DiscriminatorFeatures]),
                    ("x_hat+features+z", &[GeneratedImage, DiscriminatorFeatures, BottleneckZ]),
                ];
                for (name, layers) in sets {
                    let c = ExperimentConfig { critical_layers: layers.iter().copied().collect(), ..config.clone() };
                    push(name, kd_auc(&c, &pretrained, &cdata)?);
                }
            }
        }
    }
    Ok(AblationTable { kind, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;
    use crate::data::{make_synthetic_dataset, SyntheticSpec};

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            image_size: 32,
            channels: 1,
            latent_dim: 8,
            teacher_base_width: 8,
            student_base_width: 4,
            batch_size: 8,
            epochs: 2,
            teacher_epochs: 2,
            ..default_config()
        }
    }

    fn tiny_data(dir: &Path) -> DatasetIndex {
        let spec = SyntheticSpec {
            count_normal: 20,
            count_anomalous: 6,
            image_size: 32,
            channels: 1,
            defect_min: 6,
            defect_max: 10,
            ..SyntheticSpec::default()
        };
        make_synthetic_dataset(&spec, dir, &Meta::new("test", "0")).unwrap()
    }

    #[test]
    fn teacher_pretraining_bookkeeping() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let cfg = ExperimentConfig { teacher_epochs: 1, ..tiny_config() };
        let out = pretrain_teacher(&cfg, &data, &TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoint.role, Role::Teacher);
        assert_eq!(out.checkpoint.epoch, 1);
        assert_eq!(out.report.epochs.len(), 1);
        assert_eq!(out.checkpoint.updates.generator, out.checkpoint.updates.discriminator);
        assert_eq!(out.checkpoint.updates.generator, 2);
    }

    #[test]
    fn student_keeps_teacher_frozen_and_alphas_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let cfg = tiny_config();
        let teacher = pretrain_teacher(&cfg, &data, &TrainOptions::default()).unwrap().checkpoint;
        let before = teacher.networks.checksum();
        let out = train_student(&cfg, &teacher, &data, &TrainOptions::default()).unwrap();
        assert_eq!(teacher.networks.checksum(), before);
        assert_eq!(out.checkpoint.teacher_checksum.as_deref(), Some(before.as_str()));
        let a = out.checkpoint.alphas.unwrap();
        for it in &out.report.iterations {
            assert_eq!((it.parts.alpha_g, it.parts.alpha_d), (a.g, a.d));
        }
        assert_eq!(out.checkpoint.updates.generator, out.checkpoint.updates.discriminator);
    }

    #[test]
    fn student_rejects_student_checkpoint_as_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let cfg = ExperimentConfig { teacher_epochs: 1, ..tiny_config() };
        let mut t = pretrain_teacher(&cfg, &data, &TrainOptions::default()).unwrap().checkpoint;
        t.role = Role::Student;
        assert!(matches!(train_student(&cfg, &t, &data, &TrainOptions::default()), Err(Error::RoleMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(&dir.path().join("data"));
        let cfg = ExperimentConfig { teacher_epochs: 1, ..tiny_config() };
        let t = pretrain_teacher(&cfg, &data, &TrainOptions::default()).unwrap().checkpoint;
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&t, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, t);
        assert!(matches!(load_checkpoint_as(&path, Role::Student), Err(Error::RoleMismatch { .. })));

        let missing = dir.path().join("nope.ckpt");
        let err = load_checkpoint(&missing).unwrap_err().to_string();
        assert!(err.contains("nope.ckpt"), "{err}");

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(checkpoint_from_bytes(&bytes, &path).unwrap_err().to_string().contains("corrupt"));

        let mut bytes = checkpoint_bytes(&t).unwrap();
        bytes[8] = 9;
        let body = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body]);
        bytes[body..].copy_from_slice(&digest);
        assert!(checkpoint_from_bytes(&bytes, &path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn damage_in_train_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let mut recs = data.records().to_vec();
        let i = recs.iter().position(|r| r.label == Label::Damage).unwrap();
        recs[i].split = Split::Train;
        assert!(DatasetIndex::from_records(recs).is_err());
    }

    #[test]
    fn batches_cover_each_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = epoch_batches(21, 8, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
        assert_eq!(epoch_batches(17, 8, &mut rng).len(), 2);
    }

    #[test]
    fn rng_state_resumes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(4);
        let _ = epoch_batches(30, 4, &mut rng);
        let st = RngState::of(&rng, 5);
        let mut back = st.restore();
        assert_eq!(epoch_batches(30, 4, &mut rng), epoch_batches(30, 4, &mut back));
    }

    #[test]
    fn without_distillation_weight_the_teacher_is_irrelevant() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(dir.path());
        let cfg = ExperimentConfig { lambda_kg: 0.0, lambda_kd: 0.0, teacher_epochs: 1, ..tiny_config() };
        let trained = pretrain_teacher(&cfg, &data, &TrainOptions::default()).unwrap().checkpoint;
        let untrained = Checkpoint {
            networks: init_pair(&cfg, Role::Teacher, StudentSize::Smaller).unwrap(),
            epoch: 0,
            ..trained.clone()
        };
        let a = train_student(&cfg, &trained, &data, &TrainOptions::default()).unwrap();
        let b = train_student(&cfg, &untrained, &data, &TrainOptions::default()).unwrap();
        let curve = |o: &TrainOutcome| -> Vec<[f64; 5]> {
            o.report
                .iterations
                .iter()
                .map(|i| [i.parts.l_adv, i.parts.l_disc, i.parts.l_con, i.parts.l_lat, i.parts.total])
                .collect()
        };
        assert_eq!(curve(&a), curve(&b));
        assert_eq!(a.checkpoint.networks, b.checkpoint.networks);
        assert_eq!(a.checkpoint.updates.generator, a.checkpoint.updates.discriminator);
    }
}
