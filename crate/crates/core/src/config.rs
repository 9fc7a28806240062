//! Experiment configuration.
//!
//! Files are TOML restricted to flat `key = value` lines; nested groups use
//! dotted keys (`paths.report_dir = "reports"`). Values are resolved in the
//! order defaults < file < `DEEPDISASTER_*` environment < `--set key=value`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "DEEPDISASTER_";

/// Intermediate outputs where the student is made to match the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalLayer {
    GeneratedImage,
    DiscriminatorFeatures,
    BottleneckZ,
}

impl fmt::Display for CriticalLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriticalLayer::GeneratedImage => "generated_image",
            CriticalLayer::DiscriminatorFeatures => "discriminator_features",
            CriticalLayer::BottleneckZ => "bottleneck_z",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Constant,
    /// `lr_epoch = lr * rate^epoch`
    Multiplicative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDecay {
    pub kind: DecayKind,
    pub rate: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self { kind: DecayKind::Multiplicative, rate: 0.999 }
    }
}

impl LrDecay {
    pub fn learning_rate(&self, base: f64, epoch: usize) -> f64 {
        match self.kind {
            DecayKind::Constant => base,
            DecayKind::Multiplicative => base * self.rate.powi(epoch as i32),
        }
    }
}

/// How a multi-channel input gradient is collapsed to one saliency channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduction {
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub teacher_base_width: usize,
    pub student_base_width: usize,
    /// U-Net encoder/decoder skip concatenation; off only for ablations.
    pub skip_connections: bool,

    /// Student learning rate.
    pub learning_rate: f64,
    pub teacher_learning_rate: f64,
    pub discriminator_learning_rate: f64,
    pub lr_decay: LrDecay,
    pub momentum_beta1: f64,
    pub batch_size: usize,
    /// Student training epochs.
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub train_fraction: f64,

    pub lambda_adv: f64,
    pub lambda_con: f64,
    pub lambda_lat: f64,
    pub lambda_kg: f64,
    pub lambda_kd: f64,

    pub omega_l: f64,
    pub omega_r: f64,
    pub omega_vd: f64,

    pub critical_layers: BTreeSet<CriticalLayer>,

    pub smoothgrad_samples: usize,
    pub smoothgrad_sigma_fraction: f64,
    pub channel_reduction: ChannelReduction,

    pub seed: u64,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        default_config()
    }
}

pub fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 64,
        channels: 3,
        latent_dim: 100,
        teacher_base_width: 64,
        student_base_width: 16,
        skip_connections: true,
        learning_rate: 2e-3,
        teacher_learning_rate: 2e-3,
        discriminator_learning_rate: 2e-3,
        lr_decay: LrDecay::default(),
        momentum_beta1: 0.5,
        batch_size: 64,
        epochs: 30,
        teacher_epochs: 10,
        train_fraction: 0.8,
        lambda_adv: 1.0,
        lambda_con: 20.0,
        lambda_lat: 1.0,
        lambda_kg: 50.0,
        lambda_kd: 1.0,
        omega_l: 0.4,
        omega_r: 0.2,
        omega_vd: 0.4,
        critical_layers: [CriticalLayer::GeneratedImage, CriticalLayer::DiscriminatorFeatures].into_iter().collect(),
        smoothgrad_samples: 8,
        smoothgrad_sigma_fraction: 0.1,
        channel_reduction: ChannelReduction::Max,
        seed: 0,
        paths: Paths::default(),
    }
}

/// One message per violated invariant, each naming its field.
pub fn validate_config(config: &ExperimentConfig) -> Vec<String> {
    let mut v = Vec::new();
    let omega_sum = config.omega_l + config.omega_r + config.omega_vd;
    if (omega_sum - 1.0).abs() > 1e-9 {
        v.push(format!("omega_l + omega_r + omega_vd: weights must sum to 1, got {omega_sum}"));
    }
    for (name, value) in [
        ("omega_l", config.omega_l),
        ("omega_r", config.omega_r),
        ("omega_vd", config.omega_vd),
        ("lambda_adv", config.lambda_adv),
        ("lambda_con", config.lambda_con),
        ("lambda_lat", config.lambda_lat),
        ("lambda_kg", config.lambda_kg),
        ("lambda_kd", config.lambda_kd),
    ] {
        if !(value >= 0.0 && value.is_finite()) {
            v.push(format!("{name}: must be a nonnegative finite number, got {value}"));
        }
    }
    if config.student_base_width > config.teacher_base_width {
        v.push(format!(
            "student_base_width: {} exceeds teacher_base_width {}",
            config.student_base_width, config.teacher_base_width
        ));
    } else if config.student_base_width > 0 && !config.teacher_base_width.is_multiple_of(config.student_base_width) {
        v.push(format!(
            "student_base_width: {} must divide teacher_base_width {} for the feature adapter",
            config.student_base_width, config.teacher_base_width
        ));
    }
    if config.student_base_width == 0 {
        v.push("student_base_width: must be positive".into());
    }
    if config.teacher_base_width == 0 {
        v.push("teacher_base_width: must be positive".into());
    }
    if config.image_size < 32 || !config.image_size.is_power_of_two() {
        v.push(format!("image_size: must be a power of two >= 32, got {}", config.image_size));
    }
    if config.channels != 1 && config.channels != 3 {
        v.push(format!("channels: must be 1 or 3, got {}", config.channels));
    }
    if config.critical_layers.is_empty() {
        v.push("critical_layers: at least one critical layer is required".into());
    }
    for (name, value) in [
        ("latent_dim", config.latent_dim),
        ("batch_size", config.batch_size),
        ("epochs", config.epochs),
        ("teacher_epochs", config.teacher_epochs),
        ("smoothgrad_samples", config.smoothgrad_samples),
    ] {
        if value == 0 {
            v.push(format!("{name}: must be positive"));
        }
    }
    for (name, value) in [
        ("learning_rate", config.learning_rate),
        ("teacher_learning_rate", config.teacher_learning_rate),
        ("discriminator_learning_rate", config.discriminator_learning_rate),
        ("smoothgrad_sigma_fraction", config.smoothgrad_sigma_fraction),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            v.push(format!("{name}: must be positive, got {value}"));
        }
    }
    let big = |v: u64| v > i64::MAX as u64;
    for (name, value) in [
        ("image_size", config.image_size as u64),
        ("latent_dim", config.latent_dim as u64),
        ("teacher_base_width", config.teacher_base_width as u64),
        ("student_base_width", config.student_base_width as u64),
        ("batch_size", config.batch_size as u64),
        ("epochs", config.epochs as u64),
        ("teacher_epochs", config.teacher_epochs as u64),
        ("smoothgrad_samples", config.smoothgrad_samples as u64),
        ("seed", config.seed),
    ] {
        if big(value) {
            v.push(format!("{name}: must be at most {}, got {value}", i64::MAX));
        }
    }
    if !(0.0..1.0).contains(&config.momentum_beta1) {
        v.push(format!("momentum_beta1: must lie in [0, 1), got {}", config.momentum_beta1));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction <= 1.0) {
        v.push(format!("train_fraction: must lie in (0, 1], got {}", config.train_fraction));
    }
    if !(config.lr_decay.rate > 0.0 && config.lr_decay.rate <= 1.0) {
        v.push(format!("lr_decay.rate: must lie in (0, 1], got {}", config.lr_decay.rate));
    }
    v
}

impl ExperimentConfig {
    pub fn validated(self) -> Result<Self> {
        let violations = validate_config(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(violations))
        }
    }

    /// Flat `key = value` rendering, one dotted key per line, sorted.
    /// Panics on integers above `i64::MAX`, which validation rejects.
    pub fn to_config_string(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serializes to a table");
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Short stable digest of the flat rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Every dotted key a config file may set.
    pub fn keys() -> Vec<String> {
        let table = toml::Table::try_from(default_config()).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        lines.into_iter().map(|l| l.split(" = ").next().unwrap_or_default().to_string()).collect()
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push(format!("{key} = {other}")),
        }
    }
}

/// Parse a config document (without validating it).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    from_table(table)
}

fn from_table(table: toml::Table) -> Result<ExperimentConfig> {
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Read and validate a config file; keys it omits keep their defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?.validated()
}

pub fn save_config(config: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, config.to_config_string()).map_err(|e| Error::io(path, e))
}

/// Parse the right-hand side of an override. Anything that is not a TOML
/// value is taken as a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last =
        parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in override `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Layered resolution: file (optional), then environment, then `key=value`
/// overrides. `env` yields `(name, value)` pairs; only names starting with
/// [`ENV_PREFIX`] that map onto a config key are used.
pub fn resolve_config<I>(file: Option<&Path>, env: I, overrides: &[String]) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let keys = ExperimentConfig::keys();
    let env: Vec<(String, String)> = env.into_iter().collect();
    for key in &keys {
        let name = format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"));
        if let Some((_, raw)) = env.iter().find(|(k, _)| *k == name) {
            set_dotted(&mut table, key, override_value(raw))?;
        }
    }
    for ov in overrides {
        let (k, v) = ov.split_once('=').ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let k = k.trim();
        if !keys.iter().any(|known| known == k) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        set_dotted(&mut table, k, override_value(v.trim()))?;
    }
    from_table(table)?.validated()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = default_config();
        assert_eq!(c.learning_rate, 2e-3);
        assert_eq!(c.momentum_beta1, 0.5);
        assert_eq!(c.batch_size, 64);
        assert_eq!((c.lambda_adv, c.lambda_con, c.lambda_lat, c.lambda_kg, c.lambda_kd), (1.0, 20.0, 1.0, 50.0, 1.0));
        assert_eq!((c.omega_l, c.omega_r, c.omega_vd), (0.4, 0.2, 0.4));
        assert!((c.omega_l + c.omega_r + c.omega_vd - 1.0).abs() < 1e-12);
        assert_eq!(
            c.critical_layers.iter().copied().collect::<Vec<_>>(),
            vec![CriticalLayer::GeneratedImage, CriticalLayer::DiscriminatorFeatures]
        );
        assert!(validate_config(&c).is_empty());
    }

    #[test]
    fn validation_names_offending_fields() {
        let c = ExperimentConfig { student_base_width: 128, teacher_base_width: 64, ..default_config() };
        let v = validate_config(&c);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("student_base_width"));

        let c = ExperimentConfig { critical_layers: BTreeSet::new(), ..default_config() };
        let v = validate_config(&c);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("critical_layers"));

        let c = ExperimentConfig { image_size: 48, ..default_config() };
        assert!(validate_config(&c)[0].starts_with("image_size"));
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(parse_config("").unwrap(), default_config());
    }

    #[test]
    fn partial_document_overrides_only_given_keys() {
        let c = parse_config("epochs = 3\n").unwrap();
        assert_eq!(c, ExperimentConfig { epochs: 3, ..default_config() });
        let c = parse_config("paths.report_dir = \"out\"\nlr_decay.rate = 0.5\n").unwrap();
        assert_eq!(c.paths.report_dir, PathBuf::from("out"));
        assert_eq!(c.paths.dataset_root, PathBuf::from("data"));
        assert_eq!(c.lr_decay.rate, 0.5);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = parse_config("lambda_kgg = 3\n").unwrap_err().to_string();
        assert!(err.contains("lambda_kgg"), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let err = parse_config("epochs = 3\nbatch_size = = 4\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn round_trip_through_text() {
        let mut c = default_config();
        c.learning_rate = 1.234_567_890_123e-4;
        c.critical_layers.insert(CriticalLayer::BottleneckZ);
        c.paths.dataset_root = PathBuf::from("/tmp/some where");
        let text = c.to_config_string();
        assert!(text.lines().all(|l| l.contains(" = ")));
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn precedence_env_then_cli() {
        let env = vec![
            ("DEEPDISASTER_EPOCHS".to_string(), "7".to_string()),
            ("DEEPDISASTER_LAMBDA_KG".to_string(), "3".to_string()),
            ("DEEPDISASTER_PATHS_REPORT_DIR".to_string(), "envdir".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = resolve_config(None, env, &["epochs=9".to_string()]).unwrap();
        assert_eq!(c.epochs, 9);
        assert_eq!(c.lambda_kg, 3.0);
        assert_eq!(c.paths.report_dir, PathBuf::from("envdir"));
        assert!(resolve_config(None, vec![], &["nope=1".to_string()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = default_config();
        let b = ExperimentConfig { seed: 1, ..default_config() };
        assert_eq!(a.hash(), default_config().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn integers_must_fit_the_text_format() {
        let cfg = ExperimentConfig { seed: u64::MAX, ..default_config() };
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("seed"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn valid_config() -> impl Strategy<Value = ExperimentConfig> {
            (
                (5u32..8, 1usize..=3, 1usize..64, 1usize..5, 0usize..3),
                (1e-5f64..1e-1, 0.0f64..0.99, 1usize..256, 1usize..50, 0.05f64..1.0),
                (prop::array::uniform5(0.0f64..100.0), 0.0f64..1.0, 0.0f64..1.0),
                (
                    0u64..=i64::MAX as u64,
                    1usize..32,
                    0.0f64..1.0,
                    any::<bool>(),
                    prop::sample::subsequence(vec![0usize, 1, 2], 1..=3),
                ),
            )
                .prop_map(|(a, b, c, d)| {
                    let (log_size, channels, latent, tw, shift) = a;
                    let (lr, beta1, batch, epochs, frac) = b;
                    let (lambdas, wl, wr) = c;
                    let (seed, samples, sigma, skip, layers) = d;
                    let all = [
                        CriticalLayer::GeneratedImage,
                        CriticalLayer::DiscriminatorFeatures,
                        CriticalLayer::BottleneckZ,
                    ];
                    let teacher = 4 * tw;
                    let omega_r = (1.0 - wl) * wr;
                    ExperimentConfig {
                        image_size: 1 << log_size,
                        channels,
                        latent_dim: latent,
                        teacher_base_width: teacher,
                        student_base_width: teacher >> shift,
                        skip_connections: skip,
                        learning_rate: lr,
                        teacher_learning_rate: lr / 2.0,
                        discriminator_learning_rate: lr * 3.0,
                        momentum_beta1: beta1,
                        batch_size: batch + 1,
                        epochs,
                        teacher_epochs: epochs + 1,
                        train_fraction: frac,
                        lambda_adv: lambdas[0],
                        lambda_con: lambdas[1],
                        lambda_lat: lambdas[2],
                        lambda_kg: lambdas[3],
                        lambda_kd: lambdas[4],
                        omega_l: wl,
                        omega_r,
                        omega_vd: (1.0 - wl - omega_r).max(0.0),
                        critical_layers: layers.into_iter().map(|i| all[i]).collect(),
                        smoothgrad_samples: samples,
                        smoothgrad_sigma_fraction: sigma,
                        seed,
                        ..default_config()
                    }
                })
        }

        proptest! {
            #[test]
            fn text_round_trip_is_exact(cfg in valid_config()) {
                prop_assume!(validate_config(&cfg).is_empty());
                let back = parse_config(&cfg.to_config_string()).unwrap();
                prop_assert_eq!(back.hash(), cfg.hash());
                prop_assert_eq!(back, cfg);
            }
        }
    }
}
