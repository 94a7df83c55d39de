//! Training configuration: presets, the declarative config file, override
//! resolution, run-directory layout and the reproducibility manifest.
//!
//! Precedence (lowest to highest): preset defaults < config file < command
//! line overrides. Unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::data::SingleImageBatchSpec;
use crate::error::{Error, Result};
use crate::nce::NceReduction;
use crate::objectives::{GanMode, NegativeSource, ObjectiveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Cut,
    Fastcut,
    Sincut,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cut" => Ok(Preset::Cut),
            "fastcut" => Ok(Preset::Fastcut),
            "sincut" => Ok(Preset::Sincut),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Generator width multiplier.
    pub base_width: usize,
    pub disc_base_width: usize,
    /// Projection head hidden and output widths.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub patches_per_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub load_size: usize,
    pub crop_size: usize,
    /// Random horizontal flip augmentation in the loader.
    pub random_flip: bool,
    /// Flip-equivariance transform around the generator (fast preset).
    pub flip_equivariance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub momentum: f64,
    pub queue_capacity: usize,
    /// External loss stays inactive until every layer holds this many rows.
    pub warmup_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    /// Optional hard iteration cap (handy for desk-scale runs).
    pub max_iterations: Option<u64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Checkpoint / sample-strip cadence, in iterations.
    pub checkpoint_interval: u64,
    pub negative_source: NegativeSource,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub bank: BankConfig,
    pub single_image: SingleImageBatchSpec,
}

impl Preset {
    pub fn defaults(self) -> TrainConfig {
        let base = TrainConfig {
            preset: self,
            epochs: 400,
            max_iterations: None,
            learning_rate: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            checkpoint_interval: 500,
            negative_source: NegativeSource::Internal,
            objective: ObjectiveConfig {
                lambda_x: 1.0,
                lambda_y: 1.0,
                gan_mode: GanMode::LeastSquares,
                r1_gamma: 0.0,
                temperature: crate::nce::DEFAULT_TEMPERATURE,
                decoder_grad_through_nce: true,
                shared_embedding_weights: true,
                nce_reduction: NceReduction::Mean,
            },
            model: ModelConfig {
                base_width: 64,
                disc_base_width: 64,
                embed_dim: crate::nce::DEFAULT_EMBED_DIM,
                hidden_dim: crate::nce::DEFAULT_EMBED_DIM,
                patches_per_layer: crate::data::DEFAULT_PATCHES_PER_LAYER,
            },
            data: DataConfig {
                load_size: 286,
                crop_size: 256,
                random_flip: true,
                flip_equivariance: false,
            },
            bank: BankConfig {
                momentum: crate::bank::DEFAULT_MOMENTUM,
                queue_capacity: crate::bank::DEFAULT_QUEUE_CAPACITY,
                warmup_rows: crate::bank::DEFAULT_WARMUP_ROWS,
            },
            single_image: SingleImageBatchSpec::default(),
        };
        match self {
            Preset::Cut => base,
            Preset::Fastcut => TrainConfig {
                epochs: 200,
                objective: ObjectiveConfig {
                    lambda_x: 10.0,
                    lambda_y: 0.0,
                    ..base.objective
                },
                data: DataConfig { flip_equivariance: true, ..base.data },
                ..base
            },
            Preset::Sincut => TrainConfig {
                epochs: 2000,
                objective: ObjectiveConfig {
                    gan_mode: GanMode::NonSaturating,
                    r1_gamma: 10.0,
                    ..base.objective
                },
                ..base
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objective.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.objective.lambda_x < 0.0 || self.objective.lambda_y < 0.0 {
            return Err(Error::Config("lambda weights must be non-negative".into()));
        }
        if self.learning_rate <= 0.0 || self.epochs == 0 {
            return Err(Error::Config("learning rate and epochs must be positive".into()));
        }
        if self.objective.lambda_x == 0.0 && self.objective.lambda_y == 0.0 {
            log::warn!("configuration warning: lambda_x = lambda_y = 0, no content-preservation loss is active");
        }
        if self.objective.r1_gamma > 0.0 && self.preset != Preset::Sincut {
            // The penalty's parameter gradients require a norm-free
            // (piecewise-linear) discriminator; only the tile variant
            // qualifies.
            return Err(Error::Config(
                "r1_gamma > 0 requires the tile discriminator (sincut preset)".into(),
            ));
        }
        if self.model.base_width == 0 || self.model.embed_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.single_image.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn leaf_paths(value: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(v, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> bool {
    if path.is_empty() {
        return false;
    }
    if path.len() == 1 {
        table.insert(path[0].to_string(), value);
        return true;
    }
    match table.get_mut(path[0]) {
        Some(toml::Value::Table(inner)) => set_path(inner, &path[1..], value),
        _ => false,
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

/// Merge `file` (TOML fragment) over `base` (full config table), recursively.
fn merge_tables(base: &mut toml::Table, file: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in file {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(bt)), toml::Value::Table(ft)) => {
                merge_tables(bt, ft, &path)?;
            }
            (Some(slot), val) => {
                *slot = val.clone();
            }
            (None, _) => {
                return Err(Error::Config(format!("unknown config key `{path}`")));
            }
        }
    }
    Ok(())
}

/// Resolve a training configuration: preset defaults, then the optional
/// config file, then `key=value` overrides (dotted paths or unique leaf
/// names). Returns the config plus the normalized override descriptions for
/// the run manifest.
pub fn resolve_config(
    preset: Preset,
    config_file: Option<&Path>,
    overrides: &[String],
) -> Result<(TrainConfig, Vec<String>)> {
    let defaults = preset.defaults();
    let mut table: toml::Table = toml::from_str(&defaults.to_toml())
        .map_err(|e| Error::Config(format!("internal default serialization: {e}")))?;

    if let Some(path) = config_file {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file_table: toml::Table = toml::from_str(&content)
            .map_err(|e| Error::Config(format!("config parse error in {}: {e}", path.display())))?;
        merge_tables(&mut table, &file_table, "")?;
    }

    let mut leaves = Vec::new();
    leaf_paths(&toml::Value::Table(table.clone()), "", &mut leaves);
    // `max_iterations` is optional, so it may be absent from the defaults
    // table; keep it addressable.
    if !leaves.contains(&"max_iterations".to_string()) {
        leaves.push("max_iterations".to_string());
    }

    let mut applied = Vec::new();
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let resolved: String = if leaves.iter().any(|l| l == key) {
            key.to_string()
        } else {
            // Unique leaf-name match (e.g. `lambda_x` -> objective.lambda_x).
            let matches: Vec<&String> = leaves
                .iter()
                .filter(|l| l.rsplit('.').next() == Some(key))
                .collect();
            match matches.len() {
                1 => matches[0].clone(),
                0 => return Err(Error::Config(format!("unknown config key `{key}`"))),
                _ => {
                    return Err(Error::Config(format!(
                        "ambiguous config key `{key}` (candidates: {})",
                        matches.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                    )))
                }
            }
        };
        let parts: Vec<&str> = resolved.split('.').collect();
        let value = parse_override_value(raw);
        if !set_path(&mut table, &parts, value) {
            return Err(Error::Config(format!("cannot set config key `{resolved}`")));
        }
        applied.push(format!("{resolved}={raw}"));
    }

    let rendered = toml::to_string(&table)
        .map_err(|e| Error::Config(format!("config render error: {e}")))?;
    let config: TrainConfig = toml::from_str(&rendered)
        .map_err(|e| Error::Config(format!("config validation error: {e}")))?;
    config.validate()?;
    Ok((config, applied))
}

/// The run directory layout created before training starts.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub samples: PathBuf,
    pub logs: PathBuf,
    pub metrics_csv: PathBuf,
    pub manifest: PathBuf,
}

fn dir_is_empty(p: &Path) -> Result<bool> {
    Ok(std::fs::read_dir(p)?.next().is_none())
}

/// Create `<root>/{checkpoints,samples,logs}` plus paths for metrics and the
/// manifest. Refuses a non-empty root unless `force` is set, in which case a
/// fresh sibling `<root>-rN` is used and prior contents stay untouched.
pub fn run_dir_layout(out_root: &Path, force: bool) -> Result<RunDirs> {
    let root = if out_root.exists() && !dir_is_empty(out_root)? {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to start a new suffixed run)",
                out_root.display()
            )));
        }
        let mut n = 2;
        loop {
            let candidate = out_root.with_file_name(format!(
                "{}-r{n}",
                out_root.file_name().and_then(|s| s.to_str()).unwrap_or("run")
            ));
            if !candidate.exists() {
                break candidate;
            }
            n += 1;
        }
    } else {
        out_root.to_path_buf()
    };
    let dirs = RunDirs {
        checkpoints: root.join("checkpoints"),
        samples: root.join("samples"),
        logs: root.join("logs"),
        metrics_csv: root.join("metrics.csv"),
        manifest: root.join("manifest.toml"),
        root,
    };
    std::fs::create_dir_all(&dirs.checkpoints)?;
    std::fs::create_dir_all(&dirs.samples)?;
    std::fs::create_dir_all(&dirs.logs)?;
    Ok(dirs)
}

/// File count plus a content hash over the ordered file list (names + sizes),
/// enough to detect dataset drift between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub file_count: usize,
    pub sha256: String,
}

pub fn dataset_fingerprint(files: &[PathBuf]) -> DatasetFingerprint {
    let mut hasher = sha2::Sha256::new();
    for f in files {
        hasher.update(f.to_string_lossy().as_bytes());
        let size = std::fs::metadata(f).map(|m| m.len()).unwrap_or(0);
        hasher.update(size.to_le_bytes());
    }
    let digest = hasher.finalize();
    DatasetFingerprint { file_count: files.len(), sha256: hex_string(&digest) }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce a run, written before the first step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub started_unix_secs: u64,
    pub dataset: DatasetFingerprint,
    pub overrides: Vec<String>,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(
        config: &TrainConfig,
        overrides: Vec<String>,
        dataset: DatasetFingerprint,
    ) -> Self {
        RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            started_unix_secs: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            dataset,
            overrides,
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_defaults_match_contracts() {
        let cut = Preset::Cut.defaults();
        assert_eq!(cut.objective.lambda_x, 1.0);
        assert_eq!(cut.objective.lambda_y, 1.0);
        assert_eq!(cut.epochs, 400);
        assert_eq!(cut.learning_rate, 0.002);
        assert_eq!(cut.objective.gan_mode, GanMode::LeastSquares);
        assert!(!cut.data.flip_equivariance);

        let fast = Preset::Fastcut.defaults();
        assert_eq!(fast.objective.lambda_x, 10.0);
        assert_eq!(fast.objective.lambda_y, 0.0);
        assert_eq!(fast.epochs, 200);
        assert!(fast.data.flip_equivariance);

        let sin = Preset::Sincut.defaults();
        assert_eq!(sin.objective.gan_mode, GanMode::NonSaturating);
        assert!(sin.objective.r1_gamma > 0.0);
        assert_eq!(sin.single_image.crops_per_iteration, 16);
        assert_eq!(sin.single_image.crop_size, 128);
        assert_eq!(sin.single_image.tile_size, 64);
        assert_eq!(sin.single_image.scale_width_min, 384);
        assert_eq!(sin.single_image.scale_width_max, 1024);
    }

    #[test]
    fn precedence_preset_file_override() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = tmp.path().join("cfg.toml");
        std::fs::write(&cfg_path, "epochs = 42\n[objective]\nlambda_x = 3.0\n").unwrap();
        let (cfg, applied) = resolve_config(
            Preset::Cut,
            Some(&cfg_path),
            &["lambda_x=5".to_string(), "seed=99".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 42); // file beats preset
        assert_eq!(cfg.objective.lambda_x, 5.0); // override beats file
        assert_eq!(cfg.seed, 99);
        assert_eq!(applied, vec!["objective.lambda_x=5", "seed=99"]);
    }

    #[test]
    fn unknown_keys_rejected_by_name() {
        let err = resolve_config(Preset::Cut, None, &["warp_speed=9".to_string()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warp_speed"), "{msg}");

        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = tmp.path().join("cfg.toml");
        std::fs::write(&cfg_path, "nonsense = 1\n").unwrap();
        let err = resolve_config(Preset::Cut, Some(&cfg_path), &[]).unwrap_err();
        assert!(err.to_string().contains("nonsense"));
    }

    #[test]
    fn config_round_trips_losslessly() {
        let (cfg, _) = resolve_config(
            Preset::Fastcut,
            None,
            &["base_width=16".to_string(), "max_iterations=100".to_string()],
        )
        .unwrap();
        let text = cfg.to_toml();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let again: TrainConfig = toml::from_str(&back.to_toml()).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn r1_requires_tile_discriminator() {
        let err = resolve_config(Preset::Cut, None, &["r1_gamma=5".to_string()]).unwrap_err();
        assert!(err.to_string().contains("tile"));
    }

    #[test]
    fn run_dir_policy() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let dirs = run_dir_layout(&root, false).unwrap();
        assert!(dirs.checkpoints.is_dir());
        assert!(dirs.samples.is_dir());
        assert!(dirs.logs.is_dir());
        // Re-running on the now-populated dir without force fails...
        std::fs::write(root.join("metrics.csv"), "x").unwrap();
        assert!(run_dir_layout(&root, false).is_err());
        // ...and with force appends a suffixed sibling, preserving contents.
        let dirs2 = run_dir_layout(&root, true).unwrap();
        assert!(dirs2.root.file_name().unwrap().to_str().unwrap().contains("-r2"));
        assert!(root.join("metrics.csv").is_file());
    }

    #[test]
    fn manifest_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let (cfg, ov) = resolve_config(Preset::Cut, None, &["seed=5".to_string()]).unwrap();
        let fp = DatasetFingerprint { file_count: 3, sha256: "ab".into() };
        let m = RunManifest::new(&cfg, ov, fp);
        let p = tmp.path().join("manifest.toml");
        m.write(&p).unwrap();
        let back = RunManifest::read(&p).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.seed, 5);
        assert_eq!(back.overrides, vec!["seed=5"]);
    }
}
