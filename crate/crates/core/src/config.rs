//! Flat `key = value` configuration with a single registry of keys.
//!
//! Precedence is override > file > default. Every key has a type, a default
//! and a one-line description; help text and README tables are rendered from
//! the same registry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{at_path, config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyType {
    Int,
    Float,
    Flag,
    Str,
    Enum(&'static [&'static str]),
}

impl KeyType {
    fn describe(&self) -> String {
        match self {
            Self::Int => "int".into(),
            Self::Float => "float".into(),
            Self::Flag => "on|off".into(),
            Self::Str => "string".into(),
            Self::Enum(v) => v.join("|"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub ty: KeyType,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(key: &'static str, ty: KeyType, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, ty, default, doc }
}

pub const DATA_ROOT_ENV: &str = "DIGPT_DATA_ROOT";

pub static REGISTRY: &[KeySpec] = &[
    k(
        "seed",
        KeyType::Int,
        "0",
        "master seed for init, data order and augmentation",
    ),
    k(
        "data.root",
        KeyType::Str,
        "synthetic://shapes?train=512&test=256&seed=0",
        "image folder or synthetic:// spec (env DIGPT_DATA_ROOT overrides the default)",
    ),
    k(
        "data.image_size",
        KeyType::Int,
        "32",
        "square input resolution in pixels",
    ),
    k("data.patch_size", KeyType::Int, "4", "patch side in pixels"),
    k(
        "data.augment",
        KeyType::Flag,
        "on",
        "random resized crop + horizontal flip during pretraining",
    ),
    k(
        "data.crop_min_scale",
        KeyType::Float,
        "0.2",
        "smallest crop area fraction",
    ),
    k("data.flip_prob", KeyType::Float, "0.5", "horizontal flip probability"),
    k("clusters.rows", KeyType::Int, "2", "cluster grid rows"),
    k("clusters.cols", KeyType::Int, "2", "cluster grid columns"),
    k("model.depth", KeyType::Int, "6", "encoder blocks"),
    k("model.dim", KeyType::Int, "192", "encoder width"),
    k("model.heads", KeyType::Int, "3", "encoder attention heads"),
    k(
        "model.mlp_ratio",
        KeyType::Float,
        "4.0",
        "MLP hidden width / model width",
    ),
    k("decoder.depth", KeyType::Int, "2", "blocks per decoder"),
    k("decoder.dim", KeyType::Int, "192", "decoder width"),
    k("decoder.heads", KeyType::Int, "3", "decoder attention heads"),
    k(
        "teacher.kind",
        KeyType::Enum(&["pixel", "frozen", "cache"]),
        "pixel",
        "source of target tokens",
    ),
    k(
        "teacher.path",
        KeyType::Str,
        "",
        "frozen teacher checkpoint or feature cache file",
    ),
    k(
        "paradigm",
        KeyType::Enum(&["digpt", "fd", "mim"]),
        "digpt",
        "pretraining paradigm",
    ),
    k("loss.gen", KeyType::Flag, "on", "generative (next-cluster) loss"),
    k(
        "loss.dis_mode",
        KeyType::Enum(&["latest", "all", "off"]),
        "latest",
        "visible-cluster supervision",
    ),
    k(
        "loss.lambda_dis",
        KeyType::Float,
        "1.0",
        "weight of the discriminative loss",
    ),
    k(
        "loss.fd",
        KeyType::Flag,
        "off",
        "extra feature-distillation term on the encoder output",
    ),
    k(
        "mim.mask_ratio",
        KeyType::Float,
        "0.5",
        "fraction of clusters hidden by the mim paradigm",
    ),
    k("train.batch_size", KeyType::Int, "64", "images per step"),
    k("train.epochs", KeyType::Int, "10", "pretraining epochs"),
    k("train.warmup_epochs", KeyType::Int, "1", "linear warmup epochs"),
    k(
        "train.base_lr",
        KeyType::Float,
        "1.5e-4",
        "peak lr = base_lr * batch_size / 256",
    ),
    k("train.min_lr", KeyType::Float, "0.0", "floor of the cosine decay"),
    k("train.weight_decay", KeyType::Float, "0.05", "decoupled weight decay"),
    k("train.beta1", KeyType::Float, "0.9", "AdamW beta1"),
    k("train.beta2", KeyType::Float, "0.95", "AdamW beta2"),
    k(
        "train.checkpoint_every",
        KeyType::Int,
        "0",
        "steps between checkpoints (0 = final only)",
    ),
    k(
        "train.out_dir",
        KeyType::Str,
        "runs/pretrain",
        "directory for metrics, checkpoints and config snapshot",
    ),
    k("train.resume", KeyType::Str, "", "checkpoint to resume from"),
    k("probe.epochs", KeyType::Int, "50", "linear-probe epochs"),
    k("probe.lr", KeyType::Float, "1e-2", "linear-probe peak lr"),
    k("probe.batch_size", KeyType::Int, "128", "linear-probe batch size"),
    k("probe.weight_decay", KeyType::Float, "0.0", "linear-probe weight decay"),
    k("finetune.epochs", KeyType::Int, "5", "fine-tuning epochs"),
    k("finetune.lr", KeyType::Float, "1e-3", "fine-tuning peak lr"),
    k("finetune.batch_size", KeyType::Int, "32", "fine-tuning batch size"),
    k(
        "finetune.weight_decay",
        KeyType::Float,
        "0.05",
        "fine-tuning weight decay",
    ),
    k("finetune.warmup_epochs", KeyType::Int, "1", "fine-tuning warmup epochs"),
    k("runtime.threads", KeyType::Int, "0", "worker threads (0 = all cores)"),
];

pub fn spec(key: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|s| s.key == key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Override,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, (String, Provenance)>,
}

fn parse_flag(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Some(true),
        "off" | "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn check_type(spec: &KeySpec, value: &str) -> Result<()> {
    let ok = match spec.ty {
        KeyType::Int => value.parse::<i64>().is_ok(),
        KeyType::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        KeyType::Flag => parse_flag(value).is_some(),
        KeyType::Str => true,
        KeyType::Enum(opts) => opts.contains(&value),
    };
    if ok {
        Ok(())
    } else {
        config_err(format!("{}: `{value}` is not a valid {}", spec.key, spec.ty.describe()))
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::defaults()
    }
}

impl Config {
    pub fn defaults() -> Self {
        let mut values = BTreeMap::new();
        for s in REGISTRY {
            values.insert(s.key, (s.default.to_string(), Provenance::Default));
        }
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                values.insert("data.root", (root, Provenance::Default));
            }
        }
        Self { values }
    }

    pub fn set(&mut self, key: &str, value: &str, provenance: Provenance) -> Result<()> {
        let Some(spec) = spec(key) else {
            return config_err(format!("unknown key `{key}`"));
        };
        check_type(spec, value)?;
        self.values.insert(spec.key, (value.to_string(), provenance));
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, provenance: Provenance) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return config_err(format!("line {}: expected `key = value`, got `{raw}`", n + 1));
            };
            self.set(key.trim(), value.trim(), provenance)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let Some((key, value)) = kv.split_once('=') else {
            return config_err(format!("override `{kv}` is not key=value"));
        };
        self.set(key.trim(), value.trim(), Provenance::Override)
    }

    pub fn provenance(&self, key: &str) -> Option<Provenance> {
        self.values.get(key).map(|(_, p)| *p)
    }

    pub fn raw(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a registered config key"))
            .0
    }

    pub fn int(&self, key: &str) -> Result<i64> {
        self.raw(key)
            .parse()
            .or_else(|_| config_err(format!("{key}: expected int")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.int(key)?;
        usize::try_from(v).or_else(|_| config_err(format!("{key}={v} must be >= 0")))
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        self.raw(key)
            .parse()
            .or_else(|_| config_err(format!("{key}: expected float")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        parse_flag(self.raw(key)).map_or_else(|| config_err(format!("{key}: expected on|off")), Ok)
    }

    pub fn string(&self, key: &str) -> &str {
        self.raw(key)
    }

    /// Parses an enum-typed key into any `FromStr` type.
    pub fn parsed<T: std::str::FromStr<Err = crate::Error>>(&self, key: &str) -> Result<T> {
        self.raw(key).parse()
    }

    /// Cross-key rules; each error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let kind = self.string("teacher.kind");
        if kind == "cache" && self.flag("data.augment")? {
            return config_err(
                "teacher.kind: cache targets require data.augment=off (random crops would desynchronise cached tokens)",
            );
        }
        if kind != "pixel" && self.string("teacher.path").is_empty() {
            return config_err(format!("teacher.path: required when teacher.kind={kind}"));
        }
        let (epochs, warmup) = (self.usize("train.epochs")?, self.usize("train.warmup_epochs")?);
        if epochs > 0 && warmup >= epochs {
            return config_err(format!(
                "train.warmup_epochs={warmup} must be smaller than train.epochs={epochs}"
            ));
        }
        for key in ["train.batch_size", "probe.batch_size", "finetune.batch_size"] {
            if self.usize(key)? == 0 {
                return config_err(format!("{key}: must be at least 1"));
            }
        }
        for (dim, heads) in [("model.dim", "model.heads"), ("decoder.dim", "decoder.heads")] {
            let (d, h) = (self.usize(dim)?, self.usize(heads)?);
            if h == 0 || d % h != 0 {
                return config_err(format!("{heads}={h} does not divide {dim}={d}"));
            }
        }
        if self.string("paradigm") == "digpt"
            && !self.flag("loss.gen")?
            && self.string("loss.dis_mode") == "off"
            && !self.flag("loss.fd")?
        {
            return config_err("loss.gen: loss.gen=off with loss.dis_mode=off leaves no objective");
        }
        if self.float("loss.lambda_dis")? < 0.0 {
            return config_err("loss.lambda_dis: must be >= 0");
        }
        let ratio = self.float("mim.mask_ratio")?;
        if !(ratio > 0.0 && ratio < 1.0) {
            return config_err("mim.mask_ratio: must lie strictly between 0 and 1");
        }
        Ok(())
    }

    /// Every key as `key = value`, registry order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in REGISTRY {
            let _ = writeln!(out, "{} = {}", s.key, self.raw(s.key));
        }
        out
    }

    /// SHA-256 of [`Config::render`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Keys whose values differ from `other`.
    pub fn diff(&self, other: &Config) -> Vec<&'static str> {
        REGISTRY
            .iter()
            .filter(|s| self.raw(s.key) != other.raw(s.key))
            .map(|s| s.key)
            .collect()
    }
}

/// Defaults, then the file (if any), then `key=value` overrides; validated.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = Config::defaults();
    if let Some(p) = path {
        let text = at_path(p, std::fs::read_to_string(p))?;
        cfg.apply_text(&text, Provenance::File)?;
    }
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Registry rendered as an aligned plain-text table for `--help`.
pub fn help_table() -> String {
    let width = REGISTRY.iter().map(|s| s.key.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (key = default  [type]  description):\n");
    for s in REGISTRY {
        let _ = writeln!(
            out,
            "  {:width$} = {:<12} [{}]  {}",
            s.key,
            if s.default.is_empty() { "\"\"" } else { s.default },
            s.ty.describe(),
            s.doc
        );
    }
    out
}

/// Registry rendered as a Markdown table.
pub fn markdown_table() -> String {
    let mut out = String::from("| key | default | type | description |\n|---|---|---|---|\n");
    for s in REGISTRY {
        let _ = writeln!(
            out,
            "| `{}` | `{}` | {} | {} |",
            s.key,
            s.default,
            s.ty.describe(),
            s.doc
        );
    }
    out
}
