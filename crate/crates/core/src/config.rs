//! Flat JSON configuration documents and the built-in presets.
//!
//! The schema is strict: unknown and duplicate keys are errors, all values are
//! non-negative integers. `m`, `d`, `n_mb` and `devices` may be omitted and
//! default to `1`, `1`, `p` and `t·p·d`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ByteConvention, Hardware, ModelShape, ParallelLayout};

/// Everything a config document describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    pub shape: ModelShape,
    pub layout: ParallelLayout,
    pub hardware: Hardware,
    pub bytes: ByteConvention,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unknown preset `{0}` (expected one of 22b, 175b, 530b, 1t)")]
    UnknownPreset(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    a: u64,
    h: u64,
    #[serde(rename = "L")]
    l: u64,
    s: u64,
    v: u64,
    t: u64,
    p: u64,
    #[serde(default)]
    m: Option<u64>,
    #[serde(default)]
    d: Option<u64>,
    b: u64,
    #[serde(default)]
    n_mb: Option<u64>,
    device_mem_bytes: u64,
    peak_flops: u64,
    #[serde(default)]
    devices: Option<u64>,
}

impl From<Document> for Config {
    fn from(doc: Document) -> Self {
        let m = doc.m.unwrap_or(1);
        let d = doc.d.unwrap_or(1);
        let n_mb = doc.n_mb.unwrap_or(doc.p);
        let layout = ParallelLayout::new(doc.t, doc.p, doc.b)
            .with_interleave(m)
            .with_data_parallel(d)
            .with_microbatches(n_mb);
        Config {
            shape: ModelShape::new(doc.a, doc.h, doc.l, doc.s, doc.v),
            layout,
            hardware: Hardware {
                device_mem: doc.device_mem_bytes,
                peak_flops_per_device: doc.peak_flops,
                devices: doc.devices.unwrap_or_else(|| layout.devices()),
            },
            bytes: ByteConvention::default(),
        }
    }
}

impl From<&Config> for Document {
    fn from(c: &Config) -> Self {
        Document {
            a: c.shape.attention_heads,
            h: c.shape.hidden,
            l: c.shape.layers,
            s: c.shape.seq_len,
            v: c.shape.vocab,
            t: c.layout.tensor,
            p: c.layout.pipeline,
            m: Some(c.layout.interleave),
            d: Some(c.layout.data_parallel),
            b: c.layout.microbatch,
            n_mb: Some(c.layout.microbatches),
            device_mem_bytes: c.hardware.device_mem,
            peak_flops: c.hardware.peak_flops_per_device,
            devices: Some(c.hardware.devices),
        }
    }
}

fn rename_missing(message: String) -> String {
    // serde says "missing field `a`"
    match message.strip_prefix("missing field `") {
        Some(rest) => {
            let name = rest.split('`').next().unwrap_or(rest);
            format!("missing required field {name}")
        }
        None => message,
    }
}

/// Parses a config document. Validation of the values is left to [`crate::validate`].
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    // An empty document is an empty object with every required field missing.
    let text = if text.trim().is_empty() { "{}" } else { text };
    serde_json::from_str::<Document>(text).map(Config::from).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: rename_missing(e.to_string().split(" at line ").next().unwrap_or_default().to_owned()),
    })
}

/// Writes every key, including the defaulted ones.
pub fn serialize_config(config: &Config) -> String {
    serde_json::to_string_pretty(&Document::from(config)).expect("flat integer document always serializes")
}

pub const PRESET_NAMES: [&str; 4] = ["22b", "175b", "530b", "1t"];

/// The four evaluation configurations: `t = 8`, `s = 2048`, `v = 51200`, A100 80 GiB devices,
/// one microbatch per pipeline slot of the global batch.
pub fn preset(name: &str) -> Result<Config, ConfigError> {
    // (a, h, L, p, m, global batch, microbatch)
    let (a, h, l, p, m, global, b) = match name.to_ascii_lowercase().as_str() {
        "22b" => (64, 6144, 48, 1, 1, 4, 4),
        "175b" => (96, 12288, 96, 8, 3, 64, 1),
        "530b" => (128, 20480, 105, 35, 3, 280, 1),
        "1t" => (160, 25600, 128, 64, 1, 512, 1),
        _ => return Err(ConfigError::UnknownPreset(name.to_owned())),
    };
    let layout = ParallelLayout::new(8, p, b).with_interleave(m).with_microbatches(global / b);
    Ok(Config {
        shape: ModelShape::new(a, h, l, 2048, 51200),
        layout,
        hardware: Hardware::a100(layout.devices()),
        bytes: ByteConvention::default(),
    })
}
