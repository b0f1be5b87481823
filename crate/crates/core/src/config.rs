//! The aggregate system configuration and its flat `key = value` file format.
//!
//! Every key is optional and falls back to the documented default; unknown
//! or repeated keys are errors. `#` starts a comment. Values carry the unit
//! named in the key suffix.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::ModelError;
use crate::optics::{
    ChannelConfig, DetectionModel, DetectorConfig, Pattern, ReceiverConfig, SourceConfig, WdmShape,
};
use crate::pulse::PulseParams;
use crate::security::{intercept_resend_stats, AttackReport};

/// Parameters of the interactive key-distillation session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    /// Pulses per session for two-process runs.
    pub pulses: u64,
    /// Fraction of the sifted key disclosed for QBER estimation.
    pub sample_fraction: f64,
    /// Bits reserved from the privacy-amplified length.
    pub margin_bits: u64,
    /// Sessions whose estimated QBER exceeds this value abort.
    pub abort_qber: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            pulses: 1_000_000,
            sample_fraction: 0.1,
            margin_bits: 64,
            abort_qber: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub pulse: PulseParams,
    pub source: SourceConfig,
    pub channel: ChannelConfig,
    pub receiver: ReceiverConfig,
    pub detector: DetectorConfig,
    /// Error-correction inefficiency relative to the Shannon limit.
    pub f_ec: f64,
    pub seed: u64,
    pub session: SessionConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            pulse: PulseParams::reference(),
            source: SourceConfig::default(),
            channel: ChannelConfig::default(),
            receiver: ReceiverConfig::default(),
            detector: DetectorConfig::default(),
            f_ec: 1.1,
            seed: 1,
            session: SessionConfig::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Clone, Copy)]
enum Unit {
    Plain,
    Pico,
    Nano,
    Mega,
    Giga,
}

impl Unit {
    fn scale(self) -> f64 {
        match self {
            Unit::Plain => 1.0,
            Unit::Pico => 1e-12,
            Unit::Nano => 1e-9,
            Unit::Mega => 1e6,
            Unit::Giga => 1e9,
        }
    }
}

type Getter = fn(&SystemConfig) -> f64;
type Setter = fn(&mut SystemConfig, f64);

struct NumericKey {
    name: &'static str,
    unit: Unit,
    get: Getter,
    set: Setter,
}

macro_rules! key {
    ($name:literal, $unit:ident, $($field:ident).+) => {
        NumericKey {
            name: $name,
            unit: Unit::$unit,
            get: |c| c.$($field).+,
            set: |c, v| c.$($field).+ = v,
        }
    };
}

const NUMERIC_KEYS: &[NumericKey] = &[
    key!("sigma_t_ps", Pico, pulse.sigma_t),
    key!("sigma_w_ghz", Giga, pulse.sigma_w),
    key!("delta_t_ps", Pico, pulse.delta_t),
    key!("delta_w_ghz", Giga, pulse.delta_w),
    key!("mu", Plain, source.mu),
    key!("rep_rate_mhz", Mega, source.rep_rate),
    key!("loss_db", Plain, channel.loss_db),
    key!("insertion_loss_db", Plain, receiver.insertion_loss_db),
    key!("time_window_halfwidth_ps", Pico, receiver.time_window_halfwidth),
    key!("wdm_passband_halfwidth_ghz", Giga, receiver.wdm_passband_halfwidth),
    key!("efficiency", Plain, detector.efficiency),
    key!("dark_rate_cps", Plain, detector.dark_rate),
    key!("background_rate_cps", Plain, detector.background_rate),
    key!("gate_width_ns", Nano, detector.gate_width),
    key!("gate_center_offset_ps", Pico, detector.gate_center_offset),
    key!("f_ec", Plain, f_ec),
    key!("sample_fraction", Plain, session.sample_fraction),
    key!("abort_qber", Plain, session.abort_qber),
];

const INTEGER_KEYS: &[&str] = &["seed", "pulses", "margin_bits"];
const ENUM_KEYS: &[&str] = &["pattern", "wdm_shape"];

fn pattern_name(p: Pattern) -> &'static str {
    match p {
        Pattern::DeterministicAlternating => "alternating",
        Pattern::UniformRandom => "random",
    }
}

fn shape_name(s: WdmShape) -> &'static str {
    match s {
        WdmShape::Rect => "rect",
        WdmShape::Gaussian => "gaussian",
    }
}

/// Formats with 12 significant digits, dropping trailing zeros.
fn human(v: f64) -> String {
    let s = format!("{:.11e}", v);
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
    if (-4..12).contains(&exp) {
        let fixed = format!("{:.*}", (11 - exp).max(0) as usize, v);
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        format!("{mantissa}e{exp}")
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.pulse.validate()?;
        self.source.validate()?;
        crate::optics::transmittance(&self.channel)?;
        self.receiver.validate(&self.pulse)?;
        self.detector.validate()?;
        let bad = |m: String| Err(ModelError::Config(m));
        if !(self.f_ec >= 1.0 && self.f_ec.is_finite()) {
            return bad(format!("f_ec must be >= 1, got {}", self.f_ec));
        }
        let s = &self.session;
        if !(s.sample_fraction > 0.0 && s.sample_fraction < 1.0) {
            return bad(format!("sample_fraction must lie in (0, 1), got {}", s.sample_fraction));
        }
        if !(s.abort_qber > 0.0 && s.abort_qber <= 0.5) {
            return bad(format!("abort_qber must lie in (0, 0.5], got {}", s.abort_qber));
        }
        if s.pulses == 0 {
            return bad("pulses must be positive".into());
        }
        Ok(())
    }

    pub fn with_gate_width(&self, gate_width: f64) -> Self {
        let mut out = self.clone();
        out.detector.gate_width = gate_width;
        out
    }

    pub fn detection_model(&self) -> Result<DetectionModel, ModelError> {
        DetectionModel::new(&self.pulse, &self.source, &self.channel, &self.receiver, &self.detector)
    }

    pub fn attack(&self) -> AttackReport {
        intercept_resend_stats(&self.pulse, &self.receiver, &self.detector)
    }

    /// Parses the `key = value` format on top of the defaults and validates
    /// the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| ConfigError::Syntax {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());

            if let Some(k) = NUMERIC_KEYS.iter().find(|k| k.name == key) {
                let v: f64 = value
                    .parse()
                    .map_err(|_| err(format!("`{key}`: expected a number, got `{value}`")))?;
                if !v.is_finite() {
                    return Err(err(format!("`{key}`: value must be finite")));
                }
                (k.set)(&mut cfg, v * k.unit.scale());
            } else if INTEGER_KEYS.contains(&key) {
                let v: u64 = value
                    .parse()
                    .map_err(|_| err(format!("`{key}`: expected an unsigned integer, got `{value}`")))?;
                match key {
                    "seed" => cfg.seed = v,
                    "pulses" => cfg.session.pulses = v,
                    _ => cfg.session.margin_bits = v,
                }
            } else if key == "pattern" {
                cfg.source.pattern = match value {
                    "alternating" => Pattern::DeterministicAlternating,
                    "random" => Pattern::UniformRandom,
                    _ => return Err(err(format!("`pattern`: expected `alternating` or `random`, got `{value}`"))),
                };
            } else if key == "wdm_shape" {
                cfg.receiver.wdm_shape = match value {
                    "rect" => WdmShape::Rect,
                    "gaussian" => WdmShape::Gaussian,
                    _ => return Err(err(format!("`wdm_shape`: expected `rect` or `gaussian`, got `{value}`"))),
                };
            } else {
                return Err(err(format!("unknown key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, in a form [`parse`](Self::parse)
    /// accepts.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for k in NUMERIC_KEYS {
            let _ = writeln!(out, "{} = {}", k.name, human((k.get)(self) / k.unit.scale()));
        }
        let _ = writeln!(out, "pattern = {}", pattern_name(self.source.pattern));
        let _ = writeln!(out, "wdm_shape = {}", shape_name(self.receiver.wdm_shape));
        let _ = writeln!(out, "pulses = {}", self.session.pulses);
        let _ = writeln!(out, "margin_bits = {}", self.session.margin_bits);
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }

    /// SHA-256 over an exact (bit-level) rendering of every field.
    pub fn digest(&self) -> [u8; 32] {
        let mut canon = String::from("tfqkd-config-v1\n");
        for k in NUMERIC_KEYS {
            let _ = writeln!(canon, "{}={:016x}", k.name, (k.get)(self).to_bits());
        }
        let _ = writeln!(canon, "pattern={}", pattern_name(self.source.pattern));
        let _ = writeln!(canon, "wdm_shape={}", shape_name(self.receiver.wdm_shape));
        let _ = writeln!(canon, "pulses={}", self.session.pulses);
        let _ = writeln!(canon, "margin_bits={}", self.session.margin_bits);
        let _ = writeln!(canon, "seed={}", self.seed);
        Sha256::digest(canon.as_bytes()).into()
    }
}

/// Names of all accepted keys.
pub fn known_keys() -> Vec<&'static str> {
    NUMERIC_KEYS
        .iter()
        .map(|k| k.name)
        .chain(INTEGER_KEYS.iter().copied())
        .chain(ENUM_KEYS.iter().copied())
        .collect()
}
