//! Closed-form expected rates, gate-width sweeps and detector calibration.
//!
//! Both arms are observed on every pulse. A pulse contributes to the sifted
//! key when the arm matching Alice's basis fires; when the other arm fires
//! too, the record keeps one arm at random, which costs the matched arm half
//! of those events. Within an arm a single click decides the bit and a
//! double click is resolved to a random bit (half an error on average).

use rayon::prelude::*;

use crate::config::SystemConfig;
use crate::error::ModelError;
use crate::optics::{either, DetectionModel};
use crate::pulse::{Basis, Symbol};
use crate::security::{secret_fraction, AttackReport};

/// Where the clicks and errors come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateComponents {
    /// Clicks caused by signal photons, all four detectors (1/s).
    pub signal_click_rate: f64,
    /// Noise clicks, all four detectors (1/s).
    pub noise_click_rate: f64,
    /// Share of sifted bits in error with noise switched off.
    pub crosstalk_error_fraction: f64,
    /// Remaining share of sifted bits in error, attributed to noise.
    pub noise_error_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub gate_width: f64,
    /// Sifted key rate (bit/s).
    pub sifted_rate: f64,
    pub qber: f64,
    /// Secret-key rate under the intercept/resend estimate (bit/s).
    pub secret_rate: f64,
    pub secret_fraction: f64,
    pub components: RateComponents,
    /// Click rate of each detector, `[arm][detector]` (1/s).
    pub detector_click_rates: [[f64; 2]; 2],
    pub attack: AttackReport,
}

/// Per-pulse probabilities behind a [`RateReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseStatistics {
    pub sifted: f64,
    pub errors: f64,
    pub detector_clicks: [[f64; 2]; 2],
    pub signal_clicks: f64,
}

impl PulseStatistics {
    pub fn qber(&self) -> f64 {
        if self.sifted > 0.0 {
            (self.errors / self.sifted).clamp(0.0, 0.5)
        } else {
            0.0
        }
    }
}

/// Expected per-pulse statistics, averaged over the four equiprobable
/// symbols.
pub fn pulse_statistics(model: &DetectionModel) -> PulseStatistics {
    pulse_statistics_with_noise(model, model.p_noise)
}

fn pulse_statistics_with_noise(model: &DetectionModel, p_noise: f64) -> PulseStatistics {
    let mut out = PulseStatistics {
        sifted: 0.0,
        errors: 0.0,
        detector_clicks: [[0.0; 2]; 2],
        signal_clicks: 0.0,
    };
    for sym in Symbol::ALL {
        let click: [[f64; 2]; 2] = std::array::from_fn(|a| {
            let arm = Basis::from_index(a).expect("two arms");
            std::array::from_fn(|d| {
                let s = model.signal_click_probability(sym, arm, d);
                out.signal_clicks += 0.25 * s;
                either(p_noise, s)
            })
        });
        for a in 0..2 {
            for d in 0..2 {
                out.detector_clicks[a][d] += 0.25 * click[a][d];
            }
        }
        let matched = click[sym.basis.index()];
        let other = click[sym.basis.other().index()];
        let right = matched[usize::from(sym.bit)];
        let wrong = matched[usize::from(!sym.bit)];
        let any_matched = either(right, wrong);
        let any_other = either(other[0], other[1]);
        let kept = 1.0 - 0.5 * any_other;
        out.sifted += 0.25 * any_matched * kept;
        out.errors += 0.25 * (wrong * (1.0 - right) + 0.5 * right * wrong) * kept;
    }
    out
}

pub fn expected_rates(cfg: &SystemConfig) -> Result<RateReport, ModelError> {
    cfg.validate()?;
    let model = cfg.detection_model()?;
    let stats = pulse_statistics(&model);
    let quiet = pulse_statistics_with_noise(&model, 0.0);
    let rep = cfg.source.rep_rate;
    let qber = stats.qber();
    let attack = cfg.attack().attribute(qber)?;
    let fraction = secret_fraction(qber, &attack, cfg.f_ec)?;
    let sifted_rate = rep * stats.sifted;
    let crosstalk = if stats.sifted > 0.0 {
        (quiet.errors / stats.sifted).min(qber)
    } else {
        0.0
    };
    Ok(RateReport {
        gate_width: cfg.detector.gate_width,
        sifted_rate,
        qber,
        secret_rate: sifted_rate * fraction,
        secret_fraction: fraction,
        components: RateComponents {
            signal_click_rate: rep * stats.signal_clicks,
            noise_click_rate: rep * 4.0 * model.p_noise,
            crosstalk_error_fraction: crosstalk,
            noise_error_fraction: (qber - crosstalk).max(0.0),
        },
        detector_click_rates: stats.detector_clicks.map(|arm| arm.map(|p| rep * p)),
        attack,
    })
}

/// Evaluates [`expected_rates`] at every gate width of `grid` (seconds).
/// Points are computed in parallel; output follows grid order.
pub fn sweep_gate_width(cfg: &SystemConfig, grid: &[f64]) -> Result<Vec<(f64, RateReport)>, ModelError> {
    if grid.is_empty() {
        return Err(ModelError::Domain("gate-width grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModelError::Domain("gate-width grid must be strictly increasing".into()));
    }
    grid.par_iter()
        .map(|&g| expected_rates(&cfg.with_gate_width(g)).map(|r| (g, r)))
        .collect()
}

/// Observables the unpublished detector parameters are fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    /// Gate width of the operating point (s).
    pub gate_width: f64,
    /// Secret rate at that gate width (bit/s).
    pub secret_rate: f64,
    /// QBER at that gate width.
    pub qber: f64,
    /// Lowest QBER over `min_qber_grid`.
    pub min_qber: f64,
    /// Gate widths searched for the lowest QBER (s).
    pub min_qber_grid: Vec<f64>,
}

impl Anchors {
    /// The reference link: 8.9 kbit/s at 0.48 ns with about 7 % QBER, and
    /// 4 % as the lowest QBER over gate widths up to 1.5 ns.
    pub fn reference() -> Self {
        Self {
            gate_width: 0.48e-9,
            secret_rate: 8.9e3,
            qber: 0.07,
            min_qber: 0.04,
            min_qber_grid: (1..=150).map(|i| i as f64 * 0.01e-9).collect(),
        }
    }

    /// Anchors reproducing `cfg` exactly, for round-trip checks.
    pub fn from_config(cfg: &SystemConfig, template: &Anchors) -> Result<Self, ModelError> {
        let v = anchor_values(cfg, template)?;
        Ok(Self {
            secret_rate: v.secret_rate,
            qber: v.qber,
            min_qber: v.min_qber,
            ..template.clone()
        })
    }
}

/// Model values of the anchored observables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorValues {
    pub secret_rate: f64,
    pub qber: f64,
    pub min_qber: f64,
}

impl AnchorValues {
    /// Relative errors against `anchors`, in (secret, qber, min qber) order.
    pub fn relative_errors(&self, anchors: &Anchors) -> [f64; 3] {
        [
            self.secret_rate / anchors.secret_rate - 1.0,
            self.qber / anchors.qber - 1.0,
            self.min_qber / anchors.min_qber - 1.0,
        ]
    }
}

fn qber_at(cfg: &SystemConfig, gate: f64) -> Result<f64, ModelError> {
    Ok(pulse_statistics(&cfg.with_gate_width(gate).detection_model()?).qber())
}

pub fn anchor_values(cfg: &SystemConfig, anchors: &Anchors) -> Result<AnchorValues, ModelError> {
    let at = expected_rates(&cfg.with_gate_width(anchors.gate_width))?;
    let mut min_qber = f64::INFINITY;
    for &g in &anchors.min_qber_grid {
        min_qber = min_qber.min(qber_at(cfg, g)?);
    }
    Ok(AnchorValues {
        secret_rate: at.secret_rate,
        qber: at.qber,
        min_qber,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Fitted total detection efficiency.
    pub efficiency: f64,
    /// Fitted noise count rate while gated (counts/s), stored as the dark
    /// rate with zero background.
    pub noise_rate: f64,
    /// Root-mean-square relative error over the three anchored observables.
    pub residual: f64,
    pub achieved: AnchorValues,
    pub config: SystemConfig,
}

const MIN_EFFICIENCY: f64 = 1e-6;
const MIN_LOG_NOISE: f64 = 0.0;
const MAX_LOG_NOISE: f64 = 8.0;

fn with_detector(cfg: &SystemConfig, efficiency: f64, noise_rate: f64) -> SystemConfig {
    let mut out = cfg.clone();
    out.detector.efficiency = efficiency;
    out.detector.dark_rate = noise_rate;
    out.detector.background_rate = 0.0;
    out
}

/// Efficiency that puts the secret rate at the anchor for a given noise
/// rate, by bisection in log-efficiency. Saturates at 1 when the anchor is
/// out of reach.
fn efficiency_for_secret(cfg: &SystemConfig, anchors: &Anchors, noise_rate: f64) -> Result<f64, ModelError> {
    let secret = |eta: f64| -> Result<f64, ModelError> {
        Ok(expected_rates(&with_detector(cfg, eta, noise_rate).with_gate_width(anchors.gate_width))?.secret_rate)
    };
    if secret(1.0)? <= anchors.secret_rate {
        return Ok(1.0);
    }
    if secret(MIN_EFFICIENCY)? >= anchors.secret_rate {
        return Ok(MIN_EFFICIENCY);
    }
    let (mut lo, mut hi) = (MIN_EFFICIENCY.ln(), 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if secret(mid.exp())? < anchors.secret_rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Fits (efficiency, noise rate) so the model reproduces `anchors`.
///
/// For each candidate noise rate the efficiency is solved so the secret-rate
/// anchor holds exactly; the noise rate then minimises the summed squared
/// relative error of all anchors (coarse log-scan, then golden-section
/// refinement).
pub fn calibrate(cfg: &SystemConfig, anchors: &Anchors) -> Result<Calibration, ModelError> {
    cfg.validate()?;
    if !(anchors.secret_rate > 0.0 && anchors.qber > 0.0 && anchors.min_qber > 0.0) {
        return Err(ModelError::Calibration("anchor values must be positive".into()));
    }
    if anchors.secret_rate >= cfg.source.rep_rate {
        return Err(ModelError::Calibration(format!(
            "secret-rate anchor {} bit/s is not below the repetition rate {} Hz",
            anchors.secret_rate, cfg.source.rep_rate
        )));
    }
    let max_gate = anchors.min_qber_grid.iter().copied().fold(anchors.gate_width, f64::max);
    let max_log_noise = MAX_LOG_NOISE.min((0.45 / max_gate).log10());

    let objective = |log_noise: f64| -> Result<(f64, f64, AnchorValues), ModelError> {
        let noise = 10f64.powf(log_noise);
        let eta = efficiency_for_secret(cfg, anchors, noise)?;
        let values = anchor_values(&with_detector(cfg, eta, noise), anchors)?;
        let sse = values.relative_errors(anchors).iter().map(|e| e * e).sum();
        Ok((sse, eta, values))
    };

    const SCAN: usize = 161;
    let step = (max_log_noise - MIN_LOG_NOISE) / (SCAN - 1) as f64;
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..SCAN {
        let (sse, _, _) = objective(MIN_LOG_NOISE + step * i as f64)?;
        if sse < best.0 {
            best = (sse, i);
        }
    }
    let center = MIN_LOG_NOISE + step * best.1 as f64;
    let (mut a, mut b) = ((center - step).max(MIN_LOG_NOISE), (center + step).min(max_log_noise));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = objective(c)?.0;
    let mut fd = objective(d)?.0;
    while b - a > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = objective(c)?.0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = objective(d)?.0;
        }
    }
    let log_noise = 0.5 * (a + b);
    let (sse, efficiency, achieved) = objective(log_noise)?;
    let secret_err = achieved.secret_rate / anchors.secret_rate - 1.0;
    if secret_err.abs() > 1e-3 {
        return Err(ModelError::Calibration(format!(
            "secret-rate anchor {:.4e} bit/s unreachable within efficiency (0, 1] and noise [1, {:.1e}] cps; best {:.4e} bit/s",
            anchors.secret_rate,
            10f64.powf(max_log_noise),
            achieved.secret_rate
        )));
    }
    let noise_rate = 10f64.powf(log_noise);
    Ok(Calibration {
        efficiency,
        noise_rate,
        residual: (sse / 3.0).sqrt(),
        achieved,
        config: with_detector(cfg, efficiency, noise_rate),
    })
}
