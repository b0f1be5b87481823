//! Transmitter, channel and receiver component models.
//!
//! Signal path: weak coherent source → scalar-loss link → receiver insertion
//! loss → 50/50 passive basis splitter → (time filter | WDM demultiplexer) →
//! gated threshold detectors. Photon numbers on each detector are
//! independent Poisson variables (thinning of the coherent state), so every
//! detector is characterised by a single click probability per pulse.

use rand::Rng;

use crate::error::{require, ModelError};
use crate::pulse::{
    gaussian_capture, ppm_window, symbol_pulse, wdm_port_capture, Basis, PulseParams, Symbol,
    Window,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Cycle PPM0, FSK0, PPM1, FSK1 forever.
    DeterministicAlternating,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceConfig {
    /// Mean photon number per pulse.
    pub mu: f64,
    /// Pulse repetition rate (Hz).
    pub rep_rate: f64,
    pub pattern: Pattern,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            rep_rate: 30e6,
            pattern: Pattern::UniformRandom,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        require(self.mu > 0.0 && self.mu.is_finite(), || format!("mu must be positive, got {}", self.mu))?;
        require(self.rep_rate > 0.0 && self.rep_rate.is_finite(), || {
            format!("rep_rate must be positive, got {}", self.rep_rate)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub loss_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { loss_db: 13.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WdmShape {
    Rect,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverConfig {
    pub insertion_loss_db: f64,
    /// Half-width of the time-filter window around each PPM slot (s).
    pub time_window_halfwidth: f64,
    /// Half-width of each WDM passband (Hz).
    pub wdm_passband_halfwidth: f64,
    pub wdm_shape: WdmShape,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            insertion_loss_db: 2.0,
            time_window_halfwidth: 488.5e-12,
            wdm_passband_halfwidth: 6.25e9,
            wdm_shape: WdmShape::Rect,
        }
    }
}

impl ReceiverConfig {
    /// Checks the receiver against the pulse set it has to sort: windows
    /// and passbands of the two detectors of an arm must not overlap.
    pub fn validate(&self, p: &PulseParams) -> Result<(), ModelError> {
        require(self.insertion_loss_db >= 0.0, || {
            format!("insertion_loss_db must be >= 0, got {}", self.insertion_loss_db)
        })?;
        require(self.time_window_halfwidth > 0.0, || {
            "time_window_halfwidth must be positive".to_string()
        })?;
        require(self.wdm_passband_halfwidth > 0.0, || {
            "wdm_passband_halfwidth must be positive".to_string()
        })?;
        require(self.time_window_halfwidth <= p.delta_t / 2.0 * (1.0 + 1e-12), || {
            format!(
                "time windows overlap: halfwidth {:e} s exceeds delta_t/2 = {:e} s",
                self.time_window_halfwidth,
                p.delta_t / 2.0
            )
        })?;
        if self.wdm_shape == WdmShape::Rect {
            require(self.wdm_passband_halfwidth <= p.delta_w / 2.0 * (1.0 + 1e-12), || {
                format!(
                    "WDM passbands overlap: halfwidth {:e} Hz exceeds delta_w/2 = {:e} Hz",
                    self.wdm_passband_halfwidth,
                    p.delta_w / 2.0
                )
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Dark count rate while gated (counts/s).
    pub dark_rate: f64,
    /// Background count rate while gated (counts/s).
    pub background_rate: f64,
    /// Gate width (s).
    pub gate_width: f64,
    /// Gate centre relative to the expected arrival time (s).
    pub gate_center_offset: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            efficiency: 0.15,
            dark_rate: 5e3,
            background_rate: 0.0,
            gate_width: 0.48e-9,
            gate_center_offset: 0.0,
        }
    }
}

impl DetectorConfig {
    /// Probability of a noise click in one gate.
    pub fn noise_probability(&self) -> f64 {
        (self.dark_rate + self.background_rate) * self.gate_width
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        require(self.efficiency > 0.0 && self.efficiency <= 1.0, || {
            format!("efficiency must lie in (0, 1], got {}", self.efficiency)
        })?;
        require(self.dark_rate >= 0.0 && self.background_rate >= 0.0, || {
            "dark_rate and background_rate must be >= 0".to_string()
        })?;
        require(self.gate_width > 0.0 && self.gate_width.is_finite(), || {
            format!("gate_width must be positive, got {}", self.gate_width)
        })?;
        require(self.gate_center_offset.is_finite(), || "gate_center_offset must be finite".to_string())?;
        let p = self.noise_probability();
        require(p < 0.5, || format!("noise probability per gate {p} must be < 0.5"))
    }

    /// Gate of a detector whose expected arrival time is `expected`.
    fn gate(&self, expected: f64) -> Window {
        Window::centered(expected + self.gate_center_offset, self.gate_width / 2.0)
    }
}

/// Probability that at least one of two independent events happens.
pub fn either(a: f64, b: f64) -> f64 {
    a + b - a * b
}

pub fn db_to_transmittance(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

pub fn transmittance(ch: &ChannelConfig) -> Result<f64, ModelError> {
    if !(ch.loss_db >= 0.0) || !ch.loss_db.is_finite() {
        return Err(ModelError::Domain(format!("link loss must be >= 0 dB, got {}", ch.loss_db)));
    }
    Ok(db_to_transmittance(ch.loss_db))
}

/// Mean photon number reaching the detectors of one arm, efficiency
/// included: `mu · T_link · T_rx · 1/2 · eta`. The splitter is symmetric, so
/// the value is the same for both arms.
pub fn effective_mean_photons(
    src: &SourceConfig,
    ch: &ChannelConfig,
    rx: &ReceiverConfig,
    det: &DetectorConfig,
) -> Result<f64, ModelError> {
    Ok(src.mu * transmittance(ch)? * db_to_transmittance(rx.insertion_loss_db) * 0.5 * det.efficiency)
}

/// Threshold-detector click probability in one gate: no click requires no
/// noise event and no detected photon.
pub fn click_probability(mu_on_detector: f64, det: &DetectorConfig) -> Result<f64, ModelError> {
    if !(mu_on_detector >= 0.0) {
        return Err(ModelError::Domain(format!("mean photon number must be >= 0, got {mu_on_detector}")));
    }
    det.validate()?;
    Ok(either(det.noise_probability(), -(-mu_on_detector).exp_m1()))
}

/// Probability that a photon of `sym` reaches detector `detector` of arm
/// `arm` inside that detector's gate.
///
/// PPM detectors are gated around their own slot, so the time-filter window
/// and the gate intersect. FSK detectors are gated around the slot centre
/// where the broad FSK time profile sits; spectral routing and gating are
/// independent factors.
pub fn detector_signal_fraction(
    sym: Symbol,
    p: &PulseParams,
    rx: &ReceiverConfig,
    det: &DetectorConfig,
    arm: Basis,
    detector: usize,
) -> f64 {
    let pulse = symbol_pulse(sym, p);
    match arm {
        Basis::Ppm => {
            let window = ppm_window(p, rx, detector);
            let slot = (window.lo + window.hi) / 2.0;
            gaussian_capture(pulse.time_center, pulse.time_sigma, window.intersect(det.gate(slot)))
        }
        Basis::Fsk => {
            wdm_port_capture(pulse.freq_center, pulse.freq_sigma, p, rx, detector)
                * gaussian_capture(pulse.time_center, pulse.time_sigma, det.gate(0.0))
        }
    }
}

/// Per-detector signal fractions `[arm][detector]` for every symbol.
pub type FractionTable = [[[f64; 2]; 2]; 4];

pub fn signal_fraction_table(p: &PulseParams, rx: &ReceiverConfig, det: &DetectorConfig) -> FractionTable {
    std::array::from_fn(|s| {
        let sym = Symbol::ALL.iter().copied().find(|x| x.index() == s).expect("dense symbol index");
        std::array::from_fn(|a| {
            let arm = Basis::from_index(a).expect("two arms");
            std::array::from_fn(|d| detector_signal_fraction(sym, p, rx, det, arm, d))
        })
    })
}

/// Result of one detector in one gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Bit(bool),
    /// Both detectors of the arm fired.
    DoubleClick,
}

/// A detected pulse as Bob sees it. Pulses without any click produce no
/// record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    pub pulse_index: u64,
    pub arm: Basis,
    pub outcome: Outcome,
}

/// Raw click pattern of all four detectors for one pulse, `[arm][detector]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RawDetection {
    pub signal: [[bool; 2]; 2],
    pub noise: [[bool; 2]; 2],
}

impl RawDetection {
    pub fn clicked(&self, arm: Basis, detector: usize) -> bool {
        self.signal[arm.index()][detector] || self.noise[arm.index()][detector]
    }

    fn arm_clicked(&self, arm: Basis) -> bool {
        self.clicked(arm, 0) || self.clicked(arm, 1)
    }

    pub fn any(&self) -> bool {
        self.arm_clicked(Basis::Ppm) || self.arm_clicked(Basis::Fsk)
    }

    /// Reduces the click pattern to a single record. When both arms fired
    /// one of them is kept at random.
    pub fn resolve<R: Rng + ?Sized>(&self, pulse_index: u64, rng: &mut R) -> Option<DetectionRecord> {
        let arm = match (self.arm_clicked(Basis::Ppm), self.arm_clicked(Basis::Fsk)) {
            (false, false) => return None,
            (true, false) => Basis::Ppm,
            (false, true) => Basis::Fsk,
            (true, true) => {
                if rng.random_bool(0.5) {
                    Basis::Fsk
                } else {
                    Basis::Ppm
                }
            }
        };
        let outcome = match (self.clicked(arm, 0), self.clicked(arm, 1)) {
            (true, true) => Outcome::DoubleClick,
            (true, false) => Outcome::Bit(false),
            (false, true) => Outcome::Bit(true),
            (false, false) => unreachable!("arm selected without a click"),
        };
        Some(DetectionRecord {
            pulse_index,
            arm,
            outcome,
        })
    }
}

/// Precomputed per-symbol detection statistics for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionModel {
    pub mu_eff: f64,
    pub p_noise: f64,
    pub fractions: FractionTable,
    signal_click: [[[f64; 2]; 2]; 4],
}

impl DetectionModel {
    pub fn new(
        p: &PulseParams,
        src: &SourceConfig,
        ch: &ChannelConfig,
        rx: &ReceiverConfig,
        det: &DetectorConfig,
    ) -> Result<Self, ModelError> {
        p.validate()?;
        src.validate()?;
        rx.validate(p)?;
        det.validate()?;
        let mu_eff = effective_mean_photons(src, ch, rx, det)?;
        let fractions = signal_fraction_table(p, rx, det);
        let signal_click = fractions.map(|arms| arms.map(|ds| ds.map(|f| -(-mu_eff * f).exp_m1())));
        Ok(Self {
            mu_eff,
            p_noise: det.noise_probability(),
            fractions,
            signal_click,
        })
    }

    /// Mean signal photons on a detector.
    pub fn signal_mean(&self, sym: Symbol, arm: Basis, detector: usize) -> f64 {
        self.mu_eff * self.fractions[sym.index()][arm.index()][detector]
    }

    /// Probability that at least one signal photon is detected.
    pub fn signal_click_probability(&self, sym: Symbol, arm: Basis, detector: usize) -> f64 {
        self.signal_click[sym.index()][arm.index()][detector]
    }

    pub fn click_probability(&self, sym: Symbol, arm: Basis, detector: usize) -> f64 {
        either(self.p_noise, self.signal_click_probability(sym, arm, detector))
    }

    /// `[arm][detector]` click probabilities for one symbol.
    pub fn click_table(&self, sym: Symbol) -> [[f64; 2]; 2] {
        std::array::from_fn(|a| {
            let arm = Basis::from_index(a).expect("two arms");
            std::array::from_fn(|d| self.click_probability(sym, arm, d))
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, sym: Symbol, rng: &mut R) -> RawDetection {
        let probs = &self.signal_click[sym.index()];
        let mut raw = RawDetection::default();
        for a in 0..2 {
            for d in 0..2 {
                raw.signal[a][d] = rng.random::<f64>() < probs[a][d];
                raw.noise[a][d] = rng.random::<f64>() < self.p_noise;
            }
        }
        raw
    }
}

/// One-shot convenience around [`DetectionModel::sample`]; build the model
/// once when sampling many pulses.
pub fn sample_detection<R: Rng + ?Sized>(
    sym: Symbol,
    p: &PulseParams,
    src: &SourceConfig,
    ch: &ChannelConfig,
    rx: &ReceiverConfig,
    det: &DetectorConfig,
    rng: &mut R,
) -> Result<RawDetection, ModelError> {
    Ok(DetectionModel::new(p, src, ch, rx, det)?.sample(sym, rng))
}
