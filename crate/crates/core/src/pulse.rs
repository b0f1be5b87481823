//! Gaussian pulse mathematics for the two conjugate bases.
//!
//! A PPM symbol is a narrow time-domain pulse at `±delta_t/2` whose spectrum
//! is a broad Gaussian centred on the carrier; an FSK symbol is a narrow
//! spectral line at `±delta_w/2` whose time profile is broad and centred on
//! the slot. Widths in the conjugate domain are the reciprocal of the narrow
//! width. Time is in seconds relative to the slot centre, frequency in hertz
//! relative to the carrier.

use std::f64::consts::{LN_2, SQRT_2};
use std::fmt;

use crate::error::ModelError;
use crate::optics::{ReceiverConfig, WdmShape};

/// Table 1 spectral width as printed (rounded), used only to check the
/// reciprocal convention.
pub const RECORDED_SIGMA_W_HZ: f64 = 3.6e9;
/// Table 1 spectral width of a PPM pulse as printed.
pub const RECORDED_PPM_SPECTRAL_WIDTH_HZ: f64 = 10.3e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    Ppm,
    Fsk,
}

impl Basis {
    pub const BOTH: [Basis; 2] = [Basis::Ppm, Basis::Fsk];

    pub fn index(self) -> usize {
        match self {
            Basis::Ppm => 0,
            Basis::Fsk => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Basis> {
        match i {
            0 => Some(Basis::Ppm),
            1 => Some(Basis::Fsk),
            _ => None,
        }
    }

    pub fn other(self) -> Basis {
        match self {
            Basis::Ppm => Basis::Fsk,
            Basis::Fsk => Basis::Ppm,
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Ppm => "PPM",
            Basis::Fsk => "FSK",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Symbol {
    pub basis: Basis,
    pub bit: bool,
}

impl Symbol {
    /// All four symbols, in the alternating test-pattern order.
    pub const ALL: [Symbol; 4] = [
        Symbol::new(Basis::Ppm, false),
        Symbol::new(Basis::Fsk, false),
        Symbol::new(Basis::Ppm, true),
        Symbol::new(Basis::Fsk, true),
    ];

    pub const fn new(basis: Basis, bit: bool) -> Self {
        Self { basis, bit }
    }

    /// Dense index `2·basis + bit`, used for per-symbol lookup tables.
    pub fn index(self) -> usize {
        self.basis.index() * 2 + usize::from(self.bit)
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.basis, u8::from(self.bit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseParams {
    /// Time-domain width of a PPM pulse (s).
    pub sigma_t: f64,
    /// Frequency-domain width of an FSK pulse (Hz).
    pub sigma_w: f64,
    /// PPM slot separation (s).
    pub delta_t: f64,
    /// FSK tone separation (Hz).
    pub delta_w: f64,
}

impl Default for PulseParams {
    fn default() -> Self {
        Self::reference()
    }
}

impl PulseParams {
    /// The reference pulse set: 97 ps / 281 ps time widths, 977 ps slot
    /// separation, 35.7 GHz tone separation.
    pub fn reference() -> Self {
        Self {
            sigma_t: 97e-12,
            sigma_w: 1.0 / 281e-12,
            delta_t: 977e-12,
            delta_w: 35.7e9,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("sigma_t", self.sigma_t),
            ("sigma_w", self.sigma_w),
            ("delta_t", self.delta_t),
            ("delta_w", self.delta_w),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Symbols of each basis are separated by more than two widths.
    pub fn is_separable(&self) -> bool {
        self.delta_t > 2.0 * self.sigma_t && self.delta_w > 2.0 * self.sigma_w
    }

    /// Human-readable warnings for parameter sets that are valid but poorly
    /// separated.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.delta_t <= 2.0 * self.sigma_t {
            out.push(format!(
                "PPM symbols overlap: delta_t {:.4e} s <= 2*sigma_t {:.4e} s",
                self.delta_t,
                2.0 * self.sigma_t
            ));
        }
        if self.delta_w <= 2.0 * self.sigma_w {
            out.push(format!(
                "FSK symbols overlap: delta_w {:.4e} Hz <= 2*sigma_w {:.4e} Hz",
                self.delta_w,
                2.0 * self.sigma_w
            ));
        }
        out
    }

    /// Time width of an FSK pulse.
    pub fn fsk_time_sigma(&self) -> f64 {
        1.0 / self.sigma_w
    }

    /// Spectral width of a PPM pulse.
    pub fn ppm_freq_sigma(&self) -> f64 {
        1.0 / self.sigma_t
    }
}

/// Centre and width of a pulse in both domains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseDescriptor {
    pub time_center: f64,
    pub time_sigma: f64,
    pub freq_center: f64,
    pub freq_sigma: f64,
}

/// Width of a Fourier-limited pulse in the conjugate domain: `1/sigma`.
pub fn conjugate_width(sigma: f64) -> Result<f64, ModelError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ModelError::Domain(format!("width must be positive, got {sigma}")));
    }
    Ok(1.0 / sigma)
}

fn bit_offset(bit: bool) -> f64 {
    if bit {
        0.5
    } else {
        -0.5
    }
}

pub fn symbol_pulse(sym: Symbol, p: &PulseParams) -> PulseDescriptor {
    match sym.basis {
        Basis::Ppm => PulseDescriptor {
            time_center: bit_offset(sym.bit) * p.delta_t,
            time_sigma: p.sigma_t,
            freq_center: 0.0,
            freq_sigma: p.ppm_freq_sigma(),
        },
        Basis::Fsk => PulseDescriptor {
            time_center: 0.0,
            time_sigma: p.fsk_time_sigma(),
            freq_center: bit_offset(sym.bit) * p.delta_w,
            freq_sigma: p.sigma_w,
        },
    }
}

/// Closed interval on the real line; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub const ALL: Window = Window {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn centered(center: f64, halfwidth: f64) -> Self {
        Self::new(center - halfwidth, center + halfwidth)
    }

    pub fn intersect(self, other: Window) -> Window {
        Window::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    pub fn is_empty(self) -> bool {
        !(self.hi > self.lo)
    }
}

/// Upper tail of the standard normal, `P(Z > z)`.
fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// Probability mass of a unit-normalised Gaussian intensity with the given
/// centre and width that falls inside `window`.
///
/// Evaluated on whichever tail keeps both terms small, so results far out
/// in a tail keep their relative precision.
pub fn gaussian_capture(center: f64, sigma: f64, window: Window) -> f64 {
    debug_assert!(sigma > 0.0, "sigma must be positive");
    if window.is_empty() {
        return 0.0;
    }
    let z_lo = (window.lo - center) / sigma;
    let z_hi = (window.hi - center) / sigma;
    let p = if z_lo >= 0.0 {
        upper_tail(z_lo) - upper_tail(z_hi)
    } else if z_hi <= 0.0 {
        upper_tail(-z_hi) - upper_tail(-z_lo)
    } else {
        1.0 - upper_tail(z_hi) - upper_tail(-z_lo)
    };
    p.clamp(0.0, 1.0)
}

/// Fraction of a Gaussian spectrum transmitted by a Gaussian filter of
/// transmission `exp(-(f - filter_center)^2 / (2 filter_sigma^2))`,
/// restricted to `window`.
pub fn gaussian_filtered_capture(
    center: f64,
    sigma: f64,
    filter_center: f64,
    filter_sigma: f64,
    window: Window,
) -> f64 {
    let var = sigma * sigma;
    let fvar = filter_sigma * filter_sigma;
    let total = var + fvar;
    let scale = (fvar / total).sqrt() * (-(center - filter_center).powi(2) / (2.0 * total)).exp();
    if scale == 0.0 {
        return 0.0;
    }
    let mean = (center * fvar + filter_center * var) / total;
    let width = (var * fvar / total).sqrt();
    scale * gaussian_capture(mean, width, window)
}

/// Time window routed by the time filter to PPM detector `detector`.
pub(crate) fn ppm_window(p: &PulseParams, rx: &ReceiverConfig, detector: usize) -> Window {
    let center = bit_offset(detector == 1) * p.delta_t;
    Window::centered(center, rx.time_window_halfwidth)
}

/// Fraction of a spectrum (centre, width) delivered to WDM port `port`.
pub(crate) fn wdm_port_capture(
    freq_center: f64,
    freq_sigma: f64,
    p: &PulseParams,
    rx: &ReceiverConfig,
    port: usize,
) -> f64 {
    let port_center = bit_offset(port == 1) * p.delta_w;
    match rx.wdm_shape {
        WdmShape::Rect => gaussian_capture(
            freq_center,
            freq_sigma,
            Window::centered(port_center, rx.wdm_passband_halfwidth),
        ),
        WdmShape::Gaussian => {
            // Half-power point at the passband edge; each port only sees its
            // own half of the spectrum.
            let filter_sigma = rx.wdm_passband_halfwidth / (2.0 * LN_2).sqrt();
            let half = if port == 1 {
                Window::new(0.0, f64::INFINITY)
            } else {
                Window::new(f64::NEG_INFINITY, 0.0)
            };
            gaussian_filtered_capture(freq_center, freq_sigma, port_center, filter_sigma, half)
        }
    }
}

/// Routing of one measurement arm: `matched[b][d]` for symbols of the arm's
/// own basis with bit `b`, `conjugate[d]` for symbols of the other basis
/// (whose broad profile is the same for both bits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmRouting {
    pub matched: [[f64; 2]; 2],
    pub conjugate: [f64; 2],
}

impl ArmRouting {
    pub fn row(&self, sym: Symbol, arm: Basis) -> [f64; 2] {
        if sym.basis == arm {
            self.matched[usize::from(sym.bit)]
        } else {
            self.conjugate
        }
    }
}

/// Routing matrices of both arms, indexed by [`Basis::index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingMatrices {
    pub arms: [ArmRouting; 2],
}

impl RoutingMatrices {
    pub fn arm(&self, arm: Basis) -> &ArmRouting {
        &self.arms[arm.index()]
    }

    pub fn row(&self, sym: Symbol, arm: Basis) -> [f64; 2] {
        self.arm(arm).row(sym, arm)
    }
}

/// Probability that each symbol is routed to each detector of each arm by
/// the time filter (PPM arm) and the WDM demultiplexer (FSK arm), before
/// detector gating.
pub fn crosstalk_probs(p: &PulseParams, rx: &ReceiverConfig) -> RoutingMatrices {
    let route = |sym: Symbol, arm: Basis| -> [f64; 2] {
        let pulse = symbol_pulse(sym, p);
        std::array::from_fn(|d| match arm {
            Basis::Ppm => gaussian_capture(pulse.time_center, pulse.time_sigma, ppm_window(p, rx, d)),
            Basis::Fsk => wdm_port_capture(pulse.freq_center, pulse.freq_sigma, p, rx, d),
        })
    };
    let arm = |basis: Basis| ArmRouting {
        matched: [route(Symbol::new(basis, false), basis), route(Symbol::new(basis, true), basis)],
        conjugate: route(Symbol::new(basis.other(), false), basis),
    };
    RoutingMatrices {
        arms: [arm(Basis::Ppm), arm(Basis::Fsk)],
    }
}
