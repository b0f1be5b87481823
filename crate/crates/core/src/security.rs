//! Intercept/resend attack model and secret-key fraction.
//!
//! Eve measures every pulse in a uniformly random basis with optics
//! identical to Bob's, keeps the outcome of her first detection and resends
//! the ideal symbol for the bit she inferred in the basis she used. Detection
//! statistics on both sides are taken conditional on a detection, so the
//! figures are per intercepted sifted bit.
//!
//! The resulting secret-key rate is an estimate under this specific attack,
//! not a security proof.

use rand::Rng;

use crate::error::ModelError;
use crate::optics::{signal_fraction_table, DetectorConfig, FractionTable, ReceiverConfig};
use crate::pulse::{Basis, PulseParams, Symbol};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackReport {
    /// QBER under full interception, averaged over both bases.
    pub q_ir: f64,
    pub q_ir_per_basis: [f64; 2],
    /// Eve's information per intercepted sifted bit (bits).
    pub i_ir: f64,
    pub i_ir_per_basis: [f64; 2],
    /// Inferred intercepted fraction; zero until an observed QBER is
    /// attributed with [`AttackReport::attribute`].
    pub zeta: f64,
}

impl AttackReport {
    /// Attributes `q_obs` to interception and records the implied fraction.
    pub fn attribute(mut self, q_obs: f64) -> Result<Self, ModelError> {
        self.zeta = intercepted_fraction(q_obs, self.q_ir)?;
        Ok(self)
    }
}

/// Shannon entropy of a Bernoulli(q) variable, in bits.
pub fn binary_entropy(q: f64) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(ModelError::Domain(format!("probability must lie in [0, 1], got {q}")));
    }
    let term = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    Ok(term(q) + term(1.0 - q))
}

fn normalized(row: [f64; 2]) -> [f64; 2] {
    let total = row[0] + row[1];
    if total > 0.0 {
        [row[0] / total, row[1] / total]
    } else {
        [0.5, 0.5]
    }
}

/// Outcome distributions conditional on a detection, `[symbol][basis][bit]`.
#[derive(Debug, Clone, Copy)]
struct ConditionalRouting([[[f64; 2]; 2]; 4]);

impl ConditionalRouting {
    fn new(table: &FractionTable) -> Self {
        Self(table.map(|arms| arms.map(normalized)))
    }

    fn dist(&self, sym: Symbol, basis: Basis) -> [f64; 2] {
        self.0[sym.index()][basis.index()]
    }
}

/// Closed-form intercept/resend statistics for Bob-equivalent optics.
pub fn intercept_resend_stats(p: &PulseParams, rx: &ReceiverConfig, det: &DetectorConfig) -> AttackReport {
    let routing = ConditionalRouting::new(&signal_fraction_table(p, rx, det));
    let mut q = [0.0; 2];
    let mut info = [0.0; 2];
    for basis in Basis::BOTH {
        // joint[b][e][eb] for Alice bit b, Eve basis e, Eve bit eb
        let mut joint = [[[0.0f64; 2]; 2]; 2];
        let mut err = 0.0;
        for b in [false, true] {
            let sent = Symbol::new(basis, b);
            for eve_basis in Basis::BOTH {
                let eve = routing.dist(sent, eve_basis);
                for eb in [false, true] {
                    let p_eb = 0.25 * eve[usize::from(eb)];
                    joint[usize::from(b)][eve_basis.index()][usize::from(eb)] = p_eb;
                    let bob = routing.dist(Symbol::new(eve_basis, eb), basis);
                    err += p_eb * bob[usize::from(!b)];
                }
            }
        }
        q[basis.index()] = err;
        info[basis.index()] = mutual_information(&joint);
    }
    AttackReport {
        q_ir: 0.5 * (q[0] + q[1]),
        q_ir_per_basis: q,
        i_ir: 0.5 * (info[0] + info[1]),
        i_ir_per_basis: info,
        zeta: 0.0,
    }
}

/// `I(B; Y)` for a joint distribution `joint[b][y0][y1]`, in bits. The
/// entries need not be normalised.
fn mutual_information(joint: &[[[f64; 2]; 2]; 2]) -> f64 {
    let total: f64 = joint.iter().flatten().flatten().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let pb: [f64; 2] = std::array::from_fn(|b| joint[b].iter().flatten().sum::<f64>() / total);
    let mut out = 0.0;
    for y0 in 0..2 {
        for y1 in 0..2 {
            let py = (joint[0][y0][y1] + joint[1][y0][y1]) / total;
            for b in 0..2 {
                let pj = joint[b][y0][y1] / total;
                if pj > 0.0 {
                    out += pj * (pj / (pb[b] * py)).log2();
                }
            }
        }
    }
    out.max(0.0)
}

/// Fraction of pulses Eve must have intercepted to explain `q_obs`.
pub fn intercepted_fraction(q_obs: f64, q_ir: f64) -> Result<f64, ModelError> {
    if !(0.0..=0.5).contains(&q_obs) {
        return Err(ModelError::Domain(format!("observed QBER must lie in [0, 0.5], got {q_obs}")));
    }
    if !(q_ir >= 0.0) {
        return Err(ModelError::Domain(format!("intercept/resend QBER must be >= 0, got {q_ir}")));
    }
    if q_ir == 0.0 {
        if q_obs > 0.0 {
            return Err(ModelError::AttackUndetectable { q_obs });
        }
        return Ok(0.0);
    }
    Ok((q_obs / q_ir).clamp(0.0, 1.0))
}

/// Secret bits per sifted bit: `max(0, 1 - f_ec·h(q) - zeta·I_IR)`, with
/// `zeta` inferred from `q_obs`. Returns zero for `q_obs >= 0.5`.
pub fn secret_fraction(q_obs: f64, attack: &AttackReport, f_ec: f64) -> Result<f64, ModelError> {
    if !(f_ec >= 1.0) || !f_ec.is_finite() {
        return Err(ModelError::Domain(format!("f_ec must be >= 1, got {f_ec}")));
    }
    if !(0.0..=1.0).contains(&q_obs) {
        return Err(ModelError::Domain(format!("QBER must lie in [0, 1], got {q_obs}")));
    }
    if q_obs >= 0.5 {
        return Ok(0.0);
    }
    let zeta = intercepted_fraction(q_obs, attack.q_ir)?;
    Ok((1.0 - f_ec * binary_entropy(q_obs)? - zeta * attack.i_ir).max(0.0))
}

/// Tallies of a simulated intercept/resend run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSimulation {
    pub trials: u64,
    pub errors: u64,
    pub errors_per_basis: [u64; 2],
    pub trials_per_basis: [u64; 2],
    /// Counts indexed `[alice basis][alice bit][eve basis][eve bit]`.
    pub joint: [[[[u64; 2]; 2]; 2]; 2],
}

impl AttackSimulation {
    pub fn q_ir(&self) -> f64 {
        self.errors as f64 / self.trials as f64
    }

    /// Plug-in estimate of Eve's information, averaged over bases.
    pub fn i_ir(&self) -> f64 {
        let per_basis = |a: usize| {
            let counts = self.joint[a].map(|e| e.map(|eb| eb.map(|c| c as f64)));
            mutual_information(&counts)
        };
        0.5 * (per_basis(0) + per_basis(1))
    }
}

fn pick<R: Rng + ?Sized>(dist: [f64; 2], rng: &mut R) -> bool {
    rng.random::<f64>() >= dist[0]
}

/// Monte Carlo counterpart of [`intercept_resend_stats`]: every trial is a
/// fully intercepted pulse that Bob detects in Alice's basis.
pub fn simulate_intercept_resend<R: Rng + ?Sized>(
    p: &PulseParams,
    rx: &ReceiverConfig,
    det: &DetectorConfig,
    trials: u64,
    rng: &mut R,
) -> AttackSimulation {
    let routing = ConditionalRouting::new(&signal_fraction_table(p, rx, det));
    let mut sim = AttackSimulation {
        trials,
        errors: 0,
        errors_per_basis: [0; 2],
        trials_per_basis: [0; 2],
        joint: [[[[0; 2]; 2]; 2]; 2],
    };
    for _ in 0..trials {
        let basis = if rng.random_bool(0.5) { Basis::Fsk } else { Basis::Ppm };
        let bit = rng.random_bool(0.5);
        let eve_basis = if rng.random_bool(0.5) { Basis::Fsk } else { Basis::Ppm };
        let eve_bit = pick(routing.dist(Symbol::new(basis, bit), eve_basis), rng);
        let bob_bit = pick(routing.dist(Symbol::new(eve_basis, eve_bit), basis), rng);
        let a = basis.index();
        sim.trials_per_basis[a] += 1;
        sim.joint[a][usize::from(bit)][eve_basis.index()][usize::from(eve_bit)] += 1;
        if bob_bit != bit {
            sim.errors += 1;
            sim.errors_per_basis[a] += 1;
        }
    }
    sim
}
