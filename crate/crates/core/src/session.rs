//! Monte Carlo execution of the full protocol between an Alice party and a
//! Bob party.
//!
//! The optical medium is simulated: Alice's pulse train is a deterministic
//! function of the configuration seed, so a Bob process can regenerate the
//! pulses arriving at its receiver without any side channel. Bob's protocol
//! logic only reads the pulse train through the detection model, and through
//! the idealized error-correction oracle that stands in for reconciliation.
//!
//! Random streams of one seed: 0 preparation, 1 detection, 2 QBER sampling,
//! 3 privacy amplification and confirmation, 4 double-click tiebreaks.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::bits::BitString;
use crate::config::SystemConfig;
use crate::error::ModelError;
use crate::link::{open_inprocess, AbortCode, Direction, Frame, Link, LinkError, Message, PROTOCOL_VERSION};
use crate::optics::{DetectionRecord, Outcome, Pattern, SourceConfig};
use crate::postprocessing::{
    ec_leakage, key_confirm_initiator, key_confirm_responder, pa_output_length, toeplitz_hash, PAParameters,
};
use crate::pulse::{Basis, Symbol};
use crate::rng::{stream, RNG_ALGORITHM};

pub const STREAM_PREPARATION: u64 = 0;
pub const STREAM_DETECTION: u64 = 1;
pub const STREAM_SAMPLING: u64 = 2;
pub const STREAM_AMPLIFICATION: u64 = 3;
pub const STREAM_TIEBREAK: u64 = 4;

/// Fewest disclosed bits that still give a QBER estimate.
pub const MIN_SAMPLE_BITS: usize = 100;

/// Symbol order of the deterministic pattern.
pub const PATTERN_CYCLE: [Symbol; 4] = [
    Symbol::new(Basis::Ppm, false),
    Symbol::new(Basis::Fsk, false),
    Symbol::new(Basis::Ppm, true),
    Symbol::new(Basis::Fsk, true),
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration digests differ")]
    DigestMismatch,
    #[error("only {available} bits available for QBER sampling, {needed} needed")]
    InsufficientSample { available: usize, needed: usize },
    #[error("estimated QBER {estimate:.4} exceeds the abort threshold {threshold}")]
    QberTooHigh { estimate: f64, threshold: f64 },
    #[error("privacy amplification leaves no secret key")]
    NoSecretKey,
    #[error("key confirmation failed")]
    ConfirmationFailed,
    #[error("peer aborted ({code:?}): {reason}")]
    PeerAbort { code: AbortCode, reason: String },
}

impl SessionError {
    /// Abort reason as both parties see it.
    pub fn abort_code(&self) -> Option<AbortCode> {
        match self {
            SessionError::Protocol(_) | SessionError::Link(LinkError::Protocol(_)) => Some(AbortCode::Protocol),
            SessionError::DigestMismatch => Some(AbortCode::DigestMismatch),
            SessionError::InsufficientSample { .. } => Some(AbortCode::InsufficientSample),
            SessionError::QberTooHigh { .. } => Some(AbortCode::QberTooHigh),
            SessionError::NoSecretKey => Some(AbortCode::NoSecretKey),
            SessionError::ConfirmationFailed => Some(AbortCode::ConfirmationFailed),
            SessionError::PeerAbort { code, .. } => Some(*code),
            SessionError::Link(LinkError::LinkDown(_)) | SessionError::Model(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreparationRecord {
    pub pulse_index: u64,
    pub symbol: Symbol,
}

pub fn alice_prepare<R: Rng + ?Sized>(
    n: u64,
    src: &SourceConfig,
    rng: &mut R,
) -> Result<Vec<PreparationRecord>, ModelError> {
    if n == 0 {
        return Err(ModelError::Domain("at least one pulse is required".into()));
    }
    Ok((0..n)
        .map(|i| {
            let symbol = match src.pattern {
                Pattern::DeterministicAlternating => PATTERN_CYCLE[(i % 4) as usize],
                Pattern::UniformRandom => Symbol::ALL[rng.random_range(0..4)],
            };
            PreparationRecord { pulse_index: i, symbol }
        })
        .collect())
}

/// Alice's pulse train for `pulses` pulses of `cfg`.
pub fn emitted_pulses(cfg: &SystemConfig, pulses: u64) -> Result<Vec<PreparationRecord>, ModelError> {
    alice_prepare(pulses, &cfg.source, &mut stream(cfg.seed, STREAM_PREPARATION))
}

/// Bob's view of the quantum phase.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumPhase {
    pub pulses: u64,
    /// One record per pulse with at least one click, in pulse order.
    pub detections: Vec<DetectionRecord>,
    /// Gates in which each detector fired, `[arm][detector]`.
    pub click_counts: [[u64; 2]; 2],
}

pub fn run_quantum_phase<R: Rng + ?Sized>(
    pulses: &[PreparationRecord],
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<QuantumPhase, ModelError> {
    cfg.validate()?;
    let model = cfg.detection_model()?;
    let mut out = QuantumPhase {
        pulses: pulses.len() as u64,
        detections: Vec::new(),
        click_counts: [[0; 2]; 2],
    };
    for rec in pulses {
        let raw = model.sample(rec.symbol, rng);
        for arm in Basis::BOTH {
            for d in 0..2 {
                if raw.clicked(arm, d) {
                    out.click_counts[arm.index()][d] += 1;
                }
            }
        }
        if let Some(det) = raw.resolve(rec.pulse_index, rng) {
            out.detections.push(det);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftedKey {
    pub bits: BitString,
    pub source_indices: Vec<u64>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Drops the bits at the given ascending positions.
    pub fn remove_positions(&self, positions: &[usize]) -> SiftedKey {
        let mut out = SiftedKey::default();
        let mut skip = positions.iter().peekable();
        for (i, &index) in self.source_indices.iter().enumerate() {
            if skip.peek() == Some(&&i) {
                skip.next();
                continue;
            }
            out.bits.push(self.bits.get(i));
            out.source_indices.push(index);
        }
        out
    }
}

fn lookup(pulses: &[PreparationRecord], index: u64) -> Option<Symbol> {
    pulses
        .binary_search_by_key(&index, |r| r.pulse_index)
        .ok()
        .map(|i| pulses[i].symbol)
}

/// Alice's half of sifting: keeps announced pulses whose arm matches the
/// prepared basis.
pub fn alice_sift(pulses: &[PreparationRecord], announced: &[(u64, Basis)]) -> Result<SiftedKey, SessionError> {
    let mut key = SiftedKey::default();
    for &(index, arm) in announced {
        let symbol =
            lookup(pulses, index).ok_or_else(|| SessionError::Protocol(format!("announced unknown pulse {index}")))?;
        if symbol.basis == arm {
            key.bits.push(symbol.bit);
            key.source_indices.push(index);
        }
    }
    Ok(key)
}

/// Bob's half of sifting: keeps the accepted detections, resolving double
/// clicks with the tiebreak stream in index order.
pub fn bob_sift<R: Rng + ?Sized>(
    detections: &[DetectionRecord],
    accepted: &[u64],
    rng: &mut R,
) -> Result<SiftedKey, SessionError> {
    let mut key = SiftedKey::default();
    let mut it = detections.iter();
    for &index in accepted {
        let det = it
            .find(|d| d.pulse_index == index)
            .ok_or_else(|| SessionError::Protocol(format!("accepted pulse {index} was not announced")))?;
        let bit = match det.outcome {
            Outcome::Bit(b) => b,
            Outcome::DoubleClick => rng.random_bool(0.5),
        };
        key.bits.push(bit);
        key.source_indices.push(index);
    }
    Ok(key)
}

/// Both halves of sifting in one call: `(alice, bob)`.
pub fn sift<R: Rng + ?Sized>(
    pulses: &[PreparationRecord],
    detections: &[DetectionRecord],
    tiebreak: &mut R,
) -> Result<(SiftedKey, SiftedKey), SessionError> {
    let announced: Vec<(u64, Basis)> = detections.iter().map(|d| (d.pulse_index, d.arm)).collect();
    let alice = alice_sift(pulses, &announced)?;
    let bob = bob_sift(detections, &alice.source_indices, tiebreak)?;
    Ok((alice, bob))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberEstimate {
    pub sampled: u64,
    pub mismatches: u64,
    pub estimate: f64,
}

/// Ascending key positions disclosed for QBER estimation.
pub fn choose_sample<R: Rng + ?Sized>(
    key_len: usize,
    sample_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>, SessionError> {
    if !(sample_fraction > 0.0 && sample_fraction < 1.0) {
        return Err(ModelError::Domain(format!("sample fraction must lie in (0, 1), got {sample_fraction}")).into());
    }
    let k = (key_len as f64 * sample_fraction).round() as usize;
    if k < MIN_SAMPLE_BITS {
        return Err(SessionError::InsufficientSample {
            available: k,
            needed: MIN_SAMPLE_BITS,
        });
    }
    let mut positions = sample(rng, key_len, k).into_vec();
    positions.sort_unstable();
    Ok(positions)
}

fn compare(a: &BitString, b: &BitString) -> QberEstimate {
    let mismatches = a.hamming_distance(b) as u64;
    let sampled = a.len() as u64;
    QberEstimate {
        sampled,
        mismatches,
        estimate: if sampled == 0 { 0.0 } else { mismatches as f64 / sampled as f64 },
    }
}

fn bits_at(key: &SiftedKey, positions: &[usize]) -> BitString {
    positions.iter().map(|&p| key.bits.get(p)).collect()
}

/// Local QBER estimation over a sampled subset; sampled bits are removed
/// from both returned keys.
pub fn estimate_qber<R: Rng + ?Sized>(
    alice: &SiftedKey,
    bob: &SiftedKey,
    sample_fraction: f64,
    rng: &mut R,
) -> Result<(QberEstimate, SiftedKey, SiftedKey), SessionError> {
    if alice.source_indices != bob.source_indices {
        return Err(SessionError::Protocol("sifted keys cover different pulses".into()));
    }
    let positions = choose_sample(alice.len(), sample_fraction, rng)?;
    let est = compare(&bits_at(alice, &positions), &bits_at(bob, &positions));
    Ok((est, alice.remove_positions(&positions), bob.remove_positions(&positions)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
}

/// What one party reports after a successful session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub role: Role,
    pub seed: u64,
    pub rng_algorithm: &'static str,
    pub pulses: u64,
    pub detections: u64,
    /// Bob only: gates in which each detector fired.
    pub click_counts: Option<[[u64; 2]; 2]>,
    pub sifted_bits: u64,
    /// Bob only: sifted bits that differ from Alice's, before sampling.
    pub sifted_errors: Option<u64>,
    pub qber: QberEstimate,
    pub reconciled_bits: u64,
    pub ec_leakage: u64,
    pub final_key: BitString,
    pub confirmed: bool,
}

impl SessionReport {
    /// Error rate of the whole sifted key against Alice's bits (Bob only).
    pub fn true_qber(&self) -> Option<f64> {
        let errors = self.sifted_errors?;
        Some(if self.sifted_bits == 0 { 0.0 } else { errors as f64 / self.sifted_bits as f64 })
    }
}

fn abort<S: Read + Write>(link: &mut Link<S>, err: SessionError) -> SessionError {
    if let (Some(code), false) = (err.abort_code(), matches!(err, SessionError::PeerAbort { .. })) {
        // best effort; the local error is what matters
        let _ = link.send(&Message::Abort {
            code,
            reason: err.to_string(),
        });
    }
    err
}

fn unexpected(msg: Message, expected: &str) -> SessionError {
    match msg {
        Message::Abort { code, reason } => SessionError::PeerAbort { code, reason },
        other => SessionError::Protocol(format!("expected {expected}, got {:?}", other.msg_type())),
    }
}

fn check_hello(msg: Message, cfg: &SystemConfig) -> Result<(), SessionError> {
    match msg {
        Message::Hello { version, digest } => {
            if version != PROTOCOL_VERSION {
                return Err(SessionError::Protocol(format!("unsupported protocol version {version}")));
            }
            if digest != cfg.digest() {
                return Err(SessionError::DigestMismatch);
            }
            Ok(())
        }
        other => Err(unexpected(other, "HELLO")),
    }
}

fn hello(cfg: &SystemConfig) -> Message {
    Message::Hello {
        version: PROTOCOL_VERSION,
        digest: cfg.digest(),
    }
}

/// Final key length both parties derive from the disclosed QBER report.
fn final_length(cfg: &SystemConfig, n: usize, q: f64) -> Result<u64, SessionError> {
    let attack = cfg.attack();
    Ok(pa_output_length(n as u64, q, &attack, cfg.f_ec, cfg.session.margin_bits)?)
}

/// Runs Alice's side of a session of `cfg.session.pulses` pulses.
pub fn run_alice<S: Read + Write>(cfg: &SystemConfig, link: &mut Link<S>) -> Result<SessionReport, SessionError> {
    alice_inner(cfg, link).map_err(|e| abort(link, e))
}

fn alice_inner<S: Read + Write>(cfg: &SystemConfig, link: &mut Link<S>) -> Result<SessionReport, SessionError> {
    cfg.validate()?;
    let pulses = emitted_pulses(cfg, cfg.session.pulses)?;
    link.send(&hello(cfg))?;
    check_hello(link.recv()?, cfg)?;

    let announced = match link.recv()? {
        Message::DetectionAnnounce(a) => a,
        other => return Err(unexpected(other, "DETECTION_ANNOUNCE")),
    };
    let key = alice_sift(&pulses, &announced)?;
    link.send(&Message::SiftAccept(key.source_indices.clone()))?;

    let positions = choose_sample(key.len(), cfg.session.sample_fraction, &mut stream(cfg.seed, STREAM_SAMPLING))?;
    link.send(&Message::SampleIndices(positions.iter().map(|&p| key.source_indices[p]).collect()))?;
    let theirs = match link.recv()? {
        Message::SampleBits(b) if b.len() == positions.len() => b,
        Message::SampleBits(_) => return Err(SessionError::Protocol("sample bit count differs".into())),
        other => return Err(unexpected(other, "SAMPLE_BITS")),
    };
    let qber = compare(&bits_at(&key, &positions), &theirs);
    link.send(&Message::QberReport {
        sampled: qber.sampled,
        mismatches: qber.mismatches,
        estimate: qber.estimate,
    })?;
    if qber.estimate > cfg.session.abort_qber {
        return Err(SessionError::QberTooHigh {
            estimate: qber.estimate,
            threshold: cfg.session.abort_qber,
        });
    }

    let remaining = key.remove_positions(&positions);
    let n = remaining.len();
    let leakage = ec_leakage(qber.estimate, n as u64, cfg.f_ec)?;
    let m = final_length(cfg, n, qber.estimate)?;
    if m == 0 {
        return Err(SessionError::NoSecretKey);
    }
    let mut rng = stream(cfg.seed, STREAM_AMPLIFICATION);
    let params = PAParameters::random(n, m as usize, &mut rng).map_err(|e| SessionError::Protocol(e.to_string()))?;
    link.send(&Message::PaParams {
        input_len: n as u64,
        output_len: m,
        seed: params.seed().clone(),
    })?;
    let final_key = toeplitz_hash(&remaining.bits, &params).map_err(|e| SessionError::Protocol(e.to_string()))?;
    if !key_confirm_initiator(&final_key, link, &mut rng)? {
        return Err(SessionError::ConfirmationFailed);
    }
    Ok(SessionReport {
        role: Role::Alice,
        seed: cfg.seed,
        rng_algorithm: RNG_ALGORITHM,
        pulses: cfg.session.pulses,
        detections: announced.len() as u64,
        click_counts: None,
        sifted_bits: key.len() as u64,
        sifted_errors: None,
        qber,
        reconciled_bits: n as u64,
        ec_leakage: leakage,
        final_key,
        confirmed: true,
    })
}

/// Runs Bob's side of a session of `cfg.session.pulses` pulses.
pub fn run_bob<S: Read + Write>(cfg: &SystemConfig, link: &mut Link<S>) -> Result<SessionReport, SessionError> {
    bob_inner(cfg, link).map_err(|e| abort(link, e))
}

fn bob_inner<S: Read + Write>(cfg: &SystemConfig, link: &mut Link<S>) -> Result<SessionReport, SessionError> {
    cfg.validate()?;
    check_hello(link.recv()?, cfg)?;
    link.send(&hello(cfg))?;

    let medium = emitted_pulses(cfg, cfg.session.pulses)?;
    let phase = run_quantum_phase(&medium, cfg, &mut stream(cfg.seed, STREAM_DETECTION))?;
    link.send(&Message::DetectionAnnounce(
        phase.detections.iter().map(|d| (d.pulse_index, d.arm)).collect(),
    ))?;
    let accepted = match link.recv()? {
        Message::SiftAccept(a) => a,
        other => return Err(unexpected(other, "SIFT_ACCEPT")),
    };
    let key = bob_sift(&phase.detections, &accepted, &mut stream(cfg.seed, STREAM_TIEBREAK))?;
    let truth = |index: u64| lookup(&medium, index).expect("sifted pulse was emitted").bit;
    let sifted_errors = key
        .source_indices
        .iter()
        .enumerate()
        .filter(|&(i, &index)| key.bits.get(i) != truth(index))
        .count() as u64;

    let requested = match link.recv()? {
        Message::SampleIndices(s) => s,
        other => return Err(unexpected(other, "SAMPLE_INDICES")),
    };
    let mut positions = Vec::with_capacity(requested.len());
    let mut cursor = 0;
    for index in &requested {
        let off = key.source_indices[cursor..]
            .iter()
            .position(|i| i == index)
            .ok_or_else(|| SessionError::Protocol(format!("sample index {index} is not in the sifted key")))?;
        cursor += off;
        positions.push(cursor);
        cursor += 1;
    }
    link.send(&Message::SampleBits(bits_at(&key, &positions)))?;
    let qber = match link.recv()? {
        Message::QberReport {
            sampled,
            mismatches,
            estimate,
        } => QberEstimate {
            sampled,
            mismatches,
            estimate,
        },
        other => return Err(unexpected(other, "QBER_REPORT")),
    };
    if qber.sampled != positions.len() as u64 {
        return Err(SessionError::Protocol("QBER report covers a different sample".into()));
    }

    // Idealized reconciliation: the oracle reveals Alice's bits; the cost is
    // charged as leakage in the privacy-amplification budget.
    let mut remaining = key.remove_positions(&positions);
    for (i, &index) in remaining.source_indices.iter().enumerate() {
        remaining.bits.set(i, truth(index));
    }
    let n = remaining.len();
    let leakage = ec_leakage(qber.estimate, n as u64, cfg.f_ec)?;

    let params = match link.recv()? {
        Message::PaParams {
            input_len,
            output_len,
            seed,
        } => {
            if input_len != n as u64 {
                return Err(SessionError::Protocol(format!(
                    "amplification input {input_len} bits, local key {n} bits"
                )));
            }
            if output_len != final_length(cfg, n, qber.estimate)? {
                return Err(SessionError::Protocol(format!("unexpected final key length {output_len}")));
            }
            PAParameters::new(n, output_len as usize, seed).map_err(|e| SessionError::Protocol(e.to_string()))?
        }
        other => return Err(unexpected(other, "PA_PARAMS")),
    };
    let final_key = toeplitz_hash(&remaining.bits, &params).map_err(|e| SessionError::Protocol(e.to_string()))?;
    if !key_confirm_responder(&final_key, link)? {
        return Err(SessionError::ConfirmationFailed);
    }
    Ok(SessionReport {
        role: Role::Bob,
        seed: cfg.seed,
        rng_algorithm: RNG_ALGORITHM,
        pulses: cfg.session.pulses,
        detections: phase.detections.len() as u64,
        click_counts: Some(phase.click_counts),
        sifted_bits: key.len() as u64,
        sifted_errors: Some(sifted_errors),
        qber,
        reconciled_bits: n as u64,
        ec_leakage: leakage,
        final_key,
        confirmed: true,
    })
}

/// Both parties of one in-process session.
#[derive(Debug)]
pub struct InProcessRun {
    pub alice: Result<SessionReport, SessionError>,
    pub bob: Result<SessionReport, SessionError>,
    /// Frames as Alice sent and received them.
    pub transcript: Vec<(Direction, Frame)>,
}

/// Runs Alice and Bob on separate threads over an in-process link.
pub fn run_inprocess(cfg: &SystemConfig) -> InProcessRun {
    let (mut la, mut lb) = open_inprocess();
    std::thread::scope(|s| {
        let bob = s.spawn(|| {
            let r = run_bob(cfg, &mut lb);
            drop(lb);
            r
        });
        let alice = run_alice(cfg, &mut la);
        let bob = bob.join().expect("bob thread panicked");
        InProcessRun {
            alice,
            bob,
            transcript: la.transcript().to_vec(),
        }
    })
}

/// Result of comparing detections directly against the known pulse train,
/// without any classical exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPatternReport {
    pub pulses: u64,
    pub detections: u64,
    pub click_counts: [[u64; 2]; 2],
    pub sifted_bits: u64,
    pub errors: u64,
}

impl TestPatternReport {
    pub fn qber(&self) -> f64 {
        if self.sifted_bits == 0 {
            0.0
        } else {
            self.errors as f64 / self.sifted_bits as f64
        }
    }
}

/// Offline evaluation against the transmitted pattern.
pub fn evaluate_test_pattern(cfg: &SystemConfig, pulses: u64) -> Result<TestPatternReport, SessionError> {
    let train = emitted_pulses(cfg, pulses)?;
    let phase = run_quantum_phase(&train, cfg, &mut stream(cfg.seed, STREAM_DETECTION))?;
    let (alice, bob) = sift(&train, &phase.detections, &mut stream(cfg.seed, STREAM_TIEBREAK))?;
    Ok(TestPatternReport {
        pulses,
        detections: phase.detections.len() as u64,
        click_counts: phase.click_counts,
        sifted_bits: alice.len() as u64,
        errors: alice.bits.hamming_distance(&bob.bits) as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::pulse_statistics;
    use crate::rng::SimRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    #[test]
    fn deterministic_pattern_cycles() {
        let src = SourceConfig {
            pattern: Pattern::DeterministicAlternating,
            ..SourceConfig::default()
        };
        let four = alice_prepare(4, &src, &mut rng(0)).unwrap();
        assert_eq!(four.iter().map(|r| r.symbol).collect::<Vec<_>>(), PATTERN_CYCLE);
        let eight = alice_prepare(8, &src, &mut rng(0)).unwrap();
        for (i, r) in eight.iter().enumerate() {
            assert_eq!(r.pulse_index, i as u64);
            assert_eq!(r.symbol, PATTERN_CYCLE[i % 4]);
        }
        assert!(alice_prepare(0, &src, &mut rng(0)).is_err());
    }

    #[test]
    fn random_pattern_is_uniform() {
        let n = 1_000_000u64;
        let recs = alice_prepare(n, &SourceConfig::default(), &mut rng(5)).unwrap();
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for sym in Symbol::ALL {
            let c = recs.iter().filter(|r| r.symbol == sym).count() as f64;
            assert!((c - 0.25 * n as f64).abs() < 3.0 * sigma, "{sym}: {c}");
        }
    }

    #[test]
    fn dark_link_detects_nothing() {
        let mut cfg = SystemConfig::default();
        cfg.channel.loss_db = 1e4;
        cfg.detector.dark_rate = 0.0;
        let train = emitted_pulses(&cfg, 10_000).unwrap();
        let phase = run_quantum_phase(&train, &cfg, &mut rng(1)).unwrap();
        assert!(phase.detections.is_empty());
    }

    #[test]
    fn quantum_phase_replays_and_matches_expectation() {
        let cfg = SystemConfig::default();
        let n = 1_000_000u64;
        let train = emitted_pulses(&cfg, n).unwrap();
        let a = run_quantum_phase(&train, &cfg, &mut rng(2)).unwrap();
        let b = run_quantum_phase(&train, &cfg, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        let model = cfg.detection_model().unwrap();
        let p_any: f64 = Symbol::ALL
            .iter()
            .map(|&s| {
                let t = model.click_table(s);
                0.25 * (1.0 - t.iter().flatten().map(|c| 1.0 - c).product::<f64>())
            })
            .sum();
        let expected = n as f64 * p_any;
        let sigma = (n as f64 * p_any * (1.0 - p_any)).sqrt();
        assert!((a.detections.len() as f64 - expected).abs() < 3.0 * sigma);
    }

    #[test]
    fn sift_extremes() {
        let pulses: Vec<PreparationRecord> = (0..4)
            .map(|i| PreparationRecord {
                pulse_index: i,
                symbol: PATTERN_CYCLE[i as usize],
            })
            .collect();
        let matching: Vec<DetectionRecord> = pulses
            .iter()
            .map(|p| DetectionRecord {
                pulse_index: p.pulse_index,
                arm: p.symbol.basis,
                outcome: Outcome::Bit(p.symbol.bit),
            })
            .collect();
        let (a, b) = sift(&pulses, &matching, &mut rng(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);

        let crossed: Vec<DetectionRecord> = matching
            .iter()
            .map(|d| DetectionRecord {
                arm: d.arm.other(),
                ..*d
            })
            .collect();
        let (a, b) = sift(&pulses, &crossed, &mut rng(0)).unwrap();
        assert!(a.is_empty() && b.is_empty());

        let unknown = [DetectionRecord {
            pulse_index: 9,
            arm: Basis::Ppm,
            outcome: Outcome::Bit(true),
        }];
        assert!(matches!(sift(&pulses, &unknown, &mut rng(0)), Err(SessionError::Protocol(_))));
    }

    fn detection_probability(cfg: &SystemConfig) -> f64 {
        let model = cfg.detection_model().unwrap();
        Symbol::ALL
            .iter()
            .map(|&s| 0.25 * (1.0 - model.click_table(s).iter().flatten().map(|c| 1.0 - c).product::<f64>()))
            .sum()
    }

    #[test]
    fn sifted_count_matches_expectation() {
        let cfg = SystemConfig::default();
        let n = 400_000;
        let train = emitted_pulses(&cfg, n).unwrap();
        let phase = run_quantum_phase(&train, &cfg, &mut rng(3)).unwrap();
        let (a, _) = sift(&train, &phase.detections, &mut rng(4)).unwrap();
        let p = pulse_statistics(&cfg.detection_model().unwrap()).sifted;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((a.len() as f64 - n as f64 * p).abs() < 3.0 * sigma);
    }

    #[test]
    fn balanced_capture_sifts_half() {
        // every photon is captured whichever arm it takes, so the kept arm is
        // a fair coin with respect to the prepared basis
        let mut cfg = SystemConfig::default();
        cfg.receiver.time_window_halfwidth = cfg.pulse.delta_t / 2.0;
        cfg.receiver.wdm_passband_halfwidth = cfg.pulse.delta_w / 2.0;
        cfg.detector.gate_width = 1e-6;
        cfg.detector.dark_rate = 0.0;
        let n = 400_000;
        let train = emitted_pulses(&cfg, n).unwrap();
        let phase = run_quantum_phase(&train, &cfg, &mut rng(3)).unwrap();
        let (a, _) = sift(&train, &phase.detections, &mut rng(4)).unwrap();
        let expected = pulse_statistics(&cfg.detection_model().unwrap()).sifted / detection_probability(&cfg);
        assert!((expected - 0.5).abs() < 0.01, "{expected}");
        let d = phase.detections.len() as f64;
        let sigma = (expected * (1.0 - expected) / d).sqrt();
        assert!((a.len() as f64 / d - expected).abs() < 3.0 * sigma, "{}", a.len() as f64 / d);
    }

    fn key_with_errors(n: usize, flips: &[usize]) -> (SiftedKey, SiftedKey) {
        let mut r = rng(11);
        let bits = BitString::random(n, &mut r);
        let a = SiftedKey {
            bits: bits.clone(),
            source_indices: (0..n as u64).map(|i| 3 * i).collect(),
        };
        let mut b = a.clone();
        for &i in flips {
            b.bits.set(i, !b.bits.get(i));
        }
        (a, b)
    }

    #[test]
    fn qber_estimate_extremes() {
        let (a, b) = key_with_errors(5000, &[]);
        let (est, ta, tb) = estimate_qber(&a, &b, 0.1, &mut rng(1)).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.sampled, 500);
        assert_eq!(ta.len(), 4500);
        assert_eq!(ta.source_indices, tb.source_indices);

        let all: Vec<usize> = (0..5000).collect();
        let (a, b) = key_with_errors(5000, &all);
        let (est, _, _) = estimate_qber(&a, &b, 0.1, &mut rng(1)).unwrap();
        assert_eq!(est.estimate, 1.0);

        let (a, b) = key_with_errors(500, &[]);
        assert!(matches!(
            estimate_qber(&a, &b, 0.1, &mut rng(1)),
            Err(SessionError::InsufficientSample { .. })
        ));
    }

    #[test]
    fn qber_estimate_within_binomial_band() {
        let n = 100_000;
        let mut r = rng(12);
        let flips: Vec<usize> = (0..n).filter(|_| r.random_bool(0.07)).collect();
        let (a, b) = key_with_errors(n, &flips);
        let truth = flips.len() as f64 / n as f64;
        let mut inside = 0;
        for seed in 0..200 {
            let (est, _, _) = estimate_qber(&a, &b, 0.1, &mut rng(seed)).unwrap();
            if (est.estimate - truth).abs() <= 3.0 * (0.07f64 * 0.93 / 10_000.0).sqrt() {
                inside += 1;
            }
        }
        assert!(inside >= 197, "{inside}");
    }

    #[test]
    fn remove_positions_keeps_order() {
        let k = SiftedKey {
            bits: BitString::parse("10110").unwrap(),
            source_indices: vec![1, 4, 6, 7, 9],
        };
        let r = k.remove_positions(&[0, 3]);
        assert_eq!(r.bits, BitString::parse("010").unwrap());
        assert_eq!(r.source_indices, vec![4, 6, 9]);
    }
}
