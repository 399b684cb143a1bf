//! Monte-Carlo synthesis of heterodyne shot records.
//!
//! Every detection window carries one temporal mode: a rectangular envelope
//! on the field's intermediate-frequency carrier. A shot starts from white
//! vacuum noise, replaces the component of each window mode with a draw from
//! the two-mode ASE/RASE state, adds the deterministic pulses (I4LE seed and
//! echo, phase references), and rotates all signal content by one
//! interferometer phase drawn per shot.
//!
//! Each shot owns an RNG stream keyed by `(rng_seed, shot_id)`, so records
//! do not depend on generation order or thread count.

pub(crate) mod config;
pub mod dump;

pub use config::{
    InputPulse, NoiseModel, RefPulse, Segment, SequenceConfig, SequenceKind, Timeline,
};

use std::f64::consts::TAU;

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianState, LossChannel, SqueezeParams};
use crate::model::{lossy_tmsv_state, GainFeature, ASE_MODE, RASE_MODE};

/// Ground truth kept alongside each record for validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotTruth {
    pub interferometer_phase_rad: f64,
    pub rng_stream_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotRecord {
    pub shot_id: u64,
    /// No-inversion shot used for vacuum calibration.
    pub background: bool,
    pub trace: Vec<Complex64>,
    pub truth: ShotTruth,
}

/// Unit-norm rectangular mode on a carrier, over one segment.
pub(crate) fn carrier(tl: &Timeline, seg: Segment, freq_hz: f64) -> impl Iterator<Item = (usize, Complex64)> + '_ {
    let norm = 1.0 / (seg.len as f64).sqrt();
    seg.range()
        .map(move |k| (k, Complex64::from_polar(norm, TAU * freq_hz * tl.time_s(k))))
}

fn shot_rng(seed: u64, shot_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot_id);
    rng
}

/// Covariance and deterministic pulse amplitudes of one shot.
struct ShotPhysics {
    cov: Matrix4<f64>,
    /// Quadrature means `(x, p)` of the amplified seed and of the echo.
    seed_out: (f64, f64),
    echo_out: (f64, f64),
}

fn shot_physics(cfg: &SequenceConfig, noise: &NoiseModel, background: bool) -> Result<ShotPhysics> {
    let gain = if background {
        GainFeature { alpha_l: 0.0, ..cfg.gain }
    } else {
        cfg.gain
    };
    let mut state = lossy_tmsv_state(&gain)?;
    if noise.apply_visibility {
        let eff = noise.visibility * noise.visibility;
        for mode in [ASE_MODE, RASE_MODE] {
            state = state.apply_loss(LossChannel::new(eff, mode)?)?;
        }
    }
    let cov = state.two_mode_block(ASE_MODE, RASE_MODE)?;

    let (mut seed_out, mut echo_out) = ((0.0, 0.0), (0.0, 0.0));
    if cfg.kind == SequenceKind::I4le {
        // push the seed displacement through the same gain and losses
        let mut pulse = GaussianState::vacuum(2)?
            .displace(ASE_MODE, 2.0 * cfg.input_pulse.amplitude, 0.0)?
            .two_mode_squeeze(SqueezeParams::new(gain.squeeze_r(), ASE_MODE, RASE_MODE)?)?
            .apply_loss(LossChannel::new(gain.transmission_l, ASE_MODE)?)?
            .apply_loss(LossChannel::new(gain.transmission_l, RASE_MODE)?)?
            .apply_loss(LossChannel::new(gain.reph_transmission, RASE_MODE)?)?;
        if noise.apply_visibility {
            let eff = noise.visibility * noise.visibility;
            for mode in [ASE_MODE, RASE_MODE] {
                pulse = pulse.apply_loss(LossChannel::new(eff, mode)?)?;
            }
        }
        let m = pulse.mean();
        seed_out = (m[0], m[1]);
        echo_out = (m[2], m[3]);
    }
    Ok(ShotPhysics { cov, seed_out, echo_out })
}

/// Draw from a zero-mean Gaussian with covariance `cov` (positive semi-definite).
fn sample_gaussian(cov: &Matrix4<f64>, rng: &mut impl Rng) -> Result<Vector4<f64>> {
    let z = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    if let Some(ch) = cov.cholesky() {
        return Ok(ch.l() * z);
    }
    // singular but semi-definite (e.g. l = 0): fall back to the eigenbasis
    let eig = cov.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v < -1e-9) {
        return Err(Error::Numerical("field covariance is not positive semi-definite".into()));
    }
    let scale = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(eig.eigenvectors * z.component_mul(&scale))
}

pub fn synthesize_shot(cfg: &SequenceConfig, noise: &NoiseModel, shot_id: u64) -> Result<ShotRecord> {
    synthesize(cfg, noise, shot_id, None)
}

/// Same RNG stream as [`synthesize_shot`], but with the interferometer phase
/// overridden after it is drawn. Used to build zero-phase twins.
pub fn synthesize_shot_with_phase(
    cfg: &SequenceConfig,
    noise: &NoiseModel,
    shot_id: u64,
    phase_rad: f64,
) -> Result<ShotRecord> {
    synthesize(cfg, noise, shot_id, Some(phase_rad))
}

fn synthesize(
    cfg: &SequenceConfig,
    noise: &NoiseModel,
    shot_id: u64,
    forced_phase: Option<f64>,
) -> Result<ShotRecord> {
    cfg.validate()?;
    noise.validate()?;
    let tl = cfg.timeline();
    let background = cfg.is_background(shot_id);
    let physics = shot_physics(cfg, noise, background)?;
    let sigma = noise.sigma();

    let mut rng = shot_rng(cfg.rng_seed, shot_id);
    let mut theta = rng.random::<f64>() * TAU;
    if theta >= TAU {
        theta -= TAU;
    }
    let truth_phase = forced_phase.map(|p| p.rem_euclid(TAU)).unwrap_or(theta);
    let rot = Complex64::from_polar(1.0, truth_phase);

    let mut fields = sample_gaussian(&physics.cov, &mut rng)?;
    let excess: Vector4<f64> = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    if !noise.quantum_noise {
        fields = Vector4::zeros();
    } else if !background && noise.excess_noise > 0.0 {
        fields += excess * noise.excess_noise.sqrt();
    }

    let mut trace: Vec<Complex64> = if noise.quantum_noise {
        (0..tl.total)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * sigma
            })
            .collect()
    } else {
        vec![Complex64::new(0.0, 0.0); tl.total]
    };

    // Replace each window's mode component with the drawn field quadratures.
    let windows = [
        (tl.ase, cfg.ase_if_hz, Complex64::new(fields[0], fields[1])),
        (tl.rase, cfg.rase_if_hz, Complex64::new(fields[2], fields[3])),
    ];
    for (seg, f, q) in windows {
        let mode: Vec<(usize, Complex64)> = carrier(&tl, seg, f).collect();
        let overlap: Complex64 = mode.iter().map(|&(k, m)| m.conj() * trace[k]).sum();
        let amp = q * rot * sigma - overlap;
        for (k, m) in mode {
            trace[k] += amp * m;
        }
    }

    if let (Some(input), Some(echo)) = (tl.input, tl.echo) {
        let pulses = [
            (input, cfg.ase_if_hz, physics.seed_out),
            (echo, cfg.rase_if_hz, physics.echo_out),
        ];
        for (seg, f, (x, p)) in pulses {
            let amp = Complex64::new(x, p) * rot * sigma;
            for (k, m) in carrier(&tl, seg, f) {
                trace[k] += amp * m;
            }
        }
    }

    for (seg, phi) in tl.refs.iter().zip(cfg.ref_pulse.phases_rad) {
        let amp = Complex64::from_polar(2.0 * cfg.ref_pulse.amplitude * sigma, truth_phase + phi);
        for (k, m) in carrier(&tl, *seg, cfg.ref_pulse.if_hz) {
            trace[k] += amp * m;
        }
    }

    Ok(ShotRecord {
        shot_id,
        background,
        trace,
        truth: ShotTruth { interferometer_phase_rad: truth_phase, rng_stream_id: shot_id },
    })
}

/// Lazily yields every record of a run in shot order.
pub fn synthesize_run<'a>(
    cfg: &'a SequenceConfig,
    noise: &'a NoiseModel,
) -> Result<impl Iterator<Item = Result<ShotRecord>> + 'a> {
    cfg.validate()?;
    noise.validate()?;
    Ok((0..cfg.n_records() as u64).map(move |id| synthesize_shot(cfg, noise, id)))
}

/// Synthesizes the given shots on the rayon pool; output follows `ids`.
pub fn synthesize_shots_par(cfg: &SequenceConfig, noise: &NoiseModel, ids: &[u64]) -> Result<Vec<ShotRecord>> {
    cfg.validate()?;
    noise.validate()?;
    ids.par_iter().map(|&id| synthesize_shot(cfg, noise, id)).collect()
}

pub fn synthesize_run_par(cfg: &SequenceConfig, noise: &NoiseModel) -> Result<Vec<ShotRecord>> {
    let ids: Vec<u64> = (0..cfg.n_records() as u64).collect();
    synthesize_shots_par(cfg, noise, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(kind: SequenceKind) -> SequenceConfig {
        SequenceConfig { kind, n_shots: 20, rng_seed: 99, ..Default::default() }
    }

    #[test]
    fn trace_length_matches_duration() {
        let cfg = small(SequenceKind::Rase);
        let rec = synthesize_shot(&cfg, &NoiseModel::default(), 0).unwrap();
        // 35.2 us at 20 MS/s
        assert_eq!(rec.trace.len(), 704);
        let ph = rec.truth.interferometer_phase_rad;
        assert!((0.0..TAU).contains(&ph));
    }

    #[test]
    fn identical_seed_and_id_are_bit_identical() {
        let cfg = small(SequenceKind::Rase);
        let noise = NoiseModel::default();
        let a = synthesize_shot(&cfg, &noise, 7).unwrap();
        let b = synthesize_shot(&cfg, &noise, 7).unwrap();
        assert_eq!(a, b);
        let c = synthesize_shot(&cfg, &noise, 8).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn run_order_does_not_matter() {
        let cfg = small(SequenceKind::Rase);
        let noise = NoiseModel::default();
        let seq: Vec<ShotRecord> = synthesize_run(&cfg, &noise).unwrap().map(|r| r.unwrap()).collect();
        let mut ids: Vec<u64> = (0..cfg.n_records() as u64).rev().collect();
        ids.swap(0, 5);
        let mut shuffled = synthesize_shots_par(&cfg, &noise, &ids).unwrap();
        shuffled.sort_by_key(|r| r.shot_id);
        assert_eq!(seq, shuffled);
        assert_eq!(seq, synthesize_run_par(&cfg, &noise).unwrap());
    }

    #[test]
    fn single_shot_run() {
        let cfg = SequenceConfig { n_shots: 1, ..small(SequenceKind::Rase) };
        assert_eq!(synthesize_run(&cfg, &NoiseModel::default()).unwrap().count(), 1);
    }

    #[test]
    fn if_violation_is_rejected() {
        let cfg = SequenceConfig { ase_if_hz: 6e6, ..small(SequenceKind::Rase) };
        assert!(matches!(
            synthesize_shot(&cfg, &NoiseModel::default(), 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn noiseless_reference_pulse_has_known_shape() {
        let cfg = small(SequenceKind::Rase);
        let rec = synthesize_shot_with_phase(&cfg, &NoiseModel::noiseless(), 0, 0.0).unwrap();
        let tl = cfg.timeline();
        // outside the pulses the noiseless trace is empty
        assert!(rec.trace[..tl.refs[0].start].iter().all(|z| z.norm() == 0.0));
        let amp = 2.0 * 40.0 / (40f64).sqrt();
        let k = tl.refs[0].start;
        let expected = Complex64::from_polar(amp, TAU * 2e6 * tl.time_s(k));
        assert_relative_eq!(rec.trace[k].re, expected.re, epsilon = 1e-12);
        assert_relative_eq!(rec.trace[k].im, expected.im, epsilon = 1e-12);
    }

    #[test]
    fn i4le_seed_is_amplified_and_echo_is_conjugate() {
        let cfg = SequenceConfig {
            gain: GainFeature::new(1.0, 1.0, 1.0).unwrap(),
            ..small(SequenceKind::I4le)
        };
        let ph = shot_physics(&cfg, &NoiseModel::default(), false).unwrap();
        let r = cfg.gain.squeeze_r();
        assert_relative_eq!(ph.seed_out.0, 2.0 * 10.0 * r.cosh(), epsilon = 1e-12);
        assert_relative_eq!(ph.echo_out.0, -2.0 * 10.0 * r.sinh(), epsilon = 1e-12);

        let bg = shot_physics(&cfg, &NoiseModel::default(), true).unwrap();
        assert_relative_eq!(bg.seed_out.0, 20.0, epsilon = 1e-12);
        assert_eq!(bg.echo_out.0, 0.0);
    }

    #[test]
    fn background_shots_are_vacuum() {
        let cfg = small(SequenceKind::Rase);
        let ph = shot_physics(&cfg, &NoiseModel::default(), true).unwrap();
        assert_eq!(ph.cov, Matrix4::identity());
    }

    #[test]
    fn singular_covariance_can_be_sampled() {
        let cov = Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 0.0, 0.0));
        let mut rng = shot_rng(1, 1);
        let z = sample_gaussian(&cov, &mut rng).unwrap();
        assert!(z[2].abs() < 1e-12 && z[3].abs() < 1e-12);
    }
}
