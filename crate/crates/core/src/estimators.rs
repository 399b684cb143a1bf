//! Post-processing of shot records into vacuum-normalized quadratures.
//!
//! Quadratures come from a matched filter: the record is demodulated at the
//! field's intermediate frequency and weighted by a unit-norm window, so white
//! noise of per-quadrature variance `sigma^2` reads out with variance
//! `sigma^2` whatever the window shape. Dividing by `sigma` gives vacuum units.

use std::f64::consts::TAU;
use std::fmt;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::{mean, pairwise_sum, sample_variance, variance_se};
use crate::synth::config::us_to_samples;
use crate::synth::{carrier, NoiseModel, Segment, SequenceConfig, SequenceKind, ShotRecord, Timeline};

/// Reference power below this multiple of its noise floor is not trusted.
pub const MIN_REFERENCE_POWER_RATIO: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Ase,
    Rase,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Ase => "ASE",
            Field::Rase => "RASE",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFunction {
    #[default]
    Rect,
    Hann,
}

impl WindowFunction {
    fn weights(self, len: usize) -> Vec<f64> {
        match self {
            WindowFunction::Rect => vec![1.0; len],
            WindowFunction::Hann => (0..len)
                .map(|k| {
                    let s = (std::f64::consts::PI * (k as f64 + 0.5) / len as f64).sin();
                    s * s
                })
                .collect(),
        }
    }
}

/// Time window, demodulation frequency and spectral span for one field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralWindow {
    pub field: Field,
    pub center_hz: f64,
    pub span_hz: f64,
    pub start_us: f64,
    pub len_us: f64,
    pub function: WindowFunction,
}

impl SpectralWindow {
    /// Covers the whole detection window of `field`.
    pub fn for_field(cfg: &SequenceConfig, field: Field, span_hz: f64, function: WindowFunction) -> Self {
        let (start_us, len_us, center_hz) = match field {
            Field::Ase => (0.0, cfg.ase_window_us, cfg.ase_if_hz),
            Field::Rase => {
                let tl = cfg.timeline();
                (tl.rase.start as f64 / cfg.sample_rate_hz * 1e6, cfg.rase_window_us, cfg.rase_if_hz)
            }
        };
        Self { field, center_hz, span_hz, start_us, len_us, function }
    }

    /// Covers one segment of the timeline (e.g. the I4LE seed or echo pulse).
    pub fn for_segment(tl: &Timeline, seg: Segment, field: Field, center_hz: f64, span_hz: f64) -> Self {
        let to_us = |k: usize| k as f64 / tl.sample_rate_hz * 1e6;
        Self {
            field,
            center_hz,
            span_hz,
            start_us: to_us(seg.start),
            len_us: to_us(seg.len),
            function: WindowFunction::Rect,
        }
    }

    /// Same start, shorter integration time.
    pub fn narrowed(mut self, len_us: f64) -> Result<Self> {
        if !(len_us > 0.0) || len_us > self.len_us + 1e-9 {
            return invalid(format!("narrowed window {len_us} us must lie in (0, {}]", self.len_us));
        }
        self.len_us = len_us;
        Ok(self)
    }

    /// Sample range of the window, checked against a record of `total` samples.
    pub fn segment(&self, tl: &Timeline, total: usize) -> Result<Segment> {
        if !(self.span_hz > 0.0) {
            return invalid(format!("spectral span {} Hz must be > 0", self.span_hz));
        }
        if !(self.start_us >= 0.0) || !(self.len_us > 0.0) {
            return invalid("window start must be >= 0 and length > 0");
        }
        let start = us_to_samples(self.start_us, tl.sample_rate_hz);
        let len = us_to_samples(self.len_us, tl.sample_rate_hz);
        if len < 2 || start + len > total {
            return invalid(format!(
                "window [{start}, {}) lies outside the {total}-sample record",
                start + len
            ));
        }
        Ok(Segment { start, len })
    }
}

/// Per-quadrature vacuum variance of a raw sample, in record units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub sigma2: f64,
    /// Number of real noise samples behind the estimate (0 when nominal).
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationSource {
    /// Measured from the interleaved no-inversion shots.
    #[default]
    Background,
    /// Taken from the noise model.
    Nominal,
}

/// Sum of squares and count of real noise samples in the vacuum-only parts
/// of a background record.
pub fn background_power(rec: &ShotRecord, tl: &Timeline) -> (f64, usize) {
    let mut sq = Vec::new();
    for seg in tl.vacuum_segments() {
        for z in &rec.trace[seg.range()] {
            sq.push(z.re * z.re);
            sq.push(z.im * z.im);
        }
    }
    (pairwise_sum(&sq), sq.len())
}

impl Normalization {
    pub fn nominal(noise: &NoiseModel) -> Self {
        Self { sigma2: noise.vacuum_psd, n_samples: 0 }
    }

    /// Combines per-record `(sum of squares, count)` pairs, in the order given.
    pub fn from_partials(parts: &[(f64, usize)]) -> Result<Self> {
        let sums: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let n: usize = parts.iter().map(|p| p.1).sum();
        if n == 0 {
            return invalid("no background samples to normalize against");
        }
        let sigma2 = pairwise_sum(&sums) / n as f64;
        if !(sigma2 > 0.0) {
            return Err(Error::Numerical("background noise power is zero".into()));
        }
        Ok(Self { sigma2, n_samples: n })
    }

    pub fn from_background(records: &[ShotRecord], cfg: &SequenceConfig) -> Result<Self> {
        let tl = cfg.timeline();
        let parts: Vec<(f64, usize)> = records
            .iter()
            .filter(|r| r.background)
            .map(|r| background_power(r, &tl))
            .collect();
        Self::from_partials(&parts)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Window-weighted demodulation at `freq_hz`, scaled to vacuum units.
fn matched_filter(rec: &ShotRecord, tl: &Timeline, seg: Segment, freq_hz: f64, w: &[f64], norm: &Normalization) -> Complex64 {
    let wnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let acc: Complex64 = seg
        .range()
        .zip(w)
        .map(|(k, &wk)| rec.trace[k] * Complex64::from_polar(wk, -TAU * freq_hz * tl.time_s(k)))
        .sum();
    acc / (wnorm * norm.sigma())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEstimate {
    pub phase_rad: f64,
    /// Reference power over its expected vacuum noise power.
    pub power_ratio: f64,
}

/// Interferometer phase from the two reference pulses.
pub fn estimate_phase(rec: &ShotRecord, cfg: &SequenceConfig, norm: &Normalization) -> Result<PhaseEstimate> {
    let tl = cfg.timeline();
    if rec.trace.len() < tl.refs[1].end() {
        return invalid("record does not contain the reference-pulse window");
    }
    let z: Complex64 = tl
        .refs
        .iter()
        .zip(cfg.ref_pulse.phases_rad)
        .map(|(seg, phi)| {
            let q: Complex64 = carrier(&tl, *seg, cfg.ref_pulse.if_hz)
                .map(|(k, m)| m.conj() * rec.trace[k])
                .sum();
            q / norm.sigma() * Complex64::from_polar(1.0, -phi)
        })
        .sum();
    // each pulse adds unit vacuum variance to both quadratures of z
    let noise_floor = 2.0 * tl.refs.len() as f64;
    let power_ratio = z.norm_sqr() / noise_floor;
    if power_ratio < MIN_REFERENCE_POWER_RATIO {
        return Err(Error::LowConfidence { ratio: power_ratio });
    }
    Ok(PhaseEstimate { phase_rad: z.arg().rem_euclid(TAU), power_ratio })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraturePair {
    pub field: Field,
    pub x: f64,
    pub p: f64,
    pub shot_id: u64,
}

/// Matched-filter quadratures of one field, rotated by `-phase_rad`.
pub fn extract_quadratures(
    rec: &ShotRecord,
    tl: &Timeline,
    w: &SpectralWindow,
    phase_rad: f64,
    norm: &Normalization,
) -> Result<QuadraturePair> {
    let seg = w.segment(tl, rec.trace.len())?;
    let weights = w.function.weights(seg.len);
    let q = matched_filter(rec, tl, seg, w.center_hz, &weights, norm) * Complex64::from_polar(1.0, -phase_rad);
    if !q.re.is_finite() || !q.im.is_finite() {
        return Err(Error::Numerical(format!("non-finite quadrature in shot {}", rec.shot_id)));
    }
    Ok(QuadraturePair { field: w.field, x: q.re, p: q.im, shot_id: rec.shot_id })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBin {
    pub offset_hz: f64,
    /// `|X|^2` in vacuum units; vacuum averages 2 per bin.
    pub power: f64,
}

/// DFT bins of the windowed segment within `center +/- span/2`.
pub fn power_spectrum(rec: &ShotRecord, tl: &Timeline, w: &SpectralWindow, norm: &Normalization) -> Result<Vec<SpectrumBin>> {
    let seg = w.segment(tl, rec.trace.len())?;
    let weights = w.function.weights(seg.len);
    let df = tl.sample_rate_hz / seg.len as f64;
    let half = (0.5 * w.span_hz / df).floor() as i64;
    Ok((-half..=half)
        .map(|j| {
            let offset_hz = j as f64 * df;
            let q = matched_filter(rec, tl, seg, w.center_hz + offset_hz, &weights, norm);
            SpectrumBin { offset_hz, power: q.norm_sqr() }
        })
        .collect())
}

/// Vacuum-subtracted power summed over the span.
pub fn spectral_area(rec: &ShotRecord, tl: &Timeline, w: &SpectralWindow, norm: &Normalization) -> Result<f64> {
    Ok(power_spectrum(rec, tl, w, norm)?.iter().map(|b| b.power - 2.0).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// Average of the x and p variances.
    pub mean_var: f64,
    pub se: f64,
    pub n_shots: usize,
    pub var_x: f64,
    pub var_p: f64,
}

/// Unbiased variances of x and p, averaged. The standard error treats the
/// `2n` quadrature values as Gaussian.
pub fn variance_of(pairs: &[QuadraturePair]) -> Result<VarianceEstimate> {
    let n = pairs.len();
    if n < 2 {
        return invalid(format!("variance needs at least 2 shots, got {n}"));
    }
    let xs: Vec<f64> = pairs.iter().map(|q| q.x).collect();
    let ps: Vec<f64> = pairs.iter().map(|q| q.p).collect();
    let (var_x, var_p) = (sample_variance(&xs), sample_variance(&ps));
    let mean_var = 0.5 * (var_x + var_p);
    Ok(VarianceEstimate { mean_var, se: variance_se(mean_var, 2 * n), n_shots: n, var_x, var_p })
}

/// As [`variance_of`], with the standard error from a shot-level bootstrap.
pub fn variance_bootstrap(pairs: &[QuadraturePair], resamples: usize, seed: u64) -> Result<VarianceEstimate> {
    let base = variance_of(pairs)?;
    if resamples < 2 {
        return invalid("bootstrap needs at least 2 resamples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pairs.len();
    let stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let draw: Vec<QuadraturePair> = (0..n).map(|_| pairs[rng.random_range(0..n)]).collect();
            variance_of(&draw).map(|v| v.mean_var).unwrap_or(f64::NAN)
        })
        .collect();
    Ok(VarianceEstimate { se: sample_variance(&stats).sqrt(), ..base })
}

/// `eta = (V_R - 1) / (V_A - 1)` with first-order error propagation.
pub fn efficiency_from_runs(ase: &VarianceEstimate, rase: &VarianceEstimate) -> Result<(f64, f64)> {
    let da = ase.mean_var - 1.0;
    if !(da > 0.0) {
        return Err(Error::UndefinedEfficiency(ase.mean_var));
    }
    let eta = (rase.mean_var - 1.0) / da;
    let se = ((rase.se / da).powi(2) + (eta * ase.se / da).powi(2)).sqrt();
    Ok((eta, se))
}

/// Mean of per-shot values with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn mean_of(values: &[f64]) -> Result<MeanEstimate> {
    let n = values.len();
    if n < 2 {
        return invalid(format!("mean estimate needs at least 2 values, got {n}"));
    }
    Ok(MeanEstimate { mean: mean(values), se: (sample_variance(values) / n as f64).sqrt(), n })
}

/// Settings for turning a run of records into quadratures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractOptions {
    pub span_hz: f64,
    pub function: WindowFunction,
    /// Re-window both fields to this integration time (same start).
    pub window_us: Option<f64>,
    pub phase_correction: bool,
    pub normalization: NormalizationSource,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            span_hz: 100e3,
            function: WindowFunction::Rect,
            window_us: None,
            phase_correction: true,
            normalization: NormalizationSource::Background,
        }
    }
}

impl ExtractOptions {
    pub fn windows(&self, cfg: &SequenceConfig) -> Result<[SpectralWindow; 2]> {
        let mut out = [Field::Ase, Field::Rase].map(|f| SpectralWindow::for_field(cfg, f, self.span_hz, self.function));
        if let Some(len) = self.window_us {
            for w in out.iter_mut() {
                *w = w.narrowed(len)?;
            }
        }
        Ok(out)
    }
}

/// Everything extracted from one signal shot.
#[derive(Clone, Debug, PartialEq)]
pub enum ShotOutcome {
    Accepted {
        ase: QuadraturePair,
        rase: QuadraturePair,
        phase: Option<PhaseEstimate>,
        /// I4LE seed and echo spectral areas.
        areas: Option<(f64, f64)>,
    },
    /// Phase reference too weak to trust.
    Rejected { shot_id: u64, power_ratio: f64 },
}

pub fn process_shot(
    rec: &ShotRecord,
    cfg: &SequenceConfig,
    opts: &ExtractOptions,
    norm: &Normalization,
) -> Result<ShotOutcome> {
    let tl = cfg.timeline();
    let phase = if opts.phase_correction {
        match estimate_phase(rec, cfg, norm) {
            Ok(p) => Some(p),
            Err(Error::LowConfidence { ratio }) => {
                return Ok(ShotOutcome::Rejected { shot_id: rec.shot_id, power_ratio: ratio })
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let theta = phase.map_or(0.0, |p| p.phase_rad);
    let [wa, wr] = opts.windows(cfg)?;
    let ase = extract_quadratures(rec, &tl, &wa, theta, norm)?;
    let rase = extract_quadratures(rec, &tl, &wr, theta, norm)?;
    let areas = match (cfg.kind, tl.input, tl.echo) {
        (SequenceKind::I4le, Some(inp), Some(echo)) => {
            let wi = SpectralWindow::for_segment(&tl, inp, Field::Ase, cfg.ase_if_hz, opts.span_hz);
            let we = SpectralWindow::for_segment(&tl, echo, Field::Rase, cfg.rase_if_hz, opts.span_hz);
            Some((spectral_area(rec, &tl, &wi, norm)?, spectral_area(rec, &tl, &we, norm)?))
        }
        _ => None,
    };
    Ok(ShotOutcome::Accepted { ase, rase, phase, areas })
}

/// Quadratures of every signal shot of a run, in shot order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunQuadratures {
    pub ase: Vec<QuadraturePair>,
    pub rase: Vec<QuadraturePair>,
    pub phases: Vec<Option<PhaseEstimate>>,
    pub seed_areas: Vec<f64>,
    pub echo_areas: Vec<f64>,
    pub rejected: Vec<u64>,
    pub normalization: Option<Normalization>,
}

impl RunQuadratures {
    pub fn push(&mut self, outcome: ShotOutcome) {
        match outcome {
            ShotOutcome::Accepted { ase, rase, phase, areas } => {
                self.ase.push(ase);
                self.rase.push(rase);
                self.phases.push(phase);
                if let Some((a, e)) = areas {
                    self.seed_areas.push(a);
                    self.echo_areas.push(e);
                }
            }
            ShotOutcome::Rejected { shot_id, .. } => self.rejected.push(shot_id),
        }
    }

    /// Background-subtracted echo/seed area ratio for I4LE runs.
    pub fn area_ratio(&self) -> Result<(f64, f64)> {
        let seed = mean_of(&self.seed_areas)?;
        let echo = mean_of(&self.echo_areas)?;
        if !(seed.mean > 0.0) {
            return Err(Error::UndefinedEfficiency(seed.mean));
        }
        let ratio = echo.mean / seed.mean;
        let se = ((echo.se / seed.mean).powi(2) + (ratio * seed.se / seed.mean).powi(2)).sqrt();
        Ok((ratio, se))
    }
}

pub fn resolve_normalization(
    records: &[ShotRecord],
    cfg: &SequenceConfig,
    noise: &NoiseModel,
    source: NormalizationSource,
) -> Result<Normalization> {
    match source {
        NormalizationSource::Nominal => Ok(Normalization::nominal(noise)),
        NormalizationSource::Background => Normalization::from_background(records, cfg),
    }
}

/// Runs [`process_shot`] over every signal record.
pub fn extract_run(
    records: &[ShotRecord],
    cfg: &SequenceConfig,
    noise: &NoiseModel,
    opts: &ExtractOptions,
) -> Result<RunQuadratures> {
    let norm = resolve_normalization(records, cfg, noise, opts.normalization)?;
    let mut out = RunQuadratures { normalization: Some(norm), ..Default::default() };
    for rec in records.iter().filter(|r| !r.background) {
        out.push(process_shot(rec, cfg, opts, &norm)?);
    }
    Ok(out)
}

/// Per-shot table: `shot_id,field,x,p`.
pub fn write_quadrature_table(out: impl Write, run: &RunQuadratures) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["shot_id", "field", "x", "p"]).map_err(csv_err)?;
    for (a, r) in run.ase.iter().zip(&run.rase) {
        for q in [a, r] {
            w.write_record([q.shot_id.to_string(), q.field.to_string(), q.x.to_string(), q.p.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_variance_summary(out: impl Write, rows: &[(Field, VarianceEstimate)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["field", "mean_var", "se", "var_x", "var_p", "n_shots"]).map_err(csv_err)?;
    for (f, v) in rows {
        w.write_record([
            f.to_string(),
            v.mean_var.to_string(),
            v.se.to_string(),
            v.var_x.to_string(),
            v.var_p.to_string(),
            v.n_shots.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
