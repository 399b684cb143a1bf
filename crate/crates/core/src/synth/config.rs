use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::GainFeature;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    /// Inverted ensemble amplifies the vacuum.
    #[default]
    Rase,
    /// Inverted four-level echo: a weak coherent pulse seeds the gain.
    I4le,
}

/// Seed pulse of the I4LE sequence. `amplitude` is the coherent amplitude
/// (square root of the mean photon number in the pulse mode).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPulse {
    pub amplitude: f64,
    pub length_us: f64,
}

impl Default for InputPulse {
    fn default() -> Self {
        Self { amplitude: 10.0, length_us: 1.0 }
    }
}

/// The two phase-reference pulses appended after the RASE window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefPulse {
    /// Coherent amplitude of each pulse; its quadrature displacement is
    /// twice this in vacuum standard deviations.
    pub amplitude: f64,
    pub length_us: f64,
    /// Nominal phase of each pulse relative to the local oscillator.
    pub phases_rad: [f64; 2],
    pub if_hz: f64,
    /// Dead time before each reference pulse.
    pub guard_us: f64,
}

impl Default for RefPulse {
    fn default() -> Self {
        Self {
            amplitude: 40.0,
            length_us: 2.0,
            phases_rad: [0.0, std::f64::consts::FRAC_PI_2],
            if_hz: 2.0e6,
            guard_us: 1.0,
        }
    }
}

/// One shot's timeline plus detection settings and run size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub kind: SequenceKind,
    pub gain: GainFeature,
    pub ase_window_us: f64,
    pub rase_window_us: f64,
    /// Spin-storage time between the two rephasing pulses.
    pub tau_s_us: f64,
    pub ase_if_hz: f64,
    pub rase_if_hz: f64,
    pub sample_rate_hz: f64,
    pub pi1_len_us: f64,
    pub pi2_len_us: f64,
    #[serde(default)]
    pub input_pulse: InputPulse,
    #[serde(default)]
    pub ref_pulse: RefPulse,
    pub n_shots: usize,
    /// One no-inversion background shot is interleaved after every this many
    /// signal shots; 0 disables background shots.
    #[serde(default = "default_background_every")]
    pub background_every: usize,
    pub rng_seed: u64,
}

fn default_background_every() -> usize {
    10
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            kind: SequenceKind::Rase,
            gain: GainFeature {
                alpha_l: 0.8,
                transmission_l: 0.11,
                reph_transmission: 0.14,
                linewidth_hz: 200e3,
            },
            ase_window_us: 10.0,
            rase_window_us: 10.0,
            tau_s_us: 5.0,
            ase_if_hz: 2.0e6,
            rase_if_hz: -2.0e6,
            sample_rate_hz: 20.0e6,
            pi1_len_us: 1.7,
            pi2_len_us: 2.5,
            input_pulse: InputPulse::default(),
            ref_pulse: RefPulse::default(),
            n_shots: 9000,
            background_every: default_background_every(),
            rng_seed: 1,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.gain.validate()?;
        let positive = [
            ("ase_window_us", self.ase_window_us),
            ("rase_window_us", self.rase_window_us),
            ("sample_rate_hz", self.sample_rate_hz),
            ("ref_pulse.length_us", self.ref_pulse.length_us),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} = {v} must be > 0"));
            }
        }
        let non_negative = [
            ("tau_s_us", self.tau_s_us),
            ("pi1_len_us", self.pi1_len_us),
            ("pi2_len_us", self.pi2_len_us),
            ("ref_pulse.guard_us", self.ref_pulse.guard_us),
            ("ref_pulse.amplitude", self.ref_pulse.amplitude),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{name} = {v} must be >= 0"));
            }
        }
        let max_if = self.ase_if_hz.abs().max(self.rase_if_hz.abs()).max(self.ref_pulse.if_hz.abs());
        if self.sample_rate_hz < 4.0 * max_if {
            return invalid(format!(
                "sample rate {} Hz is below 4x the largest intermediate frequency {} Hz",
                self.sample_rate_hz, max_if
            ));
        }
        if self.n_shots == 0 {
            return invalid("n_shots must be >= 1");
        }
        if self.kind == SequenceKind::I4le {
            let p = &self.input_pulse;
            if !(p.length_us > 0.0) || !(p.amplitude >= 0.0) {
                return invalid("input pulse needs length > 0 and amplitude >= 0");
            }
            if p.length_us > self.ase_window_us || p.length_us > self.rase_window_us {
                return invalid("input pulse is longer than the detection windows");
            }
        }
        let tl = self.timeline();
        for seg in [tl.ase, tl.rase, tl.refs[0], tl.refs[1]] {
            if seg.len == 0 {
                return invalid("a detection or reference window holds no samples at this sample rate");
            }
        }
        Ok(())
    }

    /// Total number of records in a run, background shots included.
    pub fn n_records(&self) -> usize {
        match self.background_every {
            0 => self.n_shots,
            k => self.n_shots + self.n_shots / k,
        }
    }

    /// Background shots close each block of `background_every` signal shots.
    pub fn is_background(&self, shot_id: u64) -> bool {
        match self.background_every {
            0 => false,
            k => (shot_id + 1) % (k as u64 + 1) == 0,
        }
    }

    pub fn timeline(&self) -> Timeline {
        Timeline::new(self)
    }
}

/// Detection-chain model of the heterodyne receiver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Per-quadrature variance of the white vacuum noise per sample; a
    /// unit-norm matched filter then reads vacuum with this variance.
    pub vacuum_psd: f64,
    /// Additive classical noise on each field quadrature of inverted
    /// shots, in vacuum units.
    pub excess_noise: f64,
    pub visibility: f64,
    /// When false the visibility is taken as already folded into the
    /// detection transmission `l`.
    #[serde(default)]
    pub apply_visibility: bool,
    /// Disabling this removes every random contribution, leaving only the
    /// deterministic pulses. Intended for diagnostics.
    #[serde(default = "yes")]
    pub quantum_noise: bool,
}

fn yes() -> bool {
    true
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            vacuum_psd: 1.0,
            excess_noise: 0.0,
            visibility: 0.90,
            apply_visibility: false,
            quantum_noise: true,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { quantum_noise: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vacuum_psd > 0.0) || !self.vacuum_psd.is_finite() {
            return invalid(format!("vacuum_psd = {} must be > 0", self.vacuum_psd));
        }
        if !(self.excess_noise >= 0.0) || !self.excess_noise.is_finite() {
            return invalid(format!("excess_noise = {} must be >= 0", self.excess_noise));
        }
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return invalid(format!("visibility = {} outside (0, 1]", self.visibility));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.vacuum_psd.sqrt()
    }
}

/// Contiguous run of samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Sample layout of one record:
/// `[ASE window][pi1 | tau_s | pi2][RASE window][guard][ref 1][guard][ref 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub sample_rate_hz: f64,
    pub ase: Segment,
    pub control: Segment,
    pub rase: Segment,
    /// I4LE seed pulse, at the start of the ASE window.
    pub input: Option<Segment>,
    /// I4LE echo, at the start of the RASE window.
    pub echo: Option<Segment>,
    pub refs: [Segment; 2],
    pub total: usize,
}

pub(crate) fn us_to_samples(t_us: f64, sample_rate_hz: f64) -> usize {
    (t_us * sample_rate_hz * 1e-6 + 1e-9).floor() as usize
}

impl Timeline {
    fn new(cfg: &SequenceConfig) -> Self {
        let fs = cfg.sample_rate_hz;
        let at = |t_us: f64| us_to_samples(t_us, fs);
        let span = |a: f64, b: f64| Segment { start: at(a), len: at(b) - at(a) };

        let mut t = 0.0;
        let ase = span(t, t + cfg.ase_window_us);
        t += cfg.ase_window_us;
        let ctrl_len = cfg.pi1_len_us + cfg.tau_s_us + cfg.pi2_len_us;
        let control = span(t, t + ctrl_len);
        t += ctrl_len;
        let rase_start = t;
        let rase = span(t, t + cfg.rase_window_us);
        t += cfg.rase_window_us;
        let mut refs = [Segment { start: 0, len: 0 }; 2];
        for r in refs.iter_mut() {
            t += cfg.ref_pulse.guard_us;
            *r = span(t, t + cfg.ref_pulse.length_us);
            t += cfg.ref_pulse.length_us;
        }
        let (input, echo) = match cfg.kind {
            SequenceKind::I4le => (
                Some(span(0.0, cfg.input_pulse.length_us)),
                Some(span(rase_start, rase_start + cfg.input_pulse.length_us)),
            ),
            SequenceKind::Rase => (None, None),
        };
        Self {
            sample_rate_hz: fs,
            ase,
            control,
            rase,
            input,
            echo,
            refs,
            total: at(t),
        }
    }

    /// Time of sample `k` from the start of the record, in seconds.
    pub fn time_s(&self, k: usize) -> f64 {
        k as f64 / self.sample_rate_hz
    }

    /// Segments that carry only vacuum noise on a background shot.
    pub fn vacuum_segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut push_minus = |seg: Segment, hole: Option<Segment>| match hole {
            Some(h) if h.start == seg.start => {
                if seg.len > h.len {
                    out.push(Segment { start: h.end(), len: seg.len - h.len });
                }
            }
            _ => out.push(seg),
        };
        push_minus(self.ase, self.input);
        push_minus(self.control, None);
        push_minus(self.rase, self.echo);
        out
    }
}
