//! Closed-form RASE models: ASE variance against optical depth, the printed
//! rephasing-efficiency formula, the lossy two-mode-squeezed-vacuum state and
//! its inseparability curve, and delay rescaling of echo efficiencies.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{GaussianState, LossChannel, SqueezeParams};

pub const ASE_MODE: usize = 0;
pub const RASE_MODE: usize = 1;

/// Probe-measured optical depths at or above this value are not trusted:
/// the probe transmission saturates there.
pub const PROBE_SATURATION_ALPHA_L: f64 = 2.0;

/// Golden-section termination width in `b`.
const MIN_B_TOL: f64 = 1e-5;
const FALLBACK_GRID: usize = 1001;

/// Optical-depth and loss parameters of an inverted gain feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainFeature {
    /// Optical depth `alpha L` of the inverted feature.
    pub alpha_l: f64,
    /// Detection-chain intensity transmission, shared by both fields.
    pub transmission_l: f64,
    /// Extra RASE-only transmission from imperfect rephasing.
    pub reph_transmission: f64,
    /// Feature width; metadata only.
    #[serde(default = "default_linewidth")]
    pub linewidth_hz: f64,
}

fn default_linewidth() -> f64 {
    200e3
}

impl GainFeature {
    pub fn new(alpha_l: f64, transmission_l: f64, reph_transmission: f64) -> Result<Self> {
        let g = Self {
            alpha_l,
            transmission_l,
            reph_transmission,
            linewidth_hz: default_linewidth(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_l >= 0.0) || !self.alpha_l.is_finite() {
            return invalid(format!("alpha_l = {} must be finite and >= 0", self.alpha_l));
        }
        if !(0.0..=1.0).contains(&self.transmission_l) {
            return invalid(format!("transmission_l = {} outside [0, 1]", self.transmission_l));
        }
        if !(0.0..=1.0).contains(&self.reph_transmission) {
            return invalid(format!("reph_transmission = {} outside [0, 1]", self.reph_transmission));
        }
        if !(self.linewidth_hz >= 0.0) {
            return invalid(format!("linewidth_hz = {} must be >= 0", self.linewidth_hz));
        }
        Ok(())
    }

    pub fn with_alpha_l(mut self, alpha_l: f64) -> Self {
        self.alpha_l = alpha_l;
        self
    }

    /// Squeeze parameter with `cosh^2 r = exp(alpha L)`.
    pub fn squeeze_r(&self) -> f64 {
        squeeze_for_gain(self.alpha_l)
    }
}

pub fn squeeze_for_gain(alpha_l: f64) -> f64 {
    (0.5 * alpha_l).exp().acosh()
}

/// Whether the decay constant refers to intensity or field amplitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    #[default]
    Intensity,
    Amplitude,
}

/// Rescales an echo efficiency measured at one optical delay to another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayScaling {
    pub tau_us: f64,
    pub t_ref_us: f64,
    pub t_target_us: f64,
    #[serde(default)]
    pub kind: DecayKind,
}

impl Default for DecayScaling {
    fn default() -> Self {
        Self {
            tau_us: 59.2,
            t_ref_us: 20.0,
            t_target_us: 20.0,
            kind: DecayKind::Intensity,
        }
    }
}

impl DecayScaling {
    pub fn new(tau_us: f64, t_ref_us: f64, t_target_us: f64) -> Result<Self> {
        let d = Self { tau_us, t_ref_us, t_target_us, kind: DecayKind::Intensity };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_us > 0.0) || !self.tau_us.is_finite() {
            return invalid(format!("decay constant tau_us = {} must be > 0", self.tau_us));
        }
        if !(self.t_ref_us >= 0.0) || !(self.t_target_us >= 0.0) {
            return invalid("delays must be >= 0");
        }
        Ok(())
    }

    /// Multiplicative factor applied to an efficiency.
    pub fn factor(&self) -> Result<f64> {
        self.validate()?;
        let rate = match self.kind {
            DecayKind::Intensity => 1.0 / self.tau_us,
            DecayKind::Amplitude => 2.0 / self.tau_us,
        };
        Ok((-(self.t_target_us - self.t_ref_us) * rate).exp())
    }
}

/// One point of the inseparability curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsepPoint {
    pub b: f64,
    pub total_variance: f64,
}

/// Average ASE quadrature variance after a single-beamsplitter loss `l`:
/// `l (2 e^{aL} - 1) + (1 - l)`.
pub fn ase_variance(g: &GainFeature) -> f64 {
    let l = g.transmission_l;
    l * (2.0 * g.alpha_l.exp() - 1.0) + (1.0 - l)
}

/// Rephasing efficiency `(1 + 8 sinh^2(aL/2) - 2) / (2 e^{aL} - 2)`, as printed.
///
/// Negative for `aL < ln 2`; see [`efficiency_negative_regime`].
pub fn rase_efficiency(alpha_l: f64) -> Result<f64> {
    if !(alpha_l > 0.0) || !alpha_l.is_finite() {
        return Err(Error::Domain(format!(
            "rephasing efficiency needs alpha_l > 0 (got {alpha_l})"
        )));
    }
    let s = (0.5 * alpha_l).sinh();
    Ok((1.0 + 8.0 * s * s - 2.0) / (2.0 * alpha_l.exp_m1()))
}

/// The printed efficiency formula has numerator `4 cosh(aL) - 5`, which is
/// negative below `aL = ln 2`.
pub fn efficiency_negative_regime(alpha_l: f64) -> bool {
    alpha_l < std::f64::consts::LN_2
}

pub fn scale_efficiency(eta: f64, d: &DecayScaling) -> Result<f64> {
    if !eta.is_finite() {
        return invalid(format!("efficiency {eta} is not finite"));
    }
    Ok(eta * d.factor()?)
}

/// ASE/RASE two-mode state: a two-mode squeezed vacuum with
/// `cosh^2 r = e^{aL}`, then transmission `l` on both arms and an extra
/// `t_r` on the RASE arm.
pub fn lossy_tmsv_state(g: &GainFeature) -> Result<GaussianState> {
    g.validate()?;
    GaussianState::vacuum_labeled(vec!["ASE".into(), "RASE".into()])?
        .two_mode_squeeze(SqueezeParams::new(g.squeeze_r(), ASE_MODE, RASE_MODE)?)?
        .apply_loss(LossChannel::new(g.transmission_l, ASE_MODE)?)?
        .apply_loss(LossChannel::new(g.transmission_l, RASE_MODE)?)?
        .apply_loss(LossChannel::new(g.reph_transmission, RASE_MODE)?)
}

/// `<(du)^2> + <(dv)^2>` for `u = sqrt(b) x_A + sqrt(1-b) x_R`,
/// `v = sqrt(b) p_A - sqrt(1-b) p_R`, from the ASE/RASE covariance block
/// ordered `(x_A, p_A, x_R, p_R)`.
pub fn total_variance_from_cov(cov: &nalgebra::Matrix4<f64>, b: f64) -> f64 {
    let (wa, wr) = (b.sqrt(), (1.0 - b).sqrt());
    let var_u = b * cov[(0, 0)] + (1.0 - b) * cov[(2, 2)] + 2.0 * wa * wr * cov[(0, 2)];
    let var_v = b * cov[(1, 1)] + (1.0 - b) * cov[(3, 3)] - 2.0 * wa * wr * cov[(1, 3)];
    var_u + var_v
}

fn check_b(b: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&b) {
        return invalid(format!("weight b = {b} outside [0, 1]"));
    }
    Ok(())
}

pub fn insep_curve(g: &GainFeature, b_grid: &[f64]) -> Result<Vec<InsepPoint>> {
    for &b in b_grid {
        check_b(b)?;
    }
    let block = lossy_tmsv_state(g)?.two_mode_block(ASE_MODE, RASE_MODE)?;
    Ok(b_grid
        .iter()
        .map(|&b| InsepPoint { b, total_variance: total_variance_from_cov(&block, b) })
        .collect())
}

/// Minimizes the model curve over `b` by golden-section search, with both
/// endpoints and a coarse grid as fallbacks. Ties go to the smaller `b`.
pub fn find_min_b(g: &GainFeature) -> Result<InsepPoint> {
    let block = lossy_tmsv_state(g)?.two_mode_block(ASE_MODE, RASE_MODE)?;
    let f = |b: f64| total_variance_from_cov(&block, b);
    Ok(minimize_on_unit_interval(f))
}

pub(crate) fn minimize_on_unit_interval(f: impl Fn(f64) -> f64) -> InsepPoint {
    let golden = |mut lo: f64, mut hi: f64| {
        let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = hi - inv_phi * (hi - lo);
        let mut d = lo + inv_phi * (hi - lo);
        let (mut fc, mut fd) = (f(c), f(d));
        while hi - lo > MIN_B_TOL {
            if fc <= fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - inv_phi * (hi - lo);
                fc = f(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + inv_phi * (hi - lo);
                fd = f(d);
            }
        }
        let b = 0.5 * (lo + hi);
        InsepPoint { b, total_variance: f(b) }
    };

    // Candidates in ascending b so a strict comparison keeps the smaller b on ties.
    let better = |cand: InsepPoint, best: InsepPoint| {
        let tol = 1e-12 * best.total_variance.abs().max(1.0);
        cand.total_variance < best.total_variance - tol
            || ((cand.total_variance - best.total_variance).abs() <= tol && cand.b < best.b)
    };

    let mut best = InsepPoint { b: 0.0, total_variance: f(0.0) };
    for cand in [golden(0.0, 1.0), InsepPoint { b: 1.0, total_variance: f(1.0) }] {
        if better(cand, best) {
            best = cand;
        }
    }

    // Coarse grid guard for curves that are not unimodal.
    let step = 1.0 / (FALLBACK_GRID - 1) as f64;
    let (k_min, f_min) = (0..FALLBACK_GRID)
        .map(|k| (k, f(k as f64 * step)))
        .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
    if f_min < best.total_variance - 1e-12 * best.total_variance.abs().max(1.0) {
        let lo = (k_min as f64 - 1.0).max(0.0) * step;
        let hi = (k_min as f64 + 1.0).min((FALLBACK_GRID - 1) as f64) * step;
        let refined = golden(lo, hi);
        best = if refined.total_variance <= f_min {
            refined
        } else {
            InsepPoint { b: k_min as f64 * step, total_variance: f_min }
        };
    }
    best
}

/// Picks `t_r` so the simulated end-to-end efficiency matches an observed one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RephasingFit {
    /// `t_r = eta_observed`: the lossy two-mode state has unit intrinsic
    /// recall, so its measured efficiency equals `t_r`.
    #[default]
    Direct,
    /// `t_r = eta_observed / eta_formula(aL)`, clamped to `[0, 1]`.
    RelativeToFormula,
}

pub fn fit_reph_transmission(eta_observed: f64, alpha_l: f64, mode: RephasingFit) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta_observed) {
        return invalid(format!("observed efficiency {eta_observed} outside [0, 1]"));
    }
    match mode {
        RephasingFit::Direct => Ok(eta_observed),
        RephasingFit::RelativeToFormula => {
            let model = rase_efficiency(alpha_l)?;
            if model <= 0.0 {
                return Err(Error::Domain(format!(
                    "formula efficiency {model} at alpha_l = {alpha_l} is not positive"
                )));
            }
            Ok((eta_observed / model).clamp(0.0, 1.0))
        }
    }
}

/// Evenly spaced grid on `[lo, hi]` with exact endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let last = (n - 1) as f64;
            (0..n)
                .map(|k| {
                    if k == n - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * k as f64 / last
                    }
                })
                .collect()
        }
    }
}
