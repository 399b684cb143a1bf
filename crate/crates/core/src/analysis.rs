//! Curve-level analysis: loss fits, efficiency curves and inseparability.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{csv_err, efficiency_from_runs, variance_of, QuadraturePair, RunQuadratures, VarianceEstimate};
use crate::model::{
    efficiency_negative_regime, insep_curve, rase_efficiency, scale_efficiency, DecayScaling, GainFeature,
    PROBE_SATURATION_ALPHA_L,
};
use crate::stats::{pairwise_sum, sample_variance, variance_se};
use crate::synth::SequenceKind;

/// One `(aL, mean ASE variance)` observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub alpha_l: f64,
    pub variance: f64,
    /// Standard error; when every point has one the fit is weighted.
    pub se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossFit {
    pub l: f64,
    pub l_se: f64,
    pub weighted: bool,
    /// Observed minus fitted variance, per point.
    pub residuals: Vec<f64>,
    pub chi2: f64,
}

/// Least squares for `l` in `V - 1 = 2 l (e^{aL} - 1)`, which is linear in `l`.
///
/// With standard errors on every point the fit is weighted and `l_se` comes
/// from the quoted errors; otherwise it comes from the residual scatter.
pub fn fit_loss(points: &[LossPoint]) -> Result<LossFit> {
    if points.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.alpha_l > 0.0) || !p.variance.is_finite()) {
        return invalid(format!("fit point ({}, {}) needs alpha_l > 0 and a finite variance", p.alpha_l, p.variance));
    }
    if points.iter().all(|p| p.alpha_l == points[0].alpha_l) {
        return Err(Error::Fit("degenerate design: every point has the same alpha_l".into()));
    }
    let weighted = points.iter().all(|p| p.se.is_some());
    if !weighted && points.iter().any(|p| p.se.is_some()) {
        return invalid("either every point or no point may carry a standard error");
    }
    let w: Vec<f64> = if weighted {
        let mut w = Vec::with_capacity(points.len());
        for p in points {
            let se = p.se.unwrap_or(f64::NAN);
            if !(se > 0.0) || !se.is_finite() {
                return invalid(format!("standard error {se} at alpha_l = {} must be > 0", p.alpha_l));
            }
            w.push(1.0 / (se * se));
        }
        w
    } else {
        vec![1.0; points.len()]
    };
    let a: Vec<f64> = points.iter().map(|p| 2.0 * p.alpha_l.exp_m1()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.variance - 1.0).collect();
    let saa = pairwise_sum(&a.iter().zip(&w).map(|(a, w)| w * a * a).collect::<Vec<_>>());
    let say = pairwise_sum(&a.iter().zip(&y).zip(&w).map(|((a, y), w)| w * a * y).collect::<Vec<_>>());
    let l = say / saa;
    let residuals: Vec<f64> = a.iter().zip(&y).map(|(a, y)| y - l * a).collect();
    let chi2 = pairwise_sum(&residuals.iter().zip(&w).map(|(r, w)| w * r * r).collect::<Vec<_>>());
    let l_se = if weighted {
        (1.0 / saa).sqrt()
    } else {
        (chi2 / (points.len() - 1) as f64 / saa).sqrt()
    };
    if !l.is_finite() || !l_se.is_finite() {
        return Err(Error::Fit(format!("non-finite fit (residuals {residuals:?})")));
    }
    Ok(LossFit { l, l_se, weighted, residuals, chi2 })
}

/// Exact inverse of the ASE variance model: `aL = ln((V - 1) / (2 l) + 1)`.
pub fn invert_ase_for_alpha(ase_variance: f64, l: f64) -> Result<f64> {
    if !(l > 0.0 && l <= 1.0) {
        return invalid(format!("transmission l = {l} must lie in (0, 1]"));
    }
    if !(ase_variance >= 1.0) {
        return Err(Error::NoGain(ase_variance));
    }
    Ok(((ase_variance - 1.0) / (2.0 * l)).ln_1p())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    Probe,
    AseInversion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub alpha_l: f64,
    pub source: AlphaSource,
    /// The probe value was at or above the saturation threshold.
    pub probe_saturated: bool,
}

/// Trusts a probe-style optical depth below saturation; above it, falls back
/// to inverting the measured ASE variance and flags the point.
pub fn trusted_alpha(probe_alpha_l: f64, ase_variance: f64, l: f64) -> Result<AlphaEstimate> {
    if probe_alpha_l >= PROBE_SATURATION_ALPHA_L {
        Ok(AlphaEstimate {
            alpha_l: invert_ase_for_alpha(ase_variance, l)?,
            source: AlphaSource::AseInversion,
            probe_saturated: true,
        })
    } else {
        Ok(AlphaEstimate { alpha_l: probe_alpha_l, source: AlphaSource::Probe, probe_saturated: false })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Rase,
    I4leScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFlag {
    ProbeSaturated,
    NegativeModel,
    NegativeMeasured,
    LowConfidenceShots,
}

impl fmt::Display for CurveFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveFlag::ProbeSaturated => "probe_saturated",
            CurveFlag::NegativeModel => "negative_model",
            CurveFlag::NegativeMeasured => "negative_measured",
            CurveFlag::LowConfidenceShots => "low_confidence_shots",
        })
    }
}

/// Reduced statistics of one simulated or measured run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub alpha_l: f64,
    pub kind: SequenceKind,
    pub ase: VarianceEstimate,
    pub rase: VarianceEstimate,
    /// Echo over seed spectral area, with its standard error (I4LE only).
    pub area_ratio: Option<(f64, f64)>,
    pub probe_saturated: bool,
    pub rejected_shots: usize,
}

impl RunSummary {
    pub fn from_run(run: &RunQuadratures, alpha_l: f64, kind: SequenceKind) -> Result<Self> {
        let area_ratio = match kind {
            SequenceKind::I4le => Some(run.area_ratio()?),
            SequenceKind::Rase => None,
        };
        Ok(Self {
            alpha_l,
            kind,
            ase: variance_of(&run.ase)?,
            rase: variance_of(&run.rase)?,
            area_ratio,
            probe_saturated: alpha_l >= PROBE_SATURATION_ALPHA_L,
            rejected_shots: run.rejected.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCurvePoint {
    pub alpha_l: f64,
    pub eta_measured: f64,
    pub eta_se: f64,
    pub eta_model: f64,
    pub kind: CurveKind,
    pub flags: Vec<CurveFlag>,
}

/// RASE points from the variance ratio; I4LE points from the area ratio,
/// rescaled to the target delay. The model overlay is the printed formula,
/// rescaled the same way for I4LE.
pub fn build_efficiency_curve(runs: &[RunSummary], d: &DecayScaling) -> Result<Vec<EfficiencyCurvePoint>> {
    let factor = d.factor()?;
    runs.iter()
        .map(|run| {
            let model = rase_efficiency(run.alpha_l)?;
            let (kind, eta, se, eta_model) = match (run.kind, run.area_ratio) {
                (SequenceKind::Rase, _) => {
                    let (eta, se) = efficiency_from_runs(&run.ase, &run.rase)?;
                    (CurveKind::Rase, eta, se, model)
                }
                (SequenceKind::I4le, Some((ratio, se))) => {
                    (CurveKind::I4leScaled, scale_efficiency(ratio, d)?, se * factor, scale_efficiency(model, d)?)
                }
                (SequenceKind::I4le, None) => return invalid("I4LE run is missing its area ratio"),
            };
            let mut flags = Vec::new();
            if run.probe_saturated {
                flags.push(CurveFlag::ProbeSaturated);
            }
            if efficiency_negative_regime(run.alpha_l) {
                flags.push(CurveFlag::NegativeModel);
            }
            if eta < 0.0 {
                flags.push(CurveFlag::NegativeMeasured);
            }
            if run.rejected_shots > 0 {
                flags.push(CurveFlag::LowConfidenceShots);
            }
            Ok(EfficiencyCurvePoint { alpha_l: run.alpha_l, eta_measured: eta, eta_se: se, eta_model, kind, flags })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsepEstimate {
    pub b: f64,
    pub total_variance: f64,
    pub se: f64,
    /// `(2 - total_variance) / se`; positive means below the separable bound.
    pub sigma_violation: f64,
    pub var_u: f64,
    pub var_v: f64,
}

/// Matches RASE pairs to ASE pairs by shot id, in ASE order.
fn pair_shots<'a>(ase: &'a [QuadraturePair], rase: &'a [QuadraturePair]) -> Result<Vec<(&'a QuadraturePair, &'a QuadraturePair)>> {
    if ase.len() != rase.len() {
        return Err(Error::Pairing(format!("{} ASE shots vs {} RASE shots", ase.len(), rase.len())));
    }
    let mut by_id: HashMap<u64, &QuadraturePair> = HashMap::with_capacity(rase.len());
    for r in rase {
        if by_id.insert(r.shot_id, r).is_some() {
            return Err(Error::Pairing(format!("duplicate RASE shot id {}", r.shot_id)));
        }
    }
    ase.iter()
        .map(|a| {
            by_id
                .remove(&a.shot_id)
                .map(|r| (a, r))
                .ok_or_else(|| Error::Pairing(format!("ASE shot {} has no RASE partner", a.shot_id)))
        })
        .collect()
}

fn check_b_grid(b_grid: &[f64]) -> Result<()> {
    match b_grid.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        Some(b) => invalid(format!("weighting b = {b} outside [0, 1]")),
        None => Ok(()),
    }
}

fn insep_at(pairs: &[(&QuadraturePair, &QuadraturePair)], b: f64) -> InsepEstimate {
    let (wa, wr) = (b.sqrt(), (1.0 - b).sqrt());
    let u: Vec<f64> = pairs.iter().map(|(a, r)| wa * a.x + wr * r.x).collect();
    let v: Vec<f64> = pairs.iter().map(|(a, r)| wa * a.p - wr * r.p).collect();
    let (var_u, var_v) = (sample_variance(&u), sample_variance(&v));
    let n = pairs.len();
    let se = variance_se(var_u, n).hypot(variance_se(var_v, n));
    let total_variance = var_u + var_v;
    InsepEstimate { b, total_variance, se, sigma_violation: (2.0 - total_variance) / se, var_u, var_v }
}

/// Total EPR variance on each `b`, from per-shot combinations of paired shots.
pub fn estimate_inseparability(ase: &[QuadraturePair], rase: &[QuadraturePair], b_grid: &[f64]) -> Result<Vec<InsepEstimate>> {
    check_b_grid(b_grid)?;
    let pairs = pair_shots(ase, rase)?;
    if pairs.len() < 2 {
        return invalid(format!("inseparability needs at least 2 paired shots, got {}", pairs.len()));
    }
    Ok(b_grid.par_iter().map(|&b| insep_at(&pairs, b)).collect())
}

/// As [`estimate_inseparability`], with standard errors from a shot-level
/// bootstrap (the same resampled shots are used at every `b`).
pub fn estimate_inseparability_bootstrap(
    ase: &[QuadraturePair],
    rase: &[QuadraturePair],
    b_grid: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<Vec<InsepEstimate>> {
    let base = estimate_inseparability(ase, rase, b_grid)?;
    if resamples < 2 {
        return invalid("bootstrap needs at least 2 resamples");
    }
    let pairs = pair_shots(ase, rase)?;
    let n = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<usize>> = (0..resamples).map(|_| (0..n).map(|_| rng.random_range(0..n)).collect()).collect();
    let totals: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|idx| {
            let sample: Vec<_> = idx.iter().map(|&i| pairs[i]).collect();
            b_grid.iter().map(|&b| insep_at(&sample, b).total_variance).collect()
        })
        .collect();
    Ok(base
        .into_iter()
        .enumerate()
        .map(|(j, e)| {
            let col: Vec<f64> = totals.iter().map(|t| t[j]).collect();
            let se = sample_variance(&col).sqrt();
            InsepEstimate { se, sigma_violation: (2.0 - e.total_variance) / se, ..e }
        })
        .collect())
}

/// Lowest total variance on the curve; ties go to the smaller `b`.
pub fn curve_minimum(curve: &[InsepEstimate]) -> Option<&InsepEstimate> {
    curve.iter().fold(None, |best: Option<&InsepEstimate>, e| match best {
        Some(m) if m.total_variance < e.total_variance || (m.total_variance == e.total_variance && m.b <= e.b) => Some(m),
        _ => Some(e),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayRow {
    pub b: f64,
    pub measured: Option<f64>,
    pub se: Option<f64>,
    pub model: f64,
}

/// Measured curve next to the model on the same `b` values. Without measured
/// points the model is evaluated on `b_grid`.
pub fn overlay_model(points: &[InsepEstimate], g: &GainFeature, b_grid: &[f64]) -> Result<Vec<OverlayRow>> {
    if points.is_empty() {
        check_b_grid(b_grid)?;
        return Ok(insep_curve(g, b_grid)?
            .into_iter()
            .map(|p| OverlayRow { b: p.b, measured: None, se: None, model: p.total_variance })
            .collect());
    }
    let bs: Vec<f64> = points.iter().map(|p| p.b).collect();
    let model = insep_curve(g, &bs)?;
    Ok(points
        .iter()
        .zip(model)
        .map(|(p, m)| OverlayRow { b: p.b, measured: Some(p.total_variance), se: Some(p.se), model: m.total_variance })
        .collect())
}

/// A row of a plot-ready curve table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub alpha_l: f64,
    pub value: f64,
    pub se: Option<f64>,
    pub model: Option<f64>,
    pub flags: Vec<String>,
}

impl From<&EfficiencyCurvePoint> for CurveRow {
    fn from(p: &EfficiencyCurvePoint) -> Self {
        Self {
            alpha_l: p.alpha_l,
            value: p.eta_measured,
            se: Some(p.eta_se),
            model: Some(p.eta_model),
            flags: p.flags.iter().map(|f| f.to_string()).collect(),
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Header `alpha_l,value,se,model,flags`; flags are `;`-separated.
pub fn write_curve_table(out: impl Write, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha_l", "value", "se", "model", "flags"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.alpha_l.to_string(), r.value.to_string(), opt(r.se), opt(r.model), r.flags.join(";")])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_table(input: impl std::io::Read) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("curve table lacks a '{name}' column")))
    };
    let (ia, iv) = (col("alpha_l")?, col("value")?);
    let (is, im, ifl) = (header.iter().position(|h| h == "se"), header.iter().position(|h| h == "model"), header.iter().position(|h| h == "flags"));
    let num = |s: &str, line: usize| -> Result<f64> {
        s.trim().parse().map_err(|_| Error::Format(format!("line {line}: '{s}' is not a number")))
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let field = |j: Option<usize>| j.and_then(|j| rec.get(j)).filter(|s| !s.trim().is_empty());
        rows.push(CurveRow {
            alpha_l: num(field(Some(ia)).unwrap_or(""), line)?,
            value: num(field(Some(iv)).unwrap_or(""), line)?,
            se: field(is).map(|s| num(s, line)).transpose()?,
            model: field(im).map(|s| num(s, line)).transpose()?,
            flags: field(ifl).map(|s| s.split(';').map(str::to_string).collect()).unwrap_or_default(),
        });
    }
    Ok(rows)
}

/// Header `b,total_variance,se,sigma_violation,model`.
pub fn write_insep_table(out: impl Write, curve: &[InsepEstimate], model: Option<&[OverlayRow]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["b", "total_variance", "se", "sigma_violation", "model"]).map_err(csv_err)?;
    for (i, e) in curve.iter().enumerate() {
        let m = model.and_then(|m| m.get(i)).map(|r| r.model);
        w.write_record([
            e.b.to_string(),
            e.total_variance.to_string(),
            e.se.to_string(),
            e.sigma_violation.to_string(),
            opt(m),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ExtractOptions, Field, NormalizationSource};
    use crate::model::{ase_variance, find_min_b, linspace};
    use crate::pipeline::simulate_quadratures;
    use crate::synth::{NoiseModel, SequenceConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn exact_points(l: f64) -> Vec<LossPoint> {
        [0.4, 0.8, 1.4, 2.0]
            .iter()
            .map(|&a| LossPoint {
                alpha_l: a,
                variance: ase_variance(&GainFeature::new(a, l, 1.0).unwrap()),
                se: None,
            })
            .collect()
    }

    fn vacuum_pairs(n: usize, seed: u64) -> (Vec<QuadraturePair>, Vec<QuadraturePair>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |field| {
            (0..n as u64)
                .map(|id| QuadraturePair { field, x: rng.sample(StandardNormal), p: rng.sample(StandardNormal), shot_id: id })
                .collect::<Vec<_>>()
        };
        let a = draw(Field::Ase);
        (a, draw(Field::Rase))
    }

    #[test]
    fn loss_fit_is_exact_on_model_points() {
        let fit = fit_loss(&exact_points(0.11)).unwrap();
        assert!((fit.l - 0.11).abs() < 1e-12, "{}", fit.l);
        assert!(fit.l_se < 1e-12);
    }

    #[test]
    fn loss_fit_on_flat_variance_is_zero() {
        let pts: Vec<_> = [0.5, 1.0, 1.5].iter().map(|&a| LossPoint { alpha_l: a, variance: 1.0, se: None }).collect();
        assert_eq!(fit_loss(&pts).unwrap().l, 0.0);
    }

    #[test]
    fn loss_fit_rejects_degenerate_designs() {
        let same: Vec<_> = (0..3).map(|i| LossPoint { alpha_l: 1.0, variance: 1.5 + i as f64 * 0.01, se: None }).collect();
        assert!(matches!(fit_loss(&same), Err(Error::Fit(_))));
        assert!(matches!(fit_loss(&same[..1]), Err(Error::Fit(_))));
        assert!(fit_loss(&[]).is_err());
    }

    #[test]
    fn weighted_fit_uses_quoted_errors() {
        let mut pts = exact_points(0.11);
        for p in pts.iter_mut() {
            p.se = Some(0.01 * p.variance);
        }
        let fit = fit_loss(&pts).unwrap();
        assert!(fit.weighted);
        assert!((fit.l - 0.11).abs() < 1e-12);
        assert!(fit.l_se > 0.0);
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(invert_ase_for_alpha(1.0, 0.11).unwrap(), 0.0);
        assert_relative_eq!(invert_ase_for_alpha(2.0 * 1f64.exp() - 1.0, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        let v = ase_variance(&GainFeature::new(1.4, 0.11, 1.0).unwrap());
        assert_relative_eq!(invert_ase_for_alpha(v, 0.11).unwrap(), 1.4, epsilon = 1e-12);
        assert!((invert_ase_for_alpha(1.672, 0.11).unwrap() - 1.4).abs() < 1e-3);
        assert!(matches!(invert_ase_for_alpha(0.99, 0.11), Err(Error::NoGain(_))));
        assert!(invert_ase_for_alpha(1.5, 0.0).is_err());
    }

    #[test]
    fn saturated_probe_falls_back_to_ase_inversion() {
        let v = ase_variance(&GainFeature::new(2.4, 0.11, 1.0).unwrap());
        let est = trusted_alpha(2.1, v, 0.11).unwrap();
        assert_eq!(est.source, AlphaSource::AseInversion);
        assert!(est.probe_saturated);
        assert_relative_eq!(est.alpha_l, 2.4, epsilon = 1e-12);
        let est = trusted_alpha(1.2, v, 0.11).unwrap();
        assert_eq!((est.alpha_l, est.source), (1.2, AlphaSource::Probe));
    }

    #[test]
    fn empty_runs_give_empty_curve() {
        assert!(build_efficiency_curve(&[], &DecayScaling::default()).unwrap().is_empty());
    }

    #[test]
    fn endpoints_are_single_arm_variances() {
        let (a, r) = vacuum_pairs(500, 3);
        let c = estimate_inseparability(&a, &r, &[0.0, 1.0]).unwrap();
        let va = variance_of(&a).unwrap();
        let vr = variance_of(&r).unwrap();
        assert!((c[0].total_variance - (vr.var_x + vr.var_p)).abs() < 1e-12);
        assert!((c[1].total_variance - (va.var_x + va.var_p)).abs() < 1e-12);
    }

    #[test]
    fn pairing_is_by_shot_id() {
        let (a, mut r) = vacuum_pairs(50, 4);
        let grid = linspace(0.0, 1.0, 11);
        let straight = estimate_inseparability(&a, &r, &grid).unwrap();
        r.reverse();
        assert_eq!(estimate_inseparability(&a, &r, &grid).unwrap(), straight);
        r[0].shot_id = 999;
        assert!(matches!(estimate_inseparability(&a, &r, &grid), Err(Error::Pairing(_))));
        assert!(matches!(estimate_inseparability(&a, &r[1..], &grid), Err(Error::Pairing(_))));
        assert!(estimate_inseparability(&a, &a, &[1.5]).is_err());
    }

    #[test]
    fn vacuum_curve_is_flat_at_two() {
        let (a, r) = vacuum_pairs(9000, 5);
        for e in estimate_inseparability(&a, &r, &linspace(0.0, 1.0, 21)).unwrap() {
            assert!((e.total_variance - 2.0).abs() < 4.0 * e.se, "{e:?}");
            assert!(e.sigma_violation.abs() < 4.0);
        }
    }

    #[test]
    fn vacuum_minimum_is_not_biased_below_two() {
        // the min over b is biased low by selection, but on average it must
        // stay within 3 per-run standard errors of the separable bound
        let grid = linspace(0.0, 1.0, 51);
        let mins: Vec<InsepEstimate> = (0..100)
            .map(|s| {
                let (a, r) = vacuum_pairs(2000, 100 + s);
                *curve_minimum(&estimate_inseparability(&a, &r, &grid).unwrap()).unwrap()
            })
            .collect();
        let m = crate::stats::mean(&mins.iter().map(|e| e.total_variance).collect::<Vec<_>>());
        let se = crate::stats::mean(&mins.iter().map(|e| e.se).collect::<Vec<_>>());
        assert!(m >= 2.0 - 3.0 * se, "{m} vs se {se}");
        assert!(m < 2.0, "selection bias should show up: {m}");
    }

    #[test]
    fn bootstrap_se_matches_gaussian_se() {
        let (a, r) = vacuum_pairs(3000, 8);
        let grid = [0.0, 0.5, 1.0];
        let g = estimate_inseparability(&a, &r, &grid).unwrap();
        let b = estimate_inseparability_bootstrap(&a, &r, &grid, 300, 1).unwrap();
        for (g, b) in g.iter().zip(&b) {
            assert_eq!(g.total_variance, b.total_variance);
            assert!((b.se / g.se - 1.0).abs() < 0.3, "{} vs {}", b.se, g.se);
        }
    }

    #[test]
    fn minimum_ties_go_to_smaller_b() {
        let e = |b, t| InsepEstimate { b, total_variance: t, se: 1.0, sigma_violation: 0.0, var_u: 0.0, var_v: 0.0 };
        let c = [e(0.0, 2.0), e(0.3, 1.9), e(0.6, 1.9), e(1.0, 2.1)];
        assert_eq!(curve_minimum(&c).unwrap().b, 0.3);
        assert!(curve_minimum(&[]).is_none());
    }

    #[test]
    fn model_only_overlay_is_the_model_curve() {
        let g = GainFeature::new(0.8, 0.11, 0.14).unwrap();
        let grid = linspace(0.0, 1.0, 5);
        let rows = overlay_model(&[], &g, &grid).unwrap();
        let model = insep_curve(&g, &grid).unwrap();
        for (r, m) in rows.iter().zip(&model) {
            assert_eq!((r.b, r.model, r.measured), (m.b, m.total_variance, None));
        }
        let vac = overlay_model(&[], &g.with_alpha_l(0.0), &grid).unwrap();
        assert!(vac.iter().all(|r| (r.model - 2.0).abs() < 1e-12));
    }

    #[test]
    fn curve_table_roundtrip() {
        let rows = vec![
            CurveRow { alpha_l: 0.5, value: -0.1, se: Some(0.02), model: Some(-0.2), flags: vec!["negative_model".into()] },
            CurveRow { alpha_l: 1.0, value: 0.341, se: None, model: None, flags: vec![] },
        ];
        let mut buf = Vec::new();
        write_curve_table(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("alpha_l,value,se,model,flags\n"));
        assert_eq!(read_curve_table(&buf[..]).unwrap(), rows);
        assert!(matches!(read_curve_table(&b"x,y\n1,2\n"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn excess_noise_does_not_lower_total_variance() {
        let grid = linspace(0.0, 1.0, 11);
        let cfg = SequenceConfig { n_shots: 1500, rng_seed: 21, ..Default::default() };
        let opts = ExtractOptions { normalization: NormalizationSource::Nominal, ..Default::default() };
        let curve = |excess| {
            let noise = NoiseModel { excess_noise: excess, ..Default::default() };
            let run = simulate_quadratures(&cfg, &noise, &opts).unwrap();
            estimate_inseparability(&run.ase, &run.rase, &grid).unwrap()
        };
        let clean = curve(0.0);
        for excess in [0.05, 0.2] {
            let noisy = curve(excess);
            for (c, n) in clean.iter().zip(&noisy) {
                assert!(n.total_variance > c.total_variance, "b = {}: {} vs {}", c.b, n.total_variance, c.total_variance);
            }
        }
    }

    #[test]
    fn simulated_curve_tracks_model_minimum() {
        let g = GainFeature::new(0.8, 0.11, 0.14).unwrap();
        let cfg = SequenceConfig { gain: g, n_shots: 4000, rng_seed: 33, ..Default::default() };
        let run = simulate_quadratures(&cfg, &NoiseModel::default(), &ExtractOptions::default()).unwrap();
        let model_min = find_min_b(&g).unwrap();
        let est = estimate_inseparability(&run.ase, &run.rase, &[model_min.b]).unwrap()[0];
        assert!((est.total_variance - model_min.total_variance).abs() < 3.0 * est.se, "{est:?} vs {model_min:?}");
    }

    proptest! {
        #[test]
        fn inversion_undoes_ase_model(a in 0.0..2.5f64, l in 0.01..1.0f64) {
            let v = ase_variance(&GainFeature::new(a, l, 1.0).unwrap());
            prop_assert!((invert_ase_for_alpha(v, l).unwrap() - a).abs() < 1e-10);
        }

        #[test]
        fn noiseless_fit_recovers_l(l in 0.01..1.0f64) {
            let fit = fit_loss(&exact_points(l)).unwrap();
            prop_assert!(((fit.l - l) / l).abs() < 1e-10);
        }
    }
}
