use std::f64::consts::{FRAC_PI_3, TAU};

use rase_core::analysis::{build_efficiency_curve, fit_loss, LossPoint, RunSummary};
use rase_core::estimators::{
    estimate_phase, extract_quadratures, variance_of, ExtractOptions, Field, Normalization, SpectralWindow,
    WindowFunction,
};
use rase_core::model::{ase_variance, lossy_tmsv_state, rase_efficiency, DecayScaling, GainFeature};
use rase_core::pipeline::simulate_quadratures;
use rase_core::stats::{mean, sample_covariance};
use rase_core::synth::{synthesize_run_par, synthesize_shot_with_phase, NoiseModel, SequenceConfig, SequenceKind};

fn run_cfg(alpha_l: f64, l: f64, t_r: f64, n: usize, seed: u64) -> SequenceConfig {
    SequenceConfig {
        gain: GainFeature::new(alpha_l, l, t_r).unwrap(),
        n_shots: n,
        rng_seed: seed,
        ..Default::default()
    }
}

#[test]
fn sample_covariance_converges_to_model() {
    let cfg = run_cfg(1.4, 0.11, 0.5, 9000, 1001);
    let run = simulate_quadratures(&cfg, &NoiseModel::default(), &ExtractOptions::default()).unwrap();
    let cols: [Vec<f64>; 4] = [
        run.ase.iter().map(|q| q.x).collect(),
        run.ase.iter().map(|q| q.p).collect(),
        run.rase.iter().map(|q| q.x).collect(),
        run.rase.iter().map(|q| q.p).collect(),
    ];
    let model = lossy_tmsv_state(&cfg.gain).unwrap().two_mode_block(0, 1).unwrap();
    let n = cols[0].len() as f64;
    for i in 0..4 {
        for j in 0..4 {
            let est = sample_covariance(&cols[i], &cols[j]);
            let se = ((model[(i, i)] * model[(j, j)] + model[(i, j)].powi(2)) / n).sqrt();
            assert!(
                (est - model[(i, j)]).abs() < 4.0 * se,
                "cov[{i}][{j}] = {est}, model {} (se {se})",
                model[(i, j)]
            );
        }
    }
}

#[test]
fn ase_variance_matches_model_at_high_gain() {
    let cfg = run_cfg(1.4, 0.11, 1.0, 10_000, 1002);
    let run = simulate_quadratures(&cfg, &NoiseModel::default(), &ExtractOptions::default()).unwrap();
    let v = variance_of(&run.ase).unwrap();
    let target = ase_variance(&cfg.gain);
    assert!((v.mean_var - target).abs() < 3.0 * v.se, "{} vs {target} (se {})", v.mean_var, v.se);
}

#[test]
fn vacuum_normalization_holds_for_every_window() {
    let cfg = run_cfg(0.0, 0.11, 0.14, 6000, 1003);
    let noise = NoiseModel { vacuum_psd: 2.5, ..Default::default() };
    let recs = synthesize_run_par(&cfg, &noise).unwrap();
    let norm = Normalization::from_background(&recs, &cfg).unwrap();
    assert!((norm.sigma2 / 2.5 - 1.0).abs() < 0.01);
    let tl = cfg.timeline();
    for field in [Field::Ase, Field::Rase] {
        for function in [WindowFunction::Rect, WindowFunction::Hann] {
            for len in [None, Some(4.0), Some(1.5)] {
                let mut w = SpectralWindow::for_field(&cfg, field, 1e5, function);
                if let Some(len) = len {
                    w = w.narrowed(len).unwrap();
                }
                let pairs: Vec<_> = recs
                    .iter()
                    .filter(|r| !r.background)
                    .map(|r| extract_quadratures(r, &tl, &w, r.truth.interferometer_phase_rad, &norm).unwrap())
                    .collect();
                let v = variance_of(&pairs).unwrap();
                assert!((v.mean_var - 1.0).abs() < 3.0 * v.se, "{field} {function:?} {len:?}: {v:?}");
            }
        }
    }
}

#[test]
fn phase_estimate_is_accurate_at_default_amplitude() {
    let cfg = run_cfg(0.8, 0.11, 0.14, 200, 1004);
    let noise = NoiseModel::default();
    let norm = Normalization::nominal(&noise);
    let errs: Vec<f64> = (0..200)
        .map(|id| {
            let rec = synthesize_shot_with_phase(&cfg, &noise, id, FRAC_PI_3).unwrap();
            let est = estimate_phase(&rec, &cfg, &norm).unwrap();
            (est.phase_rad - FRAC_PI_3 + 0.5 * TAU).rem_euclid(TAU) - 0.5 * TAU
        })
        .collect();
    let worst = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    assert!(worst < 0.05, "max error {worst}");
    // two pulses of amplitude A: per-shot error sd is sqrt(2) / (4 A)
    let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
    let sd = 2f64.sqrt() / (4.0 * cfg.ref_pulse.amplitude);
    assert!(rms < 1.3 * sd, "rms {rms} vs {sd}");
    assert!(mean(&errs).abs() < 4.0 * sd / (errs.len() as f64).sqrt());
}

#[test]
fn truth_phases_are_uniform() {
    let cfg = run_cfg(0.8, 0.11, 0.14, 4000, 1005);
    let recs = synthesize_run_par(&cfg, &NoiseModel::default()).unwrap();
    const BINS: usize = 20;
    let mut counts = [0usize; BINS];
    for r in &recs {
        let th = r.truth.interferometer_phase_rad;
        assert!((0.0..TAU).contains(&th));
        counts[(th / TAU * BINS as f64) as usize] += 1;
    }
    let expected = recs.len() as f64 / BINS as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 19 degrees of freedom, 99.9th percentile
    assert!(chi2 < 43.82, "chi2 = {chi2}");
}

#[test]
fn noisy_loss_fit_recovers_l() {
    let points: Vec<LossPoint> = [0.4, 0.8, 1.4, 2.0]
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let cfg = run_cfg(a, 0.11, 0.14, 9000, 1100 + i as u64);
            let run = simulate_quadratures(&cfg, &NoiseModel::default(), &ExtractOptions::default()).unwrap();
            let v = variance_of(&run.ase).unwrap();
            LossPoint { alpha_l: a, variance: v.mean_var, se: Some(v.se) }
        })
        .collect();
    let fit = fit_loss(&points).unwrap();
    assert!((fit.l - 0.11).abs() < 3.0 * fit.l_se, "{fit:?}");
}

fn rase_summary(alpha_l: f64, t_r: f64, n: usize, seed: u64) -> RunSummary {
    let cfg = run_cfg(alpha_l, 0.11, t_r, n, seed);
    let run = simulate_quadratures(&cfg, &NoiseModel::default(), &ExtractOptions::default()).unwrap();
    RunSummary::from_run(&run, alpha_l, SequenceKind::Rase).unwrap()
}

#[test]
fn efficiency_curve_peaks_near_fourteen_percent() {
    let grid = [0.8, 1.0, 1.2, 1.5];
    let runs: Vec<_> = grid.iter().enumerate().map(|(i, &a)| rase_summary(a, 0.14, 6000, 1200 + i as u64)).collect();
    let curve = build_efficiency_curve(&runs, &DecayScaling::default()).unwrap();
    let peak = curve.iter().max_by(|a, b| a.eta_measured.total_cmp(&b.eta_measured)).unwrap();
    assert!((0.8..=1.5).contains(&peak.alpha_l));
    assert!((peak.eta_measured - 0.14).abs() < 3.0 * peak.eta_se + 0.02, "{peak:?}");
}

#[test]
fn formula_efficiency_runs_track_the_overlay() {
    // runs whose rephasing transmission equals the formula value reproduce it
    let grid = [0.8, 1.0, 1.5, 2.0];
    let runs: Vec<_> = grid
        .iter()
        .enumerate()
        .map(|(i, &a)| rase_summary(a, rase_efficiency(a).unwrap(), 6000, 1300 + i as u64))
        .collect();
    for p in build_efficiency_curve(&runs, &DecayScaling::default()).unwrap() {
        assert!((p.eta_measured - p.eta_model).abs() < 3.0 * p.eta_se, "{p:?}");
    }
}

#[test]
fn i4le_area_ratio_gives_the_echo_efficiency() {
    let mut cfg = run_cfg(1.0, 0.11, 0.3, 400, 1400);
    cfg.kind = SequenceKind::I4le;
    let run = simulate_quadratures(&cfg, &NoiseModel::default(), &ExtractOptions::default()).unwrap();
    let summary = RunSummary::from_run(&run, 1.0, SequenceKind::I4le).unwrap();
    let (ratio, se) = summary.area_ratio.unwrap();
    // Coherent powers 4 a^2 l cosh^2 r and 4 a^2 l t_r sinh^2 r, plus the
    // share of the ASE/RASE excess noise falling in the 1 us pulse windows.
    let g = cfg.gain;
    let (c2, s2) = (g.squeeze_r().cosh().powi(2), g.squeeze_r().sinh().powi(2));
    let a2 = 4.0 * cfg.input_pulse.amplitude.powi(2) * g.transmission_l;
    let share = cfg.input_pulse.length_us / cfg.ase_window_us;
    let excess_a = ase_variance(&g) - 1.0;
    let seed = a2 * c2 + share * 2.0 * excess_a;
    let echo = a2 * g.reph_transmission * s2 + share * 2.0 * g.reph_transmission * excess_a;
    let target = echo / seed;
    assert!((ratio - target).abs() < 3.0 * se, "{ratio} vs {target} (se {se})");

    let d = DecayScaling::new(59.2, 20.0, 25.0).unwrap();
    let curve = build_efficiency_curve(&[summary], &d).unwrap();
    let f = (-5.0f64 / 59.2).exp();
    assert!((curve[0].eta_measured - ratio * f).abs() < 1e-12);
    assert!((curve[0].eta_model - rase_efficiency(1.0).unwrap() * f).abs() < 1e-12);
}
