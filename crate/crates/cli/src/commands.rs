//! Subcommand implementations. Each writes its tables plus a
//! `manifest.json` into its output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rase_core::analysis::{
    build_efficiency_curve, curve_minimum, estimate_inseparability, estimate_inseparability_bootstrap, fit_loss,
    invert_ase_for_alpha, overlay_model, read_curve_table, trusted_alpha, write_curve_table, write_insep_table,
    AlphaEstimate, CurveRow, EfficiencyCurvePoint, InsepEstimate, LossFit, LossPoint, RunSummary,
};
use rase_core::estimators::{
    variance_bootstrap, variance_of, write_quadrature_table, write_variance_summary, Field, Normalization,
    VarianceEstimate,
};
use rase_core::model::{
    ase_variance, efficiency_negative_regime, find_min_b, insep_curve, rase_efficiency, InsepPoint,
    PROBE_SATURATION_ALPHA_L,
};
use rase_core::pipeline::{analyze_dump, write_run_dump};
use rase_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const DUMP_FILE: &str = "records.rshot";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input files and their SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output files (relative to the manifest) and their SHA-256.
    pub files: BTreeMap<String, String>,
    pub created_unix_s: u64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = File::open(path).map_err(|e| CliError::io(format!("hashing {}", path.display()), e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(format!("hashing {}", path.display()), e))?;
        if n == 0 {
            return Ok(hex::encode(h.finalize()));
        }
        h.update(&buf[..n]);
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating output directory {}", dir.display()), e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

/// Runs `f` on a fresh file at `dir/name` and returns the path.
fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> CliResult<()>) -> CliResult<PathBuf> {
    let path = dir.join(name);
    let mut w = create(&path)?;
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<PathBuf> {
    write_file(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::Core(Error::Format(e.to_string())))?;
        writeln!(w).map_err(|e| CliError::io(format!("writing {name}"), e))
    })
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    inputs: &[&Path],
    outputs: &[PathBuf],
) -> CliResult<PathBuf> {
    let mut files = BTreeMap::new();
    for p in outputs {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        files.insert(name, sha256_file(p)?);
    }
    let mut ins = BTreeMap::new();
    for p in inputs {
        ins.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = Manifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.sequence.rng_seed,
        config_sha256: cfg.hash(),
        inputs: ins,
        files,
        created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    write_json(dir, MANIFEST_FILE, &manifest)
}

fn csv_io(name: &str) -> impl Fn(Error) -> CliError + '_ {
    move |e| match e {
        Error::Io(io) => CliError::io(format!("writing {name}"), io),
        other => CliError::Core(other),
    }
}

/// Model tables: ASE variance and rephasing efficiency over the optical-depth
/// grid, and the inseparability curve over the weighting grid.
pub fn cmd_curves(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    ensure_dir(out)?;
    let g = cfg.sequence.gain;
    let alphas = cfg.analysis.alpha_grid.values();

    let variance_rows: Vec<CurveRow> = alphas
        .iter()
        .map(|&a| CurveRow { alpha_l: a, value: ase_variance(&g.with_alpha_l(a)), se: None, model: None, flags: vec![] })
        .collect();
    let efficiency_rows: Vec<CurveRow> = alphas
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            let mut flags = vec![];
            if efficiency_negative_regime(a) {
                flags.push("negative_model".to_string());
            }
            Ok(CurveRow { alpha_l: a, value: rase_efficiency(a)?, se: None, model: None, flags })
        })
        .collect::<rase_core::Result<_>>()?;

    let b_grid = cfg.analysis.b_grid.values();
    let insep = insep_curve(&g, &b_grid)?;
    let model_min = find_min_b(&g)?;

    let mut files = vec![
        write_file(out, "ase_variance.csv", |w| write_curve_table(w, &variance_rows).map_err(csv_io("ase_variance.csv")))?,
        write_file(out, "efficiency.csv", |w| write_curve_table(w, &efficiency_rows).map_err(csv_io("efficiency.csv")))?,
        write_file(out, "inseparability.csv", |w| write_model_insep(w, &insep))?,
    ];
    files.push(write_json(out, "curves_summary.json", &CurvesSummary { gain: g, model_minimum: model_min })?);
    files.push(write_manifest(out, "curves", cfg, &[], &files)?);
    Ok(files)
}

#[derive(Serialize)]
struct CurvesSummary {
    gain: rase_core::model::GainFeature,
    model_minimum: InsepPoint,
}

fn write_model_insep(w: &mut impl Write, rows: &[InsepPoint]) -> CliResult<()> {
    let io = |e| CliError::io("writing inseparability.csv", e);
    writeln!(w, "b,model").map_err(io)?;
    for p in rows {
        writeln!(w, "{},{}", p.b, p.total_variance).map_err(io)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub dump: PathBuf,
    pub manifest: PathBuf,
    pub n_records: usize,
}

/// Synthesizes the configured run into a record dump.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> CliResult<SimulateOutput> {
    ensure_dir(out)?;
    let dump = out.join(DUMP_FILE);
    let n_records = write_run_dump(&dump, &cfg.sequence, &cfg.noise).map_err(|e| match e {
        Error::Io(io) => CliError::io(format!("writing {}", dump.display()), io),
        other => CliError::Core(other),
    })?;
    let config = write_file(out, "config.toml", |w| {
        w.write_all(cfg.to_toml_string()?.as_bytes()).map_err(|e| CliError::io("writing config.toml", e))
    })?;
    let manifest = write_manifest(out, "simulate", cfg, &[], &[dump.clone(), config])?;
    Ok(SimulateOutput { dump, manifest, n_records })
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisSummary {
    pub kind: rase_core::synth::SequenceKind,
    pub alpha: AlphaEstimate,
    pub n_signal_shots: usize,
    pub rejected_shots: usize,
    pub normalization: Option<Normalization>,
    pub window_us: Option<f64>,
    pub phase_correction: bool,
    pub bootstrap: bool,
    pub ase: VarianceEstimate,
    pub rase: VarianceEstimate,
    pub ase_model: f64,
    pub efficiency: Option<EfficiencyCurvePoint>,
    pub efficiency_note: Option<String>,
    pub insep_minimum: InsepEstimate,
    pub model_minimum: InsepPoint,
}

/// Extracts quadratures from a dump and writes variances, the efficiency
/// point and the inseparability curve.
pub fn cmd_analyze(dump: &Path, cfg: &ExperimentConfig, out: &Path) -> CliResult<AnalysisSummary> {
    ensure_dir(out)?;
    let opts = &cfg.analysis.extract;
    let (header, run) = analyze_dump(dump, opts).map_err(|e| match e {
        Error::Io(io) => CliError::io(format!("reading {}", dump.display()), io),
        other => CliError::Core(other),
    })?;
    let seq = &header.sequence;
    let a = &cfg.analysis;
    let (ase, rase) = if a.bootstrap {
        (
            variance_bootstrap(&run.ase, a.bootstrap_resamples, a.bootstrap_seed)?,
            variance_bootstrap(&run.rase, a.bootstrap_resamples, a.bootstrap_seed.wrapping_add(1))?,
        )
    } else {
        (variance_of(&run.ase)?, variance_of(&run.rase)?)
    };

    // the configured optical depth plays the role of the probe measurement
    let alpha = trusted_alpha(seq.gain.alpha_l, ase.mean_var, seq.gain.transmission_l)?;

    let (efficiency, efficiency_note) = match RunSummary::from_run(&run, alpha.alpha_l, seq.kind)
        .and_then(|mut s| {
            s.ase = ase;
            s.rase = rase;
            s.probe_saturated = alpha.probe_saturated;
            build_efficiency_curve(&[s], &cfg.decay)
        }) {
        Ok(mut pts) => (pts.pop(), None),
        Err(e @ (Error::UndefinedEfficiency(_) | Error::Domain(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };

    let b_grid = a.b_grid.values();
    let curve = if a.bootstrap {
        estimate_inseparability_bootstrap(&run.ase, &run.rase, &b_grid, a.bootstrap_resamples, a.bootstrap_seed)?
    } else {
        estimate_inseparability(&run.ase, &run.rase, &b_grid)?
    };
    let overlay = overlay_model(&curve, &seq.gain, &b_grid)?;
    let insep_minimum = *curve_minimum(&curve).ok_or_else(|| CliError::Usage("empty b grid".into()))?;

    let point = CurveRow {
        alpha_l: alpha.alpha_l,
        value: ase.mean_var,
        se: Some(ase.se),
        model: Some(ase_variance(&seq.gain)),
        flags: if alpha.probe_saturated { vec!["probe_saturated".into()] } else { vec![] },
    };
    let eff_rows: Vec<CurveRow> = efficiency.iter().map(CurveRow::from).collect();

    let mut files = vec![
        write_file(out, "quadratures.csv", |w| write_quadrature_table(w, &run).map_err(csv_io("quadratures.csv")))?,
        write_file(out, "variance_summary.csv", |w| {
            write_variance_summary(w, &[(Field::Ase, ase), (Field::Rase, rase)]).map_err(csv_io("variance_summary.csv"))
        })?,
        write_file(out, "ase_point.csv", |w| write_curve_table(w, &[point]).map_err(csv_io("ase_point.csv")))?,
        write_file(out, "efficiency.csv", |w| write_curve_table(w, &eff_rows).map_err(csv_io("efficiency.csv")))?,
        write_file(out, "inseparability.csv", |w| {
            write_insep_table(w, &curve, Some(&overlay)).map_err(csv_io("inseparability.csv"))
        })?,
    ];
    let summary = AnalysisSummary {
        kind: seq.kind,
        alpha,
        n_signal_shots: run.ase.len(),
        rejected_shots: run.rejected.len(),
        normalization: run.normalization,
        window_us: opts.window_us,
        phase_correction: opts.phase_correction,
        bootstrap: a.bootstrap,
        ase,
        rase,
        ase_model: ase_variance(&seq.gain),
        efficiency,
        efficiency_note,
        insep_minimum,
        model_minimum: find_min_b(&seq.gain)?,
    };
    files.push(write_json(out, "summary.json", &summary)?);
    let mut run_cfg = cfg.clone();
    run_cfg.sequence = seq.clone();
    run_cfg.noise = header.noise;
    write_manifest(out, "analyze", &run_cfg, &[dump], &files)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct FitOutput {
    pub fit: LossFit,
    pub n_points: usize,
    /// Rows with `alpha_l <= 0` carry no information about `l`.
    pub skipped_rows: usize,
}

/// Fits the loss `l` to a variance-vs-optical-depth curve table.
pub fn cmd_fit(table: &Path, invert: bool, cfg: &ExperimentConfig, out: &Path) -> CliResult<FitOutput> {
    let file = File::open(table).map_err(|e| CliError::io(format!("reading {}", table.display()), e))?;
    let empty = file.metadata().map(|m| m.len() == 0).unwrap_or(false);
    let rows = if empty { Vec::new() } else { read_curve_table(file)? };
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no data rows", table.display())));
    }
    let used: Vec<&CurveRow> = rows.iter().filter(|r| r.alpha_l > 0.0).collect();
    let points: Vec<LossPoint> = used.iter().map(|r| LossPoint { alpha_l: r.alpha_l, variance: r.value, se: r.se }).collect();
    let fit = fit_loss(&points).map_err(|e| match e {
        Error::Fit(msg) => {
            let pts: Vec<String> = points.iter().map(|p| format!("({}, {})", p.alpha_l, p.variance)).collect();
            CliError::Core(Error::Fit(format!("{msg}; points [{}]", pts.join(", "))))
        }
        other => CliError::Core(other),
    })?;
    ensure_dir(out)?;
    let l = fit.l;
    let fitted = |a: f64| 1.0 + 2.0 * l * a.exp_m1();
    let io = |e| CliError::io("writing fit_points.csv", e);
    let points_file = write_file(out, "fit_points.csv", |w| {
        writeln!(w, "alpha_l,value,se,model,flags,alpha_inverted").map_err(io)?;
        for (r, res) in used.iter().zip(&fit.residuals) {
            let mut flags = Vec::new();
            if r.alpha_l >= PROBE_SATURATION_ALPHA_L {
                flags.push("probe_saturated");
            }
            let inverted = if invert && l > 0.0 && l <= 1.0 {
                match invert_ase_for_alpha(r.value, l) {
                    Ok(a) => a.to_string(),
                    Err(_) => {
                        flags.push("no_gain");
                        String::new()
                    }
                }
            } else {
                String::new()
            };
            let se = r.se.map(|s| s.to_string()).unwrap_or_default();
            debug_assert!((r.value - fitted(r.alpha_l) - res).abs() < 1e-9);
            writeln!(w, "{},{},{},{},{},{}", r.alpha_l, r.value, se, fitted(r.alpha_l), flags.join(";"), inverted)
                .map_err(io)?;
        }
        Ok(())
    })?;
    let output = FitOutput { fit, n_points: used.len(), skipped_rows: rows.len() - used.len() };
    let fit_file = write_json(out, "fit.json", &output)?;
    write_manifest(out, "fit", cfg, &[table], &[points_file, fit_file])?;
    Ok(output)
}
