//! Experiment driver behind the `astn` binary: dataset generation, the
//! regime sweep with its curve and trajectory exports, and report rendering.
//!
//! Layout under the output directory:
//!
//! ```text
//! dataset/manifest.csv, dataset/*.astimg, dataset/previews/*.pgm
//! metrics.csv                       one row per (regime, sampler, steps)
//! failures.csv                      cells that failed, if any
//! curves/<sampler>_<regime>.csv     steps -> psnr, ssim, rmse, time
//! trajectories/<regime>_<sampler>_<steps>.csv
//! report.txt, report_curves/<sampler>.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::astn::{plan_cells, reconstruct, regime_sweep, CellFailure};
use crate::config::{ExperimentConfig, PredictorKind};
use crate::data::{
    generate_phantom, load_dataset, simulate_low_dose, write_image, write_manifest, write_pgm,
    DosePair, ManifestEntry, PhantomSpec, MANIFEST_FILE,
};
use crate::denoiser::{
    conditioned_oracle, train_affine_predictor, AffinePredictor, CondMode, EpsilonPredictor,
    GaussianDataModel, GaussianOracle, TrainingData,
};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{psnr, rmse, MetricsReport, MetricsRow};
use crate::noise::{mix_seed, stream_rng};
use crate::samplers::SamplerKind;
use crate::schedule::NoiseSchedule;

pub const DATASET_DIR: &str = "dataset";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const REPORT_FILE: &str = "report.txt";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub pairs: usize,
    pub manifest: PathBuf,
}

/// Writes `count` phantoms, one low-dose copy per dose fraction, PGM
/// previews and the manifest. Output bytes depend only on the config.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<GenerateSummary> {
    cfg.validate()?;
    let dir = out.join(DATASET_DIR);
    let manifest = dir.join(MANIFEST_FILE);
    refuse_overwrite(&manifest, force)?;
    if manifest.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let previews = dir.join("previews");
    create_dir(&previews)?;
    let d = &cfg.data;
    let mut entries = Vec::with_capacity(d.count * d.dose_fractions.len());
    for i in 0..d.count {
        let phantom_seed = mix_seed(cfg.seed, i as u64);
        let spec = PhantomSpec {
            size: d.size,
            n_ellipses: d.n_ellipses,
            seed: phantom_seed,
            ..PhantomSpec::default()
        };
        let full = generate_phantom(&spec)?;
        let full_name = format!("p{i:03}_full.astimg");
        write_image(&dir.join(&full_name), &full)?;
        write_pgm(&previews.join(format!("p{i:03}_full.pgm")), &full)?;
        for (j, &dose) in d.dose_fractions.iter().enumerate() {
            let noise_seed = mix_seed(phantom_seed, j as u64 + 1);
            let low =
                simulate_low_dose(&full, dose, d.photon_budget, &mut stream_rng(noise_seed, 0))?;
            let low_name = format!("p{i:03}_d{dose}_low.astimg");
            write_image(&dir.join(&low_name), &low)?;
            write_pgm(&previews.join(format!("p{i:03}_d{dose}_low.pgm")), &low)?;
            entries.push(ManifestEntry {
                pair_id: format!("p{i:03}-d{dose}"),
                full_path: full_name.clone(),
                low_path: low_name,
                dose_fraction: dose,
                seed: noise_seed,
            });
        }
    }
    write_manifest(&manifest, &entries)?;
    Ok(GenerateSummary {
        pairs: entries.len(),
        manifest,
    })
}

/// Gaussian prior fitted to the full-dose pixels (global mean and variance)
/// and the condition noise level `sqrt(mean MSE(low, full))`.
pub fn fit_prior(pairs: &[DosePair]) -> Result<(GaussianDataModel, f64)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Config("cannot fit a prior to an empty dataset".into()))?;
    let (w, h) = first.full_dose.shape();
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.full_dose.mean()).sum::<f64>() / n;
    let var = pairs
        .iter()
        .map(|p| {
            p.full_dose
                .as_slice()
                .iter()
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / p.full_dose.len() as f64
        })
        .sum::<f64>()
        / n;
    let mut mse = 0.0;
    for p in pairs {
        mse += rmse(&p.full_dose, &p.low_dose)?.powi(2);
    }
    let model = GaussianDataModel::new(ImageBuffer::filled(w, h, mean), var)?;
    Ok((model, (mse / n).sqrt()))
}

/// Builds the predictor named by the config. A trained affine model is also
/// saved to `out/affine.txt`.
pub fn build_predictor(
    cfg: &ExperimentConfig,
    pairs: &[DosePair],
    sched: &NoiseSchedule,
    out: &Path,
) -> Result<Box<dyn EpsilonPredictor>> {
    let (model, noise_level) = fit_prior(pairs)?;
    Ok(match cfg.run.predictor {
        PredictorKind::Conditioned => Box::new(conditioned_oracle(model, noise_level)),
        PredictorKind::Unconditional => Box::new(GaussianOracle::new(model)),
        PredictorKind::Affine => {
            let affine = match &cfg.run.affine_path {
                Some(path) => {
                    let p = AffinePredictor::load(path)?;
                    if p.shape() != model.mean().shape() || p.steps() != sched.steps() {
                        return Err(Error::Config(format!(
                            "{}: model is {:?} with {} steps, data is {:?} with {} steps",
                            path.display(),
                            p.shape(),
                            p.steps(),
                            model.mean().shape(),
                            sched.steps()
                        )));
                    }
                    p
                }
                None => {
                    let data = TrainingData::ConditionedGaussian { model, noise_level };
                    let mut rng = stream_rng(cfg.seed, 0xaff1);
                    let trained = train_affine_predictor(
                        &data,
                        CondMode::Concat,
                        sched,
                        cfg.run.sgd,
                        &mut rng,
                    )?;
                    trained.predictor.save(&out.join("affine.txt"))?;
                    trained.predictor
                }
            };
            Box::new(affine)
        }
    })
}

fn load_pairs(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DosePair>> {
    let dir = out.join(DATASET_DIR);
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run `generate` first",
            dir.display()
        )));
    }
    let mut pairs: Vec<DosePair> = load_dataset(&dir)?
        .into_iter()
        .map(|(_, p)| p)
        .filter(|p| {
            cfg.run
                .dose_fraction
                .is_none_or(|d| (p.dose_fraction - d).abs() < 1e-12)
        })
        .collect();
    if let Some(max) = cfg.run.max_images {
        pairs.truncate(max);
    }
    if pairs.is_empty() {
        return Err(Error::Config(
            "no dataset pairs match the run filters".into(),
        ));
    }
    Ok(pairs)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: MetricsReport,
    pub failures: Vec<CellFailure>,
    pub metrics: PathBuf,
}

/// Runs the configured sweep and writes metrics, curves and trajectories.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let metrics_path = out.join(METRICS_FILE);
    refuse_overwrite(&metrics_path, force)?;
    let sched = cfg.schedule()?;
    let pairs = load_pairs(cfg, out)?;
    let pred = build_predictor(cfg, &pairs, &sched, out)?;
    let r = &cfg.run;
    let cells = plan_cells(
        &r.regimes,
        &r.samplers,
        &r.origins,
        &sched,
        r.eta,
        r.grid,
        r.inversion,
    )?;
    let outcome = regime_sweep(&cells, &pairs, pred.as_ref(), &sched, cfg.seed)?;

    outcome.report.save(&metrics_path)?;
    write_failures(&out.join(FAILURES_FILE), &outcome.failures)?;
    write_curves(&out.join("curves"), &outcome.report)?;
    if let Some(k) = r.trajectory_steps {
        write_trajectories(
            cfg,
            &sched,
            pred.as_ref(),
            &pairs[0],
            k,
            &out.join("trajectories"),
        )?;
    }
    Ok(RunSummary {
        report: outcome.report,
        failures: outcome.failures,
        metrics: metrics_path,
    })
}

fn write_failures(path: &Path, failures: &[CellFailure]) -> Result<()> {
    if failures.is_empty() {
        if path.exists() {
            std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
        }
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "regime", "sampler", "steps", "message"])?;
    for f in failures {
        w.write_record([
            f.cell.to_string(),
            f.regime.clone(),
            f.sampler.clone(),
            f.steps.to_string(),
            f.message.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn curve_csv(rows: &[&MetricsRow]) -> String {
    let mut text = String::from("steps,psnr_db,ssim,rmse,time_s\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            r.steps, r.psnr_db, r.ssim, r.rmse, r.time_s
        );
    }
    text
}

/// One steps-to-quality curve per (sampler, regime), sorted by steps.
pub fn write_curves(dir: &Path, report: &MetricsReport) -> Result<()> {
    create_dir(dir)?;
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for row in &report.rows {
        groups
            .entry((row.sampler.clone(), row.regime.clone()))
            .or_default()
            .push(row);
    }
    for ((sampler, regime), mut rows) in groups {
        rows.sort_by_key(|r| r.steps);
        write_text(
            &dir.join(format!("{sampler}_{regime}.csv")),
            &curve_csv(&rows),
        )?;
    }
    Ok(())
}

fn write_trajectories(
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    pred: &dyn EpsilonPredictor,
    pair: &DosePair,
    steps: usize,
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    let r = &cfg.run;
    for &regime in &r.regimes {
        for &kind in &r.samplers {
            // budgets that do not fit this regime are skipped, not fatal
            let Ok(spec) = regime.spec(kind, steps, sched, r.grid, r.inversion) else {
                continue;
            };
            let spec = spec.with_eta(r.eta);
            let mut rng = stream_rng(cfg.seed, 0x7472_616a);
            let (_, rec) = reconstruct(&spec, &pair.low_dose, pred, sched, &mut rng, true)?;
            let mut text = String::from("t,psnr_db,rmse,mean,step_time_s\n");
            for ((t, x), secs) in rec.snapshots.iter().zip(&rec.step_times) {
                let clamped = x.clamp(0.0, 1.0);
                let _ = writeln!(
                    text,
                    "{t},{},{},{},{secs}",
                    psnr(&pair.full_dose, &clamped, 1.0)?,
                    rmse(&pair.full_dose, x)?,
                    x.mean()
                );
            }
            write_text(
                &dir.join(format!("{}_{}_{}.csv", regime.name(), kind.name(), steps)),
                &text,
            )?;
        }
    }
    Ok(())
}

/// Reads `metrics_csv`, writes `report.txt` and per-sampler curve files into
/// `out`, and returns the rendered table.
pub fn cmd_report(metrics_csv: &Path, out: &Path, total_steps: usize) -> Result<String> {
    let report = MetricsReport::load(metrics_csv)?;
    let table = render_report(&report, total_steps);
    create_dir(out)?;
    write_text(&out.join(REPORT_FILE), &table)?;
    let curves = out.join("report_curves");
    create_dir(&curves)?;
    let mut by_sampler: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for row in &report.rows {
        by_sampler
            .entry(row.sampler.as_str())
            .or_default()
            .push(row);
    }
    for (sampler, mut rows) in by_sampler {
        rows.sort_by(|a, b| a.regime.cmp(&b.regime).then(a.steps.cmp(&b.steps)));
        let mut text = String::from("regime,steps,psnr_db,ssim,rmse,time_s\n");
        for r in rows {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                r.regime, r.steps, r.psnr_db, r.ssim, r.rmse, r.time_s
            );
        }
        write_text(&curves.join(format!("{sampler}.csv")), &text)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Block {
    FullSchedule,
    Reduced,
    Ast,
}

impl Block {
    fn name(self) -> &'static str {
        match self {
            Block::FullSchedule => "full-schedule",
            Block::Reduced => "reduced-steps",
            Block::Ast => "ast",
        }
    }
}

// (block, is_left) for a row; unknown regimes are left out of the table
fn classify(row: &MetricsRow, total_steps: usize) -> Option<(Block, bool)> {
    let schedule_block = if row.steps >= total_steps {
        Block::FullSchedule
    } else {
        Block::Reduced
    };
    match row.regime.as_str() {
        "full" => Some((schedule_block, false)),
        "inverted" => Some((schedule_block, true)),
        "ast" => Some((Block::Ast, false)),
        "inverted-ast" => Some((Block::Ast, true)),
        _ => None,
    }
}

fn sampler_rank(name: &str) -> (usize, String) {
    let rank = name
        .parse::<SamplerKind>()
        .map(|k| {
            SamplerKind::ALL
                .iter()
                .position(|&x| x == k)
                .unwrap_or(usize::MAX)
        })
        .unwrap_or(usize::MAX);
    (rank, name.to_string())
}

/// Aligned text table in three blocks: full schedule (`steps == T`),
/// reduced step counts, and AST-n. Where a DDIM-inverted run and a standard
/// run share a cell, it reads `inverted / standard`.
pub fn render_report(report: &MetricsReport, total_steps: usize) -> String {
    type Key = (Block, (usize, String), std::cmp::Reverse<usize>);
    let mut cells: BTreeMap<Key, [Option<&MetricsRow>; 2]> = BTreeMap::new();
    for row in &report.rows {
        if let Some((block, left)) = classify(row, total_steps) {
            let slot = cells
                .entry((
                    block,
                    sampler_rank(&row.sampler),
                    std::cmp::Reverse(row.steps),
                ))
                .or_default();
            slot[if left { 0 } else { 1 }] = Some(row);
        }
    }
    let fmt_pair = |pair: &[Option<&MetricsRow>; 2], f: &dyn Fn(&MetricsRow) -> String| -> String {
        match pair {
            [Some(l), Some(r)] => format!("{} / {}", f(l), f(r)),
            [Some(l), None] => format!("{} / -", f(l)),
            [None, Some(r)] => f(r),
            [None, None] => "-".to_string(),
        }
    };
    let header = [
        "block", "sampler", "steps", "psnr_db", "rmse", "ssim", "time_s",
    ];
    let mut lines: Vec<[String; 7]> = vec![header.map(String::from)];
    for ((block, (_, sampler), steps), pair) in &cells {
        lines.push([
            block.name().to_string(),
            sampler.clone(),
            steps.0.to_string(),
            fmt_pair(pair, &|r| format!("{:.3}", r.psnr_db)),
            fmt_pair(pair, &|r| format!("{:.4}", r.rmse)),
            fmt_pair(pair, &|r| format!("{:.4}", r.ssim)),
            fmt_pair(pair, &|r| format!("{:.4}", r.time_s)),
        ]);
    }
    let mut widths = [0usize; 7];
    for line in &lines {
        for (w, cell) in widths.iter_mut().zip(line) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    for (i, line) in lines.iter().enumerate() {
        let row: Vec<String> = line
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(j, (cell, w))| {
                if j == 2 {
                    format!("{cell:>w$}")
                } else {
                    format!("{cell:<w$}")
                }
            })
            .collect();
        text.push_str(row.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            text.push_str(&rule.join("  "));
            text.push('\n');
        }
    }
    text.push_str(
        "paired cells: ddim-inverted start / standard start; time_s is seconds per image\n",
    );
    text
}
