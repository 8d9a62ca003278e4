//! Sampling regimes: the full-noise baseline, AST-n (reverse diffusion
//! started from an analytically noised copy of the conditioning image) and
//! DDIM-inverted starts, plus the sweep that evaluates them over a dataset.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DosePair;
use crate::denoiser::EpsilonPredictor;
use crate::error::{Error, Result};
use crate::forward::q_sample;
use crate::image::ImageBuffer;
use crate::inversion::{ddim_invert, InversionMode};
use crate::metrics::{psnr, rmse, ssim, timed, MetricsReport, MetricsRow, SsimParams};
use crate::noise::{mix_seed, stream_rng};
use crate::samplers::{run_sampler, SamplerKind, SamplerSpec, TrajectoryRecord};
use crate::schedule::{make_timestep_grid, GridStrategy, NoiseSchedule};

/// How the reverse process is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `x_T ~ N(0, I)`, reduced grid over `[1, T]`.
    FullNoise,
    /// `x_n ~ q(x_n | c)` with the low-dose image `c` standing in for `x_0`.
    AstN,
    /// Latent obtained by DDIM-inverting the low-dose image.
    DdimInverted(InversionMode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub sampler: SamplerSpec,
}

impl RegimeSpec {
    /// Baseline: `budget` uniform steps from `T`.
    pub fn full_noise(
        kind: SamplerKind,
        budget: usize,
        sched: &NoiseSchedule,
        strategy: GridStrategy,
    ) -> Result<Self> {
        let grid = make_timestep_grid(sched.steps(), budget, sched.steps(), strategy)
            .map_err(to_config)?;
        Ok(Self {
            regime: Regime::FullNoise,
            sampler: SamplerSpec::new(kind, grid),
        })
    }

    /// AST-n: start at `n` and take `steps` steps (dense when `steps == n`).
    pub fn ast_n(
        kind: SamplerKind,
        n: usize,
        steps: usize,
        sched: &NoiseSchedule,
        strategy: GridStrategy,
    ) -> Result<Self> {
        let grid = make_timestep_grid(n, steps, sched.steps(), strategy).map_err(to_config)?;
        Ok(Self {
            regime: Regime::AstN,
            sampler: SamplerSpec::new(kind, grid),
        })
    }

    /// Invert to `origin` on the sampling grid, then sample back.
    pub fn inverted(
        kind: SamplerKind,
        origin: usize,
        budget: usize,
        mode: InversionMode,
        sched: &NoiseSchedule,
        strategy: GridStrategy,
    ) -> Result<Self> {
        let grid =
            make_timestep_grid(origin, budget, sched.steps(), strategy).map_err(to_config)?;
        Ok(Self {
            regime: Regime::DdimInverted(mode),
            sampler: SamplerSpec::new(kind, grid),
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.sampler.eta = eta;
        self
    }

    pub fn origin(&self) -> usize {
        self.sampler.grid.origin()
    }

    pub fn steps(&self) -> usize {
        self.sampler.grid.len()
    }

    /// Report label. Inverted starts below `T` are the AST counterpart of
    /// the inverted regime and get their own label so reports can pair them.
    pub fn label(&self, sched: &NoiseSchedule) -> &'static str {
        match self.regime {
            Regime::FullNoise => "full",
            Regime::AstN => "ast",
            Regime::DdimInverted(_) if self.origin() == sched.steps() => "inverted",
            Regime::DdimInverted(_) => "inverted-ast",
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.origin() > sched.steps() {
            return Err(Error::Config(format!(
                "grid origin {} exceeds schedule length {}",
                self.origin(),
                sched.steps()
            )));
        }
        if self.regime == Regime::FullNoise && self.origin() != sched.steps() {
            return Err(Error::Config(format!(
                "full-noise grids must start at T = {}, got {}",
                sched.steps(),
                self.origin()
            )));
        }
        Ok(())
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Domain(msg) => Error::Config(msg),
        other => other,
    }
}

/// `x_n = sqrt(ab_n) input + sqrt(1 - ab_n) eps` with fresh `eps`.
pub fn ast_n_latent<R: Rng + ?Sized>(
    input: &ImageBuffer,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageBuffer> {
    check_origin(n, sched)?;
    let eps = ImageBuffer::gaussian(input.width(), input.height(), rng);
    q_sample(input, n, &eps, sched)
}

/// [`ast_n_latent`] with caller-supplied noise.
pub fn ast_n_latent_with_noise(
    input: &ImageBuffer,
    n: usize,
    eps: &ImageBuffer,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    check_origin(n, sched)?;
    q_sample(input, n, eps, sched)
}

fn check_origin(n: usize, sched: &NoiseSchedule) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("AST origin must be >= 1"));
    }
    sched.check_timestep(n)
}

/// Restores `low_dose` under `spec`. The low-dose image conditions every
/// predictor call.
pub fn reconstruct<R: Rng + ?Sized>(
    spec: &RegimeSpec,
    low_dose: &ImageBuffer,
    pred: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    rng: &mut R,
    record: bool,
) -> Result<(ImageBuffer, TrajectoryRecord)> {
    spec.validate(sched)?;
    let cond = Some(low_dose);
    let x_init = match spec.regime {
        Regime::FullNoise => ImageBuffer::gaussian(low_dose.width(), low_dose.height(), rng),
        Regime::AstN => ast_n_latent(low_dose, spec.origin(), sched, rng)?,
        Regime::DdimInverted(mode) => {
            ddim_invert(low_dose, pred, cond, sched, &spec.sampler.grid, mode)?
        }
    };
    run_sampler(&spec.sampler, &x_init, pred, cond, sched, rng, record)
}

/// Regime families accepted by sweep plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeName {
    Full,
    Ast,
    Inverted,
    InvertedAst,
}

impl RegimeName {
    pub const ALL: [RegimeName; 4] = [
        RegimeName::Full,
        RegimeName::Ast,
        RegimeName::Inverted,
        RegimeName::InvertedAst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeName::Full => "full",
            RegimeName::Ast => "ast",
            RegimeName::Inverted => "inverted",
            RegimeName::InvertedAst => "inverted-ast",
        }
    }

    /// Builds the cell for one origin/budget value `k`.
    pub fn spec(
        self,
        kind: SamplerKind,
        k: usize,
        sched: &NoiseSchedule,
        strategy: GridStrategy,
        mode: InversionMode,
    ) -> Result<RegimeSpec> {
        match self {
            RegimeName::Full => RegimeSpec::full_noise(kind, k, sched, strategy),
            RegimeName::Ast => RegimeSpec::ast_n(kind, k, k, sched, strategy),
            RegimeName::Inverted => {
                RegimeSpec::inverted(kind, sched.steps(), k, mode, sched, strategy)
            }
            RegimeName::InvertedAst => RegimeSpec::inverted(kind, k, k, mode, sched, strategy),
        }
    }
}

impl fmt::Display for RegimeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegimeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegimeName::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

/// Cross product of regimes x samplers x origins/budgets, in that nesting
/// order. Cells that coincide are kept once.
pub fn plan_cells(
    regimes: &[RegimeName],
    samplers: &[SamplerKind],
    origins: &[usize],
    sched: &NoiseSchedule,
    eta: f64,
    strategy: GridStrategy,
    mode: InversionMode,
) -> Result<Vec<RegimeSpec>> {
    let mut cells = Vec::with_capacity(regimes.len() * samplers.len() * origins.len());
    for &r in regimes {
        for &kind in samplers {
            for &k in origins {
                // inverted-ast at origin T is the inverted cell again
                let cell = r.spec(kind, k, sched, strategy, mode)?.with_eta(eta);
                if !cells.contains(&cell) {
                    cells.push(cell);
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub cell: usize,
    pub regime: String,
    pub sampler: String,
    pub steps: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub report: MetricsReport,
    pub failures: Vec<CellFailure>,
}

/// Seed of cell `index` under master seed `seed`.
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64)
}

/// Evaluates every cell on every pair. Image `i` of cell `k` draws from
/// stream `i` of `cell_seed(seed, k)`, so results do not depend on thread
/// scheduling. Reconstructions are clamped to `[0, 1]` before scoring against
/// the full-dose target; `time_s` is the mean reconstruction wall time per
/// image. A failing cell is recorded and the sweep continues.
pub fn regime_sweep(
    cells: &[RegimeSpec],
    dataset: &[DosePair],
    pred: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SweepOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("sweep dataset is empty".into()));
    }
    let results: Vec<(usize, Result<MetricsRow>)> = cells
        .par_iter()
        .enumerate()
        .map(|(k, spec)| {
            (
                k,
                evaluate_cell(spec, dataset, pred, sched, cell_seed(seed, k)),
            )
        })
        .collect();
    let mut out = SweepOutcome::default();
    for (k, res) in results {
        match res {
            Ok(row) => out.report.push(row),
            Err(e) => out.failures.push(CellFailure {
                cell: k,
                regime: cells[k].label(sched).to_string(),
                sampler: cells[k].sampler.kind.name().to_string(),
                steps: cells[k].steps(),
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

fn evaluate_cell(
    spec: &RegimeSpec,
    dataset: &[DosePair],
    pred: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<MetricsRow> {
    let params = SsimParams::default();
    let (mut p, mut r, mut s, mut t) = (0.0, 0.0, 0.0, 0.0);
    for (i, pair) in dataset.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let (res, secs) = timed(|| reconstruct(spec, &pair.low_dose, pred, sched, &mut rng, false));
        let out = res?.0.clamp(0.0, 1.0);
        p += psnr(&pair.full_dose, &out, 1.0)?;
        r += rmse(&pair.full_dose, &out)?;
        s += ssim(&pair.full_dose, &out, &params)?;
        t += secs;
    }
    let n = dataset.len() as f64;
    Ok(MetricsRow {
        regime: spec.label(sched).to_string(),
        sampler: spec.sampler.kind.name().to_string(),
        steps: spec.steps(),
        psnr_db: p / n,
        rmse: r / n,
        ssim: s / n,
        time_s: t / n,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PhantomSpec, DEFAULT_PHOTON_BUDGET};
    use crate::denoiser::{
        conditioned_oracle, CountingPredictor, GaussianDataModel, GaussianOracle,
    };

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn pairs(count: usize, size: usize) -> Vec<DosePair> {
        (0..count)
            .map(|i| {
                let spec = PhantomSpec {
                    size,
                    seed: i as u64,
                    ..PhantomSpec::default()
                };
                DosePair::synthesize(&spec, 0.25, DEFAULT_PHOTON_BUDGET, 100 + i as u64).unwrap()
            })
            .collect()
    }

    #[test]
    fn ast_latent_with_zero_noise_is_scaled_input() {
        let s = sched();
        let x = ImageBuffer::from_fn(3, 3, |x, y| (x + y) as f64 / 4.0);
        for n in [10, 25, 50, 100, 150, 500] {
            let out = ast_n_latent_with_noise(&x, n, &ImageBuffer::zeros(3, 3), &s).unwrap();
            assert_eq!(out, x.scale(s.alpha_bar(n).unwrap().sqrt()));
            let noisy = ast_n_latent(&x, n, &s, &mut stream_rng(n as u64, 0)).unwrap();
            assert!(noisy.is_finite());
        }
        assert!(ast_n_latent(&x, 0, &s, &mut stream_rng(0, 0)).is_err());
        assert!(ast_n_latent(&x, 1001, &s, &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn ast_latent_matches_forward_marginal() {
        // 1e4 pixels of a flat input: sample moments within 5 standard errors
        let s = sched();
        let x = ImageBuffer::filled(100, 100, 0.6);
        for n in [10, 25, 50, 100, 150, 500, 1000] {
            let ab = s.alpha_bar(n).unwrap();
            let lat = ast_n_latent(&x, n, &s, &mut stream_rng(50, n as u64)).unwrap();
            let var = 1.0 - ab;
            assert!(
                (lat.mean() - ab.sqrt() * 0.6).abs() < 5.0 * (var / 1e4).sqrt(),
                "n={n}"
            );
            assert!(
                (lat.variance() - var).abs() < 5.0 * var * (2.0f64 / 1e4).sqrt(),
                "n={n}"
            );
        }
    }

    #[test]
    fn ast_one_with_exact_conditioned_oracle_returns_input() {
        let s = sched();
        let low = pairs(1, 32).remove(0).low_dose;
        let prior = GaussianDataModel::new(ImageBuffer::filled(32, 32, 0.3), 0.05).unwrap();
        let pred = conditioned_oracle(prior, 0.0);
        for kind in SamplerKind::ALL {
            let spec = RegimeSpec::ast_n(kind, 1, 1, &s, GridStrategy::Uniform).unwrap();
            let (out, _) =
                reconstruct(&spec, &low, &pred, &s, &mut stream_rng(0, 0), false).unwrap();
            assert!(rmse(&out, &low).unwrap() < 1e-6, "{kind}");
        }
    }

    #[test]
    fn regime_grids_and_labels() {
        let s = sched();
        let ast =
            RegimeSpec::ast_n(SamplerKind::Ddim, 150, 150, &s, GridStrategy::Uniform).unwrap();
        assert_eq!(
            (ast.origin(), ast.steps(), ast.label(&s)),
            (150, 150, "ast")
        );
        let full =
            RegimeSpec::full_noise(SamplerKind::Ddim, 50, &s, GridStrategy::Uniform).unwrap();
        assert_eq!(
            (full.origin(), full.steps(), full.label(&s)),
            (1000, 50, "full")
        );
        let inv = RegimeSpec::inverted(
            SamplerKind::Ddim,
            1000,
            25,
            InversionMode::PredictedX0,
            &s,
            GridStrategy::Uniform,
        )
        .unwrap();
        assert_eq!(inv.label(&s), "inverted");
        let inv_ast = RegimeName::InvertedAst
            .spec(
                SamplerKind::Ddim,
                150,
                &s,
                GridStrategy::Uniform,
                InversionMode::PredictedX0,
            )
            .unwrap();
        assert_eq!((inv_ast.origin(), inv_ast.label(&s)), (150, "inverted-ast"));

        let mut bad = full.clone();
        bad.sampler.grid = ast.sampler.grid.clone();
        assert!(matches!(bad.validate(&s), Err(Error::Config(_))));
        assert!(matches!(
            RegimeSpec::ast_n(SamplerKind::Ddim, 2000, 10, &s, GridStrategy::Uniform),
            Err(Error::Config(_))
        ));
        assert!(
            matches!("fast".parse::<RegimeName>(), Err(Error::Config(m)) if m.contains("fast"))
        );
    }

    #[test]
    fn ast_evaluation_count_is_n_times_per_step_cost() {
        let s = sched();
        let low = ImageBuffer::filled(4, 4, 0.5);
        let pred = CountingPredictor::new(GaussianOracle::new(
            GaussianDataModel::new(ImageBuffer::filled(4, 4, 0.5), 0.1).unwrap(),
        ));
        for kind in SamplerKind::ALL {
            for n in [10, 25, 150] {
                pred.reset();
                let spec = RegimeSpec::ast_n(kind, n, n, &s, GridStrategy::Uniform).unwrap();
                reconstruct(&spec, &low, &pred, &s, &mut stream_rng(0, 0), false).unwrap();
                assert_eq!(pred.calls(), kind.evaluations(n), "{kind} n={n}");
            }
        }
    }

    #[test]
    fn coinciding_cells_are_planned_once() {
        let s = sched();
        let cells = plan_cells(
            &RegimeName::ALL,
            &[SamplerKind::Ddim],
            &[10, 1000],
            &s,
            0.0,
            GridStrategy::Uniform,
            InversionMode::PredictedX0,
        )
        .unwrap();
        assert_eq!(cells.len(), 7);
        let labels: Vec<&str> = cells.iter().map(|c| c.label(&s)).collect();
        assert_eq!(labels.iter().filter(|&&l| l == "inverted").count(), 2);
    }

    #[test]
    fn one_cell_sweep_gives_one_row() {
        let s = sched();
        let data = pairs(1, 32);
        let pred = GaussianOracle::new(
            GaussianDataModel::new(ImageBuffer::filled(32, 32, 0.3), 0.05).unwrap(),
        );
        let cells = plan_cells(
            &[RegimeName::Ast],
            &[SamplerKind::Ddim],
            &[10],
            &s,
            0.0,
            GridStrategy::Uniform,
            InversionMode::PredictedX0,
        )
        .unwrap();
        let out = regime_sweep(&cells, &data, &pred, &s, 1).unwrap();
        assert_eq!(out.report.len(), 1);
        assert!(out.failures.is_empty());
        let row = &out.report.rows[0];
        assert_eq!(
            (row.regime.as_str(), row.sampler.as_str(), row.steps),
            ("ast", "ddim", 10)
        );
        assert!(row.psnr_db.is_finite() && row.time_s >= 0.0);
        assert!(regime_sweep(&cells, &[], &pred, &s, 1).is_err());
    }

    #[test]
    fn failing_cells_are_recorded_and_sweep_continues() {
        let s = sched();
        let data = pairs(1, 32);
        let prior = GaussianDataModel::new(ImageBuffer::filled(16, 16, 0.3), 0.05).unwrap();
        // wrong shape: every predictor call fails
        let pred = conditioned_oracle(prior, 0.02);
        let cells = plan_cells(
            &[RegimeName::Ast, RegimeName::Full],
            &[SamplerKind::Ddim],
            &[10],
            &s,
            0.0,
            GridStrategy::Uniform,
            InversionMode::PredictedX0,
        )
        .unwrap();
        let out = regime_sweep(&cells, &data, &pred, &s, 1).unwrap();
        assert!(out.report.is_empty());
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.failures[1].regime, "full");
    }

    #[test]
    fn sweeps_are_reproducible() {
        let s = sched();
        let data = pairs(2, 32);
        let prior = GaussianDataModel::new(ImageBuffer::filled(32, 32, 0.3), 0.05).unwrap();
        let pred = conditioned_oracle(prior, 0.02);
        let cells = plan_cells(
            &[RegimeName::Ast, RegimeName::Full, RegimeName::Inverted],
            &[SamplerKind::Ddim, SamplerKind::Ddpm, SamplerKind::UniPc2],
            &[10, 25],
            &s,
            0.0,
            GridStrategy::Uniform,
            InversionMode::PredictedX0,
        )
        .unwrap();
        let a = regime_sweep(&cells, &data, &pred, &s, 7).unwrap().report;
        let b = regime_sweep(&cells, &data, &pred, &s, 7).unwrap().report;
        assert_eq!(a.len(), 18);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(
                (&x.regime, &x.sampler, x.steps, x.seed),
                (&y.regime, &y.sampler, y.steps, y.seed)
            );
            assert!((x.psnr_db - y.psnr_db).abs() < 1e-12);
            assert!((x.ssim - y.ssim).abs() < 1e-12);
            assert!((x.rmse - y.rmse).abs() < 1e-12);
        }
        let c = regime_sweep(&cells, &data, &pred, &s, 8).unwrap().report;
        let ddpm_ast = |r: &MetricsReport| r.find("ast", "ddpm", 25).unwrap().psnr_db;
        assert_ne!(ddpm_ast(&a), ddpm_ast(&c));
    }
}
