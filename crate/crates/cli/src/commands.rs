//! Subcommand implementations. Every run writes its outputs atomically and
//! drops a manifest (config echo + seeds + version) beside them; nothing
//! here consults wall-clock time or other ambient state, so identical
//! invocations produce byte-identical files.

use crate::config::ExperimentConfig;
use crate::metrics::{write_atomic, write_csv, MetricsRow};
use crate::model_spec::ModelSpec;
use crate::run::{residual_curve, terminal_error_sweep, SweepSetup};
use anyhow::{bail, Context, Result};
use iia_core::iia::draw_initial_states;
use iia_core::solvers::{heun_step, reformulated_heun_step};
use iia_core::{
    calibrate, iia_step, load_table, run_sampler, save_table, Condition, DiffusionState,
    GaussianMixture, Predictor, ScoreModel, TimeGrid, Variant, ALL_VARIANTS,
};
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const EVAL_STREAM: u64 = 1;

pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub model: GaussianMixture,
    pub variant: Variant,
}

/// Command-line overrides layered on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub nfe: Option<Vec<usize>>,
    pub m: Option<usize>,
    pub r: Option<usize>,
    pub batch: Option<usize>,
}

pub fn load(config_path: &Path) -> Result<Loaded> {
    load_with(config_path, &Overrides::default())
}

pub fn load_with(config_path: &Path, over: &Overrides) -> Result<Loaded> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(out) = &over.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = over.seed {
        cfg.calibration.seed = seed;
    }
    if let Some(id) = &over.variant {
        cfg.variant.id = id.parse()?;
    }
    if let Some(nfe) = &over.nfe {
        cfg.evaluation.nfe = nfe.clone();
    }
    if over.m.is_some() {
        cfg.variant.m = over.m;
    }
    if over.r.is_some() {
        cfg.variant.r = over.r;
    }
    if over.batch.is_some() {
        cfg.calibration.batch = over.batch;
    }
    let model = ModelSpec::load(&cfg.model)?.build()?;
    let variant = cfg.variant.resolve()?;
    Ok(Loaded { cfg, model, variant })
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    // The destination directory does not affect any result, so it stays out
    // of the manifest; identical experiments yield identical manifests.
    let mut config = serde_json::to_value(cfg)?;
    config.as_object_mut().expect("config serializes to a map").remove("output");
    let manifest = json!({
        "command": command,
        "package_version": env!("CARGO_PKG_VERSION"),
        "table_version": iia_core::iia::TABLE_VERSION,
        "config": config,
    });
    write_atomic(
        &out.join(format!("manifest_{command}.json")),
        &serde_json::to_string_pretty(&manifest)?,
    )
}

fn table_path(out: &Path, variant: &Variant, nfe: usize) -> PathBuf {
    out.join(format!("table_{}_nfe{}.json", variant.id.name(), nfe))
}

/// `calibrate`: one coefficient table per configured evaluation budget.
pub fn cmd_calibrate(config_path: &Path, over: &Overrides) -> Result<Vec<PathBuf>> {
    let Loaded { cfg, model, variant } = load_with(config_path, over)?;
    std::fs::create_dir_all(&cfg.output)?;
    let cal = cfg.calibration_config();
    let mut written = Vec::new();
    for &nfe in &cfg.evaluation.nfe {
        let grid = cfg.grid.build_for_nfe(variant.id, nfe)?;
        let table = calibrate(&variant, &model, &grid, &cal)?;
        let path = table_path(&cfg.output, &variant, nfe);
        save_table(&table, &path)?;
        written.push(path);
    }
    write_manifest(&cfg.output, "calibrate", &cfg)?;
    Ok(written)
}

/// `sample`: terminal samples (calibrated when a table exists or can be
/// built) for the first configured budget.
pub fn cmd_sample(config_path: &Path, over: &Overrides) -> Result<PathBuf> {
    let Loaded { cfg, model, variant } = load_with(config_path, over)?;
    std::fs::create_dir_all(&cfg.output)?;
    let &nfe = cfg
        .evaluation
        .nfe
        .first()
        .context("config lists no evaluation budgets")?;
    let grid = cfg.grid.build_for_nfe(variant.id, nfe)?;
    let cal = cfg.calibration_config();
    let path = table_path(&cfg.output, &variant, nfe);
    let table = if path.exists() {
        load_table(&path)?
    } else {
        let t = calibrate(&variant, &model, &grid, &cal)?;
        save_table(&t, &path)?;
        t
    };

    let guidance = variant.id.is_guided().then_some(cal.guidance_scale);
    let labels = variant.id.is_guided().then(|| {
        let mut l = model.condition_labels();
        l.truncate(cal.condition_set_size.max(1));
        l
    });
    let states = draw_initial_states(
        model.dim(),
        grid.param().sigma(grid.time(0)),
        cfg.evaluation.seed,
        EVAL_STREAM,
        cfg.evaluation.samples,
        labels.as_deref(),
    );
    let mut body = String::from("sample");
    for d in 0..model.dim() {
        write!(body, ",coord{d}")?;
    }
    body.push('\n');
    for (b, (z0, cond)) in states.iter().enumerate() {
        let pred = match guidance {
            Some(w) => Predictor::guided(&model, cond.clone(), w),
            None => Predictor::plain(&model, cond.clone()),
        };
        let (end, _) = run_sampler(variant.id, &pred, &grid, z0, Some(&table))?;
        write!(body, "{b}")?;
        for v in &end.z {
            write!(body, ",{v}")?;
        }
        body.push('\n');
    }
    let out = cfg.output.join(format!("samples_{}_nfe{}.csv", variant.id.name(), nfe));
    write_atomic(&out, &body)?;
    write_manifest(&cfg.output, "sample", &cfg)?;
    Ok(out)
}

/// `residuals`: per-step residual curves on a fresh evaluation batch.
pub fn cmd_residuals(config_path: &Path, over: &Overrides) -> Result<PathBuf> {
    let Loaded { cfg, model, variant } = load_with(config_path, over)?;
    std::fs::create_dir_all(&cfg.output)?;
    let cal = cfg.calibration_config();
    let mut rows: Vec<MetricsRow> = Vec::new();
    for &nfe in &cfg.evaluation.nfe {
        let grid = cfg.grid.build_for_nfe(variant.id, nfe)?;
        let table = calibrate(&variant, &model, &grid, &cal)?;
        let guidance = variant.id.is_guided().then_some(cal.guidance_scale);
        let labels = variant.id.is_guided().then(|| {
            let mut l = model.condition_labels();
            l.truncate(cal.condition_set_size.max(1));
            l
        });
        let states = draw_initial_states(
            model.dim(),
            grid.param().sigma(grid.time(0)),
            cfg.evaluation.seed,
            EVAL_STREAM,
            cfg.evaluation.samples,
            labels.as_deref(),
        );
        rows.extend(residual_curve(
            &variant,
            &model,
            &grid,
            Some(&table),
            &states,
            guidance,
            nfe,
        )?);
    }
    let out = cfg.output.join("residuals.csv");
    write_csv(&out, &rows)?;
    write_manifest(&cfg.output, "residuals", &cfg)?;
    Ok(out)
}

/// `sweep`: terminal error and distribution distance across budgets.
pub fn cmd_sweep(config_path: &Path, over: &Overrides) -> Result<PathBuf> {
    let Loaded { cfg, model, variant } = load_with(config_path, over)?;
    std::fs::create_dir_all(&cfg.output)?;
    let setup = SweepSetup {
        model: &model,
        grid: &cfg.grid,
        calibration: cfg.calibration_config(),
        eval_seed: cfg.evaluation.seed,
        samples: cfg.evaluation.samples,
        projections: cfg.evaluation.projections,
        reference_refinement: cfg.evaluation.reference_refinement,
    };
    let (rows, tables) = terminal_error_sweep(&[variant], &setup, &cfg.evaluation.nfe)?;
    for (v, nfe, table) in &tables {
        save_table(table, &table_path(&cfg.output, v, *nfe))?;
    }
    let out = cfg.output.join("sweep.csv");
    write_csv(&out, &rows)?;
    write_manifest(&cfg.output, "sweep", &cfg)?;
    Ok(out)
}

/// `dump-coeffs`: per-step coefficient curves in reporting form.
pub fn cmd_dump_coeffs(config_path: &Path, over: &Overrides) -> Result<PathBuf> {
    let Loaded { cfg, model, variant } = load_with(config_path, over)?;
    std::fs::create_dir_all(&cfg.output)?;
    let cal = cfg.calibration_config();
    let mut rows = Vec::new();
    for &nfe in &cfg.evaluation.nfe {
        let grid = cfg.grid.build_for_nfe(variant.id, nfe)?;
        let path = table_path(&cfg.output, &variant, nfe);
        let table = if path.exists() {
            let t = load_table(&path)?;
            t.check_compatible(variant.id, &grid)?;
            t
        } else {
            let t = calibrate(&variant, &model, &grid, &cal)?;
            save_table(&t, &path)?;
            t
        };
        for (step, coeffs) in table.reported_coefficients(&grid) {
            for (j, c) in coeffs.iter().enumerate() {
                rows.push(MetricsRow::at_step(
                    variant.id.name(),
                    nfe,
                    step,
                    &format!("coeff{j}"),
                    *c,
                    table.batch_size,
                ));
            }
        }
    }
    let out = cfg.output.join("coeffs.csv");
    write_csv(&out, &rows)?;
    write_manifest(&cfg.output, "dump-coeffs", &cfg)?;
    Ok(out)
}

/// `check`: a quick invariant suite over the configured model.
pub fn cmd_check(config_path: &Path, over: &Overrides) -> Result<()> {
    let Loaded { cfg, model, variant } = load_with(config_path, over)?;
    let nfe = *cfg.evaluation.nfe.first().context("no evaluation budgets")?;

    // Two-gradient rewriting of the Heun step (VE only).
    let ve_grid = iia_core::build_grid(
        iia_core::GridKind::EdmRho,
        6,
        0.05,
        20.0,
        7.0,
        false,
        iia_core::NoiseParam::Ve,
    )?;
    let pred = Predictor::plain(&model, Condition::Null);
    for b in 0..50u64 {
        let mut rng = iia_core::rng::keyed_rng(0, 9, b);
        let z0 = iia_core::rng::normal_vec(&mut rng, model.dim(), ve_grid.time(0));
        let state = DiffusionState::initial(z0, &ve_grid);
        let (heun, _) = heun_step(&pred, &state, &ve_grid)?;
        let reform = reformulated_heun_step(&pred, &state, &ve_grid)?;
        for (a, b) in reform.z.iter().zip(&heun.z) {
            if (a - b).abs() > 1e-10 * (1.0 + b.abs()) {
                bail!("Heun rewriting check failed: {a} vs {b}");
            }
        }
    }

    // Baseline embedding for every variant.
    for id in ALL_VARIANTS {
        let grid: TimeGrid = if matches!(id.solver(), iia_core::SolverKind::Heun) {
            ve_grid.clone()
        } else {
            cfg.grid.build_for_nfe(id, 8).unwrap_or_else(|_| ve_grid.clone())
        };
        let pred = match id.is_guided() {
            true => {
                if model.condition_labels().is_empty() {
                    continue;
                }
                Predictor::guided(
                    &model,
                    Condition::Label(model.condition_labels()[0].clone()),
                    cfg.calibration.guidance_scale,
                )
            }
            false => Predictor::plain(&model, Condition::Null),
        };
        let mut rng = iia_core::rng::keyed_rng(1, 9, 0);
        let z0 = iia_core::rng::normal_vec(&mut rng, model.dim(), grid.param().sigma(grid.time(0)));
        let mut state = DiffusionState::initial(z0, &grid);
        let mut records = Vec::new();
        for i in 0..grid.steps().min(3) {
            let (baseline, rec) =
                iia_core::solvers::baseline_step(id.solver(), &pred, &state, &grid, &records)?;
            records.push(rec);
            if grid.terminal_step(i) {
                state = baseline;
                continue;
            }
            let coeffs = iia_core::iia::baseline_embedding(id, 1, &grid, i);
            let out = iia_step(id, &state, &grid, &records, &baseline, &coeffs)?;
            for (a, b) in out.z.iter().zip(&baseline.z) {
                if (a - b).abs() > 1e-12 * (1.0 + b.abs()) {
                    bail!("baseline embedding check failed for {id} at step {i}");
                }
            }
            state = baseline;
        }
    }

    // Calibration determinism on a reduced batch.
    let grid = cfg.grid.build_for_nfe(variant.id, nfe)?;
    let mut cal = cfg.calibration_config();
    cal.batch_size = cal.batch_size.min(16);
    let a = calibrate(&variant, &model, &grid, &cal)?;
    let b = calibrate(&variant, &model, &grid, &cal)?;
    if serde_json::to_string(&a)? != serde_json::to_string(&b)? {
        bail!("calibration is not deterministic");
    }
    Ok(())
}
