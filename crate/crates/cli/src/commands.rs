//! Subcommand implementations. Run directories are append-only: repeated
//! runs with identical flags rewrite identical bytes.

use crate::config::RunConfig;
use normshift_core::checkpoint::{load_checkpoint, save_checkpoint};
use normshift_core::datagen::{self, DomainSpec};
use normshift_core::evalkit::{self, EvalReport, GridConfig};
use normshift_core::gradsuite::{run_layer_gradient_suite, SUITE_THRESHOLD};
use normshift_core::model::build_model;
use normshift_core::trainer;
use normshift_core::{Error, Result};
use std::path::Path;

pub fn gen_data(spec: &str, out: &Path, seed: u64, n: usize, classes: usize) -> Result<()> {
    let spec = DomainSpec::parse(spec, seed)?;
    let ds = datagen::realize(&spec, n, classes)?;
    datagen::write_dataset(&ds, out)?;
    println!(
        "wrote {} images ({}x{}x{}) of domain {} level {} to {}",
        ds.len(),
        ds.images.c,
        ds.images.h,
        ds.images.w,
        ds.manifest.domain,
        ds.manifest.level,
        out.display()
    );
    Ok(())
}

pub fn train(config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let ada_cfg = cfg.ada_config();
    if let Some(a) = &ada_cfg {
        a.validate()?;
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("resolved-config.json"), cfg.resolved_json()?)?;

    let data = datagen::gen_source(cfg.data.seed, cfg.data.n_train, cfg.data.classes)?;
    let mut model = build_model(model_cfg)?;
    let ckpt_path = out_dir.join("checkpoint.nsck");

    let outcome = trainer::train(&mut model, &data, &train_cfg, ada_cfg.as_ref());
    // On divergence the loop aborts before applying a bad update, so the
    // model still holds the last good parameters; keep them on disk.
    save_checkpoint(&model, &ckpt_path)?;
    let out = outcome?;

    let report = EvalReport { run_id: cfg.eval.run_id.clone(), entries: out.metrics };
    std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("trajectory.csv"), out.trajectory.to_csv())?;
    for round in &out.rounds {
        println!(
            "augmentation round {} at step {}: dataset grew to {}",
            round.round, round.step, round.dataset_size
        );
    }
    println!(
        "trained {} steps (final loss {:.4}); artifacts in {}",
        out.steps,
        out.final_loss,
        out_dir.display()
    );
    Ok(())
}

fn parse_grid(grid: &str, seed: u64) -> Result<Vec<DomainSpec>> {
    if grid == "full" {
        return Ok(evalkit::full_grid(seed));
    }
    grid.split(',').map(|s| DomainSpec::parse(s.trim(), seed)).collect()
}

pub fn eval(
    checkpoint: &Path,
    grid: &str,
    seed: u64,
    n: usize,
    batch: usize,
    run_id: &str,
    out: &Path,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let specs = parse_grid(grid, seed)?;
    let grid_cfg = GridConfig { specs, n, classes: model.config.classes, batch };
    let report = evalkit::evaluate_grid(&model, &grid_cfg, run_id)?;
    std::fs::write(out, report.to_csv())?;
    let (acc, brier) = report.overall_average();
    println!(
        "evaluated {} domains: mean accuracy {:.4}, mean brier {:.4} -> {}",
        report.entries.len(),
        acc,
        brier,
        out.display()
    );
    Ok(())
}

pub fn gradcheck(seeds: &[u64]) -> Result<()> {
    let checks = run_layer_gradient_suite(seeds)?;
    let mut worst = 0.0f64;
    for c in &checks {
        println!("{:<12} max relative error {:.3e}", c.name, c.max_err);
        worst = worst.max(c.max_err);
    }
    if worst >= SUITE_THRESHOLD {
        return Err(Error::numeric(format!(
            "gradient suite failed: worst error {worst:.3e} >= {SUITE_THRESHOLD:.0e}"
        )));
    }
    println!("all layers below {SUITE_THRESHOLD:.0e}");
    Ok(())
}

pub fn dump_stats(
    checkpoint: &Path,
    spec: &str,
    seed: u64,
    n: usize,
    layer: usize,
    out: &Path,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let spec = DomainSpec::parse(spec, seed)?;
    let ds = datagen::realize(&spec, n, model.config.classes)?;
    let csv = evalkit::dump_learned_stats(&model, &ds, layer)?;
    std::fs::write(out, csv)?;
    println!("wrote {} statistic rows to {}", n, out.display());
    Ok(())
}
