//! Named experiment grids: lists of config overrides run back to back.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::compare::{compare_runs, Comparison};
use super::config::ExperimentConfig;
use super::run::run_experiment_on;
use super::run::load_or_generate;

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

fn row(name: &str, pairs: &[(&str, &str)]) -> GridRow {
    GridRow {
        name: name.into(),
        overrides: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

/// The recognition grid: every strategy and roster combination of the
/// results table, plus fine-tuning and rescoring variants. The first row is
/// the baseline.
fn recognition_rows() -> Vec<GridRow> {
    let j = ("strategy", "joint");
    let m = ("strategy", "meta_transfer");
    let ft = ("finetune", "true");
    let lm = ("rescore", "true");
    vec![
        row("only_cs", &[("strategy", "only_cs"), ("roster", "CS")]),
        row("joint_en_zh", &[j, ("roster", "EN+ZH")]),
        row("joint_en_zh_ft", &[j, ("roster", "EN+ZH"), ft]),
        row("joint_en_cs", &[j, ("roster", "EN+CS")]),
        row("joint_zh_cs", &[j, ("roster", "ZH+CS")]),
        row("joint_en_zh_cs", &[j, ("roster", "EN+ZH+CS")]),
        row("joint_en_zh_cs_ft", &[j, ("roster", "EN+ZH+CS"), ft]),
        row("joint_en_zh_cs_ft_lm", &[j, ("roster", "EN+ZH+CS"), ft, lm]),
        row("meta_en_cs", &[m, ("roster", "EN+CS")]),
        row("meta_zh_cs", &[m, ("roster", "ZH+CS")]),
        row("meta_en_zh_cs", &[m, ("roster", "EN+ZH+CS")]),
        row("meta_en_zh_cs_ft", &[m, ("roster", "EN+ZH+CS"), ft]),
        row("meta_en_zh_cs_ft_lm", &[m, ("roster", "EN+ZH+CS"), ft, lm]),
    ]
}

/// The language-model grid.
fn lm_rows() -> Vec<GridRow> {
    let lm = ("model", "lm");
    let r = ("roster", "EN+ZH+CS");
    let ft = ("finetune", "true");
    vec![
        row("lm_only_cs", &[lm, ("strategy", "only_cs"), ("roster", "CS")]),
        row("lm_joint", &[lm, ("strategy", "joint"), r]),
        row("lm_joint_ft", &[lm, ("strategy", "joint"), r, ft]),
        row("lm_meta", &[lm, ("strategy", "meta_transfer"), r]),
        row("lm_meta_ft", &[lm, ("strategy", "meta_transfer"), r, ft]),
    ]
}

pub const PRESETS: [&str; 2] = ["paper", "paper-lm"];

pub fn preset(name: &str) -> Result<Vec<GridRow>> {
    match name {
        "paper" => Ok(recognition_rows()),
        "paper-lm" => Ok(lm_rows()),
        other => Err(Error::Config(vec![format!(
            "grid: unknown preset {other} (known: {})",
            PRESETS.join(", ")
        )])),
    }
}

/// Materializes a grid: one config per row and seed, named `<row>_s<seed>`
/// when more than one seed is given.
pub fn expand(base: &ExperimentConfig, rows: &[GridRow], seeds: &[u64]) -> Result<Vec<ExperimentConfig>> {
    let seeds = if seeds.is_empty() { vec![base.run.seed] } else { seeds.to_vec() };
    let mut out = vec![];
    for r in rows {
        for &s in &seeds {
            let id = if seeds.len() > 1 { format!("{}_s{s}", r.name) } else { r.name.clone() };
            let mut pairs = r.overrides.clone();
            pairs.push(("run.id".into(), id));
            pairs.push(("run.seed".into(), s.to_string()));
            out.push(base.with_overrides(&pairs)?);
        }
    }
    Ok(out)
}

/// Runs every config under `out/<run id>` on one shared corpus, then
/// compares all runs with the first and writes `comparison.txt`.
pub fn run_grid(configs: &[ExperimentConfig], out: &Path, resume: bool) -> Result<Comparison> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Config(vec!["grid: no rows".into()]))?;
    let set = load_or_generate(first)?;
    let mut dirs: Vec<PathBuf> = vec![];
    for cfg in configs {
        if cfg.data != first.data || cfg.run.corpus_dir != first.run.corpus_dir {
            return Err(Error::Config(vec![format!("{}: grid rows must share data settings", cfg.run.id)]));
        }
        let dir = out.join(&cfg.run.id);
        log::info!("grid: running {}", cfg.run.id);
        run_experiment_on(cfg, &set, &dir, resume)?;
        dirs.push(dir);
    }
    let cmp = compare_runs(&dirs, &dirs[0], None)?;
    fs::write(out.join("comparison.txt"), cmp.to_table())?;
    fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&cmp)? + "\n")?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_covers_every_row() {
        let rows = preset("paper").unwrap();
        assert_eq!(rows.len(), 13);
        let cfgs = expand(&ExperimentConfig::default(), &rows, &[1, 2]).unwrap();
        assert_eq!(cfgs.len(), 26);
        assert!(cfgs.iter().all(|c| c.validate().is_ok()));
        assert_eq!(cfgs[0].run.id, "only_cs_s1");
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }
}
