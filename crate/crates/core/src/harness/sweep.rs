//! Grid sweeps over ρ (Gaussian task) and fixed γ (counting task).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::blocks::BlockKind;
use crate::error::{DmpsError, Result};
use crate::tasks::Task;

use super::config::RunConfig;
use super::export::mean_sd;
use super::train::{train, TrainOutcome};
use super::write_metrics;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub parameter: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Grid value with the highest mean accuracy; ties go to the first.
    pub fn argmax(&self) -> Option<f64> {
        self.rows
            .iter()
            .fold(None::<&SweepRow>, |best, r| match best {
                Some(b) if b.mean >= r.mean => Some(b),
                _ => Some(r),
            })
            .map(|r| r.value)
    }

    pub fn row(&self, value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// One row per grid point: the value, one column per seed, mean and sd.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec![self.parameter.clone()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        header.push("mean".into());
        header.push("sd".into());
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let mut cells = vec![format!("{}", row.value)];
            cells.extend(row.accuracies.iter().map(|a| format!("{a}")));
            cells.push(format!("{}", row.mean));
            cells.push(format!("{}", row.sd));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn check_grid(grid: &[f64], seeds: &[u64]) -> Result<()> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(DmpsError::config("sweeps need a non-empty grid and at least one seed"));
    }
    for (i, a) in grid.iter().enumerate() {
        if grid[..i].contains(a) {
            return Err(DmpsError::config(format!("grid value {a} appears twice")));
        }
    }
    Ok(())
}

fn run_grid(
    base: &RunConfig,
    parameter: &str,
    grid: &[f64],
    seeds: &[u64],
    apply: impl Fn(&mut RunConfig, f64),
    out_dir: Option<&Path>,
    on_run: &mut dyn FnMut(f64, u64, &TrainOutcome),
) -> Result<SweepTable> {
    check_grid(grid, seeds)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut config = base.clone();
        apply(&mut config, value);
        config.validate()?;
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            config.seed = seed;
            let outcome = train(&config, &mut |_| {})?;
            if let Some(dir) = out_dir {
                let run_dir = dir.join(format!("{parameter}_{value}")).join(format!("seed_{seed}"));
                fs::create_dir_all(&run_dir)?;
                write_metrics(&run_dir.join("metrics.jsonl"), &outcome.metrics)?;
            }
            on_run(value, seed, &outcome);
            accuracies.push(outcome.evaluation.accuracy);
        }
        let (mean, sd) = mean_sd(&accuracies);
        rows.push(SweepRow {
            value,
            accuracies,
            mean,
            sd,
        });
    }
    let table = SweepTable {
        parameter: parameter.to_string(),
        seeds: seeds.to_vec(),
        rows,
    };
    if let Some(dir) = out_dir {
        table.write_csv(fs::File::create(dir.join("results.csv"))?)?;
    }
    Ok(table)
}

/// Trains the Gaussian task once per `(ρ, seed)`.
pub fn sweep_rho(
    base: &RunConfig,
    grid: &[f64],
    seeds: &[u64],
    out_dir: Option<&Path>,
    on_run: &mut dyn FnMut(f64, u64, &TrainOutcome),
) -> Result<SweepTable> {
    if base.task != Task::Gaussian {
        return Err(DmpsError::config("the rho sweep runs on the gaussian task"));
    }
    run_grid(base, "rho", grid, seeds, |c, rho| c.gaussian.rho = rho, out_dir, on_run)
}

/// Trains a fixed-γ set-denoising model on the counting task once per
/// `(γ, seed)`.
pub fn sweep_gamma(
    base: &RunConfig,
    grid: &[f64],
    seeds: &[u64],
    out_dir: Option<&Path>,
    on_run: &mut dyn FnMut(f64, u64, &TrainOutcome),
) -> Result<SweepTable> {
    if base.task != Task::Counting {
        return Err(DmpsError::config("the gamma sweep runs on the counting task"));
    }
    if let Some(g) = grid.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(DmpsError::config(format!("gamma grid values must lie in (0, 1), got {g}")));
    }
    run_grid(
        base,
        "gamma",
        grid,
        seeds,
        |c, gamma| {
            c.model.blocks.kind = BlockKind::Denoising;
            c.model.blocks.gamma.learnable = false;
            c.model.blocks.gamma.value = gamma;
        },
        out_dir,
        on_run,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> RunConfig {
        let mut c = RunConfig::defaults(task);
        c.training.batches = 2;
        c.training.batch_size = 4;
        c.training.log_interval = 1;
        c.training.monitor_sets = 4;
        c.training.eval_sets = 8;
        c
    }

    #[test]
    fn table_covers_grid_once_and_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut runs = 0;
        let t = sweep_gamma(&tiny(Task::Counting), &[0.3, 0.7], &[4, 5], Some(dir.path()), &mut |_, _, _| runs += 1)
            .unwrap();
        assert_eq!(runs, 4);
        assert_eq!(t.rows.len(), 2);
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "gamma,seed_4,seed_5,mean,sd");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.3,"));
        assert!(dir.path().join("gamma_0.7/seed_5/metrics.jsonl").exists());
        assert!(t.argmax().is_some());
    }

    #[test]
    fn wrong_task_or_grid_is_config_error() {
        let noop = &mut |_: f64, _: u64, _: &TrainOutcome| {};
        assert!(matches!(sweep_rho(&tiny(Task::Counting), &[0.0], &[0], None, noop), Err(DmpsError::Config(_))));
        assert!(matches!(sweep_gamma(&tiny(Task::Counting), &[1.0], &[0], None, noop), Err(DmpsError::Config(_))));
        assert!(matches!(sweep_rho(&tiny(Task::Gaussian), &[0.5, 0.5], &[0], None, noop), Err(DmpsError::Config(_))));
        assert!(matches!(sweep_rho(&tiny(Task::Gaussian), &[1.0], &[0], None, noop), Err(DmpsError::Config(_))));
    }
}
