//! `groundlab` subcommands.

use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use groundlab_core::harness::{RunConfig, RunStatus};
use groundlab_core::optim::OptimizerKind;
use groundlab_core::synthgen::{generate_dataset, Split};

use crate::config::{load_config, to_toml};
use crate::dataset::{load_dataset, save_dataset_dir};
use crate::report::write_report;
use crate::run::{collect_runs, default_run_name, evaluate_checkpoint, output_root, resolve_dataset, train_to_dir, CHECKPOINT_FILE, CONFIG_FILE, OUT_ENV};

#[derive(Parser, Debug)]
#[command(name = "groundlab", version, about = "Grounding and rationalization experiments on synthetic causal VideoQA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `model.hidden=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Use Adam (beta1 0.9, beta2 0.999, eps 1e-8) instead of SGD with momentum.
    #[arg(long)]
    pub adam: bool,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref(), &self.overrides)?;
        if self.adam {
            cfg.optimizer.kind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Commands {
    /// Generate a synthetic dataset from the `[data]` section of a config.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for `dataset.gld` and `manifest.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run into `$GROUNDLAB_OUT/<name>`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory name; defaults to `<method>-seed<seed>`.
        #[arg(long)]
        name: Option<String>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Checkpoint file, or a run directory containing one.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container or directory; defaults to the run's own config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test_ood")]
        split: String,
        /// Write per-instance predicted masks and rationales as JSON.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        /// Write the metrics record as JSON instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the cartesian product of a grid of overrides over several seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `KEY=V1,V2,...`; repeatable. Values are TOML literals.
        #[arg(long = "grid", value_name = "KEY=VALUES")]
        grid: Vec<String>,
        /// Seeds applied to both `seed` and `data.seed`.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Concurrent training processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Sweep directory name under the output root.
        #[arg(long, default_value = "sweep")]
        name: String,
    },
    /// Aggregate run directories into a report bundle.
    Report {
        /// Run directories or directories of runs.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).with_context(|| format!("unknown split `{s}` (train, val, test_iid, test_ood)"))
}

/// Splits `a,b,[c,d]` at top-level commas.
fn split_values(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let (mut depth, mut cur) = (0i32, String::new());
    for ch in raw.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur);
    out.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Every combination of grid values as override lists plus a directory-safe label.
pub fn expand_grid(grid: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    let mut combos: Vec<(String, Vec<String>)> = vec![(String::new(), Vec::new())];
    for g in grid {
        let (key, values) = g.split_once('=').with_context(|| format!("grid entry `{g}` is not KEY=VALUES"))?;
        let values = split_values(values);
        if values.is_empty() {
            bail!("grid entry `{g}` has no values");
        }
        let short = key.rsplit('.').next().unwrap_or(key);
        combos = combos
            .into_iter()
            .flat_map(|(label, o)| {
                values.iter().map(move |v| {
                    let safe: String = v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
                    let label = if label.is_empty() { format!("{short}={safe}") } else { format!("{label},{short}={safe}") };
                    let mut o = o.clone();
                    o.push(format!("{key}={v}"));
                    (label, o)
                })
            })
            .collect();
    }
    Ok(combos)
}

fn wait_one(children: &mut Vec<(String, Child)>) -> Result<()> {
    let (name, mut child) = children.remove(0);
    let status = child.wait()?;
    if !status.success() {
        bail!("sweep run {name} failed with {status}");
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Commands::Generate { config, out } => {
            let cfg = config.load()?;
            let bundle = generate_dataset(&cfg.data)?;
            save_dataset_dir(&bundle, &out)?;
            let sizes: Vec<String> = Split::ALL.iter().map(|&s| format!("{} {}", s.name(), bundle.split(s).len())).collect();
            println!("wrote {} ({})", out.display(), sizes.join(", "));
        }
        Commands::Train { config, name, quiet } => {
            let cfg = config.load()?;
            let data = resolve_dataset(&cfg)?;
            let dir = output_root().join(name.unwrap_or_else(|| default_run_name(&cfg)));
            let record = train_to_dir(&cfg, &data, &dir, !quiet)?;
            for m in &record.final_metrics {
                let iou = m.grounding.map_or_else(String::new, |g| format!("  iou {:.4}", g.iou));
                println!("{:<9} acc {:.4}{iou}", m.split, m.accuracy.unwrap_or(f64::NAN));
            }
            println!("run directory {}", dir.display());
            if record.status == RunStatus::Diverged {
                bail!("training diverged: {}", record.diagnostic.unwrap_or_default());
            }
        }
        Commands::Eval { checkpoint, dataset, split, dump_masks, out } => {
            let split = parse_split(&split)?;
            let (ckpt, run_dir) = if checkpoint.is_dir() {
                (checkpoint.join(CHECKPOINT_FILE), Some(checkpoint.clone()))
            } else {
                (checkpoint.clone(), checkpoint.parent().map(Path::to_path_buf))
            };
            let data = match dataset {
                Some(p) => load_dataset(&p)?,
                None => {
                    let cfg_path = run_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file()).context(
                        "no --dataset given and no config.toml next to the checkpoint",
                    )?;
                    resolve_dataset(&load_config(Some(&cfg_path), &[])?)?
                }
            };
            let record = evaluate_checkpoint(&ckpt, &data, split, dump_masks.as_deref())?;
            let text = serde_json::to_string_pretty(&record)?;
            match out {
                Some(p) => std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
        }
        Commands::Sweep { config, grid, seeds, jobs, name } => {
            let base = config.load()?;
            let root = output_root().join(&name);
            std::fs::create_dir_all(&root)?;
            let exe = std::env::current_exe()?;
            let mut children: Vec<(String, Child)> = Vec::new();
            for (label, overrides) in expand_grid(&grid)? {
                for &seed in &seeds {
                    let mut o = overrides.clone();
                    o.push(format!("seed={seed}"));
                    o.push(format!("data.seed={seed}"));
                    let cfg = crate::config::config_from_str(Some(&to_toml(&base)?), &o)?;
                    let run_name = if label.is_empty() {
                        default_run_name(&cfg)
                    } else {
                        format!("{}-{label}-seed{seed}", cfg.method.name())
                    };
                    let cfg_path = root.join(format!("{run_name}.toml"));
                    std::fs::write(&cfg_path, to_toml(&cfg)?)?;
                    while children.len() >= jobs.max(1) {
                        wait_one(&mut children)?;
                    }
                    eprintln!("sweep: starting {run_name}");
                    let child = Command::new(&exe)
                        .env(OUT_ENV, &root)
                        .args(["train", "--quiet", "--name", &run_name, "--config"])
                        .arg(&cfg_path)
                        .spawn()?;
                    children.push((run_name, child));
                }
            }
            while !children.is_empty() {
                wait_one(&mut children)?;
            }
            let mut runs = collect_runs(&[root.clone()])?;
            write_report(&mut runs, &root.join("report"))?;
            println!("sweep results in {}", root.display());
        }
        Commands::Report { runs, out } => {
            let mut inputs = collect_runs(&runs)?;
            let summary = write_report(&mut inputs, &out)?;
            println!("{} runs, {} summary rows -> {}", inputs.len(), summary.len(), out.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expands_to_the_cartesian_product() {
        let combos = expand_grid(&["model.weights.igv_lambda1=0,1".into(), "data.causal_span=[2,3],[3,4]".into()]).unwrap();
        assert_eq!(combos.len(), 4);
        assert_eq!(combos[1].1, vec!["model.weights.igv_lambda1=0".to_string(), "data.causal_span=[3,4]".to_string()]);
        assert_eq!(combos[0].0, "igv_lambda1=0,causal_span=_2_3_");
        assert!(expand_grid(&["nokey".into()]).is_err());
        assert_eq!(expand_grid(&[]).unwrap().len(), 1);
    }

    #[test]
    fn cli_parses_every_subcommand() {
        for args in [
            vec!["groundlab", "generate", "--out", "d"],
            vec!["groundlab", "train", "--set", "method=erm", "--quiet", "--adam"],
            vec!["groundlab", "eval", "--checkpoint", "c", "--split", "val"],
            vec!["groundlab", "sweep", "--grid", "model.hidden=8,16", "--seeds", "0,1", "--jobs", "2"],
            vec!["groundlab", "report", "--runs", "a", "b", "--out", "r"],
        ] {
            Cli::try_parse_from(args).unwrap();
        }
    }
}
