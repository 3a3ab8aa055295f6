use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use promptaug_core::pipeline::{sweep, Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "promptaug", version, about = "Soft-prompt query augmentation for dense retrieval")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON; the built-in synthetic config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for reports and runs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Stage cache; defaults to $PROMPTAUG_CACHE, then <out>/cache.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Recompute this stage and every later one even when cached.
    #[arg(long, global = true)]
    from: Option<Stage>,
    /// Override a config field, e.g. `--set splits.train_queries=10`.
    /// The value is parsed as JSON, falling back to a string.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    Prepare,
    PretrainLm,
    TunePrompt,
    FilterPrompt,
    Generate,
    FilterWeak,
    TrainDr,
    Eval,
    /// Run every stage and print the comparison table.
    Pipeline,
    /// Run the pipeline over a grid of train-query counts and examples per prompt.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "10,30,50")]
        train_queries: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        examples: Vec<usize>,
    },
    /// Print the effective config.
    Config,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("{path}: {part} is not inside an object"))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                bail!("{path}: unknown field {part}");
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).with_context(|| format!("{path}: unknown field {part}"))?;
    }
    unreachable!("split yields at least one part")
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let base = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::synthetic(),
    };
    if common.overrides.is_empty() {
        return Ok(base);
    }
    let mut json: Value = serde_json::from_str(&base.to_json())?;
    for o in &common.overrides {
        let (path, raw) = o.split_once('=').with_context(|| format!("override {o:?} is not PATH=VALUE"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut json, path, value)?;
    }
    Ok(PipelineConfig::from_json(&json.to_string())?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli.common)?;
    let until = match cli.command {
        Command::Config => {
            println!("{}", config.to_json());
            return Ok(());
        }
        Command::Sweep {
            train_queries,
            examples,
        } => {
            let rows = sweep(&config, &train_queries, &examples, &cli.common.out, cli.common.cache)?;
            for row in rows {
                println!("== X={} M={}", row.train_queries, row.examples_per_instance);
                println!("{}", row.report.table());
            }
            return Ok(());
        }
        Command::Prepare => Stage::Prepare,
        Command::PretrainLm => Stage::PretrainLm,
        Command::TunePrompt => Stage::TunePrompt,
        Command::FilterPrompt => Stage::FilterPrompt,
        Command::Generate => Stage::Generate,
        Command::FilterWeak => Stage::FilterWeak,
        Command::TrainDr => Stage::TrainDr,
        Command::Eval | Command::Pipeline => Stage::Eval,
    };
    let pipeline = Pipeline::new(config, &cli.common.out, cli.common.cache)?;
    match pipeline.run(cli.common.from, until)? {
        Some(report) => println!("{}", report.table()),
        None => println!("{until} done: {}", pipeline.stage_dir(until).display()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_patch_nested_fields() {
        let mut v = json!({"a": {"b": 1}, "c": 2});
        set_path(&mut v, "a.b", json!(5)).unwrap();
        assert_eq!(v["a"]["b"], 5);
        assert!(set_path(&mut v, "a.x", json!(1)).is_err());
        assert!(set_path(&mut v, "c.d", json!(1)).is_err());
    }

    #[test]
    fn cli_parses_stage_flags() {
        let cli = Cli::try_parse_from(["promptaug", "eval", "--from", "train-dr", "--set", "splits.train_queries=10"]).unwrap();
        assert_eq!(cli.common.from, Some(Stage::TrainDr));
        let cfg = load_config(&cli.common).unwrap();
        assert_eq!(cfg.splits.train_queries, 10);
    }
}
