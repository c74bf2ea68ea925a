//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage, configuration or input errors, 3 numeric
//! or runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapter::{init_from_templates, init_random, LinearClassifier, Model, TextAdapter};
use crate::bench::{self, EvalSet};
use crate::config::{KeyInit, RunConfig, SEED_ENV};
use crate::error::{Error, Result};
use crate::featio::{read_bundle, write_bundle, FeatureBundle, FeatureMatrix};
use crate::persist::{read_model, write_model};
use crate::stylegen::{content_features, train_styles, StyleBank};
use crate::trainer::fit;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const INIT_FILE: &str = "init.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

const CONFIG_HELP: &str = "\
Configuration is JSON; every key is optional and defaults apply. Print the
effective configuration (defaults merged with --config and --set) with
`promptta config`. Main defaults: seed 0; 7 classes; 11 adapter domains;
encoder token_dim 32, feature_dim 64; stylegen num_styles 80, iterations 100,
step_size 0.12, init_std 0.02, momentum 0.9; train epochs 50, batch_size 128,
lr_classifier 0.05, lr_adapter 0.01, momentum 0.9, alpha 1, beta 2,
sfr_enabled true, ta_enabled true, resample_cadence epoch; synth num_domains 4,
samples_per_domain 50, shift_scale 0.4, noise_scale 0.1; bench seeds 0-4,
alphas and betas 0.5,1,2,3,4,5. PTTA_SEED overrides seed.

Exit codes: 0 ok, 2 usage/config/input error, 3 numeric/runtime error.";

#[derive(Debug, Parser)]
#[command(name = "promptta", version, about = "Source-free domain generalization with style features and a text adapter", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration (defaults when omitted)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `train.alpha=3` or `sfr_enabled=false`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn style vectors with the toy encoder and write a feature bundle
    #[command(after_help = CONFIG_HELP)]
    GenStyles {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output bundle directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the classifier and adapter on a style bundle
    #[command(after_help = CONFIG_HELP)]
    Train {
        /// Bundle with style features (from gen-styles or an extractor)
        #[arg(long, value_name = "DIR")]
        styles: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output model directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write a synthetic unseen-domain evaluation bundle
    #[command(after_help = CONFIG_HELP)]
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output bundle directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a trained model on a bundle's evaluation block
    #[command(after_help = CONFIG_HELP)]
    Eval {
        /// Model directory written by train
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Bundle with eval features and labels
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for report.json
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Residual ratio override [default: the model's alpha]
        #[arg(long)]
        alpha: Option<f64>,
        /// Sharpness override [default: the model's beta]
        #[arg(long)]
        beta: Option<f64>,
    },
    /// SFR x TA ablation table over bench.seeds
    #[command(after_help = CONFIG_HELP)]
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for ablation.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Random vs template adapter initialization over bench.seeds
    #[command(after_help = CONFIG_HELP)]
    CompareInit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for init.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Alpha/beta sensitivity sweep over bench.alphas x bench.betas
    #[command(after_help = CONFIG_HELP)]
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for sweep.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the effective configuration as JSON
    #[command(after_help = CONFIG_HELP)]
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config { .. }
        | Error::Json(_)
        | Error::Io { .. }
        | Error::Format(_)
        | Error::Length { .. }
        | Error::Data(_)
        | Error::Consistency { .. }
        | Error::MissingPrompt(_)
        | Error::UnboundSlot(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(args: &ConfigArgs, seed_env: Option<&str>) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&args.overrides)?;
    config.apply_seed_env(seed_env)?;
    Ok(config)
}

fn write_text(dir: &Path, file: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(file);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn config_value(config: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(config)?)
}

fn gen_styles(config: &RunConfig, out: &Path) -> Result<()> {
    let encoder = bench::toy_encoder(config, config.seed)?;
    let bank = train_styles(&config.stylegen, &encoder, &config.classes, config.seed)?;
    let bundle = FeatureBundle {
        class_names: config.classes.clone(),
        domain_names: config.adapter.domains.clone(),
        content_features: FeatureMatrix::from_tensor(&content_features(&encoder, &config.classes)?)?.with_unit_norm()?,
        adapter_features: FeatureMatrix::from_tensor(&init_from_templates(&encoder, &config.classes, &config.adapter.domains)?)?
            .with_unit_norm()?,
        style_features: Some(FeatureMatrix::from_tensor(bank.features())?.with_unit_norm()?),
        style_vectors: Some(FeatureMatrix::from_rows(bank.vectors())?),
        eval: None,
    };
    write_bundle(&bundle, out)?;
    println!(
        "styles M={} N={} D={} -> {}",
        bank.num_styles(),
        bank.num_classes(),
        bank.dim(),
        out.display()
    );
    Ok(())
}

fn train(config: &RunConfig, styles: &Path, out: &Path) -> Result<()> {
    if !styles.is_dir() {
        return Err(Error::config("--styles", format!("{} is not a directory", styles.display())));
    }
    let bundle = read_bundle(styles)?;
    let features = bundle
        .style_features
        .as_ref()
        .ok_or_else(|| Error::config("--styles", "bundle has no style features"))?;
    let vectors = bundle
        .style_vectors
        .as_ref()
        .map(|v| (0..v.rows()).map(|i| v.row(i).to_vec()).collect())
        .unwrap_or_default();
    let bank = StyleBank::from_parts(bundle.class_names.clone(), vectors, features.to_tensor())?;
    let (n, k, d) = (bundle.num_classes(), bundle.num_domains(), bundle.dim());
    let keys = match config.adapter.init {
        KeyInit::Template => bundle.adapter_features.to_tensor(),
        KeyInit::Random => init_random(n, k, d, config.seed)?,
    };
    let mut model = Model {
        classifier: LinearClassifier::zeros(n, d),
        adapter: TextAdapter::new(keys, n, bundle.domain_names.clone(), config.train.alpha, config.train.beta)?,
    };
    let report = fit(&bank, &mut model, &config.train, config.seed)?;
    write_model(&model, &bundle.class_names, config.seed, config_value(config)?, out)?;
    write_text(out, TRACE_FILE, &report.to_csv())?;
    let last = report.trace.last().expect("at least one epoch");
    println!(
        "trained {} epochs, final loss {:.6}, train acc {:.4} -> {}",
        report.trace.len(),
        last.loss,
        last.train_acc,
        out.display()
    );
    Ok(())
}

fn synth(config: &RunConfig, out: &Path) -> Result<()> {
    let encoder = bench::toy_encoder(config, config.seed)?;
    let set = bench::generate_synth(&encoder, &config.classes, &config.synth, config.seed)?;
    let bundle = FeatureBundle {
        class_names: config.classes.clone(),
        domain_names: config.adapter.domains.clone(),
        content_features: FeatureMatrix::from_tensor(&content_features(&encoder, &config.classes)?)?.with_unit_norm()?,
        adapter_features: FeatureMatrix::from_tensor(&init_from_templates(&encoder, &config.classes, &config.adapter.domains)?)?
            .with_unit_norm()?,
        style_features: None,
        style_vectors: None,
        eval: Some(set.to_block()?),
    };
    write_bundle(&bundle, out)?;
    println!("synthetic eval set of {} samples -> {}", set.len(), out.display());
    Ok(())
}

fn eval(model_dir: &Path, data: &Path, out: &Path, alpha: Option<f64>, beta: Option<f64>) -> Result<()> {
    let (mut model, manifest) = read_model(model_dir)?;
    if let Some(a) = alpha {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::config("--alpha", format!("must be non-negative, got {a}")));
        }
        model.adapter.alpha = a;
    }
    if let Some(b) = beta {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::config("--beta", format!("must be positive, got {b}")));
        }
        model.adapter.beta = b;
    }
    let bundle = read_bundle(data)?;
    if bundle.class_names != manifest.class_names {
        return Err(Error::Consistency {
            what: "class names".into(),
            declared: manifest.class_names.join(","),
            stored: bundle.class_names.join(","),
        });
    }
    let block = bundle
        .eval
        .as_ref()
        .ok_or_else(|| Error::config("--data", "bundle has no evaluation block"))?;
    let mut report = bench::evaluate(&model, &EvalSet::from_block(block)?)?;
    report.seeds = vec![manifest.seed];
    report.config = manifest.config;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_text(out, REPORT_FILE, &json)?;
    println!("mean accuracy {:.4} over {} domains", report.mean_accuracy, report.per_domain.len());
    Ok(())
}

/// Runs one parsed command. `seed_env` is the value of `PTTA_SEED`.
pub fn execute(cli: Cli, seed_env: Option<&str>) -> Result<()> {
    match cli.command {
        Command::GenStyles { config, out } => gen_styles(&load_config(&config, seed_env)?, &out),
        Command::Train { styles, config, out } => train(&load_config(&config, seed_env)?, &styles, &out),
        Command::Synth { config, out } => synth(&load_config(&config, seed_env)?, &out),
        Command::Eval {
            model,
            data,
            out,
            alpha,
            beta,
        } => eval(&model, &data, &out, alpha, beta),
        Command::Ablate { config, out } => {
            let rows = bench::run_ablation(&load_config(&config, seed_env)?)?;
            let path = write_text(&out, ABLATION_FILE, &bench::table_csv("config", &rows))?;
            println!("ablation -> {}", path.display());
            Ok(())
        }
        Command::CompareInit { config, out } => {
            let rows = bench::run_init_comparison(&load_config(&config, seed_env)?)?;
            let path = write_text(&out, INIT_FILE, &bench::table_csv("init", &rows))?;
            println!("init comparison -> {}", path.display());
            Ok(())
        }
        Command::Sweep { config, out } => {
            let rows = bench::sweep_alpha_beta(&load_config(&config, seed_env)?)?;
            let path = write_text(&out, SWEEP_FILE, &bench::sweep_csv(&rows))?;
            println!("sweep of {} points -> {}", rows.len(), path.display());
            Ok(())
        }
        Command::Config { config } => {
            println!("{}", load_config(&config, seed_env)?.to_json());
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    match execute(cli, seed_env.as_deref()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::config("x", "y")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Format("bad".into()).context("file")), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::NonFinite {
                context: "loss".into()
            }),
            EXIT_RUNTIME
        );
        assert_eq!(exit_code(&Error::TooFewStyles(1)), EXIT_RUNTIME);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["promptta", "train"]), EXIT_USAGE);
        assert_eq!(run(["promptta", "bogus"]), EXIT_USAGE);
    }
}
