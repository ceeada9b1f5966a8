mod args;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::Parser;
use serde_json::Value;
use vground::gradcheck::{run_gradcheck, GradCheckConfig};
use vground::harness::{
    ablate_encoders, ablate_top_k, epoch_log_csv, evaluate, predict, train, write_epoch_log,
    write_predictions, AblationResult, EncoderDataset, RunConfig,
};
use vground::{load_checkpoint, load_dataset, write_synthetic, ErrorKind};

use args::{Cli, Command};

const SUBCOMMANDS: &[&str] = &[
    "synth",
    "train",
    "eval",
    "predict",
    "ablate-topk",
    "ablate-encoders",
    "gradcheck",
];

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(vground::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }

    fn tag(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            3 => "data",
            _ => "numeric",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Failure::Usage(m) => m.clone(),
            Failure::Run(e) => e.to_string(),
        };
        // Keep the error on one line.
        write!(f, "error[{}]: {}", self.tag(), msg.replace('\n', " "))
    }
}

impl From<vground::Error> for Failure {
    fn from(e: vground::Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(argv: Vec<OsString>) -> Result<(), Failure> {
    let argv = splice_config(argv)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(Failure::Usage(
                first.trim_start_matches("error: ").to_string(),
            ));
        }
    };

    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    }

    match cli.command {
        Command::Synth(a) => {
            let (train_dir, test_dir) = write_synthetic(&a.to_config(), &a.out)?;
            eprintln!("wrote synthetic datasets under {}", a.out.display());
            println!("{}", train_dir.display());
            println!("{}", test_dir.display());
        }
        Command::Train(a) => {
            let cfg = RunConfig {
                train_dir: Some(a.train.clone()),
                val_dir: a.val.clone(),
                checkpoint_path: Some(a.out.clone()),
                ..a.run.to_config()
            };
            let outcome = train(&cfg)?;
            for r in &outcome.log {
                let val = r
                    .val_ap50
                    .map(|v| format!(", val AP50 {:.2}%", 100.0 * v))
                    .unwrap_or_default();
                eprintln!(
                    "epoch {:>3}  lr {:e}  loss {:.6}{val}",
                    r.epoch, r.lr, r.mean_train_loss
                );
            }
            println!("{}", a.out.display());
            match &a.log {
                Some(path) => {
                    write_epoch_log(path, &outcome.log)?;
                    println!("{}", path.display());
                }
                None => print!("{}", epoch_log_csv(&outcome.log)),
            }
        }
        Command::Eval(a) => {
            let cfg = a.run.to_config();
            let data = load_dataset(&a.data)?;
            let model = load_checkpoint(&a.model, Some((data.meta.d_img, data.meta.d_txt)))?;
            let report = evaluate(&model, &data, &cfg)?;
            eprintln!(
                "AP50 {:.2}%  oracle recall {:.2}%  over {} samples",
                100.0 * report.ap50,
                100.0 * report.oracle_recall,
                report.n_samples
            );
            if let Some(path) = &a.report {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                write_file(path, json + "\n")?;
            }
            let summary = serde_json::json!({
                "ap50": report.ap50,
                "oracle_recall": report.oracle_recall,
                "n_samples": report.n_samples,
            });
            println!("{summary}");
        }
        Command::Predict(a) => {
            let cfg = a.run.to_config();
            let data = load_dataset(&a.data)?;
            let model = load_checkpoint(&a.model, Some((data.meta.d_img, data.meta.d_txt)))?;
            let preds = predict(&model, &data, &cfg)?;
            write_predictions(&a.out, &preds)?;
            eprintln!("wrote {} predictions", preds.len());
            println!("{}", a.out.display());
        }
        Command::AblateTopK(a) => {
            let cfg = RunConfig {
                train_dir: Some(a.train.clone()),
                val_dir: Some(a.val.clone()),
                ..a.run.to_config()
            };
            let result = ablate_top_k(&cfg, &a.ks)?;
            emit_ablation(&result, a.out.as_deref())?;
        }
        Command::AblateEncoders(a) => {
            let datasets = a
                .datasets
                .iter()
                .map(|s| parse_encoder_dataset(s))
                .collect::<Result<Vec<_>, _>>()?;
            let result = ablate_encoders(&datasets, &a.run.to_config())?;
            emit_ablation(&result, a.out.as_deref())?;
        }
        Command::Gradcheck(a) => {
            let cfg = GradCheckConfig {
                trials: a.trials,
                seed: a.seed,
                step: a.step,
                rel_tol: a.tol,
                abs_floor: a.abs_floor,
                ..GradCheckConfig::default()
            };
            let report = run_gradcheck(&cfg)?;
            eprintln!(
                "{} trials, {} coordinates, max relative error {:e}",
                report.trials, report.coordinates, report.max_rel_err
            );
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            );
            if !report.passed {
                return Err(Failure::Run(vground::Error::GradCheckFailed {
                    max_rel_err: report.max_rel_err,
                    tol: cfg.rel_tol,
                }));
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: String) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| {
        Failure::Run(vground::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn emit_ablation(result: &AblationResult, out: Option<&Path>) -> Result<(), Failure> {
    eprint!("{}", result.to_table());
    match out {
        Some(path) => {
            write_file(path, result.to_csv())?;
            println!("{}", path.display());
        }
        None => print!("{}", result.to_csv()),
    }
    Ok(())
}

fn parse_encoder_dataset(arg: &str) -> Result<EncoderDataset, Failure> {
    let (label, dir) = arg
        .split_once('=')
        .filter(|(l, d)| !l.is_empty() && !d.is_empty())
        .ok_or_else(|| Failure::Usage(format!("--dataset expects LABEL=DIR, got `{arg}`")))?;
    let dir = PathBuf::from(dir);
    Ok(EncoderDataset {
        label: label.to_string(),
        train_dir: dir.join("train"),
        eval_dir: dir.join("test"),
    })
}

/// Expands `--config FILE` into flags placed right after the subcommand name,
/// so that flags given explicitly on the command line take precedence.
fn splice_config(argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let mut config_path = None;
    let mut iter = argv.iter().enumerate();
    while let Some((_, arg)) = iter.next() {
        let Some(s) = arg.to_str() else { continue };
        if s == "--config" {
            config_path = iter.next().map(|(_, v)| PathBuf::from(v));
        } else if let Some(v) = s.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(v));
        }
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };

    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(Failure::Usage(format!(
            "--config {}: expected a JSON object",
            path.display()
        )));
    };

    let mut flags = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        let rendered = match v {
            Value::String(s) => s,
            Value::Bool(b) => b.to_string(),
            Value::Number(n) => n.to_string(),
            Value::Array(items) if key == "dataset" || key == "datasets" => {
                for item in items {
                    flags.push(OsString::from("--dataset"));
                    flags.push(OsString::from(scalar(&key, &item)?));
                }
                continue;
            }
            Value::Array(items) => items
                .iter()
                .map(|i| scalar(&key, i))
                .collect::<Result<Vec<_>, _>>()?
                .join(","),
            other => {
                return Err(Failure::Usage(format!(
                    "--config key `{key}` has unsupported value {other}"
                )))
            }
        };
        flags.push(OsString::from(flag));
        flags.push(OsString::from(rendered));
    }

    let pos = argv
        .iter()
        .position(|a| a.to_str().is_some_and(|s| SUBCOMMANDS.contains(&s)))
        .ok_or_else(|| Failure::Usage("--config needs a subcommand".into()))?;
    let mut out = argv[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn scalar(key: &str, v: &Value) -> Result<String, Failure> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(Failure::Usage(format!(
            "--config key `{key}` has unsupported element {other}"
        ))),
    }
}
