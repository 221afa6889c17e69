use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use gtn::checkpoint;
use gtn::data::{load_idx, load_sequence_csv, make_checkerboard, make_xor_features, write_sequence_csv, Dataset};
use gtn::eval::Evaluator;
use gtn::network::{build, Model};
use gtn::train::{evaluate, grid_search, sgd_fit_with, Metrics};
use gtn::verify::{run_battery, Fault, Scale};
use serde::Serialize;

use crate::config::{check_geometry, RunConfig};
use crate::{CodeExt, Failure, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY};

pub struct TrainArgs {
    pub config: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub verbose: bool,
}

#[derive(Serialize)]
struct Summary {
    config_hash: String,
    seed: u64,
    best_epoch: usize,
    epochs: usize,
    train_accuracy: f64,
    val_accuracy: f64,
    test_accuracy: f64,
    /// The trained cell; the grid winner for grid runs.
    learning_rate: f64,
    dropout_keep: f64,
    bond_dim: usize,
}

/// Index and value of the string trace that best explains an overflow:
/// the first non-finite one, else the largest in magnitude.
fn overflowing_string(traces: &[f64]) -> Option<(usize, f64)> {
    traces
        .iter()
        .position(|t| !t.is_finite())
        .or_else(|| {
            (0..traces.len()).max_by(|&a, &b| traces[a].abs().total_cmp(&traces[b].abs()))
        })
        .map(|i| (i, traces[i]))
}

fn numeric_failure(err: gtn::Error) -> Failure {
    match &err {
        gtn::Error::NumericOverflow { traces, .. } => {
            let named = match overflowing_string(traces) {
                Some((i, t)) => format!("string {i} (trace {t:e})"),
                None => "no string traces recorded".to_string(),
            };
            Failure::new(EXIT_NUMERIC, anyhow!(err.to_string()).context(format!("numeric failure in {named}")))
        }
        _ => Failure::new(EXIT_NUMERIC, anyhow!(err)),
    }
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&args.config).code(EXIT_CONFIG)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let splits = cfg.data.load(&base).code(EXIT_DATA)?;
    for (ds, what) in [(&splits.train, "train"), (&splits.val, "validation"), (&splits.test, "test")] {
        check_geometry(&cfg.architecture, ds, what).code(EXIT_DATA)?;
    }
    let out = if cfg.output_dir.is_absolute() { cfg.output_dir.clone() } else { base.join(&cfg.output_dir) };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).code(EXIT_CONFIG)?;

    let (model, metrics, cell) = if cfg.train.grid.is_some() {
        let report = grid_search(&cfg.architecture, &splits.train, &splits.val, &cfg.train).map_err(numeric_failure)?;
        write(&out.join("grid.csv"), report.to_csv())?;
        let (Some(best), Some(model), Some(metrics)) = (report.best, report.best_model, report.best_metrics) else {
            return Err(Failure::new(EXIT_NUMERIC, anyhow!("every grid cell failed; see grid.csv")));
        };
        let row = &report.rows[best];
        (model, metrics, (row.learning_rate, row.dropout_keep, row.bond_dim))
    } else {
        let model = build(&cfg.architecture, cfg.train.seed).code(EXIT_CONFIG)?;
        let verbose = args.verbose;
        let fit = sgd_fit_with(model, &splits.train, &splits.val, &cfg.train, |e| {
            if verbose {
                eprintln!(
                    "epoch {:>4}  loss {:.6}  train {:.4}  val {:.4}",
                    e.epoch, e.train_loss, e.train_acc, e.val_acc
                );
            }
        });
        match fit {
            Ok((model, metrics)) => {
                let cell = (cfg.train.learning_rate, cfg.train.dropout_keep, cfg.architecture.bond_dim);
                (model, metrics, cell)
            }
            Err(e) => {
                write(&out.join("metrics.csv"), e.metrics.to_csv())?;
                checkpoint::save(&e.last_good, out.join("last-good.ckpt")).code(EXIT_DATA)?;
                return Err(numeric_failure(e.source));
            }
        }
    };
    let metrics = Metrics {
        test_accuracy: Some(evaluate(&model, &splits.test).map_err(numeric_failure)?),
        ..metrics
    };
    write(&out.join("metrics.csv"), metrics.to_csv())?;
    checkpoint::save(&model, out.join("model.ckpt")).code(EXIT_DATA)?;
    let summary = Summary {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        best_epoch: metrics.best_epoch,
        epochs: metrics.epochs.len(),
        train_accuracy: evaluate(&model, &splits.train).map_err(numeric_failure)?,
        val_accuracy: metrics.best().map_or(f64::NAN, |b| b.val_acc),
        test_accuracy: metrics.test_accuracy.unwrap_or(f64::NAN),
        learning_rate: cell.0,
        dropout_keep: cell.1,
        bond_dim: cell.2,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&out.join("summary.json"), json + "\n")?;
    println!(
        "train {:.4}  val {:.4}  test {:.4}  -> {}",
        summary.train_accuracy,
        summary.val_accuracy,
        summary.test_accuracy,
        out.display()
    );
    Ok(())
}

fn write(path: &Path, contents: String) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).code(EXIT_DATA)
}

pub enum EvalData {
    Config { path: PathBuf, split: String },
    Idx { images: PathBuf, labels: PathBuf },
    SequenceCsv(PathBuf),
}

/// Accuracy and confusion counts, rows indexed by true class.
pub fn confusion(model: &Model, ds: &Dataset) -> gtn::Result<(f64, Vec<Vec<usize>>)> {
    let k = model.spec().num_classes;
    let mut counts = vec![vec![0; k]; k];
    let evaluator = Evaluator::new(model);
    for i in 0..ds.len() {
        let predicted = evaluator.posterior(ds.sample(i))?.predicted();
        counts[ds.label(i)][predicted] += 1;
    }
    Ok((evaluator.loss_and_accuracy(ds)?.1, counts))
}

pub fn confusion_csv(counts: &[Vec<usize>]) -> String {
    let k = counts.len();
    let mut out = String::from("true\\predicted");
    for c in 0..k {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (t, row) in counts.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn eval(checkpoint_path: &Path, data: EvalData, confusion_path: Option<PathBuf>) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading {}", checkpoint_path.display()))
        .code(EXIT_DATA)?;
    let ds = match data {
        EvalData::Config { path, split } => {
            let cfg = RunConfig::load(&path).code(EXIT_CONFIG)?;
            let splits = cfg.data.load(path.parent().unwrap_or(Path::new("."))).code(EXIT_DATA)?;
            match split.as_str() {
                "train" => splits.train,
                "val" => splits.val,
                "test" => splits.test,
                other => return Err(Failure::new(EXIT_CONFIG, anyhow!("unknown split {other:?}"))),
            }
        }
        EvalData::Idx { images, labels } => load_idx(&images, &labels).context("loading IDX data").code(EXIT_DATA)?,
        EvalData::SequenceCsv(path) => load_sequence_csv(&path).context("loading sequence CSV").code(EXIT_DATA)?,
    };
    check_geometry(model.spec(), &ds, "dataset").code(EXIT_DATA)?;
    let (acc, counts) = confusion(&model, &ds).map_err(numeric_failure)?;
    let path = confusion_path.unwrap_or_else(|| checkpoint_path.with_file_name("confusion.csv"));
    write(&path, confusion_csv(&counts))?;
    println!("accuracy {acc:?} on {} samples; confusion matrix in {}", ds.len(), path.display());
    Ok(())
}

pub fn verify(scale: Scale, fault: Option<Fault>) -> Result<(), Failure> {
    let outcomes = run_battery(scale, fault);
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    for o in &outcomes {
        println!("{:<width$}  {}  {}", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failing: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_VERIFY, anyhow!("failing properties: {}", failing.join(", "))))
    }
}

pub fn export_features(checkpoint_path: &Path, table: usize, output: Option<PathBuf>) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading {}", checkpoint_path.display()))
        .code(EXIT_DATA)?;
    let fm = model.feature_map();
    if !fm.is_learnable() {
        return Err(Failure::new(
            EXIT_CONFIG,
            anyhow!("the checkpoint uses fixed {:?} features, which have no learned table to export", fm.kind()),
        ));
    }
    let csv = fm.export_csv(table).code(EXIT_CONFIG)?;
    match output {
        Some(path) => write(&path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn gen_data(kind: &str, n: usize, cells: usize, seed: u64, output: &Path) -> Result<(), Failure> {
    let ds = match kind {
        "xor" => make_xor_features(n, seed),
        "checkerboard" => make_checkerboard(n, cells, seed),
        other => return Err(Failure::new(EXIT_CONFIG, anyhow!("unknown generator {other:?}"))),
    }
    .code(EXIT_CONFIG)?;
    write(output, write_sequence_csv(&ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overflow_names_first_nonfinite_string() {
        assert_eq!(overflowing_string(&[1.0, f64::INFINITY, f64::NAN]).map(|p| p.0), Some(1));
        assert_eq!(overflowing_string(&[1.0, -1e300, 3.0]).map(|p| p.0), Some(1));
        assert_eq!(overflowing_string(&[]), None);
    }

    #[test]
    fn confusion_rows_carry_true_classes() {
        let csv = confusion_csv(&[vec![2, 1], vec![0, 3]]);
        assert_eq!(csv, "true\\predicted,0,1\n0,2,1\n1,0,3\n");
    }
}
