use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lightnn::costmodel::{emit_report, estimate_network, pareto_flags, CostTable, ReportFormat};
use lightnn::data::{load_csv, load_mnist, mnist_files, load_idx, Dataset, Splits};
use lightnn::format::{self, model_storage_bits};
use lightnn::fsutil::write_atomic;
use lightnn::inference::{argmax_rows, infer_fixed, infer_float, FixedOptions, FixedPointFormat};
use lightnn::network::NetworkSpec;
use lightnn::trainer::{finalize, run_training_with, write_metrics_csv, Checkpoint, LrSchedule, TrainConfig};
use lightnn::{Error, ModelVariant, QuantizedModel32, Result};
use serde::{Deserialize, Serialize};

use crate::{Command, DataArgs, EvalArgs, TrainArgs};

pub const RUN_FILE: &str = "run.json";
const CSV_TEST_FRACTION: f64 = 0.2;
const EVAL_CHUNK: usize = 1000;

/// Summary of one training run, read back by `compare`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub preset: String,
    pub variant: ModelVariant,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_err: f64,
    pub test_err: f64,
    pub config_digest: String,
    pub config: TrainConfig,
    pub network: NetworkSpec,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Quantize { ckpt, out } => quantize(&ckpt, &out),
        Command::Eval(a) => eval(a),
        Command::Estimate { model, cost_table, out, format } => estimate(&model, cost_table.as_deref(), &out, format),
        Command::Inspect { model, json } => inspect(&model, json),
        Command::Compare { metrics_dir, cost_table, out } => compare(&metrics_dir, cost_table.as_deref(), out.as_deref()),
    }
}

fn is_csv(path: &Path) -> bool {
    path.is_file()
}

/// The CSV label column argument, defaulting to the last column.
fn label_column(args: &DataArgs) -> Result<String> {
    if let Some(c) = &args.label_column {
        return Ok(c.clone());
    }
    let text = std::fs::read_to_string(&args.data).map_err(|e| Error::Io { path: args.data.clone(), source: e })?;
    let width = text.lines().next().map_or(0, |l| l.split(',').count());
    if width == 0 {
        return Err(Error::Dataset(format!("{} is empty", args.data.display())));
    }
    Ok((width - 1).to_string())
}

fn load_csv_data(args: &DataArgs) -> Result<Dataset<f32>> {
    Ok(load_csv::<f32>(&args.data, &label_column(args)?, args.header)?.data)
}

fn reject_csv_flags(args: &DataArgs) -> Result<()> {
    if args.label_column.is_some() || args.header {
        return Err(Error::Config("--label-column and --header only apply to CSV data".into()));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        schedule: LrSchedule { initial: a.lr, decay_epoch: Some(a.decay_epoch), decay_factor: 0.1 },
        optimizer: a.optimizer.into(),
        rounding: a.rounding.into(),
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let (mut splits, spec) = if is_csv(&a.data.data) {
        if a.preset != "mlp" {
            return Err(Error::Config(format!("CSV data needs --preset mlp, got `{}`", a.preset)));
        }
        let data = load_csv_data(&a.data)?;
        let spec = NetworkSpec::mlp("mlp", data.sample_shape()[0], &a.hidden, data.classes)?;
        let splits = Splits::shuffled(&data, config.validation_fraction, CSV_TEST_FRACTION, a.seed)?;
        (splits, spec)
    } else {
        reject_csv_flags(&a.data)?;
        let spec = NetworkSpec::preset(&a.preset)?;
        let (images, _) = mnist_files(&a.data.data, true);
        let n = load_idx_count(&images)?;
        let validation = (n as f64 * config.validation_fraction).round() as usize;
        (load_mnist::<f32>(&a.data.data, validation)?, spec)
    };
    if let Some(limit) = a.train_limit {
        splits.train = splits.train.range(0, limit.min(splits.train.len()))?;
    }
    let spec = spec.for_variant(a.variant);

    let outcome = run_training_with(&splits, &spec, a.variant, &config, |m| {
        println!("epoch {} train_loss {:.6} val_err {:.4} test_err {:.4}", m.epoch, m.train_loss, m.val_err, m.test_err);
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let best = outcome.best_metrics().to_owned();
    Checkpoint::new(&config, outcome.best_epoch, outcome.best.clone()).save(&a.out.join("checkpoint.json"))?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &outcome.metrics)?;
    write_atomic(&a.out.join("metrics.csv"), &csv)?;
    let record = RunRecord {
        preset: a.preset,
        variant: a.variant,
        seed: a.seed,
        best_epoch: outcome.best_epoch,
        val_err: best.val_err,
        test_err: best.test_err,
        config_digest: config.digest(),
        config,
        network: spec,
    };
    write_atomic(&a.out.join(RUN_FILE), &serde_json::to_vec_pretty(&record)?)?;
    println!("best epoch {} val_err {:.4} test_err {:.4}", outcome.best_epoch, best.val_err, best.test_err);
    Ok(())
}

/// Image count from an IDX header without reading the pixels.
fn load_idx_count(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut head = [0u8; 8];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(u32::from_be_bytes(head[4..8].try_into().unwrap()) as usize)
}

fn quantize(ckpt: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(ckpt)?;
    let model = finalize(&ckpt.state)?;
    format::save(&model, out)?;
    println!(
        "wrote {} variant {} storage_bits {}",
        out.display(),
        model.variant,
        model_storage_bits(&model)
    );
    Ok(())
}

fn eval_data(args: &DataArgs) -> Result<Dataset<f32>> {
    if is_csv(&args.data) {
        load_csv_data(args)
    } else {
        reject_csv_flags(args)?;
        let (images, labels) = mnist_files(&args.data, false);
        Ok(load_idx::<f32>(&images, &labels)?.data)
    }
}

fn predictions(model: &QuantizedModel32, data: &Dataset<f32>, fixed: Option<FixedPointFormat>, opts: FixedOptions) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let x = data.inputs.slice_rows(start, (start + EVAL_CHUNK).min(data.len()))?;
        match fixed {
            Some(fmt) => out.extend(infer_fixed(model, &x, fmt, opts)?.predictions()),
            None => out.extend(argmax_rows(&infer_float(model, &x)?)),
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = format::load(&a.model)?;
    let fixed = match a.fixed_bits {
        Some(n) => Some(match a.frac_bits {
            Some(f) => FixedPointFormat::new(n, f)?,
            None => FixedPointFormat::with_default_frac(n)?,
        }),
        None => None,
    };
    let opts = FixedOptions { quantize_first: a.quantize_first };
    if fixed.is_some() && model.variant == ModelVariant::Conventional && !a.quantize_first {
        return Err(Error::Unsupported("fixed-point evaluation of a conventional model needs --quantize-first".into()));
    }
    let mut data = eval_data(&a.data)?;
    if let Some(limit) = a.limit {
        data = data.range(0, limit.min(data.len()))?;
    }
    if data.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let classes = model.classes()?;
    if data.classes > classes {
        return Err(Error::Shape(format!("{} classes in data, {classes} model outputs", data.classes)));
    }
    let preds = predictions(&model, &data, fixed, opts)?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(&data.labels) {
        confusion[l][p] += 1;
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let mode = match fixed {
        Some(f) => format!("fixed Q{}.{}", f.total_bits - f.frac_bits, f.frac_bits),
        None => "float".into(),
    };
    println!(
        "accuracy {:.4} error {:.4} ({correct}/{}) mode {mode}",
        correct as f64 / data.len() as f64,
        1.0 - correct as f64 / data.len() as f64,
        data.len()
    );
    println!("confusion (rows: label, columns: predicted)");
    for (label, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("{label}: {}", cells.join(" "));
    }
    Ok(())
}

fn cost_table(path: Option<&Path>) -> Result<CostTable> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            CostTable::from_json(&text)
        }
        None => Ok(CostTable::default()),
    }
}

fn estimate(model: &Path, table: Option<&Path>, out: &Path, fmt: Option<String>) -> Result<()> {
    let fmt: ReportFormat = match fmt {
        Some(f) => f.parse()?,
        None => match out.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        },
    };
    let table = cost_table(table)?;
    let model = format::load(model)?;
    let report = estimate_network(&model.network_spec()?, model.variant, &table)?;
    write_atomic(out, emit_report(&report, fmt)?.as_bytes())?;
    println!(
        "{} storage_bits {} energy {} (memory {}, logic {}) {}",
        report.model, report.storage_bits, report.energy.total, report.energy.memory, report.energy.logic, report.units
    );
    Ok(())
}

/// Formats an integer with thousands separators.
fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn inspect(path: &Path, json: bool) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let info = format::inspect(&bytes)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    let mut s = String::new();
    let _ = writeln!(s, "magic LNN1 version {}", info.version);
    let _ = writeln!(s, "variant {} (id {})", info.variant, info.variant.id());
    let _ = writeln!(s, "name {}", info.name);
    let _ = writeln!(s, "input {:?}", info.input_shape);
    let _ = writeln!(s, "layers {}", info.layers.len());
    for (i, l) in info.layers.iter().enumerate() {
        let _ = writeln!(s, "  {i:>2} {:<40} -> {:?}  weights {} biases {}", l.label, l.output_shape, l.weights, l.biases);
    }
    let _ = writeln!(s, "storage_bits {}", info.storage_bits);
    let _ = writeln!(s, "storage {} bits", grouped(info.storage_bits));
    let _ = writeln!(s, "file_bytes {}", info.file_bytes);
    let _ = writeln!(s, "histogram ({} distinct values)", info.histogram.len());
    // raw conventional weights have too many distinct values to list
    if info.variant != ModelVariant::Conventional {
        for (v, n) in &info.histogram {
            let _ = writeln!(s, "  {v:>12} {n}");
        }
    }
    print!("{s}");
    Ok(())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_runs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RUN_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareRow {
    variant: ModelVariant,
    config: String,
    test_error: f64,
    estimated_energy: f64,
    pareto: bool,
}

fn compare(dir: &Path, table: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let table = cost_table(table)?;
    let mut runs = Vec::new();
    find_runs(dir, &mut runs)?;
    if runs.is_empty() {
        return Err(Error::Dataset(format!("no {RUN_FILE} files under {}", dir.display())));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for path in &runs {
        let text = std::fs::read(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let run: RunRecord = serde_json::from_slice(&text)?;
        let config = path
            .parent()
            .and_then(|p| p.strip_prefix(dir).ok())
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        let energy = estimate_network(&run.network, run.variant, &table)?.energy.total;
        rows.push(CompareRow { variant: run.variant, config, test_error: run.test_err, estimated_energy: energy, pareto: false });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.test_error, r.estimated_energy)).collect();
    for (r, flag) in rows.iter_mut().zip(pareto_flags(&points)) {
        r.pareto = flag;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let text = String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))?;
    print!("{text}");
    if let Some(out) = out {
        write_atomic(out, text.as_bytes())?;
    }
    Ok(())
}
