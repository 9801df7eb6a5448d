//! Command-line surface: dataset generation, training, evaluation, sweeps,
//! and heatmap export.
//!
//! Configuration is a plain-text file of `key = value` lines (`#` starts a
//! comment); any key can be overridden with a `--key value` flag, and the
//! fully resolved configuration is written next to each command's outputs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotations::box_to_grid;
use crate::error::{Error, Result};
use crate::explain::explain_sample;
use crate::metrics::boxplot_stats;
use crate::model::{init_model, load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::scores::ScoreKind;
use crate::synthdata::{generate_dataset, load_dataset, pgm_write, Sample, Split, SynthConfig};
use crate::trainer::{evaluate, train, TrainConfig};

const INIT_STREAM: u64 = 0x494e_4954;

pub const EVAL_CSV_HEADER: &str =
    "run_id,score_kind,alpha,seed,split,accuracy,coverage,top_precision,all_precision,n_degenerate";
pub const SWEEP_CSV_HEADER: &str =
    "run_id,score_kind,alpha,seed,split,accuracy,coverage,top_precision,all_precision,n_degenerate,status";
pub const HISTORY_CSV_HEADER: &str = "epoch,bce,exp_weighted,total,val_accuracy";
pub const SUMMARY_CSV_HEADER: &str = "group_by,group_value,metric,min,q1,median,q3,max,mean";

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub n_export: usize,
    pub sweep_kinds: Vec<ScoreKind>,
    pub sweep_alphas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub jobs: usize,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            run_id: None,
            checkpoint: None,
            split: Split::Test,
            n_export: 8,
            sweep_kinds: ScoreKind::ALL.to_vec(),
            sweep_alphas: vec![0.25, 0.5, 0.75, 1.0],
            sweep_seeds: vec![0, 1, 2],
            jobs: 1,
            resume: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {:?} for key {}", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {:?} for key {} (use true/false)",
            value, key
        ))),
    }
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Result<Vec<T>> = value.split(',').map(|s| f(s.trim())).collect();
    let items = items
        .map_err(|_| Error::Config(format!("invalid list {:?} for key {}", value, key)))?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list for key {}", key)));
    }
    Ok(items)
}

impl RunConfig {
    /// Apply one `key = value` assignment. Keys use snake_case; flag names
    /// with hyphens are normalized before reaching here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.synth.image_size = parse_num(key, value)?,
            "n_samples" => self.synth.n_samples = parse_num(key, value)?,
            "positive_fraction" => self.synth.positive_fraction = parse_num(key, value)?,
            "lesion_intensity_lo" => self.synth.lesion_intensity.0 = parse_num(key, value)?,
            "lesion_intensity_hi" => self.synth.lesion_intensity.1 = parse_num(key, value)?,
            "lesion_sigma_lo" => self.synth.lesion_sigma.0 = parse_num(key, value)?,
            "lesion_sigma_hi" => self.synth.lesion_sigma.1 = parse_num(key, value)?,
            "confounder_rate" => self.synth.confounder_rate = parse_num(key, value)?,
            "noise_std" => self.synth.noise_std = parse_num(key, value)?,
            "train_frac" => self.synth.train_frac = parse_num(key, value)?,
            "val_frac" => self.synth.val_frac = parse_num(key, value)?,
            "test_frac" => self.synth.test_frac = parse_num(key, value)?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "alpha" => self.train.alpha = parse_num(key, value)?,
            "score_kind" => self.train.score_kind = ScoreKind::from_str(value)?,
            "k_percent" => self.train.k_percent = parse_num(key, value)?,
            "tau_cov" => self.train.tau_cov = parse_num(key, value)?,
            "stop_weights" => self.train.stop_weights = parse_bool(key, value)?,
            "seed" => {
                let s: u64 = parse_num(key, value)?;
                self.synth.seed = s;
                self.train.seed = s;
            }
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "run_id" => {
                self.run_id = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            "checkpoint" => {
                self.checkpoint = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "split" => self.split = Split::from_str(value)?,
            "n_export" => self.n_export = parse_num(key, value)?,
            "sweep_kinds" => {
                self.sweep_kinds = parse_list(key, value, ScoreKind::from_str)?;
            }
            "sweep_alphas" => {
                self.sweep_alphas = parse_list(key, value, |s| parse_num(key, s))?;
            }
            "sweep_seeds" => {
                self.sweep_seeds = parse_list(key, value, |s| parse_num(key, s))?;
            }
            "jobs" => {
                self.jobs = parse_num(key, value)?;
                if self.jobs == 0 {
                    return Err(Error::Config("jobs must be at least 1".into()));
                }
            }
            "resume" => self.resume = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key: {}", key))),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: "expected `key = value`".into(),
            })?;
            let value = value.trim().trim_matches('"');
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Canonical serialization: parsing it back reproduces the config.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let join_f = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let join_u = |v: &[u64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "image_size = {}", self.synth.image_size);
        let _ = writeln!(s, "n_samples = {}", self.synth.n_samples);
        let _ = writeln!(s, "positive_fraction = {}", self.synth.positive_fraction);
        let _ = writeln!(s, "lesion_intensity_lo = {}", self.synth.lesion_intensity.0);
        let _ = writeln!(s, "lesion_intensity_hi = {}", self.synth.lesion_intensity.1);
        let _ = writeln!(s, "lesion_sigma_lo = {}", self.synth.lesion_sigma.0);
        let _ = writeln!(s, "lesion_sigma_hi = {}", self.synth.lesion_sigma.1);
        let _ = writeln!(s, "confounder_rate = {}", self.synth.confounder_rate);
        let _ = writeln!(s, "noise_std = {}", self.synth.noise_std);
        let _ = writeln!(s, "train_frac = {}", self.synth.train_frac);
        let _ = writeln!(s, "val_frac = {}", self.synth.val_frac);
        let _ = writeln!(s, "test_frac = {}", self.synth.test_frac);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "alpha = {}", self.train.alpha);
        let _ = writeln!(s, "score_kind = {}", self.train.score_kind.as_str());
        let _ = writeln!(s, "k_percent = {}", self.train.k_percent);
        let _ = writeln!(s, "tau_cov = {}", self.train.tau_cov);
        let _ = writeln!(s, "stop_weights = {}", self.train.stop_weights);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "run_id = {}", self.run_id.as_deref().unwrap_or(""));
        let _ = writeln!(
            s,
            "checkpoint = {}",
            self.checkpoint
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(s, "split = {}", self.split.as_str());
        let _ = writeln!(s, "n_export = {}", self.n_export);
        let _ = writeln!(
            s,
            "sweep_kinds = {}",
            self.sweep_kinds
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "sweep_alphas = {}", join_f(&self.sweep_alphas));
        let _ = writeln!(s, "sweep_seeds = {}", join_u(&self.sweep_seeds));
        let _ = writeln!(s, "jobs = {}", self.jobs);
        let _ = writeln!(s, "resume = {}", self.resume);
        s
    }

    fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved");
        fs::write(&path, self.resolved_text())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            format!(
                "{}_a{}_s{}",
                self.train.score_kind.as_str(),
                self.train.alpha,
                self.train.seed
            )
        })
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.synth.image_size,
            ..ModelConfig::default()
        }
    }
}

/// Parse `--key value` flags (plus `--config path` and bare boolean flags)
/// into a RunConfig. The config file, wherever it appears, is applied before
/// any other flags so that flags always win.
pub fn parse_args(args: &[String]) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    let mut config_file = None;
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected --key, got {:?}", arg)))?
            .replace('-', "_");
        let bare_bool = matches!(key.as_str(), "resume" | "stop_weights")
            && args.get(i + 1).is_none_or(|n| n.starts_with("--"));
        let value = if bare_bool {
            "true".to_string()
        } else {
            i += 1;
            args.get(i)
                .ok_or_else(|| Error::Usage(format!("missing value for --{}", key)))?
                .clone()
        };
        if key == "config" {
            config_file = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
        i += 1;
    }
    let mut config = RunConfig::default();
    if let Some(path) = &config_file {
        config.load_file(path)?;
    }
    for (key, value) in &pairs {
        config.set(key, value)?;
    }
    if let Ok(seed) = std::env::var("SALGUIDE_SEED") {
        config.set("seed", &seed)?;
    }
    Ok(config)
}

const USAGE: &str = "usage: salguide <generate|train|eval|sweep|export-heatmaps> [--config FILE] [--key value ...]";

pub fn run(args: &[String]) -> Result<()> {
    let (cmd, rest) = args
        .split_first()
        .ok_or_else(|| Error::Usage(USAGE.into()))?;
    let config = parse_args(rest)?;
    match cmd.as_str() {
        "generate" => {
            let m = cmd_generate(&config)?;
            println!(
                "generated {} samples ({} positive, {} confounded) in {} (train/val/test {}/{}/{})",
                m.n_samples,
                m.n_positive,
                m.n_confounded,
                m.out_dir.display(),
                m.n_train,
                m.n_val,
                m.n_test
            );
        }
        "train" => {
            let run_dir = cmd_train(&config)?;
            println!("run artifacts written to {}", run_dir.display());
        }
        "eval" => {
            let rec = cmd_eval(&config)?;
            println!(
                "split={} accuracy={} coverage={} top_precision={} all_precision={} n_degenerate={}",
                config.split.as_str(),
                rec.accuracy,
                rec.coverage,
                rec.top_precision,
                rec.all_precision,
                rec.n_degenerate
            );
        }
        "sweep" => {
            let n = cmd_sweep(&config)?;
            println!(
                "sweep complete: {} cells, results in {}",
                n,
                config.out_dir.display()
            );
        }
        "export-heatmaps" => {
            let n = cmd_export_heatmaps(&config)?;
            println!("exported {} heatmap pairs to {}", n, config.out_dir.display());
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown subcommand {:?}; {}",
                other, USAGE
            )))
        }
    }
    Ok(())
}

pub fn cmd_generate(config: &RunConfig) -> Result<crate::synthdata::Manifest> {
    if let Some(parent) = config.data_dir.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(Error::Config(format!(
                "parent directory {} of data_dir does not exist",
                parent.display()
            )));
        }
    }
    let manifest = generate_dataset(&config.synth, &config.data_dir)?;
    config.write_resolved(&config.data_dir)?;
    Ok(manifest)
}

fn train_one(
    config: &RunConfig,
    train_samples: &[Sample],
    val_samples: &[Sample],
) -> Result<(Model, crate::trainer::EpochHistory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ INIT_STREAM);
    let mut model = init_model(&config.model_config(), &mut rng)?;
    let history = train(&mut model, train_samples, val_samples, &config.train)?;
    Ok((model, history))
}

fn write_history(path: &Path, history: &[crate::trainer::EpochStats]) -> Result<()> {
    let mut s = String::from(HISTORY_CSV_HEADER);
    s.push('\n');
    for (epoch, e) in history.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            epoch, e.bce, e.exp_weighted, e.total, e.val_accuracy
        );
    }
    fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn cmd_train(config: &RunConfig) -> Result<PathBuf> {
    let train_samples = load_dataset(&config.data_dir, Split::Train)?;
    let val_samples = load_dataset(&config.data_dir, Split::Val)?;
    let (model, history) = train_one(config, &train_samples, &val_samples)?;
    let run_dir = config.out_dir.join(config.run_id());
    fs::create_dir_all(&run_dir)
        .map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
    save_checkpoint(&model, &run_dir.join("checkpoint.salg"))?;
    write_history(&run_dir.join("history.csv"), &history)?;
    config.write_resolved(&run_dir)?;
    Ok(run_dir)
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.out_dir.join(config.run_id()).join("checkpoint.salg"))
}

fn append_csv_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let need_header = file
        .metadata()
        .map_err(|e| Error::io(format!("stat {}", path.display()), e))?
        .len()
        == 0;
    let mut text = String::new();
    if need_header {
        text.push_str(header);
        text.push('\n');
    }
    text.push_str(row);
    text.push('\n');
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("appending to {}", path.display()), e))
}

fn metrics_row(
    run_id: &str,
    kind: ScoreKind,
    alpha: f64,
    seed: u64,
    split: Split,
    rec: &crate::metrics::MetricsRecord,
) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        run_id,
        kind.as_str(),
        alpha,
        seed,
        split.as_str(),
        rec.accuracy,
        rec.coverage,
        rec.top_precision,
        rec.all_precision,
        rec.n_degenerate
    )
}

pub fn cmd_eval(config: &RunConfig) -> Result<crate::metrics::MetricsRecord> {
    let model = load_checkpoint(&checkpoint_path(config))?;
    let samples = load_dataset(&config.data_dir, config.split)?;
    let rec = evaluate(
        &model,
        &samples,
        config.train.score_kind,
        config.train.k_percent,
        config.train.tau_cov,
    )?;
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(format!("creating {}", config.out_dir.display()), e))?;
    let row = metrics_row(
        &config.run_id(),
        config.train.score_kind,
        config.train.alpha,
        config.train.seed,
        config.split,
        &rec,
    );
    append_csv_row(&config.out_dir.join("metrics.csv"), EVAL_CSV_HEADER, &row)?;
    config.write_resolved(&config.out_dir)?;
    Ok(rec)
}

struct SweepCell {
    kind: ScoreKind,
    alpha: f64,
    seed: u64,
}

fn sweep_cells(config: &RunConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &kind in &config.sweep_kinds {
        for &alpha in &config.sweep_alphas {
            for &seed in &config.sweep_seeds {
                cells.push(SweepCell { kind, alpha, seed });
            }
        }
    }
    cells
}

fn cell_key(kind: ScoreKind, alpha: f64, seed: u64) -> String {
    format!("{}|{}|{}", kind.as_str(), alpha, seed)
}

/// Returns the number of grid cells. Failed cells get a status message in
/// their row and the sweep continues; metrics.csv is rewritten in grid
/// order on every invocation so resumed and fresh sweeps produce identical
/// files.
pub fn cmd_sweep(config: &RunConfig) -> Result<usize> {
    let train_samples = load_dataset(&config.data_dir, Split::Train)?;
    let val_samples = load_dataset(&config.data_dir, Split::Val)?;
    let test_samples = load_dataset(&config.data_dir, Split::Test)?;
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(format!("creating {}", config.out_dir.display()), e))?;

    let cells = sweep_cells(config);
    let metrics_path = config.out_dir.join("metrics.csv");

    // Rows carried over from a previous partial sweep, keyed by cell.
    let mut existing: std::collections::HashMap<String, String> = Default::default();
    if config.resume && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path)
            .map_err(|e| Error::io(format!("reading {}", metrics_path.display()), e))?;
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() == 11 && fields[10] == "ok" {
                let kind = ScoreKind::from_str(fields[1])?;
                let alpha: f64 = parse_num("alpha", fields[2])?;
                let seed: u64 = parse_num("seed", fields[3])?;
                existing.insert(cell_key(kind, alpha, seed), line.to_string());
            }
        }
    }

    let todo: Vec<usize> = (0..cells.len())
        .filter(|&i| !existing.contains_key(&cell_key(cells[i].kind, cells[i].alpha, cells[i].seed)))
        .collect();

    let mut computed: Vec<Option<String>> = vec![None; cells.len()];
    let next = AtomicUsize::new(0);
    let workers = config.jobs.min(todo.len().max(1));
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, String)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let cells = &cells;
            let todo = &todo;
            let next = &next;
            let (tr, va, te) = (&train_samples, &val_samples, &test_samples);
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                if slot >= todo.len() {
                    break;
                }
                let idx = todo[slot];
                let cell = &cells[idx];
                let mut cc = config.clone();
                cc.train.score_kind = cell.kind;
                cc.train.alpha = cell.alpha;
                cc.train.seed = cell.seed;
                cc.run_id = None;
                let row = match train_one(&cc, tr, va).and_then(|(model, _)| {
                    evaluate(&model, te, cell.kind, cc.train.k_percent, cc.train.tau_cov)
                }) {
                    Ok(rec) => format!(
                        "{},ok",
                        metrics_row(&cc.run_id(), cell.kind, cell.alpha, cell.seed, Split::Test, &rec)
                    ),
                    Err(e) => format!(
                        "{},{},{},{},test,0,0,0,0,0,{}",
                        cc.run_id(),
                        cell.kind.as_str(),
                        cell.alpha,
                        cell.seed,
                        e.to_string().replace([',', '\n'], ";")
                    ),
                };
                if tx.send((idx, row)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (idx, row) in rx {
            computed[idx] = Some(row);
        }
    });

    let mut text = String::from(SWEEP_CSV_HEADER);
    text.push('\n');
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let key = cell_key(cell.kind, cell.alpha, cell.seed);
        let row = existing
            .get(&key)
            .cloned()
            .or_else(|| computed[i].clone())
            .expect("every cell is either carried over or computed");
        text.push_str(&row);
        text.push('\n');
        rows.push(row);
    }
    fs::write(&metrics_path, text)
        .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
    write_summary(&config.out_dir.join("summary.csv"), config, &rows)?;
    config.write_resolved(&config.out_dir)?;
    Ok(cells.len())
}

fn write_summary(path: &Path, config: &RunConfig, rows: &[String]) -> Result<()> {
    struct Parsed {
        kind: String,
        alpha: String,
        metrics: [f64; 4],
    }
    let mut ok_rows = Vec::new();
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() == 11 && f[10] == "ok" {
            ok_rows.push(Parsed {
                kind: f[1].to_string(),
                alpha: f[2].to_string(),
                metrics: [
                    parse_num("accuracy", f[5])?,
                    parse_num("coverage", f[6])?,
                    parse_num("top_precision", f[7])?,
                    parse_num("all_precision", f[8])?,
                ],
            });
        }
    }
    const METRIC_NAMES: [&str; 4] = ["accuracy", "coverage", "top_precision", "all_precision"];
    let mut text = String::from(SUMMARY_CSV_HEADER);
    text.push('\n');
    let mut emit_group = |group_by: &str, group_value: &str, members: Vec<&Parsed>| -> Result<()> {
        if members.is_empty() {
            return Ok(());
        }
        for (mi, name) in METRIC_NAMES.iter().enumerate() {
            let values: Vec<f64> = members.iter().map(|p| p.metrics[mi]).collect();
            let s = boxplot_stats(&values)?;
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{},{},{}",
                group_by, group_value, name, s.min, s.q1, s.median, s.q3, s.max, s.mean
            );
        }
        Ok(())
    };
    for kind in &config.sweep_kinds {
        let members = ok_rows.iter().filter(|p| p.kind == kind.as_str()).collect();
        emit_group("score_kind", kind.as_str(), members)?;
    }
    for alpha in &config.sweep_alphas {
        let a = alpha.to_string();
        let members = ok_rows.iter().filter(|p| p.alpha == a).collect();
        emit_group("alpha", &a, members)?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes, for the first `n_export` positive annotated samples of the chosen
/// split, the normalized heatmap as an 8-bit PGM plus a companion PGM with
/// box outlines burned in at saliency resolution.
pub fn cmd_export_heatmaps(config: &RunConfig) -> Result<usize> {
    let model = load_checkpoint(&checkpoint_path(config))?;
    let samples = load_dataset(&config.data_dir, config.split)?;
    let positives: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.label == 1 && !s.boxes.is_empty())
        .take(config.n_export)
        .collect();
    if positives.len() < config.n_export {
        return Err(Error::InvalidParameter(format!(
            "requested {} heatmaps but split {} has only {} positive annotated samples",
            config.n_export,
            config.split.as_str(),
            positives.len()
        )));
    }
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(format!("creating {}", config.out_dir.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let g = model.config.saliency_size();
    let mut names = HashSet::new();
    for s in &positives {
        let stem = s.name.strip_suffix(".pgm").unwrap_or(&s.name);
        if !names.insert(stem) {
            return Err(Error::Contract(format!("duplicate sample name {}", s.name)));
        }
        let batch = crate::diffcore::Tensor::from_values(
            &[1, 1, model.config.input_size, model.config.input_size],
            s.image.clone(),
        )?;
        let trace = model.forward(&batch, false, &mut rng)?;
        let sal = explain_sample(
            &trace,
            0,
            config.train.score_kind,
            false,
            config.train.k_percent,
            false,
        )?;
        pgm_write(
            &config.out_dir.join(format!("{}_heat.pgm", stem)),
            sal.normalized.values(),
            g,
            g,
        )?;
        let mut overlay = sal.normalized.values().to_vec();
        for b in &s.boxes {
            let gb = box_to_grid(b, model.config.input_size, g)?;
            for y in gb.y0..=gb.y1 {
                for x in gb.x0..=gb.x1 {
                    if y == gb.y0 || y == gb.y1 || x == gb.x0 || x == gb.x1 {
                        overlay[y * g + x] = 1.0;
                    }
                }
            }
        }
        pgm_write(
            &config.out_dir.join(format!("{}_boxes.pgm", stem)),
            &overlay,
            g,
            g,
        )?;
    }
    Ok(positives.len())
}
