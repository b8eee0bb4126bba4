//! Method × batch-size sweeps over the synthetic benchmark.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::experiment::{evaluate, train_model, DcorOn};
use crate::nn::optim::OptimizerKind;
use crate::nn::NormMode;
use crate::synth::{
    generate_dataset, load_dataset, parse_key_values, split_with, Dataset, DatasetSplit, DEFAULT_EVAL_FRACTION,
    DEFAULT_N_PER_GROUP,
};
use crate::trainer::TrainConfig;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "CONFOUND_GUARD_THREADS";

pub const RESULTS_FILE: &str = "sweep.csv";
pub const LOG_DIR: &str = "logs";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub methods: Vec<NormMode>,
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
    /// Seeds the dataset, the split and every cell.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Load the dataset from here instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub epochs: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub optimizer: OptimizerKind,
    pub n_per_group: usize,
    pub eval_fraction: f64,
    pub intercept: bool,
    pub dcor_on: DcorOn,
    pub skip_redundant_forward: bool,
    /// Record wall-clock seconds per cell; otherwise the column is 0 so
    /// repeated sweeps stay byte-identical.
    pub timing: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            methods: vec![NormMode::None, NormMode::BatchNorm, NormMode::Mdn, NormMode::Pmdn],
            batch_sizes: vec![20, 200, 1000, 2000],
            repeats: 3,
            seed: 0,
            out_dir: PathBuf::from("sweep-out"),
            data_dir: None,
            epochs: train.epochs,
            eta1: train.eta1,
            eta2: train.eta2,
            optimizer: train.optimizer,
            n_per_group: DEFAULT_N_PER_GROUP,
            eval_fraction: DEFAULT_EVAL_FRACTION,
            intercept: true,
            dcor_on: DcorOn::Eval,
            skip_redundant_forward: false,
            timing: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{s}`"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl SweepSpec {
    /// Applies one `key: value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "methods" => self.methods = parse_list(key, value)?,
            "batch_sizes" => self.batch_sizes = parse_list(key, value)?,
            "repeats" => self.repeats = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "epochs" => self.epochs = parse_one(key, value)?,
            "eta1" => self.eta1 = parse_one(key, value)?,
            "eta2" => self.eta2 = parse_one(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "n_per_group" => self.n_per_group = parse_one(key, value)?,
            "eval_fraction" => self.eval_fraction = parse_one(key, value)?,
            "intercept" => self.intercept = parse_one(key, value)?,
            "dcor_on" => self.dcor_on = value.parse()?,
            "skip_redundant_forward" => self.skip_redundant_forward = parse_one(key, value)?,
            "timing" => self.timing = parse_one(key, value)?,
            other => return Err(Error::Config(format!("unknown sweep key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overlaid with the settings of a `key: value` config text.
    pub fn from_config(text: &str, path: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_key_values(text, path)? {
            spec.set(&k, &v)?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("sweep needs at least one method".into()));
        }
        if self.batch_sizes.is_empty() {
            return Err(Error::Config("sweep needs at least one batch size".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.data_dir.is_none() {
            let total = 2 * self.n_per_group;
            if let Some(&b) = self.batch_sizes.iter().find(|&&b| b == 0 || b > total) {
                return Err(Error::Config(format!("batch size {b} must lie in 1..={total}")));
            }
        }
        self.train_config(NormMode::None, 1, 0).validate()
    }

    pub fn train_config(&self, method: NormMode, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size,
            epochs: self.epochs,
            eta1: self.eta1,
            eta2: self.eta2,
            optimizer: self.optimizer,
            seed,
            norm_mode: method,
            shuffle: true,
            skip_redundant_forward: self.skip_redundant_forward,
        }
    }

    /// Cells in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            for &batch_size in &self.batch_sizes {
                for repeat in 0..self.repeats {
                    cells.push(Cell {
                        method,
                        batch_size,
                        repeat,
                        seed: cell_seed(self.seed, method, batch_size, repeat),
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub method: NormMode,
    pub batch_size: usize,
    pub repeat: usize,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn method_code(m: NormMode) -> u64 {
    match m {
        NormMode::None => 1,
        NormMode::BatchNorm => 2,
        NormMode::Mdn => 3,
        NormMode::Pmdn => 4,
    }
}

/// Seed for one cell, mixed from the base seed and the cell coordinates.
pub fn cell_seed(base: u64, method: NormMode, batch_size: usize, repeat: usize) -> u64 {
    let mut h = splitmix(base);
    for v in [method_code(method), batch_size as u64, repeat as u64] {
        h = splitmix(h ^ v);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: NormMode,
    pub batch_size: usize,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub dcor2_group: [f64; 2],
    pub dcor2_mean: f64,
    pub final_loss: f64,
    pub wall_seconds: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "method,batch_size,repeat,seed,accuracy,dcor2_g1,dcor2_g2,dcor2_mean,final_loss,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method.name(),
            self.batch_size,
            self.repeat,
            self.seed,
            self.accuracy,
            self.dcor2_group[0],
            self.dcor2_group[1],
            self.dcor2_mean,
            self.final_loss,
            self.wall_seconds
        )
    }
}

pub fn write_rows(mut out: impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "{}", SweepRow::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Worker count: the environment override if set, else the available
/// parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// The dataset and split a sweep trains on.
pub fn sweep_data(spec: &SweepSpec) -> Result<(Dataset, DatasetSplit)> {
    match &spec.data_dir {
        Some(dir) => load_dataset(dir, spec.intercept),
        None => {
            let ds = generate_dataset(spec.seed, spec.n_per_group)?;
            let split = split_with(&ds, spec.eval_fraction, spec.seed, spec.intercept)?;
            Ok((ds, split))
        }
    }
}

/// Trains and evaluates one cell, writing its training log under `log_dir`.
pub fn run_cell(
    spec: &SweepSpec,
    cell: Cell,
    dataset: &Dataset,
    split: &DatasetSplit,
    log_dir: Option<&Path>,
) -> Result<SweepRow> {
    let start = Instant::now();
    let cfg = spec.train_config(cell.method, cell.batch_size, cell.seed);
    let (net, log) = train_model(dataset, split, &cfg)?;
    let report = evaluate(&net, dataset, split, spec.dcor_on, cell.batch_size)?;
    if let Some(dir) = log_dir {
        let name = format!("{}_b{}_r{}.csv", cell.method.name(), cell.batch_size, cell.repeat);
        log.write_csv(fs::File::create(dir.join(name))?)?;
    }
    let final_loss = log
        .final_epoch_loss()
        .ok_or_else(|| Error::Config("sweep cells need at least one epoch".into()))?;
    Ok(SweepRow {
        method: cell.method,
        batch_size: cell.batch_size,
        repeat: cell.repeat,
        seed: cell.seed,
        accuracy: report.accuracy,
        dcor2_group: report.dcor2_group,
        dcor2_mean: report.dcor2_mean,
        final_loss,
        wall_seconds: if spec.timing { start.elapsed().as_secs_f64() } else { 0.0 },
    })
}

/// Runs every cell on `workers` threads and returns the rows sorted by
/// method, batch size and repeat. `on_row` sees each row as it completes.
pub fn run_cells(
    spec: &SweepSpec,
    dataset: &Dataset,
    split: &DatasetSplit,
    workers: usize,
    log_dir: Option<&Path>,
    on_row: &(dyn Fn(&SweepRow) + Sync),
) -> Result<Vec<SweepRow>> {
    let cells = spec.cells();
    let next = AtomicUsize::new(0);
    let rows = Mutex::new(Vec::with_capacity(cells.len()));
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { return };
                match run_cell(spec, cell, dataset, split, log_dir) {
                    Ok(row) => {
                        on_row(&row);
                        rows.lock().unwrap().push(row);
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut rows = rows.into_inner().unwrap();
    rows.sort_by_key(|r| (method_code(r.method), r.batch_size, r.repeat));
    Ok(rows)
}

/// Full sweep: validates the spec, trains every cell, and writes
/// `sweep.csv` plus one training log per cell under `out_dir`.
pub fn run_sweep(spec: &SweepSpec, on_row: &(dyn Fn(&SweepRow) + Sync)) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let (dataset, split) = sweep_data(spec)?;
    if let Some(&b) = spec.batch_sizes.iter().find(|&&b| b > dataset.len()) {
        return Err(Error::Config(format!("batch size {b} exceeds the {} available samples", dataset.len())));
    }
    let log_dir = spec.out_dir.join(LOG_DIR);
    fs::create_dir_all(&log_dir)?;
    let rows = run_cells(spec, &dataset, &split, worker_count()?, Some(&log_dir), on_row)?;
    write_rows(fs::File::create(spec.out_dir.join(RESULTS_FILE))?, &rows)?;
    Ok(rows)
}
