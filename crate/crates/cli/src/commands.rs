//! One function per CLI verb.

use crate::config::{eval_data, CheckpointMeta, EvalData, RunConfig};
use crate::error::{write_err, CliError};
use decompnet::analysis::{check_prop1, check_prop2, lipschitz_report, tradeoff_sweep};
use decompnet::network::{load_model, save_model, ModelFile, NetworkModel};
use decompnet::rank::{count_params_macs, Budget, Criterion, RankAssignment, RankSelector};
use decompnet::tensor::Matrix;
use decompnet::train::{evaluate, train_with};
use serde::Serialize;
use std::fs::{self, File, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

const LOCK_FILE: &str = ".decompnet.lock";

/// Exclusive lock on an output directory, released when dropped or when the
/// process exits.
struct DirLock {
    _file: File,
}

fn lock_output(dir: &Path) -> Result<DirLock, CliError> {
    fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
    let path = dir.join(LOCK_FILE);
    let file = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| write_err(&path, e))?;
    match file.try_lock() {
        Ok(()) => Ok(DirLock { _file: file }),
        Err(TryLockError::WouldBlock) => Err(CliError::Runtime(format!(
            "output directory {} is in use by another decompnet process",
            dir.display()
        ))),
        Err(TryLockError::Error(e)) => Err(write_err(&path, e)),
    }
}

/// Write through a temporary file so readers never see a partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| write_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| write_err(path, e))
}

fn save_checkpoint(
    path: &Path,
    model: &NetworkModel,
    meta: &CheckpointMeta,
) -> Result<(), CliError> {
    let metadata = serde_json::to_value(meta).map_err(|e| write_err(path, e))?;
    let file = ModelFile {
        model: model.clone(),
        metadata,
    };
    let tmp = path.with_extension("tmp");
    save_model(&tmp, &file).map_err(|e| write_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| write_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Print to stdout, or write `name` into `out` under its lock.
fn emit(out: Option<&Path>, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(dir) => {
            let _lock = lock_output(dir)?;
            let path = dir.join(name);
            write_atomic(&path, bytes)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Runtime(format!("stdout: {e}"))),
    }
}

pub fn train(
    config: &Path,
    seed: Option<u64>,
    criterion: Option<Criterion>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    // precedence: command-line flags, then the config file, then defaults
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(c) = criterion {
        cfg.train.criterion = c;
    }
    if let Some(o) = out {
        cfg.output = o;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let out = &cfg.output;
    let _lock = lock_output(out)?;

    let seed = cfg.train.seed;
    let prepared = cfg.data.prepare(base, seed)?;
    let model = NetworkModel::new(cfg.arch.build()?, seed)?;
    let meta = |epoch| CheckpointMeta {
        arch: cfg.arch.clone(),
        data: cfg.data.clone(),
        train: cfg.train.clone(),
        standardization: prepared.standardization.clone(),
        epoch,
    };
    let ckpt_dir = out.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| write_err(&ckpt_dir, e))?;
    }
    let epochs = cfg.train.epochs;
    let mut ckpt_err: Option<CliError> = None;
    let trained = train_with(
        model,
        &prepared.train,
        prepared.validation.as_ref(),
        &cfg.train,
        |model, row, _| {
            let low = row
                .low_loss
                .map_or_else(String::new, |l| format!(" low {l:.4}"));
            eprintln!(
                "epoch {}/{epochs} lr {:.4} loss {:.4}{low}",
                row.epoch, row.lr, row.full_loss
            );
            if cfg.checkpoint_every > 0 && row.epoch % cfg.checkpoint_every == 0 {
                let path = ckpt_dir.join(format!("epoch_{:04}.dcmp", row.epoch));
                if let Err(e) = save_checkpoint(&path, model, &meta(row.epoch)) {
                    let msg = e.to_string();
                    ckpt_err = Some(e);
                    return Err(decompnet::Error::InvalidInput(msg));
                }
            }
            Ok(())
        },
    );
    let (model, log) = trained.map_err(|e| ckpt_err.take().unwrap_or_else(|| e.into()))?;

    let model_path = out.join("model.dcmp");
    save_checkpoint(&model_path, &model, &meta(epochs))?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    let log_path = out.join("train_log.csv");
    write_atomic(&log_path, &csv)?;
    write_atomic(&out.join("run.json"), to_json(&cfg).as_bytes())?;
    eprintln!("wrote {} and {}", model_path.display(), log_path.display());
    Ok(())
}

struct Loaded {
    model: NetworkModel,
    meta: Option<CheckpointMeta>,
}

fn load(path: &Path) -> Result<Loaded, CliError> {
    let file = load_model(path)
        .map_err(|e| CliError::Usage(format!("cannot load model {}: {e}", path.display())))?;
    let meta = if file.metadata.is_null() {
        None
    } else {
        CheckpointMeta::from_json(&file.metadata).ok()
    };
    Ok(Loaded {
        model: file.model,
        meta,
    })
}

fn default_criterion(loaded: &Loaded, flag: Option<Criterion>) -> Criterion {
    flag.or_else(|| loaded.meta.as_ref().map(|m| m.train.criterion))
        .unwrap_or_default()
}

#[derive(Serialize)]
struct CompressReport {
    #[serde(flatten)]
    assignment: RankAssignment,
    params: u64,
    macs: u64,
    full_params: u64,
    full_macs: u64,
}

fn assign(
    model: &NetworkModel,
    criterion: Criterion,
    budget: Budget,
) -> Result<CompressReport, CliError> {
    let selector = RankSelector::from_model(model)?;
    let assignment = selector.select(criterion, budget)?;
    let (params, macs) = selector.cost(&assignment.ranks);
    let (full_params, full_macs) = selector.cost(&selector.full_ranks());
    Ok(CompressReport {
        assignment,
        params,
        macs,
        full_params,
        full_macs,
    })
}

pub fn compress(
    model: &Path,
    criterion: Option<Criterion>,
    budget: Budget,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load(model)?;
    let criterion = default_criterion(&loaded, criterion);
    let report = assign(&loaded.model, criterion, budget)?;
    eprintln!(
        "{criterion} {budget}: ranks {:?}, {} of {} params, {} of {} MACs",
        report.assignment.ranks, report.params, report.full_params, report.macs, report.full_macs
    );
    emit(out, "assignment.json", to_json(&report).as_bytes())
}

/// Data selection shared by eval, sweep and analyze.
pub struct DataChoice {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn resolve_data(loaded: &Loaded, choice: &DataChoice) -> Result<EvalData, CliError> {
    let meta = loaded.meta.as_ref();
    let standardization = meta.and_then(|m| m.standardization.as_ref());
    let (data, seed, base) = match &choice.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (cfg.data, cfg.train.seed, base)
        }
        None => {
            let m = meta.ok_or_else(|| {
                CliError::Usage(
                    "model has no training metadata; pass --config to choose the data".into(),
                )
            })?;
            (m.data.clone(), m.train.seed, PathBuf::from("."))
        }
    };
    let seed = choice.seed.unwrap_or(seed);
    let data = eval_data(&data, seed, standardization, &base)?;
    if data.eval.x.cols() != loaded.model.input_len() {
        return Err(CliError::Usage(format!(
            "data has {} features, model expects {}",
            data.eval.x.cols(),
            loaded.model.input_len()
        )));
    }
    Ok(data)
}

#[derive(Serialize)]
struct EvalReport {
    split: &'static str,
    samples: usize,
    criterion: Option<Criterion>,
    budget: Option<Budget>,
    ranks: Vec<usize>,
    params: u64,
    macs: u64,
    loss: f64,
    accuracy: f64,
}

pub fn eval(
    model: &Path,
    data: &DataChoice,
    criterion: Option<Criterion>,
    budget: Option<Budget>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load(model)?;
    let data = resolve_data(&loaded, data)?;
    let full = loaded.model.full_ranks();
    let (criterion, ranks) = match budget {
        Some(b) => {
            let c = default_criterion(&loaded, criterion);
            (Some(c), assign(&loaded.model, c, b)?.assignment.ranks)
        }
        None => (None, full.clone()),
    };
    // full ranks take the plain forward pass so `z=1` and no budget agree exactly
    let truncated = (ranks != full).then_some(ranks.as_slice());
    let res = evaluate(&loaded.model, truncated, &data.eval, Some(&data.train))?;
    let (params, macs) = count_params_macs(&loaded.model, &ranks)?;
    let report = EvalReport {
        split: data.split,
        samples: data.eval.len(),
        criterion,
        budget,
        ranks,
        params,
        macs,
        loss: res.loss,
        accuracy: res.accuracy,
    };
    emit(out, "eval.json", to_json(&report).as_bytes())
}

pub fn sweep(
    model: &Path,
    data: &DataChoice,
    criterion: Option<Criterion>,
    budgets: Vec<Budget>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let loaded = load(model)?;
    let data = resolve_data(&loaded, data)?;
    let criterion = default_criterion(&loaded, criterion);
    let budgets = if budgets.is_empty() {
        let mut z = loaded
            .meta
            .as_ref()
            .map(|m| m.train.probes.clone())
            .unwrap_or_else(|| decompnet::train::TrainConfig::default().probes);
        z.sort_by(f64::total_cmp);
        z.into_iter().map(Budget::RankRatio).collect()
    } else {
        budgets
    };
    let report = tradeoff_sweep(
        &loaded.model,
        criterion,
        &budgets,
        &data.eval,
        Some(&data.train),
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    emit(out, "sweep.csv", &csv)
}

#[derive(Clone, Copy)]
pub enum Check {
    Prop1,
    Prop2,
    Lipschitz,
}

fn head(x: &Matrix, n: usize) -> Matrix {
    let n = n.min(x.rows());
    Matrix::from_vec(n, x.cols(), x.data()[..n * x.cols()].to_vec()).expect("row prefix")
}

pub fn analyze(
    check: Check,
    model: &Path,
    data: &DataChoice,
    criterion: Option<Criterion>,
    budget: Option<Budget>,
    samples: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let loaded = load(model)?;
    let data = resolve_data(&loaded, data)?;
    let batch = head(&data.eval.x, samples);
    let ranks = || -> Result<Vec<usize>, CliError> {
        let b = budget.ok_or_else(|| CliError::Usage("this check needs --budget".into()))?;
        let c = default_criterion(&loaded, criterion);
        Ok(assign(&loaded.model, c, b)?.assignment.ranks)
    };
    let mut csv = Vec::new();
    let (name, summary) = match check {
        Check::Prop1 => {
            let rep = check_prop1(&loaded.model, &batch)?;
            rep.write_csv(&mut csv)?;
            let summary = format!(
                "layer error: max increase {:e}, max error at full rank {:e}, max identity residual {:e}, skipped layers {:?}",
                rep.max_increase(),
                rep.max_final_error(),
                rep.max_residual(),
                rep.skipped
            );
            ("prop1.csv", summary)
        }
        Check::Prop2 => {
            let ranks = ranks()?;
            let rep = check_prop2(&loaded.model, &ranks, &batch)?;
            rep.write_csv(&mut csv)?;
            let summary = format!(
                "KL bound at ranks {ranks:?}: {} violations over {} samples, mean KL {:e}, mean bound {:e}",
                rep.violations(),
                rep.samples.len(),
                rep.mean_kl(),
                rep.mean_bound()
            );
            ("prop2.csv", summary)
        }
        Check::Lipschitz => {
            let ranks = ranks()?;
            let rep = lipschitz_report(&loaded.model, &ranks, &batch)?;
            rep.write_csv(&mut csv)?;
            let exceed = rep
                .rows
                .iter()
                .filter(|r| r.omega_hat.is_some_and(|h| h > r.omega * (1.0 + 1e-8)))
                .count();
            ("lipschitz.csv", format!("Lipschitz at ranks {ranks:?}: {exceed} layers with empirical above theoretical"))
        }
    };
    eprintln!("{summary}");
    emit(out, name, &csv)
}

#[derive(Serialize)]
struct LayerSummary {
    index: usize,
    #[serde(flatten)]
    spec: decompnet::network::LayerSpec,
    weight_shape: (usize, usize),
    full_rank: usize,
    largest_singular_value: f64,
    smallest_singular_value: f64,
}

#[derive(Serialize)]
struct InspectReport {
    layers: Vec<LayerSummary>,
    total_rank: usize,
    params: u64,
    macs: u64,
    has_batchnorm_statistics: bool,
    metadata: Option<CheckpointMeta>,
}

pub fn inspect(model: &Path) -> Result<(), CliError> {
    let loaded = load(model)?;
    let m = &loaded.model;
    let spectra = m.spectra()?;
    let layers = m
        .layers()
        .iter()
        .zip(&spectra)
        .enumerate()
        .map(|(index, (spec, f))| LayerSummary {
            index,
            spec: *spec,
            weight_shape: spec.weight_shape(),
            full_rank: spec.full_rank(),
            largest_singular_value: f.s[0],
            smallest_singular_value: *f.s.last().expect("non-empty spectrum"),
        })
        .collect();
    let (params, macs) = count_params_macs(m, &m.full_ranks())?;
    let report = InspectReport {
        layers,
        total_rank: m.full_ranks().iter().sum(),
        params,
        macs,
        has_batchnorm_statistics: m.bn_stats.is_some(),
        metadata: loaded.meta,
    };
    emit(None, "", to_json(&report).as_bytes())
}
