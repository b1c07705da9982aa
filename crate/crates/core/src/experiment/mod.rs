//! Training orchestration: dataset setup, per-epoch metrics, checkpoints,
//! resumption, and hyperparameter sweeps.

pub mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{binarize, load_mnist_dir, mini_splits, split_batches, three_by_three, BatchProvider, Split, Splits};
use crate::eval::{exact_kl, is_log_likelihood, DiscreteDistribution};
use crate::model::checkpoint;
use crate::model::{upward_pass, HelmholtzMachine};
use crate::trainers::{compute_importance_weights, Trainer};
use crate::{Error, Result};

pub use config::{parse_list, DatasetKind, RunConfig};

/// rng stream offsets so each consumer of the run seed draws independently.
const STREAM_TRAIN: u64 = 1 << 32;
const STREAM_BST: u64 = 2 << 32;
const STREAM_VAL: u64 = 3 << 32;
const SEED_INIT: u64 = 0x5eed_0001;
const SEED_DATA: u64 = 0x5eed_0002;
const SEED_IS: u64 = 0x5eed_0003;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub wall_seconds: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub is_loglik: Option<f64>,
    pub exact_kl: Option<f64>,
    pub fisher_rebuilds: usize,
}

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 7] = [
    "epoch",
    "wall_seconds",
    "train_loss",
    "val_loss",
    "is_loglik",
    "exact_kl",
    "fisher_rebuilds",
];

/// Binary train/validation/evaluation sets for a configuration.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: BatchProvider,
    pub validation: Array2<f64>,
    /// Split used for the IS log-likelihood.
    pub eval: Array2<f64>,
    pub eval_split: Split,
    /// True distribution, when it is known exactly (3by3).
    pub pstar: Option<DiscreteDistribution>,
}

/// Loads (or generates) and binarizes the data for `cfg`.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let enc = cfg.encoding;
    if cfg.dataset == DatasetKind::ThreeByThree {
        let dist = three_by_three(cfg.bar_prob)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SEED_DATA);
        let train = dist.sample(cfg.train_size, enc, &mut rng);
        let validation = dist.sample(cfg.val_size, enc, &mut rng);
        let ds = crate::data::ImageDataset::new(train.mapv(|v| enc.indicator(v)), None, 3, 3, Split::Train)?;
        let eval = match cfg.eval_split {
            Split::Train => train.clone(),
            _ => validation.clone(),
        };
        return Ok(PreparedData {
            train: binarize(&ds, crate::data::BinarizationMode::B, enc, cfg.seed),
            validation,
            eval,
            eval_split: cfg.eval_split,
            pstar: Some(dist),
        });
    }
    let mut splits = load_mnist_dir(&cfg.data_root())?;
    if cfg.dataset == DatasetKind::MiniMnist {
        splits = mini_splits(&splits)?;
    }
    let Splits { train, validation, test } = splits;
    let train = match cfg.train_limit {
        Some(n) if n < train.len() => train.slice(0..n, Split::Train),
        _ => train,
    };
    let fixed = |ds: &crate::data::ImageDataset, salt: u64| {
        binarize(ds, cfg.binarization, enc, cfg.seed ^ SEED_DATA ^ salt).all()
    };
    let eval_ds = match cfg.eval_split {
        Split::Train => &train,
        Split::Validation => &validation,
        Split::Test => &test,
    };
    let mut eval = fixed(eval_ds, 7);
    if let Some(n) = cfg.eval_limit {
        if n < eval.nrows() {
            eval = eval.slice(s![..n, ..]).to_owned();
        }
    }
    Ok(PreparedData {
        train: binarize(&train, cfg.binarization, enc, cfg.seed),
        validation: fixed(&validation, 5),
        eval,
        eval_split: cfg.eval_split,
        pstar: None,
    })
}

/// Negative mean IS bound with `s` posterior samples per datum.
pub fn bound_loss(hm: &HelmholtzMachine, x: &Array2<f64>, s: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    // chunked to bound memory on large splits
    for chunk in x.axis_chunks_iter(ndarray::Axis(0), 1000) {
        let st = upward_pass(&hm.q, chunk, s, &mut rng)?;
        let pm = hm.p.conditional_means(&st)?;
        let lp = hm.p.log_prob_from_means(&st, &pm);
        let lq = hm.q.log_prob_from_means(&st, &st.means);
        let shape = (chunk.nrows(), s);
        let w = compute_importance_weights(
            lp.into_shape_with_order(shape).unwrap().view(),
            lq.into_shape_with_order(shape).unwrap().view(),
        )?;
        total += w.loss() * chunk.nrows() as f64;
    }
    Ok(total / x.nrows() as f64)
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub model: HelmholtzMachine,
    pub config: RunConfig,
}

fn ckpt_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Model, optimizer-state and Fisher-state files of one checkpoint.
fn ckpt_paths(out: &Path, epoch: usize) -> [PathBuf; 3] {
    let d = ckpt_dir(out);
    ["ckpt", "opt", "fisher"].map(|ext| d.join(format!("epoch-{epoch:05}.{ext}")))
}

/// Highest epoch with every checkpoint file present.
pub fn latest_checkpoint(out: &Path) -> Option<usize> {
    let entries = fs::read_dir(ckpt_dir(out)).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let epoch = name.strip_prefix("epoch-")?.strip_suffix(".ckpt")?.parse().ok()?;
            ckpt_paths(out, epoch).iter().all(|p| p.is_file()).then_some(epoch)
        })
        .max()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains per `cfg`, writing `metrics.csv`, `config.toml` and checkpoints under
/// `cfg.out_dir`. With `resume`, continues from the newest checkpoint there.
pub fn run(cfg: &RunConfig, resume: bool) -> Result<RunSummary> {
    let cfg = cfg.resolved()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(ckpt_dir(&out))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;

    let mut data = prepare_data(&cfg)?;
    let arch = cfg.architecture()?;
    let tcfg = cfg.trainer_config();
    let metrics_path = out.join("metrics.csv");

    let (hm, start_epoch, mut records) = match resume.then(|| latest_checkpoint(&out)).flatten() {
        Some(epoch) => {
            let hm = checkpoint::load(&ckpt_paths(&out, epoch)[0])?;
            if hm.architecture() != &arch {
                return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
            }
            let mut recs = read_metrics(&metrics_path).unwrap_or_default();
            recs.retain(|r| r.epoch <= epoch);
            info!("resuming from epoch {epoch}");
            (hm, epoch, recs)
        }
        None => {
            let hm = HelmholtzMachine::random(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SEED_INIT));
            (hm, 0, Vec::new())
        }
    };
    let mut trainer = Trainer::new(tcfg, hm)?;
    if start_epoch > 0 {
        let [_, op, fp] = ckpt_paths(&out, start_epoch);
        trainer.opt.read_state(BufReader::new(File::open(op)?))?;
        trainer.fisher.read_state(BufReader::new(File::open(fp)?))?;
    }
    write_metrics(&metrics_path, &records)?;

    let batches = split_batches(data.train.len(), cfg.batch_size, cfg.seed)?;
    let mut wall = records.last().map_or(0.0, |r| r.wall_seconds);

    for epoch in start_epoch + 1..=cfg.epochs {
        let t0 = Instant::now();
        // every epoch draws from streams keyed by its number, so a resumed run
        // replays exactly what an uninterrupted one would
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_TRAIN + epoch as u64);
        data.train.reseed(cfg.seed, STREAM_BST + epoch as u64);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut rebuilds = 0;
        for idx in batches.epoch(epoch) {
            let x = data.train.batch(&idx);
            let r = trainer.step(x.view(), &mut rng)?;
            loss_sum += r.loss * idx.len() as f64;
            count += idx.len();
            rebuilds += r.fisher_rebuilds;
        }
        wall += t0.elapsed().as_secs_f64();

        let val_seed = cfg.seed ^ (STREAM_VAL + epoch as u64);
        let val_loss = bound_loss(&trainer.hm, &data.validation, cfg.val_samples, val_seed)?;
        let last = epoch == cfg.epochs;
        let is_loglik = if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || last) {
            Some(is_log_likelihood(&trainer.hm, data.eval.view(), cfg.is_samples, cfg.seed ^ SEED_IS)?)
        } else {
            None
        };
        let kl = data.pstar.as_ref().map(|d| exact_kl(d, &trainer.hm.p)).transpose()?;
        let rec = MetricsRecord {
            epoch,
            wall_seconds: wall,
            train_loss: loss_sum / count as f64,
            val_loss,
            is_loglik,
            exact_kl: kl,
            fisher_rebuilds: rebuilds,
        };
        info!(
            "epoch {epoch}: train {:.4} val {:.4}{}{}",
            rec.train_loss,
            rec.val_loss,
            rec.is_loglik.map_or(String::new(), |v| format!(" is_ll {v:.4}")),
            rec.exact_kl.map_or(String::new(), |v| format!(" kl {v:.5}"))
        );
        records.push(rec);
        write_metrics(&metrics_path, &records)?;

        if last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
            let [cp, op, fp] = ckpt_paths(&out, epoch);
            checkpoint::save(&trainer.hm, &cp)?;
            let mut w = BufWriter::new(File::create(op)?);
            trainer.opt.write_state(&mut w)?;
            w.flush()?;
            let mut w = BufWriter::new(File::create(fp)?);
            trainer.fisher.write_state(&mut w)?;
            w.flush()?;
        }
    }
    checkpoint::save(&trainer.hm, &out.join("final.ckpt"))?;
    Ok(RunSummary {
        out_dir: out,
        records,
        model: trainer.hm,
        config: cfg,
    })
}

/// Grid axes of a sweep; every combination becomes one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub lrs: Vec<f64>,
    pub dampings: Vec<f64>,
    pub ksteps: Vec<usize>,
}

/// One cell of a sweep with its summary metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lr: f64,
    pub damping: f64,
    pub kstep: usize,
    pub out_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

impl SweepCell {
    pub fn min_val_loss(&self) -> f64 {
        self.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn final_val_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.val_loss)
    }
}

/// Runs every grid cell under `base.out_dir/cell-<i>` (cells in parallel when
/// built with rayon) and writes `sweep.csv` in long format:
/// `cell,lr,damping,kstep,metric,value`.
///
/// All cells share the base seed, so a 1x1x1 grid reproduces a single run and
/// cells differ only in their hyperparameters.
pub fn sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    if grid.lrs.is_empty() || grid.dampings.is_empty() || grid.ksteps.is_empty() {
        return Err(Error::Config("every sweep axis needs at least one value".into()));
    }
    let mut cells = Vec::new();
    for &lr in &grid.lrs {
        for &damping in &grid.dampings {
            for &kstep in &grid.ksteps {
                cells.push((lr, damping, kstep));
            }
        }
    }
    let root = base.out_dir.clone();
    fs::create_dir_all(&root)?;
    let results: Vec<Result<SweepCell>> = crate::exec::map_indexed(cells.len(), |i| {
        let (lr, damping, kstep) = cells[i];
        let cfg = RunConfig {
            lr: Some(lr),
            damping: Some(damping),
            kstep,
            out_dir: root.join(format!("cell-{i:03}")),
            ..base.clone()
        };
        let s = run(&cfg, false)?;
        Ok(SweepCell {
            lr,
            damping,
            kstep,
            out_dir: s.out_dir,
            records: s.records,
        })
    });
    let cells: Vec<SweepCell> = results.into_iter().collect::<Result<_>>()?;

    let mut w = csv::Writer::from_path(root.join("sweep.csv"))?;
    w.write_record(["cell", "lr", "damping", "kstep", "metric", "value"])?;
    for (i, c) in cells.iter().enumerate() {
        let last = c.records.last();
        let metrics = [
            ("min_val_loss", Some(c.min_val_loss())),
            ("final_val_loss", Some(c.final_val_loss())),
            ("final_train_loss", last.map(|r| r.train_loss)),
            ("final_is_loglik", last.and_then(|r| r.is_loglik)),
            ("final_exact_kl", last.and_then(|r| r.exact_kl)),
        ];
        for (name, v) in metrics {
            if let Some(v) = v {
                w.write_record([
                    i.to_string(),
                    c.lr.to_string(),
                    c.damping.to_string(),
                    c.kstep.to_string(),
                    name.to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(cells)
}

/// Evaluation of a saved model on the configured data.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub n: usize,
    pub is_loglik: f64,
    pub exact_kl: Option<f64>,
}

pub fn evaluate(hm: &HelmholtzMachine, cfg: &RunConfig) -> Result<EvalReport> {
    let cfg = cfg.resolved()?;
    let data = prepare_data(&cfg)?;
    if hm.architecture().visible() != data.eval.ncols() {
        return Err(Error::Config("model visible size differs from the dataset".into()));
    }
    Ok(EvalReport {
        split: data.eval_split,
        n: data.eval.nrows(),
        is_loglik: is_log_likelihood(hm, data.eval.view(), cfg.is_samples, cfg.seed ^ SEED_IS)?,
        exact_kl: data.pstar.as_ref().map(|d| exact_kl(d, &hm.p)).transpose()?,
    })
}
