use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use helmholtz::data::{dump_three_by_three, three_by_three, BinarizationMode, Split};
use helmholtz::experiment::{evaluate, parse_list, run, sweep, DatasetKind, RunConfig, SweepGrid};
use helmholtz::model::checkpoint;
use helmholtz::trainers::{Algorithm, OptimizerKind};

#[derive(Parser)]
#[command(name = "helmholtz", version, about = "Wake-sleep training of Helmholtz machines with natural gradients")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoints and the resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train every lr x damping x K combination and tabulate the results.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Learning rates, comma separated.
        #[arg(long)]
        lrs: Option<String>,
        /// Damping factors, comma separated.
        #[arg(long)]
        dampings: Option<String>,
        /// Fisher refresh periods, comma separated.
        #[arg(long)]
        ksteps: Option<String>,
    },
    /// Estimate the log-likelihood of a checkpoint (and exact KL on 3by3).
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the 3by3 pmf as 512 "bitstring probability" lines.
    #[command(name = "dump-3by3")]
    Dump3by3 {
        #[arg(long, default_value_t = 0.5)]
        bar_prob: f64,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags shared by `train`, `sweep` and `eval`; each overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// Flat TOML config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["ws", "nws", "rws", "nrws"])]
    algorithm: Option<String>,
    #[arg(long, value_parser = ["3by3", "minimnist", "mnist"])]
    dataset: Option<String>,
    /// Hidden layer sizes, lowest first, e.g. 100,50,20,10,10.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    kstep: Option<usize>,
    #[arg(long, value_parser = ["sgd", "adam"])]
    optimizer: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["b", "bst"])]
    binarization: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory with MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Posterior samples for the IS log-likelihood.
    #[arg(long)]
    is_samples: Option<usize>,
    /// IS log-likelihood every this many epochs (0 = never).
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_parser = ["train", "validation", "test"])]
    eval_split: Option<String>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    eval_limit: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> helmholtz::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = &self.algorithm {
            c.algorithm = a.parse::<Algorithm>()?;
        }
        if let Some(d) = &self.dataset {
            c.dataset = d.parse::<DatasetKind>()?;
        }
        if let Some(l) = &self.layers {
            c.layers = Some(parse_list(l)?);
        }
        if let Some(o) = &self.optimizer {
            c.optimizer = if o == "adam" { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        }
        if let Some(b) = &self.binarization {
            c.binarization = b.parse::<BinarizationMode>()?;
        }
        if let Some(s) = &self.eval_split {
            c.eval_split = match s.as_str() {
                "train" => Split::Train,
                "validation" => Split::Validation,
                _ => Split::Test,
            };
        }
        c.lr = self.lr.or(c.lr);
        c.damping = self.damping.or(c.damping);
        c.samples = self.samples.unwrap_or(c.samples);
        c.kstep = self.kstep.unwrap_or(c.kstep);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.seed = self.seed.unwrap_or(c.seed);
        c.is_samples = self.is_samples.unwrap_or(c.is_samples);
        c.eval_every = self.eval_every.unwrap_or(c.eval_every);
        c.train_limit = self.train_limit.or(c.train_limit);
        c.eval_limit = self.eval_limit.or(c.eval_limit);
        if let Some(o) = &self.out_dir {
            c.out_dir = o.clone();
        }
        if let Some(d) = &self.data_dir {
            c.data_dir = Some(d.clone());
        }
        c.resolved()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> helmholtz::Result<()> {
    match cli.cmd {
        Command::Train { run: args, resume } => {
            let cfg = args.resolve()?;
            let s = run(&cfg, resume)?;
            if let Some(r) = s.records.last() {
                println!(
                    "epoch {} train_loss {:.4} val_loss {:.4}{}",
                    r.epoch,
                    r.train_loss,
                    r.val_loss,
                    r.is_loglik.map_or(String::new(), |v| format!(" is_loglik {v:.4}"))
                );
            }
            println!("wrote {}", s.out_dir.display());
        }
        Command::Sweep {
            run: args,
            lrs,
            dampings,
            ksteps,
        } => {
            let cfg = args.resolve()?;
            let grid = SweepGrid {
                lrs: lrs.map_or(Ok(vec![cfg.lr.unwrap()]), |s| parse_list(&s))?,
                dampings: dampings.map_or(Ok(vec![cfg.damping.unwrap()]), |s| parse_list(&s))?,
                ksteps: ksteps.map_or(Ok(vec![cfg.kstep]), |s| parse_list(&s))?,
            };
            for c in sweep(&cfg, &grid)? {
                println!(
                    "lr {} damping {} kstep {} min_val_loss {:.4}",
                    c.lr,
                    c.damping,
                    c.kstep,
                    c.min_val_loss()
                );
            }
            println!("wrote {}", cfg.out_dir.join("sweep.csv").display());
        }
        Command::Eval { run: args, checkpoint: path } => {
            let cfg = args.resolve()?;
            let hm = checkpoint::load(&path)?;
            let r = evaluate(&hm, &cfg)?;
            println!(
                "split {} n {} is_samples {} is_loglik {:.4}",
                r.split.name(),
                r.n,
                cfg.is_samples,
                r.is_loglik
            );
            if let Some(kl) = r.exact_kl {
                println!("exact_kl {kl:.6}");
            }
        }
        Command::Dump3by3 { bar_prob, out } => {
            let text = dump_three_by_three(&three_by_three(bar_prob)?);
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
