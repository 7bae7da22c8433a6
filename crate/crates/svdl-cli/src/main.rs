//! `svdl` command line: train, prune, eval, bench, sweep.
//!
//! Exit codes: 0 success, 1 internal error, 2 config/usage error, 3 data
//! error, 4 numeric divergence, 5 malformed checkpoint, 6 checkpoint/data
//! dimension mismatch, 7 checkpoint not pruned (bench).

mod commands;
mod config;

use svdl::{CheckpointError, Error};

const USAGE: &str = "usage: svdl <command> [flags]

commands:
  train  --config PATH                 train a model, writing metrics.tsv,
                                       best.ckpt, final.ckpt to out.dir
  prune  --ckpt PATH [--tau F] --out DIR
                                       prune a checkpoint and write the
                                       pruned checkpoint plus reports
  eval   --ckpt PATH --data SOURCE [--split train|val|test] [--task NAME]
                                       print the task metric of a checkpoint
  bench  --ckpt PATH [--seq-len N] [--repeats N]
                                       compare dense vs compiled forward
  sweep  --config PATH                 train all four variants and write a
                                       combined table.tsv";

#[derive(Debug, Default)]
pub struct Flags {
    pub config: Option<String>,
    pub ckpt: Option<String>,
    pub tau: Option<f64>,
    pub out: Option<String>,
    pub seq_len: Option<usize>,
    pub repeats: Option<usize>,
    pub data: Option<String>,
    pub task: Option<String>,
    pub split: Option<String>,
}

fn parse_flags(args: &[String]) -> Result<Flags, Error> {
    let mut flags = Flags::default();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || -> Result<String, Error> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("flag {flag} needs a value")))
        };
        match flag.as_str() {
            "--config" => flags.config = Some(value()?),
            "--ckpt" => flags.ckpt = Some(value()?),
            "--tau" => {
                let v = value()?;
                flags.tau = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("--tau: bad number {v:?}")))?,
                );
            }
            "--out" => flags.out = Some(value()?),
            "--seq-len" => {
                let v = value()?;
                flags.seq_len = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("--seq-len: bad integer {v:?}")))?,
                );
            }
            "--repeats" => {
                let v = value()?;
                flags.repeats = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("--repeats: bad integer {v:?}")))?,
                );
            }
            "--data" => flags.data = Some(value()?),
            "--task" => flags.task = Some(value()?),
            "--split" => flags.split = Some(value()?),
            other => return Err(Error::Config(format!("unknown flag {other}"))),
        }
    }
    Ok(flags)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::NonFinite { .. } => 4,
        Error::Checkpoint(CheckpointError::NotPruned) => 7,
        Error::Checkpoint(_) => 5,
        Error::Dimension(_) => 6,
        _ => 1,
    }
}

fn run() -> Result<(), Error> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        return Err(Error::Config(format!("missing command\n{USAGE}")));
    };
    let flags = parse_flags(&args[1..])?;
    let require = |opt: &Option<String>, name: &str| -> Result<String, Error> {
        opt.clone()
            .ok_or_else(|| Error::Config(format!("{command} requires {name}")))
    };
    match command.as_str() {
        "train" => commands::cmd_train(&require(&flags.config, "--config PATH")?),
        "prune" => commands::cmd_prune(
            &require(&flags.ckpt, "--ckpt PATH")?,
            flags.tau,
            &require(&flags.out, "--out DIR")?,
        ),
        "eval" => commands::cmd_eval(
            &require(&flags.ckpt, "--ckpt PATH")?,
            &require(&flags.data, "--data SOURCE")?,
            flags.split.as_deref(),
            flags.task.as_deref(),
        ),
        "bench" => commands::cmd_bench(
            &require(&flags.ckpt, "--ckpt PATH")?,
            flags.seq_len.unwrap_or(256),
            flags.repeats.unwrap_or(20),
        ),
        "sweep" => commands::cmd_sweep(&require(&flags.config, "--config PATH")?),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command {other}\n{USAGE}"))),
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
