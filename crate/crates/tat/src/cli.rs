//! Command-line front end. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tat_core::audit::{loss_audit, AUDIT_TOLERANCE};
use tat_core::data::Labels;
use tat_core::hier::{AnchorConfig, PatchGroupConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{parse_config_with, RunConfig};
use crate::cost::measure_cost;
use crate::error::{Error, Result};
use crate::export::{write_correlation_csv, write_correlation_pgm};
use crate::harness::{distill_student, evaluate, load_datasets, tat_map, train_teacher};
use crate::idx::write_idx;

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";

#[derive(Parser, Debug)]
#[command(name = "tat", version, about = "Target-aware transformer knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key after the file is read; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training seed; shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and test splits as IDX files.
    GenData(Common),
    /// Train the teacher network.
    TrainTeacher(Common),
    /// Distil the student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; trained and saved to OUT when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on both splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference audit of every distillation loss.
    Gradcheck(Common),
    /// Export the correlation map of one sample as CSV and PGM.
    DumpTatMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Distil once per (value, seed) and tabulate the final metrics.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Configuration key to vary.
        key: String,
        /// Comma-separated values.
        values: String,
        /// Half-open seed range `N..M`, or inclusive `N..=M`.
        #[arg(long, default_value = "0..5", value_parser = parse_seeds)]
        seeds: SeedRange,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Estimated and measured cost of full versus hierarchical TaT.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 64)]
        groups: usize,
        #[arg(long, default_value_t = 4)]
        pool_k: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn seeds(self) -> impl Iterator<Item = u64> {
        self.start..self.end
    }
}

/// Parses `N..M` (half-open) or `N..=M`.
pub fn parse_seeds(s: &str) -> std::result::Result<SeedRange, String> {
    let bad = || format!("expected N..M or N..=M, got `{s}`");
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let start: u64 = a.trim().parse().map_err(|_| bad())?;
    let (b, inclusive) = match b.strip_prefix('=') {
        Some(b) => (b, true),
        None => (b, false),
    };
    let last: u64 = b.trim().parse().map_err(|_| bad())?;
    let end = if inclusive { last + 1 } else { last };
    if end <= start {
        return Err(format!("seed range `{s}` is empty"));
    }
    Ok(SeedRange { start, end })
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    parse_config_with(&text, &overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads `explicit`, or `OUT/teacher.ckpt` if present, or trains and saves a
/// teacher there.
fn obtain_teacher(
    cfg: &RunConfig,
    explicit: Option<&Path>,
    out: &Path,
    train: &tat_core::data::Dataset,
    test: &tat_core::data::Dataset,
) -> Result<Checkpoint> {
    if let Some(p) = explicit {
        return load_checkpoint(p);
    }
    let path = out.join(TEACHER_FILE);
    if path.exists() {
        return load_checkpoint(&path);
    }
    let (ckpt, metrics) = train_teacher(cfg, train, test, cfg.seed)?;
    save_checkpoint(&ckpt, &path)?;
    write(&out.join("teacher_metrics.csv"), metrics.to_csv())?;
    eprintln!("trained teacher: test metric {:.4}", metrics.final_metric());
    Ok(ckpt)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let (train, test) = load_datasets(&cfg)?;
            if !matches!(train.labels, Labels::Class(_)) {
                return Err(Error::Usage("IDX export supports classification data only".into()));
            }
            create_dir(&common.out)?;
            write_idx(&train, common.out.join("train-images.idx"), common.out.join("train-labels.idx"))?;
            write_idx(&test, common.out.join("test-images.idx"), common.out.join("test-labels.idx"))?;
            write(&common.out.join("config.cfg"), cfg.serialize())?;
        }
        Command::TrainTeacher(common) => {
            let cfg = load_config(&common)?;
            let (train, test) = load_datasets(&cfg)?;
            create_dir(&common.out)?;
            let (ckpt, metrics) = train_teacher(&cfg, &train, &test, cfg.seed)?;
            save_checkpoint(&ckpt, common.out.join(TEACHER_FILE))?;
            write(&common.out.join("teacher_metrics.csv"), metrics.to_csv())?;
            println!("teacher test metric {:.6}", metrics.final_metric());
        }
        Command::Distill { common, teacher } => {
            let cfg = load_config(&common)?;
            let (train, test) = load_datasets(&cfg)?;
            create_dir(&common.out)?;
            let tck = obtain_teacher(&cfg, teacher.as_deref(), &common.out, &train, &test)?;
            let (ckpt, metrics) = distill_student(&cfg, &tck, &train, &test, cfg.seed)?;
            save_checkpoint(&ckpt, common.out.join(STUDENT_FILE))?;
            write(&common.out.join("metrics.csv"), metrics.to_csv())?;
            write(&common.out.join("config.cfg"), cfg.serialize())?;
            println!("student test metric {:.6}", metrics.final_metric());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (train, test) = load_datasets(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let train_metric = evaluate(&cfg, &ckpt, &train)?;
            let test_metric = evaluate(&cfg, &ckpt, &test)?;
            create_dir(&common.out)?;
            let csv = format!("split,metric\ntrain,{train_metric:.6}\ntest,{test_metric:.6}\n");
            write(&common.out.join("eval.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck(common) => {
            let cfg = load_config(&common)?;
            let rows = loss_audit(cfg.seed)?;
            let mut failed = 0;
            for r in &rows {
                let verdict = if r.passes() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:<40} {:?} max rel err {:.3e}", r.name, r.dims, r.max_rel_error);
                failed += usize::from(!r.passes());
            }
            if failed > 0 {
                return Err(tat_core::Error::NonFinite(format!(
                    "{failed} of {} gradient checks exceed {AUDIT_TOLERANCE:e}",
                    rows.len()
                ))
                .into());
            }
        }
        Command::DumpTatMap {
            common,
            teacher,
            student,
            sample,
        } => {
            let cfg = load_config(&common)?;
            let (_, test) = load_datasets(&cfg)?;
            let map = tat_map(&cfg, &load_checkpoint(&teacher)?, &load_checkpoint(&student)?, &test, sample)?;
            create_dir(&common.out)?;
            write_correlation_csv(&map, common.out.join("tat_map.csv"))?;
            write_correlation_pgm(&map, common.out.join("tat_map.pgm"))?;
            println!("{0}x{0} correlation map, max row-sum error {1:.2e}", map.size(), map.max_row_sum_error());
        }
        Command::Sweep {
            common,
            key,
            values,
            seeds,
            teacher,
        } => sweep(&common, &key, &values, seeds, teacher.as_deref())?,
        Command::Cost {
            common,
            size,
            channels,
            patch,
            groups,
            pool_k,
            reps,
        } => {
            let cfg = load_config(&common)?;
            let pg = PatchGroupConfig::new(patch, patch, groups);
            let r = measure_cost(size, size, channels, pg, AnchorConfig { pool_k }, reps, cfg.seed)?;
            let csv = format!(
                "variant,macs,seconds\nfull,{},{:.6}\nhierarchical,{},{:.6}\n",
                r.full_macs,
                r.full_time.as_secs_f64(),
                r.hier_macs,
                r.hier_time.as_secs_f64()
            );
            create_dir(&common.out)?;
            write(&common.out.join("cost.csv"), &csv)?;
            print!("{csv}");
            println!(
                "estimated reduction {:.1}x, measured {:.1}x",
                r.estimated_ratio(),
                r.measured_ratio()
            );
        }
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "key,value,seed,metric,loss_task,loss_kl,loss_tat,loss_pg,loss_ap,loss_total";

fn sweep(common: &Common, key: &str, values: &str, seeds: SeedRange, teacher: Option<&Path>) -> Result<()> {
    let base = load_config(common)?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    // validate every point before any training
    let mut configs = Vec::new();
    for v in &values {
        let mut cfg = base.clone();
        cfg.set(key, v)?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let (train, test) = load_datasets(&base)?;
    create_dir(&common.out)?;
    let tck = obtain_teacher(&base, teacher, &common.out, &train, &test)?;

    let mut report = String::from(SWEEP_HEADER);
    report.push('\n');
    for (v, cfg) in values.iter().zip(&configs) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for seed in seeds.seeds() {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let (_, metrics) = distill_student(&cfg, &tck, &train, &test, seed)?;
            let dir = common.out.join("sweep").join(format!("{key}={v}")).join(format!("seed{seed}"));
            create_dir(&dir)?;
            write(&dir.join("metrics.csv"), metrics.to_csv())?;
            let last = metrics.epochs.last().copied().unwrap_or_default();
            let _ = writeln!(
                report,
                "{key},{v},{seed},{:.6},{},{},{},{},{},{}",
                last.metric, last.loss_task, last.loss_kl, last.loss_tat, last.loss_pg, last.loss_ap, last.loss_total
            );
            eprintln!("{key}={v} seed {seed}: metric {:.4}", last.metric);
            sum += last.metric;
            count += 1;
        }
        let _ = writeln!(report, "{key},{v},mean,{:.6},,,,,,", sum / count as f64);
    }
    write(&common.out.join("sweep.csv"), &report)?;
    print!("{report}");
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
