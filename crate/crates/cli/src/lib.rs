//! Command-line front end: dataset generation, training, sampling, zero-shot
//! inference, evaluation and the self-check suite.

pub mod check;
pub mod config;
pub mod export;
pub mod metrics;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use jointdiff::joint::{train, Checkpoint, EpochLog, PatientRecord};
use jointdiff::sampler::{derive_seed, Conditioning, Job, Sampler};
use jointdiff::synthdata::{generate_dataset, population_baseline, split, Dataset, DatasetRecord, Split};
use jointdiff::Error;

use config::RunConfig;

pub const DATASET_FILE: &str = "dataset.jdds";
pub const CHECKPOINT_FILE: &str = "checkpoint.jdif";
pub const LOSS_LOG_FILE: &str = "loss.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    CheckFailed(usize),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::CheckFailed(_) => "check-failed",
        }
    }

    /// `error<TAB>kind<TAB>message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\t'], " ");
        format!("error\t{}\t{}", self.kind(), msg.trim())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::CheckFailed(n) => write!(f, "{n} properties failed"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "jointdiff", version, about = "Joint image/age/sex diffusion on synthetic phantoms")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KnownForAge {
    None,
    Image,
    Sex,
    #[value(name = "image+sex")]
    ImageSex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KnownForSex {
    None,
    Image,
    Age,
    #[value(name = "image+age")]
    ImageAge,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and split a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and keep the best validation epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw unconditional samples.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(short = 'n', long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate age on the test split from the chosen known variables.
    InferAge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "image")]
        known: KnownForAge,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify sex on the test split by majority vote.
    InferSex {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "image")]
        known: KnownForSex,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Complete the right half of test images from their left half.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(short = 'n', long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the metric report from a predictions file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Run the built-in property suite.
    Check,
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn test_records(ds: &Dataset, limit: usize) -> Vec<&DatasetRecord> {
    let n = if limit == 0 { usize::MAX } else { limit };
    ds.records_in(Split::Test).take(n).collect()
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// Parses `args` (including the program name) and runs the command, writing
/// human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}")?;
                return Ok(());
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData { out_dir, subjects, seed } => {
            if let Some(n) = subjects {
                cfg.data.subjects = n;
            }
            if let Some(s) = seed {
                cfg.data.generator.seed = s;
            }
            cfg.validate()?;
            prepare_dir(&out_dir)?;
            let d = &cfg.data;
            let ds = generate_dataset(d.subjects, &d.generator)?;
            let ds = split(&ds, (d.split[0], d.split[1], d.split[2]), d.split_seed)?;
            ds.save(out_dir.join(DATASET_FILE))?;
            cfg.echo(&out_dir)?;
            writeln!(
                out,
                "wrote {} subjects (train {}, validation {}, test {})",
                ds.records.len(),
                ds.count(Split::Train),
                ds.count(Split::Validation),
                ds.count(Split::Test)
            )?;
        }
        Command::Train { data, out_dir, epochs, seed } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let ds = Dataset::load(&data)?;
            cfg.data.generator = ds.config;
            cfg.validate()?;
            prepare_dir(&out_dir)?;
            cfg.echo(&out_dir)?;
            let mut log = std::fs::File::create(out_dir.join(LOSS_LOG_FILE))?;
            writeln!(
                log,
                "epoch\ttrain_loss\tval_loss\ttrain_image\ttrain_age\ttrain_sex\tval_image\tval_age\tval_sex"
            )?;
            let mut io_err = None;
            let outcome = train(&ds, &cfg.train, |l: &EpochLog| {
                let row = format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    l.epoch,
                    l.train.total,
                    l.validation.total,
                    l.train.image,
                    l.train.age,
                    l.train.sex,
                    l.validation.image,
                    l.validation.age,
                    l.validation.sex
                );
                if let Err(e) = writeln!(log, "{row}").and_then(|_| writeln!(out, "{row}")) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            outcome.checkpoint.save(out_dir.join(CHECKPOINT_FILE))?;
            let h = &outcome.checkpoint.header;
            writeln!(
                out,
                "best epoch {} validation loss {:.6} (initial {:.6})",
                h.epoch, h.validation_loss, h.initial_validation_loss
            )?;
        }
        Command::Sample { checkpoint, out_dir, count, seed } => {
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let sampler = Sampler::new(&ck, cfg.sampler)?;
            prepare_dir(&out_dir)?;
            cfg.echo(&out_dir)?;
            let jobs: Vec<Job> = (0..count as u64)
                .map(|i| Job {
                    condition: Conditioning::none(),
                    seed: derive_seed(cfg.eval.seed, i),
                })
                .collect();
            let samples = sampler.sample(&jobs)?;
            let mut table = String::from("index\tage\tsex\timage\n");
            let side = ck.header.denoiser.image_side;
            for (i, s) in samples.iter().enumerate() {
                let name = format!("sample_{i:03}.pgm");
                export::export_image(&s.record.image, side, out_dir.join(&name))?;
                table.push_str(&format!("{i}\t{:.4}\t{}\t{name}\n", s.record.age, s.record.sex));
            }
            std::fs::write(out_dir.join("samples.tsv"), &table)?;
            write!(out, "{table}")?;
        }
        Command::InferAge { checkpoint, data, out_dir, known, limit, seed } => {
            if let Some(l) = limit {
                cfg.eval.limit = l;
            }
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let sampler = Sampler::new(&ck, cfg.sampler)?;
            prepare_dir(&out_dir)?;
            cfg.echo(&out_dir)?;
            let recs = test_records(&ds, cfg.eval.limit);
            let conds: Vec<Conditioning> = recs
                .iter()
                .map(|r| age_condition(&r.record, known))
                .collect();
            let est = sampler.estimate_ages(&conds, cfg.eval.seed)?;
            let label = known.to_possible_value().unwrap().get_name().to_string();
            let mut pred = format!("#kind\tregression\tknown\t{label}\nsubject_id\ttarget\tprediction");
            for i in 0..cfg.sampler.inference_samples {
                pred.push_str(&format!("\tsample_{}", i + 1));
            }
            pred.push('\n');
            for (r, e) in recs.iter().zip(&est) {
                pred.push_str(&format!("{}\t{}\t{}", r.subject_id, r.record.age, e.estimate));
                for s in &e.samples {
                    pred.push_str(&format!("\t{s}"));
                }
                pred.push('\n');
            }
            std::fs::write(out_dir.join(PREDICTIONS_FILE), pred)?;
            let targets: Vec<f64> = recs.iter().map(|r| r.record.age).collect();
            let preds: Vec<f64> = est.iter().map(|e| e.estimate).collect();
            let samples: Vec<Vec<f64>> = est.iter().map(|e| e.samples.clone()).collect();
            let with_var = cfg.sampler.inference_samples > 1;
            let rep = metrics::regression(&preds, &targets, with_var.then_some(samples.as_slice()))?;
            let baseline = population_baseline(&ds)?;
            let base = metrics::regression(&vec![baseline.predict(); targets.len()], &targets, None)?;
            let report = format!(
                "{}\n{}\n{}\n",
                metrics::table_header(),
                metrics::regression_row("population-mean", "-", &base),
                metrics::regression_row("jointdiff", &label, &rep)
            );
            std::fs::write(out_dir.join(METRICS_FILE), &report)?;
            write!(out, "{report}")?;
        }
        Command::InferSex { checkpoint, data, out_dir, known, limit, seed } => {
            if let Some(l) = limit {
                cfg.eval.limit = l;
            }
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let sampler = Sampler::new(&ck, cfg.sampler)?;
            prepare_dir(&out_dir)?;
            cfg.echo(&out_dir)?;
            let recs = test_records(&ds, cfg.eval.limit);
            let conds: Vec<Conditioning> = recs
                .iter()
                .map(|r| sex_condition(&r.record, known))
                .collect();
            let preds = sampler.predict_sexes(&conds, cfg.eval.seed)?;
            let label = known.to_possible_value().unwrap().get_name().to_string();
            let k = ck.header.denoiser.categories;
            let mut text = format!("#kind\tclassification\tknown\t{label}\nsubject_id\ttarget\tprediction");
            for c in 0..k {
                text.push_str(&format!("\tvotes_{c}"));
            }
            text.push('\n');
            for (r, p) in recs.iter().zip(&preds) {
                text.push_str(&format!("{}\t{}\t{}", r.subject_id, r.record.sex, p.class));
                for v in &p.votes {
                    text.push_str(&format!("\t{v}"));
                }
                text.push('\n');
            }
            std::fs::write(out_dir.join(PREDICTIONS_FILE), text)?;
            let targets: Vec<usize> = recs.iter().map(|r| r.record.sex).collect();
            let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
            let rep = metrics::classification(&classes, &targets)?;
            let report = format!(
                "{}\n{}\n",
                metrics::table_header(),
                metrics::classification_row("jointdiff", &label, &rep)
            );
            std::fs::write(out_dir.join(METRICS_FILE), &report)?;
            write!(out, "{report}")?;
        }
        Command::Inpaint { checkpoint, data, out_dir, count, seed } => {
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let sampler = Sampler::new(&ck, cfg.sampler)?;
            prepare_dir(&out_dir)?;
            cfg.echo(&out_dir)?;
            let side = ck.header.denoiser.image_side;
            let recs = test_records(&ds, count);
            let jobs: Vec<Job> = recs
                .iter()
                .enumerate()
                .map(|(i, r)| Job {
                    condition: Conditioning::left_half(&r.record.image, side),
                    seed: derive_seed(cfg.eval.seed, i as u64),
                })
                .collect();
            let samples = sampler.sample(&jobs)?;
            let mut table = String::from("subject_id\tleft_max_abs_diff\tright_mae\n");
            for (r, s) in recs.iter().zip(&samples) {
                let id = r.subject_id;
                let (mut left, mut right, mut nr) = (0.0f32, 0.0f32, 0usize);
                let mut masked = r.record.image.clone();
                for (i, (a, b)) in r.record.image.iter().zip(&s.record.image).enumerate() {
                    if i % side < side / 2 {
                        left = left.max((a - b).abs());
                    } else {
                        right += (a - b).abs();
                        nr += 1;
                        masked[i] = -1.0;
                    }
                }
                export::export_image(&r.record.image, side, out_dir.join(format!("subject_{id}_original.pgm")))?;
                export::export_image(&masked, side, out_dir.join(format!("subject_{id}_known.pgm")))?;
                export::export_image(&s.record.image, side, out_dir.join(format!("subject_{id}_inpainted.pgm")))?;
                table.push_str(&format!("{id}\t{left}\t{:.4}\n", right / nr.max(1) as f32));
            }
            std::fs::write(out_dir.join("inpaint.tsv"), &table)?;
            write!(out, "{table}")?;
        }
        Command::Eval { predictions } => {
            let text = std::fs::read_to_string(&predictions)?;
            write!(out, "{}", eval_report(&text)?)?;
        }
        Command::Check => {
            let results = check::run_all();
            for r in &results {
                writeln!(out, "{}", r.line())?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::CheckFailed(failed));
            }
        }
    }
    Ok(())
}

pub fn age_condition(r: &PatientRecord, known: KnownForAge) -> Conditioning {
    let c = Conditioning::none();
    match known {
        KnownForAge::None => c,
        KnownForAge::Image => c.with_image(&r.image),
        KnownForAge::Sex => c.with_sex(r.sex),
        KnownForAge::ImageSex => c.with_image(&r.image).with_sex(r.sex),
    }
}

pub fn sex_condition(r: &PatientRecord, known: KnownForSex) -> Conditioning {
    let c = Conditioning::none();
    match known {
        KnownForSex::None => c,
        KnownForSex::Image => c.with_image(&r.image),
        KnownForSex::Age => c.with_age(r.age),
        KnownForSex::ImageAge => c.with_image(&r.image).with_age(r.age),
    }
}

/// Metric table recomputed from a predictions file written by `infer-age`
/// or `infer-sex`.
pub fn eval_report(text: &str) -> CliResult<String> {
    let bad = |m: &str| CliError::Core(Error::Format(format!("predictions: {m}")));
    let mut lines = text.lines();
    let meta: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split('\t').collect();
    if meta.len() != 4 || meta[0] != "#kind" || meta[2] != "known" {
        return Err(bad("missing #kind line"));
    }
    lines.next().ok_or_else(|| bad("missing column header"))?;
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split('\t')
                .map(|f| f.parse::<f64>().map_err(|_| bad(&format!("bad number {f:?}"))))
                .collect::<CliResult<Vec<f64>>>()
        })
        .collect::<CliResult<_>>()?;
    if rows.iter().any(|r| r.len() < 3) {
        return Err(bad("short row"));
    }
    let row = match meta[1] {
        "regression" => {
            let targets: Vec<f64> = rows.iter().map(|r| r[1]).collect();
            let preds: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            let samples: Vec<Vec<f64>> = rows.iter().map(|r| r[3..].to_vec()).collect();
            let with_var = samples.iter().all(|s| s.len() > 1);
            let rep = metrics::regression(&preds, &targets, with_var.then_some(samples.as_slice()))?;
            metrics::regression_row("jointdiff", meta[3], &rep)
        }
        "classification" => {
            let targets: Vec<usize> = rows.iter().map(|r| r[1] as usize).collect();
            let preds: Vec<usize> = rows.iter().map(|r| r[2] as usize).collect();
            metrics::classification_row("jointdiff", meta[3], &metrics::classification(&preds, &targets)?)
        }
        other => return Err(bad(&format!("unknown kind {other}"))),
    };
    Ok(format!("{}\n{row}\n", metrics::table_header()))
}
