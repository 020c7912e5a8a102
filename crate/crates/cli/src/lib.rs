//! The `pivad` command line: every subcommand is a pure function of its
//! arguments, its input files and the seed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pivad_core::checkpoint::{load_checkpoint, load_teacher, save_checkpoint, save_teacher};
use pivad_core::config::{ModalitySource, SiteSelection};
use pivad_core::data::{generate_dataset, load_dataset, ScoreSeries, VideoRecord, MANIFEST_FILE};
use pivad_core::gradsuite::{run_grad_suite, GRAD_THRESHOLD};
use pivad_core::model::{ForwardOptions, PiVadModel};
use pivad_core::train::{
    evaluate, evaluate_teacher, main_stage, pretrain_teacher, score_all, warmup_stage, write_log,
};
use pivad_core::Config;
use thiserror::Error;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const TEACHER_FILE: &str = "teacher.pvck";
pub const MODEL_FILE: &str = "model.pvck";
pub const REPORT_FILE: &str = "report.json";
/// First token of every score file.
pub const SCORE_MAGIC: &str = "PVL-1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pivad_core::Error),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    /// 1 for usage and configuration mistakes, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(pivad_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "pivad",
    version,
    about = "Poly-modal induced video anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the flags that override it.
#[derive(Debug, Clone, Default, Args)]
struct Overrides {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and batching.
    #[arg(long)]
    seed: Option<u64>,
    /// Where pseudo or real modality streams come from.
    #[arg(long, value_name = "pseudo|real")]
    modality_source: Option<ModalitySource>,
    /// Which induction sites are active.
    #[arg(long, value_name = "early|late|both")]
    site: Option<SiteSelection>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// InfoNCE temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    epochs_warmup: Option<usize>,
    #[arg(long)]
    epochs_main: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.data.seed = s;
            cfg.train.seed = s;
        }
        if let Some(v) = self.modality_source {
            cfg.train.modality_source = v;
        }
        if let Some(v) = self.site {
            cfg.train.sites = v;
        }
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.loss.lambda1, self.lambda1);
        set(&mut cfg.loss.lambda2, self.lambda2);
        set(&mut cfg.loss.tau, self.tau);
        for (slot, v) in [
            (&mut cfg.train.epochs_pretrain, self.epochs_pretrain),
            (&mut cfg.train.epochs_warmup, self.epochs_warmup),
            (&mut cfg.train.epochs_main, self.epochs_main),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the RGB-only teacher with the MIL loss.
    PretrainTeacher {
        #[command(flatten)]
        o: Overrides,
        /// Split directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up, then train the student against a frozen teacher.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint written by pretrain-teacher.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write the metric report as JSON.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// Student checkpoint to evaluate.
        #[arg(long, conflicts_with = "teacher", required_unless_present = "teacher")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a teacher checkpoint instead of a student.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one score file per video.
    Infer {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-site modality activation tables.
        #[arg(long)]
        export_activations: bool,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Print the parameter count of every model component.
    Summary {
        #[command(flatten)]
        o: Overrides,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { o, out } => gen_data(&o.resolve()?, &out),
        Command::PretrainTeacher { o, data, out } => pretrain(&o.resolve()?, &data, &out),
        Command::Train {
            o,
            data,
            teacher,
            out,
        } => train(&o.resolve()?, &data, &teacher, &out),
        Command::Eval {
            o,
            data,
            checkpoint,
            teacher,
            out,
        } => eval(
            &o.resolve()?,
            &data,
            checkpoint.as_deref(),
            teacher.as_deref(),
            &out,
        ),
        Command::Infer {
            o,
            data,
            checkpoint,
            out,
            export_activations,
        } => infer(&o.resolve()?, &data, &checkpoint, &out, export_activations),
        Command::GradCheck { seed, seeds } => grad_check(seed, seeds),
        Command::Summary { o } => summary(&o.resolve()?),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn prepare_out(cfg: &Config, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join(EFFECTIVE_CONFIG), &cfg.to_toml_string())
}

/// Accepts a split directory or a manifest file.
fn manifest_path(data: &Path) -> Result<PathBuf> {
    let p = if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    };
    if !p.is_file() {
        return Err(CliError::Data(format!("no manifest at {}", p.display())));
    }
    Ok(p)
}

fn load(data: &Path, require_modalities: bool) -> Result<Vec<VideoRecord>> {
    let videos = load_dataset(&manifest_path(data)?, require_modalities)?;
    if videos.is_empty() {
        return Err(CliError::Data(format!(
            "{} lists no videos",
            data.display()
        )));
    }
    Ok(videos)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let (train, test) = generate_dataset(&cfg.data, out)?;
    println!("wrote {} and {}", train.display(), test.display());
    Ok(())
}

fn pretrain(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let videos = load(data, false)?;
    prepare_out(cfg, out)?;
    let (teacher, outcome) = pretrain_teacher(&videos, &cfg.model, &cfg.train, &cfg.loss)?;
    write_log(&out.join("teacher_log.tsv"), &outcome.log)?;
    let path = out.join(TEACHER_FILE);
    save_teacher(&teacher, &path)?;
    let last = outcome.log.last().map_or(f64::NAN, |e| e.losses.l_mil);
    println!(
        "teacher: {} steps, final l_mil {last:.6}, saved {}",
        outcome.log.len(),
        path.display()
    );
    Ok(())
}

fn train(cfg: &Config, data: &Path, teacher: &Path, out: &Path) -> Result<()> {
    if !teacher.is_file() {
        return Err(CliError::Data(format!(
            "missing teacher checkpoint {}; run pretrain-teacher first",
            teacher.display()
        )));
    }
    let teacher = load_teacher(teacher, &cfg.model)?;
    let videos = load(data, true)?;
    prepare_out(cfg, out)?;
    let mut model = PiVadModel::new(&cfg.model, cfg.train.seed)?.with_teacher(teacher)?;
    let warm = warmup_stage(&mut model, &videos, &cfg.train, &cfg.loss)?;
    warn_all(&warm.warnings);
    write_log(&out.join("warmup_log.tsv"), &warm.log)?;
    let main = main_stage(&mut model, &videos, &cfg.train, &cfg.loss, false)?;
    warn_all(&main.warnings);
    write_log(&out.join("main_log.tsv"), &main.log)?;
    let path = out.join(MODEL_FILE);
    save_checkpoint(&model, Some(&main.adam), &path)?;
    let last = main.log.last().map(|e| e.losses.total).unwrap_or(f64::NAN);
    println!(
        "student: {} warm-up and {} main steps, final total {last:.6}, saved {}",
        warm.log.len(),
        main.log.len(),
        path.display()
    );
    Ok(())
}

fn eval(
    cfg: &Config,
    data: &Path,
    checkpoint: Option<&Path>,
    teacher: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let source = cfg.train.modality_source;
    let report = match (checkpoint, teacher) {
        (Some(ck), _) => {
            let (model, _) = load_checkpoint(ck, &cfg.model)?;
            if !model.flags.trained {
                eprintln!("warning: checkpoint has not finished the main stage");
            }
            let videos = load(data, source == ModalitySource::Real)?;
            evaluate(&model, &videos, source, cfg.train.sites)?
        }
        (None, Some(t)) => evaluate_teacher(&load_teacher(t, &cfg.model)?, &load(data, false)?)?,
        (None, None) => {
            return Err(CliError::Usage(
                "eval needs --checkpoint or --teacher".into(),
            ))
        }
    };
    prepare_out(cfg, out)?;
    write_text(&out.join(REPORT_FILE), &report.to_json())?;
    println!(
        "AUC {:.4}  AUC_A {:.4}  AP {:.4}  AP_A {:.4}",
        report.auc, report.auc_a, report.ap, report.ap_a
    );
    Ok(())
}

/// `PVL-1\t<id>\t<T>` then one score per line.
pub fn format_scores(s: &ScoreSeries) -> String {
    let mut text = format!("{SCORE_MAGIC}\t{}\t{}\n", s.video_id, s.scores.len());
    for v in &s.scores {
        let _ = writeln!(text, "{v}");
    }
    text
}

pub fn parse_scores(text: &str) -> std::result::Result<ScoreSeries, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty score file")?;
    let fields: Vec<&str> = header.split('\t').collect();
    let [magic, id, t] = fields[..] else {
        return Err(format!("bad header {header:?}"));
    };
    if magic != SCORE_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let t: usize = t.parse().map_err(|_| format!("bad snippet count {t:?}"))?;
    let scores = lines
        .map(|l| l.parse::<f64>().map_err(|_| format!("bad score {l:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if scores.len() != t {
        return Err(format!("header says {t} scores, found {}", scores.len()));
    }
    Ok(ScoreSeries {
        video_id: id.to_string(),
        scores,
    })
}

fn infer(cfg: &Config, data: &Path, checkpoint: &Path, out: &Path, export: bool) -> Result<()> {
    let (source, sites) = (cfg.train.modality_source, cfg.train.sites);
    let (model, _) = load_checkpoint(checkpoint, &cfg.model)?;
    let videos = load(data, source == ModalitySource::Real)?;
    prepare_out(cfg, out)?;
    let series = score_all(&videos, |v| model.infer(v, source, sites))?;
    let dir = out.join("scores");
    create_dir(&dir)?;
    for s in &series {
        write_text(&dir.join(format!("{}.txt", s.video_id)), &format_scores(s))?;
    }
    if export {
        export_activations(&model, &videos, source, sites, &out.join("activations"))?;
    }
    println!("scored {} videos into {}", series.len(), dir.display());
    Ok(())
}

/// Writes `<dir>/<video>.<site>.tsv`: a header of modality names, then
/// one row of normalized activation magnitudes per snippet.
pub fn export_activations(
    model: &PiVadModel,
    videos: &[VideoRecord],
    source: ModalitySource,
    sites: SiteSelection,
    dir: &Path,
) -> Result<()> {
    if !model.flags.trained {
        eprintln!("warning: exporting activations of a model that has not been trained");
    }
    create_dir(dir)?;
    let header = model.config.modality_names().join("\t");
    for v in videos {
        let trace = model.run(v, ForwardOptions::infer(source, sites))?;
        for s in &trace.sites {
            let table = &s.activation_table;
            let (t, n) = (table.shape()[0], table.shape()[1]);
            let mut text = format!("{header}\n");
            for r in 0..t {
                let row: Vec<String> = (0..n).map(|j| table.get2(r, j).to_string()).collect();
                text.push_str(&row.join("\t"));
                text.push('\n');
            }
            write_text(
                &dir.join(format!("{}.{}.tsv", v.video_id, s.kind.as_str())),
                &text,
            )?;
        }
    }
    Ok(())
}

fn grad_check(seed: u64, seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let report = run_grad_suite(seed..seed + seeds).map_err(pivad_core::Error::from)?;
    for c in report.failures() {
        println!(
            "FAIL {} seed {}: max relative error {:.3e}",
            c.name, c.seed, c.report.max_rel_error
        );
    }
    println!(
        "{} checks over {seeds} seeds, max relative error {:.3e} (threshold {GRAD_THRESHOLD:e})",
        report.cases.len(),
        report.max_rel_error()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{} gradient checks failed",
            report.failures().len()
        )))
    }
}

fn summary(cfg: &Config) -> Result<()> {
    let count = PiVadModel::new(&cfg.model, cfg.train.seed)?.param_count();
    let width = count
        .components
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max(16);
    println!("{:<width$}  params", "component");
    for (name, n) in &count.components {
        println!("{name:<width$}  {n}");
    }
    println!("{:<width$}  {}", "student total", count.student_total);
    println!("{:<width$}  {}", "teacher total", count.teacher_total);
    Ok(())
}
