//! Command implementations behind the `dvan` binary.
//!
//! Each command resolves and validates its configuration before touching the
//! filesystem, then writes everything under the run's output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::canvas::{attention_support, generate_canvases, normalize_image, resize, Canvas, Rect};
use crate::checkpoint;
use crate::config::{RunConfig, RESOLVED_NAME};
use crate::data::{generate_synthetic, load_manifest, write_split, Example};
use crate::error::Error;
use crate::experiment::{run_seed, seed_mean, VariantResult};
use crate::gradcheck::{op_suite, tiny_model_suite, CheckLine};
use crate::graph::OpKind;
use crate::model::DvanModel;
use crate::pnm;
use crate::tensor::Tensor;
use crate::train::{evaluate, restore_params, EpochRecord, EvalReport, Trainer, LOG_HEADER};

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const LOG_NAME: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "dvan", version, about = "Diversified visual attention networks on a small CPU tensor core")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir={}", out.display()));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides).map_err(Failure::Config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset as PPM files plus manifests.
    GenData(ConfigArgs),
    /// Cut one image into its canvas sequence.
    Canvases {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the staged training schedule.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Report accuracy, diversity and overlap statistics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every configured variant, λ and scale count under shared seeds.
    Ablate(ConfigArgs),
    /// Export per-step attention heatmaps for one image.
    Attmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM image; defaults to a synthetic test image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Synthetic test example to use when no image is given.
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every op and of the tiny composed model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule (negative control), e.g. `softmax`.
        #[arg(long)]
        fault: Option<String>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Runtime(Error),
    /// A check ran and did not pass.
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "{e}"),
            Failure::Runtime(e) => write!(f, "{e}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Runs one command; human-readable output goes to `out`.
pub fn run(command: &Command, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    match command {
        Command::GenData(cfg) => gen_data(&cfg.resolve()?, out),
        Command::Canvases { image, cfg } => canvases(&cfg.resolve()?, image, out),
        Command::Train { resume, cfg } => train(&cfg.resolve()?, resume.as_deref(), out).map(|_| ()),
        Command::Eval { checkpoint, split, cfg } => {
            let cfg = cfg.resolve()?;
            if split != "train" && split != "test" {
                return Err(Failure::Config(Error::Config(format!("split must be train or test, got {split:?}"))));
            }
            eval(&cfg, checkpoint, split, out).map(|_| ())
        }
        Command::Ablate(cfg) => ablate(&cfg.resolve()?, out).map(|_| ()),
        Command::Attmaps { checkpoint, image, example, cfg } => {
            attmaps(&cfg.resolve()?, checkpoint, image.as_deref(), *example, out).map(|_| ())
        }
        Command::Gradcheck { seed, fault } => {
            let fault = match fault {
                Some(name) => Some(
                    OpKind::parse(name)
                        .ok_or_else(|| Failure::Config(Error::Config(format!("unknown op {name:?}"))))?,
                ),
                None => None,
            };
            gradcheck(*seed, fault, out)
        }
    }
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(RESOLVED_NAME), cfg.to_text())?;
    Ok(cfg.out_dir.clone())
}

fn say(out: &mut dyn std::io::Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

/// Train and test splits: manifests when configured, the synthetic task otherwise.
pub fn load_splits(cfg: &RunConfig) -> crate::Result<(Vec<Example>, Vec<Example>)> {
    let classes = cfg.data.classes;
    match (&cfg.train_manifest, &cfg.test_manifest) {
        (Some(tr), Some(te)) => Ok((load_manifest(tr, classes)?, load_manifest(te, classes)?)),
        (None, None) => {
            let d = generate_synthetic(&cfg.data)?;
            Ok((d.train, d.test))
        }
        _ => Err(Error::Config("set both data.train_manifest and data.test_manifest, or neither".into())),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let data = generate_synthetic(&cfg.data)?;
    let dir = prepare_dir(cfg)?;
    let train = write_split(&dir.join("train"), "train", &data.train)?;
    let test = write_split(&dir.join("test"), "test", &data.test)?;
    for (split, examples) in [("train", &data.train), ("test", &data.test)] {
        let mut text = String::from("index,label,slot,x0,y0,x1,y1\n");
        for (i, e) in examples.iter().enumerate() {
            for (s, r) in e.glyphs.iter().enumerate() {
                let _ = writeln!(text, "{i},{},{s},{},{},{},{}", e.label, r.x0, r.y0, r.x1, r.y1);
            }
        }
        fs::write(dir.join(split).join("glyphs.csv"), text)?;
    }
    say(out, format!("train {} images -> {}", data.train.len(), train.display()));
    say(out, format!("test {} images -> {}", data.test.len(), test.display()));
    Ok(())
}

pub fn canvases(cfg: &RunConfig, image: &Path, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let plan = cfg.plan();
    let img = pnm::load_image(image)?;
    let list = generate_canvases(&normalize_image(&img, plan.normalized_short_edge)?, &plan)?;
    let dir = prepare_dir(cfg)?;
    let mut manifest = String::from("index,scale,x0,y0,x1,y1,file\n");
    for c in &list {
        let name = format!("canvas_{:03}.ppm", c.sequence_index);
        pnm::save_image(&dir.join(&name), &c.pixels)?;
        let f = &c.footprint;
        let _ = writeln!(manifest, "{},{},{},{},{},{},{name}", c.sequence_index, c.scale_index, f.x0, f.y0, f.x1, f.y1);
    }
    fs::write(dir.join("canvases.csv"), manifest)?;
    say(out, format!("{} canvases -> {}", list.len(), dir.display()));
    Ok(())
}

fn read_log(path: &Path) -> crate::Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(EpochRecord::parse).collect()
}

fn write_log(path: &Path, log: &[EpochRecord]) -> crate::Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    for r in log {
        let _ = writeln!(text, "{r}");
    }
    fs::write(path, text)?;
    Ok(())
}

/// Trains to the end of the schedule; returns the final model and log.
pub fn train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    out: &mut dyn std::io::Write,
) -> Result<(DvanModel, Vec<EpochRecord>), Failure> {
    let resumed = resume.map(checkpoint::load).transpose()?;
    let (train_set, _) = load_splits(cfg)?;
    let model = DvanModel::new(cfg.model(), cfg.seed)?;
    let mut trainer = Trainer::new(model, &train_set, cfg.train())?;
    let dir = prepare_dir(cfg)?;
    let log_path = dir.join(LOG_NAME);
    if let Some(named) = &resumed {
        trainer.restore(named)?;
        if log_path.exists() {
            let pos = trainer.position;
            trainer.log = read_log(&log_path)?
                .into_iter()
                .filter(|r| (r.stage, r.epoch) <= (pos.stage, pos.epoch))
                .collect();
        }
        say(out, format!("resuming after stage {} epoch {}", trainer.position.stage, trainer.position.epoch));
    }
    let ckpt_path = dir.join(CHECKPOINT_NAME);
    let mut failure = None;
    trainer.train(|t| {
        let last = t.log.last().expect("an epoch just finished");
        say(out, last.to_string());
        let saved = checkpoint::save(&ckpt_path, &t.checkpoint()).and_then(|_| write_log(&log_path, &t.log));
        if let Err(e) = saved {
            failure = Some(e);
            return Err(Error::Contract("stopping after a failed write".into()));
        }
        Ok(())
    })
    .map_err(|e| Failure::Runtime(failure.take().unwrap_or(e)))?;
    checkpoint::save(&ckpt_path, &trainer.checkpoint())?;
    write_log(&log_path, &trainer.log)?;
    say(out, format!("checkpoint -> {}", ckpt_path.display()));
    Ok((trainer.model, trainer.log))
}

/// Builds the configured model and loads checkpoint parameters into it.
pub fn load_model(cfg: &RunConfig, path: &Path) -> crate::Result<DvanModel> {
    let named = checkpoint::load(path)?;
    let mut model = DvanModel::new(cfg.model(), cfg.seed)?;
    let params: Vec<(String, Tensor)> =
        named.into_iter().filter(|(n, _)| !n.starts_with("sgd/") && !n.starts_with("meta/")).collect();
    restore_params(&mut model, &params)?;
    Ok(model)
}

pub fn report_lines(r: &EvalReport) -> String {
    format!(
        "images = {}\naccuracy = {}\nmean_Ldiv = {}\nmean_overlap = {}\noverlap_violation_rate = {}\nlocalization_rate = {}\n",
        r.results.len(),
        r.accuracy,
        r.mean_ldiv,
        r.mean_overlap,
        r.violation_rate,
        r.localization_rate
    )
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, split: &str, out: &mut dyn std::io::Write) -> Result<EvalReport, Failure> {
    let model = load_model(cfg, ckpt)?;
    let (train_set, test_set) = load_splits(cfg)?;
    let examples = if split == "train" { &train_set } else { &test_set };
    let report = evaluate(&model, examples, model.final_head(), &cfg.loss, None)?;
    let dir = prepare_dir(cfg)?;
    let text = report_lines(&report);
    fs::write(dir.join(format!("eval_{split}.txt")), &text)?;
    let _ = write!(out, "{text}");
    Ok(report)
}

pub fn ablate(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<Vec<VariantResult>, Failure> {
    let variants = cfg.ablation_variants();
    let exp = cfg.experiment();
    let dir = prepare_dir(cfg)?;
    let mut all = Vec::new();
    let mut table = String::from("variant,seed,accuracy,mean_Ldiv,mean_overlap\n");
    for &seed in &cfg.ablate.seeds {
        let results = run_seed(&exp, &variants, seed, |r| {
            say(out, format!("seed {seed} {:<20} accuracy {:.4}", r.name, r.test.accuracy));
        })?;
        for r in &results {
            let _ = writeln!(table, "{},{},{},{},{}", r.name, r.seed, r.test.accuracy, r.test.mean_ldiv, r.test.mean_overlap);
        }
        fs::write(dir.join("ablation.csv"), &table)?;
        all.extend(results);
    }
    let mut summary = String::from("variant,accuracy,mean_Ldiv,mean_overlap\n");
    for v in &variants {
        let line = format!(
            "{},{:.4},{:.4},{:.4}",
            v.name,
            seed_mean(&all, &v.name, |r| r.test.accuracy),
            seed_mean(&all, &v.name, |r| r.test.mean_ldiv),
            seed_mean(&all, &v.name, |r| r.test.mean_overlap)
        );
        say(out, &line);
        summary.push_str(&line);
        summary.push('\n');
    }
    fs::write(dir.join("summary.csv"), summary)?;
    Ok(all)
}

/// Upsamples a `K×K` map bilinearly to `side × side`.
pub fn upsample_map(map: &[f64], side: usize) -> crate::Result<Tensor> {
    let k = (map.len() as f64).sqrt().round() as usize;
    if k * k != map.len() {
        return Err(Error::Contract(format!("attention map of {} cells is not square", map.len())));
    }
    resize(&Tensor::new(&[1, k, k], map.to_vec())?, side, side)
}

/// Per-step attention maps of one image, with their canvas frames.
pub struct AttentionMaps {
    pub frames: Vec<Canvas>,
    pub maps: Vec<Vec<f64>>,
    /// Whether some step's support region touches a ground-truth glyph; `None` without annotations.
    pub hits_glyph: Option<bool>,
}

pub fn attmaps(
    cfg: &RunConfig,
    ckpt: &Path,
    image: Option<&Path>,
    example: usize,
    out: &mut dyn std::io::Write,
) -> Result<AttentionMaps, Failure> {
    let model = load_model(cfg, ckpt)?;
    let (img, glyphs) = match image {
        Some(p) => (pnm::load_image(p)?, Vec::new()),
        None => {
            let (_, test) = load_splits(cfg)?;
            let e = test
                .get(example)
                .ok_or_else(|| Failure::Config(Error::Config(format!("example {example} outside the test split"))))?;
            (e.image.clone(), e.glyphs.clone())
        }
    };
    let canvases = model.canvases(&img)?;
    let features = model.extract_features(&canvases)?;
    let attention = model
        .attention
        .as_ref()
        .ok_or_else(|| Failure::Config(Error::Config(format!("variant {} has no attention", cfg.variant.name()))))?;
    let steps = attention.run(&model.store, &features)?;
    let maps: Vec<Vec<f64>> = steps
        .iter()
        .map(|s| {
            s.attention
                .as_ref()
                .map(|a| a.data().to_vec())
                .ok_or_else(|| Error::Config("max pooling has no attention maps".into()))
        })
        .collect::<crate::Result<_>>()?;
    let dir = prepare_dir(cfg)?;
    let scale = canvases[0].image_width as f64 / img.shape()[2] as f64;
    let mut hit = false;
    let mut meta = String::from("step,scale,x0,y0,x1,y1,file,peak,support_hits_glyph\n");
    for (t, (c, map)) in canvases.iter().zip(&maps).enumerate() {
        let side = c.footprint.width().round() as usize;
        let up = upsample_map(map, side)?;
        let total: f64 = up.data().iter().sum();
        if !(total > 0.0) {
            return Err(Failure::Runtime(Error::Contract(format!("step {t}: empty heatmap"))));
        }
        let peak = up.data().iter().copied().fold(0.0, f64::max);
        let gray = Tensor::new(up.shape(), up.data().iter().map(|v| v / peak).collect())?;
        let name = format!("step_{t:03}.pgm");
        pnm::save_image(&dir.join(&name), &gray)?;
        let support = attention_support(map, c, cfg.loss.mass_threshold)?;
        let touches = glyphs
            .iter()
            .any(|r| support.intersects_rect(&Rect::new(r.x0 * scale, r.y0 * scale, r.x1 * scale, r.y1 * scale)));
        hit |= touches;
        let f = &c.footprint;
        let flag = if glyphs.is_empty() { String::new() } else { touches.to_string() };
        let _ = writeln!(meta, "{t},{},{},{},{},{},{name},{peak},{flag}", c.scale_index, f.x0, f.y0, f.x1, f.y1);
    }
    fs::write(dir.join("attmaps.csv"), meta)?;
    let hits_glyph = (!glyphs.is_empty()).then_some(hit);
    say(out, format!("{} maps -> {}", maps.len(), dir.display()));
    if let Some(h) = hits_glyph {
        say(out, format!("support touches a glyph: {h}"));
    }
    Ok(AttentionMaps { frames: canvases, maps, hits_glyph })
}

fn print_lines(out: &mut dyn std::io::Write, title: &str, lines: &[CheckLine]) {
    say(out, title);
    for l in lines {
        let verdict = if l.passed() { "ok" } else { "FAIL" };
        say(out, format!("  {:<24} {:.3e} < {:.0e}  {verdict}", l.name, l.error, l.tolerance));
    }
}

pub fn gradcheck(seed: u64, fault: Option<OpKind>, out: &mut dyn std::io::Write) -> Result<(), Failure> {
    let ops = op_suite(seed, fault)?;
    let model = tiny_model_suite(seed, fault)?;
    print_lines(out, "per-op checks", &ops);
    print_lines(out, "tiny model (K=2, D=3, d=4, C=2, T=3)", &model);
    let worst = model.iter().map(|l| l.error).fold(0.0, f64::max);
    say(out, format!("max relative error over the model: {worst:.3e}"));
    let failed: Vec<&str> = ops.iter().chain(&model).filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}
