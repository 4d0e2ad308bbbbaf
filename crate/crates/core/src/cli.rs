//! `motionstyle` command line: pretrain, train-tsd, stylize, sweep-alpha, eval, convert.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{TsdModel, TsdTrainer};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, TableRow};
use crate::motion_io::{read_bvh_file, write_bvh};
use crate::skeleton::{MotionClip, Skeleton};
use crate::style_embedding::{self, load_embeddings, pretrain, EmbeddingRecord, Modality, StageOneModel, StyleEmbedding};

#[derive(Debug, Parser)]
#[command(name = "motionstyle", version, about = "Cross-skeleton motion stylization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Branch blend in [0, 1]; 1 is the stylization branch.
    #[arg(long)]
    alpha: Option<f64>,
    /// Training steps (overrides the config).
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
struct PromptArgs {
    /// Canonical-skeleton BVH whose style is transferred.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Id of a precomputed text/image/video embedding used as the style prompt.
    #[arg(long)]
    prompt_embedding: Option<String>,
    /// Modality of the embedding to use; defaults to text, then image, then video.
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    /// Embedding record files (JSON array or JSON lines).
    #[arg(long)]
    embeddings: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the canonical style autoencoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Canonical-skeleton BVH clips.
        #[arg(long = "motion")]
        motions: Vec<PathBuf>,
        #[arg(long)]
        embeddings: Vec<PathBuf>,
        /// Part-map sidecar for the canonical skeleton.
        #[arg(long)]
        parts: Option<PathBuf>,
    },
    /// Train the diffusion model on one source motion.
    TrainTsd {
        #[command(flatten)]
        common: Common,
        /// Stage-one checkpoint.
        #[arg(long)]
        stage1: PathBuf,
        /// Source BVH on the target skeleton.
        #[arg(long)]
        source: PathBuf,
        /// Part-map sidecar for the source skeleton.
        #[arg(long)]
        parts: Option<PathBuf>,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Sample one stylized motion.
    Stylize {
        #[command(flatten)]
        common: Common,
        /// TSD checkpoint (defaults to `paths.checkpoint` in the config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        prompt: PromptArgs,
        /// Frames to generate (defaults to the training source length).
        #[arg(long)]
        length: Option<usize>,
    },
    /// Sample once per α in a grid.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// TSD checkpoint (defaults to `paths.checkpoint` in the config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long)]
        length: Option<usize>,
        /// Comma-separated α values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// FMD and diversity reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Stage-one (or TSD) checkpoint for feature extraction.
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Ground-truth canonical clips.
        #[arg(long)]
        reference: Vec<PathBuf>,
        /// Generated clips.
        #[arg(long)]
        generated: Vec<PathBuf>,
        /// Single source motion for diversity.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Round-trip between BVH and the JSON clip format.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|_| format!("unknown modality `{s}`"))
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    config: &'a RunConfig,
    checkpoint_sha256: Option<String>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

/// JSON clip format used by `convert`.
#[derive(Debug, Serialize, serde::Deserialize)]
struct ClipFile {
    skeleton: Skeleton,
    clip: MotionClip,
}

struct Run {
    name: &'static str,
    argv: Vec<String>,
    config: RunConfig,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(name: &'static str, argv: &[String], common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let seed = common.seed.unwrap_or(config.seed);
        config = config.with_seed(seed);
        if let Some(a) = common.alpha {
            config.alpha = a;
        }
        if let Some(s) = common.steps {
            config.training.pretrain_steps = s;
            config.training.tsd_steps = s;
        }
        config.validate()?;
        config.check_inputs()?;
        let out = common.out.clone().or_else(|| config.paths.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        log::info!("{name}: seed {seed}, output {}", out.display());
        Ok(Self { name, argv: argv.to_vec(), config, out, checkpoint: None, inputs: Vec::new(), outputs: Vec::new() })
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn write_text(&mut self, file: &str, text: &str) -> Result<PathBuf> {
        let path = self.out.join(file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn finish(self) -> Result<()> {
        let hash = |p: &PathBuf| -> Result<FileHash> { Ok(FileHash { path: p.clone(), sha256: checkpoint::sha256_file(p)? }) };
        let manifest = RunManifest {
            command: self.name,
            argv: self.argv.clone(),
            seed: self.config.seed,
            config: &self.config,
            checkpoint_sha256: self.checkpoint.as_ref().map(checkpoint::sha256_file).transpose()?,
            inputs: self.inputs.iter().map(hash).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(hash).collect::<Result<_>>()?,
        };
        let path = self.out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }
}

/// `<file>.parts.json` next to a motion file.
pub fn sidecar_path(motion: &Path) -> PathBuf {
    let mut s = motion.as_os_str().to_owned();
    s.push(".parts.json");
    PathBuf::from(s)
}

/// Read a BVH and attach its part map: explicit file, sidecar, or the built-in SMPL map.
pub fn load_motion(path: &Path, parts: Option<&Path>) -> Result<(Skeleton, MotionClip)> {
    let (skeleton, clip) = read_bvh_file(path)?;
    let sidecar = sidecar_path(path);
    let skeleton = match parts {
        Some(p) => skeleton.load_part_map(p)?,
        None if sidecar.exists() => skeleton.load_part_map(&sidecar)?,
        None => {
            let smpl = Skeleton::smpl();
            if skeleton.same_topology(&smpl) {
                skeleton.with_part_map(smpl.part_map().expect("SMPL has a part map").to_vec())?
            } else {
                skeleton
            }
        }
    };
    Ok((skeleton, clip))
}

fn load_records(run: &mut Run, files: &[PathBuf]) -> Result<Vec<EmbeddingRecord>> {
    let mut records = Vec::new();
    for f in files.iter().chain(&run.config.paths.embeddings.clone()) {
        run.input(f);
        records.extend(load_embeddings(f)?);
    }
    Ok(records)
}

fn pick_embedding<'a>(records: &'a [EmbeddingRecord], id: &str, modality: Option<Modality>) -> Result<&'a EmbeddingRecord> {
    let order = match modality {
        Some(m) => vec![m],
        None => vec![Modality::Text, Modality::Image, Modality::Video],
    };
    order
        .iter()
        .find_map(|m| records.iter().find(|r| r.id == id && r.modality == *m))
        .ok_or_else(|| Error::Config(format!("no embedding with id `{id}` for the requested modality")))
}

/// Style embedding plus the canonical prompt clip when the prompt is a motion.
fn resolve_prompt(run: &mut Run, stage1: &StageOneModel, args: &PromptArgs) -> Result<(StyleEmbedding, Option<MotionClip>)> {
    match (&args.prompt, &args.prompt_embedding) {
        (Some(path), None) => {
            run.input(path);
            let (skeleton, clip) = load_motion(path, None)?;
            let (f_p, _) = stage1.encode_style(&clip, &skeleton)?;
            Ok((stage1.embed_style(&f_p)?, Some(clip)))
        }
        (None, Some(id)) => {
            let records = load_records(run, &args.embeddings)?;
            let rec = pick_embedding(&records, id, args.modality)?;
            Ok((stage1.external_style(&rec.vector)?, None))
        }
        (Some(_), Some(_)) => Err(Error::Config("give either --prompt or --prompt-embedding, not both".into())),
        (None, None) => Err(Error::Config("a style prompt is required (--prompt or --prompt-embedding)".into())),
    }
}

fn cmd_pretrain(run: &mut Run, motions: &[PathBuf], embeddings: &[PathBuf], parts: Option<&Path>) -> Result<()> {
    let files: Vec<PathBuf> = motions.iter().chain(&run.config.paths.motions.clone()).cloned().collect();
    if files.is_empty() {
        return Err(Error::Config("pretrain needs at least one --motion file".into()));
    }
    let mut canonical: Option<Skeleton> = None;
    let mut clips = Vec::new();
    for f in &files {
        run.input(f);
        let (s, clip) = load_motion(f, parts)?;
        match &canonical {
            None => canonical = Some(s),
            Some(c) if !c.same_topology(&s) => {
                return Err(Error::Topology(format!("{} does not share the canonical skeleton", f.display())));
            }
            Some(_) => {}
        }
        clips.push((f.clone(), clip));
    }
    let canonical = canonical.expect("at least one file");
    if canonical.part_map().is_none() {
        return Err(Error::MissingPartMap(canonical.num_joints()));
    }
    let records = load_records(run, embeddings)?;
    let tokens: Vec<_> = clips
        .iter()
        .map(|(f, _)| {
            let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            style_embedding::tokens_for(&records, &id)
        })
        .collect();
    let clips: Vec<MotionClip> = clips.into_iter().map(|(_, c)| c).collect();
    let mut model = StageOneModel::new(run.config.stage1.clone(), canonical)?;
    let t = &run.config.training;
    let history = pretrain(&mut model, &clips, &tokens, t.pretrain_steps, t.pretrain_learning_rate)?;
    let ckpt = run.out.join("stage1.safetensors");
    checkpoint::save_stage1(&model, &ckpt)?;
    run.outputs.push(ckpt.clone());
    run.checkpoint = Some(ckpt);
    run.write_text("losses.json", &serde_json::to_string(&history)?)?;
    Ok(())
}

fn cmd_train_tsd(run: &mut Run, stage1_path: &Path, source: &Path, parts: Option<&Path>, prompt: &PromptArgs) -> Result<()> {
    run.input(stage1_path);
    let stage1 = checkpoint::load_stage1(stage1_path)?;
    run.input(source);
    let (skeleton, clip) = load_motion(source, parts)?;
    let (style, prompt_clip) = resolve_prompt(run, &stage1, prompt)?;
    if prompt_clip.is_some() && skeleton.part_map().is_none() {
        return Err(Error::EmptyPart(format!(
            "source skeleton has no part map; add {} or pass --parts",
            sidecar_path(source).display()
        )));
    }
    let mut model = TsdModel::new(run.config.tsd.clone(), &stage1, skeleton)?;
    let t = run.config.training.clone();
    let mut trainer = TsdTrainer::new(&mut model, &clip, prompt_clip.as_ref(), style, t.tsd_learning_rate, run.config.seed)?;
    let history = trainer.run(&model, t.tsd_steps)?;
    let ckpt = run.out.join("tsd.safetensors");
    checkpoint::save_tsd(&model, clip.frames(), &ckpt)?;
    run.outputs.push(ckpt.clone());
    run.checkpoint = Some(ckpt);
    run.write_text("losses.json", &serde_json::to_string(&history)?)?;
    Ok(())
}

fn load_for_sampling(run: &mut Run, ckpt: Option<&Path>, prompt: &PromptArgs) -> Result<(TsdModel, usize, StyleEmbedding)> {
    let ckpt = ckpt
        .map(Path::to_path_buf)
        .or_else(|| run.config.paths.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or paths.checkpoint)".into()))?;
    let ckpt = ckpt.as_path();
    let (model, manifest) = checkpoint::load_tsd(ckpt)?;
    run.checkpoint = Some(ckpt.to_path_buf());
    let (style, _) = resolve_prompt(run, model.stage1(), prompt)?;
    Ok((model, manifest.source_frames, style))
}

fn alpha_file(alpha: f64) -> String {
    format!("alpha_{alpha}.bvh")
}

fn cmd_sample(run: &mut Run, ckpt: Option<&Path>, prompt: &PromptArgs, length: Option<usize>, grid: Option<&[f64]>) -> Result<()> {
    let (model, frames, style) = load_for_sampling(run, ckpt, prompt)?;
    let length = length.unwrap_or(frames);
    let seed = run.config.seed;
    match grid {
        None => {
            let clip = model.sample(length, &style, run.config.alpha, seed)?;
            run.write_text("stylized.bvh", &write_bvh(model.skeleton(), &clip)?)?;
        }
        Some(grid) => {
            for &alpha in grid {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
                }
                let clip = model.sample(length, &style, alpha, seed)?;
                run.write_text(&alpha_file(alpha), &write_bvh(model.skeleton(), &clip)?)?;
            }
        }
    }
    Ok(())
}

fn cmd_eval(
    run: &mut Run,
    stage1: Option<&Path>,
    reference: &[PathBuf],
    generated: &[PathBuf],
    source: Option<&Path>,
    window: Option<usize>,
) -> Result<()> {
    let load_all = |run: &mut Run, files: &[PathBuf]| -> Result<Vec<(Skeleton, MotionClip)>> {
        files
            .iter()
            .map(|f| {
                run.input(f);
                load_motion(f, None)
            })
            .collect()
    };
    let gen = load_all(run, generated)?;
    let window = window.unwrap_or(run.config.eval_window);
    let mut reports = Vec::new();
    let mut row = TableRow {
        content: source.map_or("-".into(), |s| s.display().to_string()),
        style: stage1.map_or("-".into(), |s| s.display().to_string()),
        content_fmd: None,
        style_fmd: None,
        glo_d: None,
        loc_d: None,
    };
    if let Some(ckpt) = stage1 {
        run.input(ckpt);
        let model = checkpoint::load_stage1(ckpt)?;
        let refs = load_all(run, reference)?;
        let features = |clips: &[(Skeleton, MotionClip)]| -> Result<_> {
            let s = clips.first().map(|c| c.0.clone()).unwrap_or_else(|| model.skeleton().clone());
            let only: Vec<MotionClip> = clips.iter().map(|c| c.1.clone()).collect();
            eval::clip_features(&model, &only, &s)
        };
        let (rc, rs) = features(&refs)?;
        let (gc, gs) = features(&gen)?;
        let (content, style) = (eval::fmd(&rc, &gc)?, eval::fmd(&rs, &gs)?);
        let cfg = serde_json::json!({ "jitter": eval::COVARIANCE_JITTER, "reference": refs.len(), "generated": gen.len() });
        reports.push(MetricReport { metric: "content_fmd".into(), value: content, config: cfg.clone() });
        reports.push(MetricReport { metric: "style_fmd".into(), value: style, config: cfg });
        row.content_fmd = Some(content);
        row.style_fmd = Some(style);
    }
    if let Some(src) = source {
        run.input(src);
        let (_, source_clip) = load_motion(src, None)?;
        let samples: Vec<MotionClip> = gen.iter().map(|c| c.1.clone()).collect();
        let d = eval::diversity(&samples, &source_clip, window)?;
        let cfg = serde_json::json!({ "window": window, "samples": samples.len() });
        reports.push(MetricReport { metric: "glo_d".into(), value: d.glo_d, config: cfg.clone() });
        reports.push(MetricReport { metric: "loc_d".into(), value: d.loc_d, config: cfg });
        row.glo_d = Some(d.glo_d);
        row.loc_d = Some(d.loc_d);
    }
    if reports.is_empty() {
        return Err(Error::Config("eval needs --stage1 with --reference/--generated, or --source with --generated".into()));
    }
    run.write_text("report.json", &serde_json::to_string_pretty(&reports)?)?;
    let table = eval::render_table(&[row]);
    print!("{table}");
    run.write_text("report.txt", &table)?;
    Ok(())
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn cmd_convert(run: &mut Run, input: &Path, output: &Path) -> Result<()> {
    run.input(input);
    let (skeleton, clip) = if is_json(input) {
        let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
        let file: ClipFile = serde_json::from_str(&text)?;
        clip_consistent(&file)?;
        (file.skeleton, file.clip)
    } else {
        load_motion(input, None)?
    };
    let text = if is_json(output) {
        serde_json::to_string(&ClipFile { skeleton, clip })?
    } else {
        write_bvh(&skeleton, &clip)?
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(output, text).map_err(|e| Error::io(output, e))?;
    run.outputs.push(output.to_path_buf());
    Ok(())
}

fn clip_consistent(f: &ClipFile) -> Result<()> {
    Skeleton::new(f.skeleton.joint_names().to_vec(), f.skeleton.parents().to_vec(), f.skeleton.offsets().to_vec())?;
    f.clip.check_skeleton(&f.skeleton)?;
    MotionClip::new(f.clip.num_joints(), f.clip.rotations().to_vec(), f.clip.translation().to_vec(), f.clip.fps()).map(|_| ())
}

fn dispatch(cli: Cli, argv: &[String]) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::Pretrain { common, .. } => ("pretrain", common),
        Command::TrainTsd { common, .. } => ("train-tsd", common),
        Command::Stylize { common, .. } => ("stylize", common),
        Command::SweepAlpha { common, .. } => ("sweep-alpha", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Convert { common, .. } => ("convert", common),
    };
    let mut run = Run::new(name, argv, common)?;
    match &cli.command {
        Command::Pretrain { motions, embeddings, parts, .. } => cmd_pretrain(&mut run, motions, embeddings, parts.as_deref())?,
        Command::TrainTsd { stage1, source, parts, prompt, .. } => {
            cmd_train_tsd(&mut run, stage1, source, parts.as_deref(), prompt)?
        }
        Command::Stylize { checkpoint, prompt, length, .. } => cmd_sample(&mut run, checkpoint.as_deref(), prompt, *length, None)?,
        Command::SweepAlpha { checkpoint, prompt, length, grid, .. } => {
            cmd_sample(&mut run, checkpoint.as_deref(), prompt, *length, Some(grid))?
        }
        Command::Eval { stage1, reference, generated, source, window, .. } => {
            cmd_eval(&mut run, stage1.as_deref(), reference, generated, source.as_deref(), *window)?
        }
        Command::Convert { input, output, .. } => cmd_convert(&mut run, input, output)?,
    }
    run.finish()
}

/// Run the CLI on `args` (including the program name) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOTIONS_LOG", "info")).try_init();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
