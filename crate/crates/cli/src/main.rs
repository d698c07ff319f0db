use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use nelfpro::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use nelfpro::metrics::{export_probes, psnr, ssim};
use nelfpro::raster::Image;
use nelfpro::renderer::{render_image, RenderConfig};
use nelfpro::scenekit::{builtin_scene, load_dataset, pose_from_row_major, Dataset, SCENE_NAMES};
use nelfpro::trainer::{lr_at, TrainConfig, TrainView, Trainer};
use nelfpro::ProbeField;
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "nelfpro", version, about = "Light field probe scenes: generate, train, render, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a built-in analytic scene into a posed image dataset.
    Gen {
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 28)]
        views: usize,
        /// Image size as WxH.
        #[arg(long, default_value = "64x64", value_parser = parse_res)]
        res: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a probe field on the train split of a dataset.
    Train {
        /// JSON training configuration; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run, using the
        /// configuration stored in it.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Iterations between test-split evaluations (0 disables them).
        #[arg(long, default_value_t = 250)]
        eval_every: usize,
        /// Iterations between checkpoint saves (0 saves only at the end).
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
    },
    /// Render images from a checkpoint for a list of camera poses.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array of 4x4 row-major camera-to-world matrices.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM over one split of a dataset.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Compare a directory of images named like the dataset frames instead of rendering.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report; an aligned text table is written next to it with a .txt extension.
        #[arg(long)]
        out: PathBuf,
        /// Also save the rendered images into this directory.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Write probe positions as an ASCII PLY point cloud.
    ExportProbes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad dimension {v:?} in {s:?}"));
    Ok((parse(w)?, parse(h)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("NELFPRO_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("NELFPRO_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { scene, views, res, out } => gen(&scene, views, res, &out),
        Command::Train { config, data, out, ablation, iterations, seed, resume, eval_every, checkpoint_every } => {
            let mut cfg = match &config {
                Some(path) => read_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.field.seed = s;
            }
            if let Some(name) = &ablation {
                cfg.apply_ablation(name)?;
            }
            train(cfg, &data, &out, resume.as_deref(), eval_every, checkpoint_every)
        }
        Command::Render { checkpoint, poses, out } => render(&checkpoint, &poses, &out),
        Command::Eval { checkpoint, predictions, data, split, out, images } => {
            eval(checkpoint.as_deref(), predictions.as_deref(), &data, &split, &out, images.as_deref())
        }
        Command::ExportProbes { checkpoint, out } => {
            let ck = open_checkpoint(&checkpoint)?;
            export_probes(&ck.field.probes, &out)?;
            println!("wrote {} probes to {}", ck.field.probes.basis_positions.len() + ck.field.probes.core_positions.len(), out.display());
            Ok(())
        }
    }
}

fn gen(scene: &str, views: usize, (w, h): (usize, usize), out: &Path) -> Result<()> {
    let spec = builtin_scene(scene).with_context(|| format!("known scenes: {}", SCENE_NAMES.join(", ")))?;
    let manifest = spec.generate(views, w, h, out)?;
    let test = manifest.frames.iter().filter(|f| f.split == "test").count();
    println!("wrote {} views ({} train, {test} test) to {}", manifest.frames.len(), manifest.frames.len() - test, out.display());
    Ok(())
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_psnr(field: &ProbeField<f32>, views: &[TrainView], render: &RenderConfig) -> Result<f64> {
    let mut scores = Vec::with_capacity(views.len());
    for v in views {
        scores.push(psnr(&render_image(field, &v.camera, render)?, &v.image)?);
    }
    Ok(mean(&scores))
}

/// Line-buffered metric log; every line is flushed so a killed run leaves
/// only complete records.
struct MetricLog(File);

impl MetricLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self(file))
    }

    fn write(&mut self, record: &serde_json::Value) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.0.write_all(line.as_bytes())?;
        self.0.flush()?;
        Ok(())
    }
}

fn train(cfg: TrainConfig, data: &Path, out: &Path, resume: Option<&Path>, eval_every: usize, checkpoint_every: usize) -> Result<()> {
    let ds = open_dataset(data)?;
    let train_views = ds.views("train");
    let test_views = ds.views("test");
    std::fs::create_dir_all(out.join("renders")).with_context(|| format!("creating {}", out.display()))?;
    let intrinsics = ds.manifest.intrinsics();

    let mut trainer = match resume {
        Some(path) => {
            let ck = open_checkpoint(path)?;
            let (saved_cfg, state) = ck.train.ok_or_else(|| anyhow!("checkpoint {} has no optimizer state", path.display()))?;
            Trainer::resume(saved_cfg, ck.field, state, train_views)?
        }
        None => Trainer::new(cfg, train_views)?,
    };
    let render_cfg = trainer.config.render.clone();
    let mut log = MetricLog::open(&out.join("metrics.jsonl"), resume.is_some())?;
    let ck_path = out.join("checkpoint.nlfp");
    let start = Instant::now();

    while !trainer.is_done() {
        let loss = trainer.step()?;
        let it = trainer.state.iteration;
        let lr = lr_at(it - 1, &trainer.config);
        let last = trainer.is_done();
        let mut record = json!({
            "iteration": it,
            "loss": loss.total,
            "fine_mse": loss.fine_mse,
            "coarse_mse": loss.coarse_mse,
            "lr": lr,
            "elapsed_s": start.elapsed().as_secs_f64(),
        });
        if !test_views.is_empty() && ((eval_every > 0 && it % eval_every == 0) || last) {
            let p = mean_psnr(&trainer.field, &test_views, &render_cfg)?;
            record["psnr"] = json!(finite_or_sentinel(p));
            render_image(&trainer.field, &test_views[0].camera, &render_cfg)?.save_png(&out.join("renders").join(format!("iter_{it:06}.png")))?;
            println!("iteration {it}: loss {:.6}, test psnr {p:.2} dB", loss.total);
        }
        log.write(&record)?;
        if (checkpoint_every > 0 && it % checkpoint_every == 0) || last {
            save_checkpoint(&ck_path, &trainer.field, Some(&intrinsics), Some((&trainer.config, &trainer.state)))?;
        }
    }
    println!("checkpoint written to {} ({:.1} s)", ck_path.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn render_config_of(ck: &Checkpoint<f32>) -> RenderConfig {
    ck.train.as_ref().map(|(cfg, _)| cfg.render.clone()).unwrap_or_default()
}

fn render(checkpoint: &Path, poses: &Path, out: &Path) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let intrinsics = ck.intrinsics.ok_or_else(|| anyhow!("checkpoint {} stores no camera intrinsics", checkpoint.display()))?;
    let text = std::fs::read_to_string(poses).with_context(|| format!("reading poses {}", poses.display()))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text).with_context(|| format!("parsing poses {}", poses.display()))?;
    let render_cfg = render_config_of(&ck);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, row) in rows.iter().enumerate() {
        let pose = pose_from_row_major(row).ok_or_else(|| anyhow!("pose {i}: expected 16 numbers, got {}", row.len()))?;
        let cam = intrinsics.camera(pose).with_context(|| format!("pose {i}"))?;
        render_image(&ck.field, &cam, &render_cfg)?.save_png(&out.join(format!("render_{i:04}.png")))?;
    }
    println!("rendered {} views to {}", rows.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    frame: String,
    psnr: serde_json::Value,
    ssim: f64,
}

/// JSON has no infinity; identical images report this string instead.
const INFINITY_SENTINEL: &str = "inf";

fn finite_or_sentinel(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(INFINITY_SENTINEL)
    }
}

fn eval(checkpoint: Option<&Path>, predictions: Option<&Path>, data: &Path, split: &str, out: &Path, images: Option<&Path>) -> Result<()> {
    let ds = open_dataset(data)?;
    let indices = ds.indices(split);
    if indices.is_empty() {
        bail!("dataset {} has no frames in split {split:?}", data.display());
    }
    let ck = checkpoint.map(open_checkpoint).transpose()?;
    if let Some(dir) = images {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut rows = Vec::new();
    let (mut psnrs, mut ssims) = (Vec::new(), Vec::new());
    for &i in &indices {
        let frame = &ds.manifest.frames[i];
        let pred = match (&ck, predictions) {
            (Some(ck), _) => render_image(&ck.field, &ds.cameras[i], &render_config_of(ck))?,
            (None, Some(dir)) => Image::load_png(&dir.join(&frame.file))?,
            (None, None) => unreachable!("clap requires a checkpoint or predictions"),
        };
        // Score what a viewer sees: both sides at 8-bit precision.
        let pred = pred.quantized();
        if let Some(dir) = images {
            pred.save_png(&dir.join(&frame.file))?;
        }
        let p = psnr(&pred, &ds.images[i]).with_context(|| format!("frame {}", frame.file))?;
        let s = ssim(&pred, &ds.images[i]).with_context(|| format!("frame {}", frame.file))?;
        psnrs.push(p);
        ssims.push(s);
        rows.push(EvalRow { frame: frame.file.clone(), psnr: finite_or_sentinel(p), ssim: s });
    }
    let report = json!({
        "split": split,
        "frames": rows,
        "mean_psnr": finite_or_sentinel(mean(&psnrs)),
        "mean_ssim": mean(&ssims),
    });
    let json_text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out, json_text + "\n").with_context(|| format!("writing {}", out.display()))?;
    let table = text_table(&rows, mean(&psnrs), mean(&ssims));
    let table_path = out.with_extension("txt");
    std::fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    print!("{table}");
    Ok(())
}

fn fmt_psnr(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        INFINITY_SENTINEL.to_string()
    }
}

fn text_table(rows: &[EvalRow], mean_psnr: f64, mean_ssim: f64) -> String {
    let mut lines: Vec<[String; 3]> = vec![["frame".into(), "psnr".into(), "ssim".into()]];
    for r in rows {
        let p = r.psnr.as_f64().map_or(INFINITY_SENTINEL.to_string(), fmt_psnr);
        lines.push([r.frame.clone(), p, format!("{:.4}", r.ssim)]);
    }
    lines.push(["mean".into(), fmt_psnr(mean_psnr), format!("{mean_ssim:.4}")]);
    let widths: Vec<usize> = (0..3).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for l in &lines {
        out.push_str(&format!("{:<w0$}  {:>w1$}  {:>w2$}\n", l[0], l[1], l[2], w0 = widths[0], w1 = widths[1], w2 = widths[2]));
    }
    out
}
