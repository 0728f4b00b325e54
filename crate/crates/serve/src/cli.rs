//! `radfield` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use radfield::dataset::{write_dataset, Orbit, SceneSpec};
use radfield::field::checkpoint_bytes;
use radfield::mask::{mask_set_from_features, render_features, MaskOptions, MaskSet, PatchSelection, DEFAULT_ALPHA};
use radfield::pipeline::{content_id, eval_iou, eval_psnr, train_stage1, write_loss_csv, RunConfig};
use radfield::renderer::RenderOptions;
use radfield::{Error, Result};
use serde_json::json;

use crate::http::{router, AppState};
use crate::jobs::run_edit;
use crate::ops::{load_field, maskset_id, scene_cameras, view_plane, ViewKind};

#[derive(Debug, Parser)]
#[command(name = "radfield", version, about = "Feature radiance fields, patch masks and guided repainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace a synthetic multi-view dataset.
    Synth(SynthArgs),
    /// Fit a radiance field with feature and depth heads to a dataset.
    Train(TrainArgs),
    /// Extract a mask set from a patch selection.
    Mask(MaskArgs),
    /// Repaint the masked object of a trained field.
    Edit(EditArgs),
    /// Render one view as PNG.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

/// Where cameras come from when a command needs them.
#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Dataset directory supplying the cameras.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Orbit view count when no dataset is given.
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    /// Orbit resolution when no dataset is given.
    #[arg(long, default_value_t = 64)]
    pub res: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "two_spheres")]
    pub scene: String,
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    /// Azimuth offset of the first view, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub offset: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scene's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train without the depth loss.
    #[arg(long)]
    pub no_depth: bool,
    /// Loss trace destination; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub view: usize,
    /// Patch as `row0,col0,row1,col1`, end-exclusive.
    #[arg(long, value_parser = parse_rect)]
    pub rect: [usize; 4],
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Drop small components and dilate by one pixel.
    #[arg(long)]
    pub postprocess: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub bgt: Option<String>,
    /// Dataset for the pretraining phase; skipped without one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub lambda_unmask: Option<f64>,
    #[arg(long)]
    pub lambda_clip: Option<f64>,
    #[arg(long)]
    pub no_sds: bool,
    #[arg(long)]
    pub no_bgt_in_prompt: bool,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the job directory.
    #[arg(long, default_value = "jobs")]
    pub out: PathBuf,
    /// Job directory name; derived from the inputs when omitted.
    #[arg(long)]
    pub job_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub view: usize,
    /// rgb, feature_pca, depth or mask.
    #[arg(long, default_value = "rgb")]
    pub kind: String,
    /// Mask set directory, for `--kind mask`.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the float plane in RPNF format.
    #[arg(long)]
    pub rpnf: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Mask set to score against the dataset's instance masks.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Instance id the mask set should cover.
    #[arg(long, default_value_t = 1)]
    pub instance: u8,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "work")]
    pub workdir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
}

fn parse_rect(s: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected four comma-separated integers, got {s:?}"));
    }
    let mut out = [0usize; 4];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("{p:?} is not a non-negative integer"))?;
    }
    Ok(out)
}

/// Parses `argv` and runs the command; returns the process exit code:
/// 0 on success, 1 on a domain error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Mask(a) => mask(a),
        Command::Edit(a) => edit(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut scene = SceneSpec::preset(&a.scene)?;
    if let Some(s) = a.seed {
        scene.rng_seed = s;
    }
    let ds = radfield::dataset::make_dataset_at(&scene, a.views, a.res, &Orbit::default(), a.feature_dim, a.offset)?;
    write_dataset(&ds, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ds = radfield::dataset::load_dataset(&a.data)?;
    let mut s1 = cfg.stage1.clone();
    if let Some(n) = a.steps {
        s1.steps = n;
    }
    if let Some(s) = a.seed {
        s1.seed = s;
    }
    if a.no_depth {
        s1.depth_supervision = false;
    }
    let every = (s1.steps / 20).max(1);
    let out = train_stage1(&ds, &cfg.field, &s1, &mut |r| {
        if r.step % every == 0 {
            eprintln!(
                "step {:>6}  color {:.4}  feature {:.4}  depth {:.4}",
                r.step, r.color, r.feature, r.depth
            );
        }
    })?;
    let bytes = checkpoint_bytes(&out.field, Some(&out.adam));
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&a.out, &bytes).map_err(|e| Error::io(&a.out, e))?;
    let csv = a.loss_csv.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write_loss_csv(&out.trace, &csv)?;
    println!("{}  {}", a.out.display(), content_id(&bytes));
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn mask(a: MaskArgs) -> Result<()> {
    let field = load_field(&a.ckpt)?;
    let (cameras, _) = scene_cameras(a.scene.data.as_deref(), a.scene.views, a.scene.res)?;
    let features = render_features(&field.field, &cameras, &RenderOptions::default())?;
    let sel = PatchSelection {
        view: a.view,
        rect: a.rect,
        alpha: a.alpha,
    };
    let set = mask_set_from_features(
        &features,
        &cameras,
        &sel,
        &field.id,
        MaskOptions {
            postprocess: a.postprocess,
        },
    )?;
    set.save(&a.out)?;
    let counts: Vec<usize> = set.masks.iter().map(|m| m.count()).collect();
    println!("{}", json!({ "maskset_id": maskset_id(&set), "dir": a.out, "pixel_counts": counts }));
    Ok(())
}

fn edit(a: EditArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let providers = cfg.providers.providers()?;
    let mut job = cfg.edit.clone();
    if let Some(p) = a.prompt {
        job.prompt = p;
    }
    if let Some(b) = a.bgt {
        job.bgt = b;
    }
    if let Some(n) = a.steps {
        job.repaint_steps = n;
    }
    if let Some(n) = a.pretrain_steps {
        job.pretrain_steps = n;
    }
    if let Some(v) = a.lambda_unmask {
        job.weights.lambda_unmask = v;
    }
    if let Some(v) = a.lambda_clip {
        job.weights.lambda_clip = v;
    }
    if let Some(s) = a.seed {
        job.seed = s;
    }
    job.flags.sds &= !a.no_sds;
    job.flags.bgt_in_prompt &= !a.no_bgt_in_prompt;
    job.flags.clip &= !a.no_clip;
    job.validate(&providers)?;
    let base = load_field(&a.base)?;
    let masks = MaskSet::load(&a.masks)?;
    let dataset = a.data.as_deref().map(radfield::dataset::load_dataset).transpose()?;
    let job_id = a.job_id.unwrap_or_else(|| {
        let key = format!("{}|{}|{}", base.id, masks.checkpoint_id, serde_json::to_string(&job).unwrap());
        format!("job-{}", &content_id(key.as_bytes())[..12])
    });
    let dir = a.out.join(&job_id);
    let outcome = run_edit(
        &dir,
        &base.field,
        &masks,
        dataset.as_ref(),
        &job,
        &providers,
        &job_id,
        &mut |s, _| {
            eprintln!("{:?} {}/{}", s.phase, s.step, s.total_steps);
        },
    )?;
    println!("{}", json!({ "job_id": job_id, "dir": dir, "phase": outcome.status.phase }));
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let kind: ViewKind = a.kind.parse()?;
    let field = load_field(&a.ckpt)?;
    let (cameras, _) = scene_cameras(a.scene.data.as_deref(), a.scene.views, a.scene.res)?;
    let masks = a.masks.as_deref().map(MaskSet::load).transpose()?;
    let plane = view_plane(&field.field, &cameras, a.view, kind, None, masks.as_ref())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    plane.write_png(&a.out)?;
    if let Some(p) = &a.rpnf {
        plane.write_rpnf(p)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let field = load_field(&a.ckpt)?;
    let ds = radfield::dataset::load_dataset(&a.data)?;
    let mut psnr = Vec::with_capacity(ds.views.len());
    for (i, v) in ds.views.iter().enumerate() {
        let img = view_plane(&field.field, &ds.cameras(), i, ViewKind::Rgb, None, None)?;
        psnr.push(eval_psnr(&img, &v.rgb, None)?);
    }
    let mean = psnr.iter().sum::<f64>() / psnr.len().max(1) as f64;
    let mut report = json!({ "checkpoint_id": field.id, "psnr": psnr, "mean_psnr": mean });
    if let Some(dir) = &a.masks {
        let set = MaskSet::load(dir)?;
        if set.masks.len() != ds.views.len() {
            return Err(Error::mismatch("mask count", ds.views.len(), set.masks.len()));
        }
        let iou = set
            .masks
            .iter()
            .zip(&ds.views)
            .map(|(m, v)| eval_iou(m, &v.instance_mask(a.instance)))
            .collect::<Result<Vec<_>>>()?;
        let mean_iou = iou.iter().sum::<f64>() / iou.len().max(1) as f64;
        report["iou"] = json!(iou);
        report["mean_iou"] = json!(mean_iou);
    }
    println!("{report}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let field = load_field(&a.ckpt)?;
    let (cameras, dataset) = scene_cameras(a.scene.data.as_deref(), a.scene.views, a.scene.res)?;
    fs::create_dir_all(&a.workdir).map_err(|e| Error::io(&a.workdir, e))?;
    let state = Arc::new(AppState::new(field, cameras, dataset, a.workdir.clone(), cfg.providers.providers()?));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Error::io(a.addr.clone(), e))?;
        eprintln!("listening on http://{}", a.addr);
        axum::serve(listener, router(state))
            .await
            .map_err(|e| Error::io(a.addr.clone(), e))
    })
}
