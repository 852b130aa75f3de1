//! `vground`: ground queries, evaluate against references, render BEVs and
//! inspect scene bundles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use vground::clients::ModelClients;
use vground::distillation::render_bev;
use vground::eval::{evaluate, ReferenceItem};
use vground::pipeline::ground;
use vground::scene::{load_proposals, load_scene_bundle, Proposal3D, Scene};
use vground::{Config, ResultRecord, Status};

#[derive(Parser)]
#[command(name = "vground", version, about = "Zero-shot 3D visual grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground one query in a scene bundle and print the result JSON.
    Ground {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        query: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for intermediate artifacts.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write the result JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ground every reference query and print the accuracy report.
    Eval {
        /// Directory holding one bundle per scene, named by scene id.
        #[arg(long)]
        scenes: PathBuf,
        /// JSON array of reference items.
        #[arg(long)]
        refs: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one result record per reference to this JSON file.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Per-item traces go to `<trace>/<index>`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Queries grounded concurrently.
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
    },
    /// Render the top-down view of a scene to a PNG.
    RenderBev {
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated proposal ids to outline.
        #[arg(long, value_delimiter = ',')]
        highlight: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
        /// Meters per pixel; defaults to the configured value.
        #[arg(long)]
        m_per_px: Option<f64>,
    },
    /// Print a scene summary and its proposal table.
    Inspect {
        #[arg(long)]
        scene: PathBuf,
    },
}

/// Flags override the config file, which overrides the defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon_degrees: Option<f64>,
    #[arg(long)]
    k_v: Option<usize>,
    #[arg(long)]
    batch_limit: Option<usize>,
    #[arg(long)]
    depth_tol_m: Option<f64>,
    #[arg(long)]
    min_visible_fraction: Option<f64>,
    /// `majority` or a vote count.
    #[arg(long)]
    fusion_min_votes: Option<String>,
    #[arg(long)]
    denoise_k: Option<usize>,
    #[arg(long)]
    denoise_std_ratio: Option<f64>,
    #[arg(long)]
    bev_m_per_px: Option<f64>,
    #[arg(long)]
    max_fine_frames: Option<usize>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get().min(8))
}

enum Failure {
    Usage(anyhow::Error),
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Pipeline(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config, Failure> {
        let mut c: Config = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| usage(anyhow!("{}: {e}", p.display())))?
            }
            None => Config::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            gamma,
            epsilon_degrees,
            k_v,
            batch_limit,
            depth_tol_m,
            min_visible_fraction,
            denoise_k,
            denoise_std_ratio,
            bev_m_per_px,
            max_fine_frames
        );
        if let Some(v) = &self.fusion_min_votes {
            c.fusion_min_votes = serde_json::from_value(match v.parse::<u64>() {
                Ok(n) => serde_json::json!(n),
                Err(_) => serde_json::json!(v),
            })
            .map_err(|e| usage(anyhow!("--fusion-min-votes: {e}")))?;
        }
        c.validate().map_err(usage)?;
        Ok(c)
    }
}

fn load_bundle(dir: &Path) -> anyhow::Result<(Scene, Vec<Proposal3D>)> {
    let scene: Scene = load_scene_bundle(dir).with_context(|| format!("loading scene {}", dir.display()))?;
    let proposals = load_proposals(&dir.join("proposals.json"), &scene)
        .with_context(|| format!("loading proposals for {}", dir.display()))?;
    Ok((scene, proposals))
}

fn clients() -> anyhow::Result<ModelClients> {
    ModelClients::from_env().context("configuring model clients")
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_ground(scene: &Path, query: &str, config: &ConfigArgs, trace: Option<&Path>, out: Option<&Path>) -> Outcome {
    let config = config.resolve()?;
    let (scene, proposals) = load_bundle(scene)?;
    let clients = clients()?;
    let (result, trace_dir) = ground(&clients, &scene, &proposals, query, &config, trace).context("writing trace")?;
    let record = result.record(trace_dir.as_deref());
    print_json(&record)?;
    if let Some(p) = out {
        write_json(p, &record)?;
    }
    match result.status {
        Status::Error => Err(anyhow!(
            "{:?} failed: {}",
            result.failed_phase.expect("error results name their phase"),
            result.error.unwrap_or_default()
        )
        .into()),
        _ => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    scenes: &Path,
    refs: &Path,
    config: &ConfigArgs,
    out: Option<&Path>,
    results_path: Option<&Path>,
    trace: Option<&Path>,
    workers: usize,
) -> Outcome {
    let config = config.resolve()?;
    if workers == 0 {
        return Err(usage(anyhow!("--workers must be at least 1")));
    }
    let text = std::fs::read_to_string(refs).with_context(|| format!("reading {}", refs.display()))?;
    let references: Vec<ReferenceItem> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", refs.display()))?;

    let mut bundles = BTreeMap::new();
    for r in &references {
        if !bundles.contains_key(&r.scene_id) {
            bundles.insert(r.scene_id.clone(), load_bundle(&scenes.join(&r.scene_id))?);
        }
    }
    let clients = clients()?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ResultRecord>>> = Mutex::new(vec![None; references.len()]);
    let failure: Mutex<Option<anyhow::Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.min(references.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(r) = references.get(i) else { break };
                let (scene, proposals) = &bundles[&r.scene_id];
                let dir = trace.map(|t| t.join(i.to_string()));
                match ground(&clients, scene, proposals, &r.query, &config, dir.as_deref()) {
                    Ok((result, written)) => {
                        log::info!("[{i}] {:?} {:?}", result.status, r.query);
                        slots.lock().unwrap()[i] = Some(result.record(written.as_deref()));
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(anyhow!(e).context("writing trace"));
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e.into());
    }
    let records: Vec<ResultRecord> = slots.into_inner().unwrap().into_iter().map(Option::unwrap).collect();
    if let Some(p) = results_path {
        write_json(p, &records)?;
    }
    let report = evaluate(&records, &references).context("scoring results")?;
    print_json(&report)?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_render_bev(scene_dir: &Path, highlight: &[u32], out: &Path, m_per_px: Option<f64>) -> Outcome {
    let m_per_px = m_per_px.unwrap_or(Config::default().bev_m_per_px);
    if m_per_px.is_nan() || m_per_px <= 0.0 {
        return Err(usage(anyhow!("--m-per-px must be positive")));
    }
    let scene: Scene = load_scene_bundle(scene_dir).with_context(|| format!("loading scene {}", scene_dir.display()))?;
    let mut boxes = Vec::new();
    if !highlight.is_empty() {
        let proposals = load_proposals(&scene_dir.join("proposals.json"), &scene).context("loading proposals")?;
        for id in highlight {
            let p = proposals
                .iter()
                .find(|p| p.proposal_id == *id)
                .ok_or_else(|| usage(anyhow!("no proposal with id {id}")))?;
            boxes.push((p.proposal_id, p.bbox));
        }
    }
    let img = render_bev(&scene, &boxes, None, m_per_px).context("rendering")?;
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("{} ({}x{})", out.display(), img.width(), img.height());
    Ok(())
}

fn cmd_inspect(scene_dir: &Path) -> Outcome {
    let scene: Scene = load_scene_bundle(scene_dir).with_context(|| format!("loading scene {}", scene_dir.display()))?;
    println!("scene {}: {} points, {} frames", scene.scene_id, scene.len(), scene.frames.len());
    if let Some(b) = scene.bounds() {
        println!("bounds {:?} .. {:?}", b.min, b.max);
    }
    let path = scene_dir.join("proposals.json");
    if !path.exists() {
        println!("no proposals");
        return Ok(());
    }
    let proposals = load_proposals(&path, &scene).context("loading proposals")?;
    println!("{:>4}  {:<16} {:>6} {:>7}  box", "id", "category", "conf", "points");
    for p in &proposals {
        let f = |v: vground::Vec3d| format!("[{:.2}, {:.2}, {:.2}]", v.x, v.y, v.z);
        println!(
            "{:>4}  {:<16} {:>6.3} {:>7}  {} .. {}",
            p.proposal_id,
            p.category,
            p.confidence,
            p.mask.len(),
            f(p.bbox.min),
            f(p.bbox.max)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Ground { scene, query, config, trace, out } => {
            cmd_ground(&scene, &query, &config, trace.as_deref(), out.as_deref())
        }
        Command::Eval { scenes, refs, config, out, results, trace, workers } => cmd_eval(
            &scenes,
            &refs,
            &config,
            out.as_deref(),
            results.as_deref(),
            trace.as_deref(),
            workers,
        ),
        Command::RenderBev { scene, highlight, out, m_per_px } => cmd_render_bev(&scene, &highlight, &out, m_per_px),
        Command::Inspect { scene } => cmd_inspect(&scene),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
