//! `fgt`: GT database building, augmentation analysis, simulated fleet runs
//! and their client/server split, and detection evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fgt_core::backbone::BackboneSpec;
use fgt_core::eval::{evaluate_scenes, EvalConfig, Metric};
use fgt_core::fleet::{
    analyze_augmentations, client_infer, prepare, pretrain_model, resume, run_policies, run_raw,
    unlabeled_scenes, AnalysisConfig, ExperimentConfig, ExperimentOutcome, Policy, SceneSpec,
};
use fgt_core::gtbank::build_gt_database;
use fgt_core::io::{
    decode_checkpoint, decode_gt_database, decode_payload, encode_checkpoint, encode_gt_database,
    encode_payload, metrics_csv_rows, parse_detections_txt, parse_run_config, read_labels_txt,
    read_points_bin, Checkpoint, RunConfig, METRICS_HEADER,
};

const PAYLOAD_EXT: &str = "upcy";

#[derive(Parser)]
#[command(
    name = "fgt",
    version,
    about = "Feature-level GT sampling on a simulated vehicle fleet"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// GT database from labeled scenes.
    Gtdb {
        #[command(subcommand)]
        action: GtdbAction,
    },
    /// Raw-level vs feature-level augmentation discrepancy.
    Augment {
        #[command(subcommand)]
        action: AugmentAction,
    },
    /// Full simulated run for every seed of a config; writes the metrics CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vehicle side: frozen-backbone features and detections of the unlabeled scenes.
    Client(ClientArgs),
    /// Server side of the split run.
    Server {
        #[command(subcommand)]
        action: ServerAction,
    },
    /// AP of detections against labels (files, or directories paired by file stem).
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, default_value = "bev", value_parser = ["bev", "3d"])]
        metric: String,
    },
}

#[derive(Subcommand)]
enum GtdbAction {
    /// Reads `<stem>.bin` points with `<stem>.txt` labels from a directory.
    Build {
        #[arg(long)]
        labeled_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entry count and per-entry point counts of a database file.
    Inspect { db: PathBuf },
}

#[derive(Subcommand)]
enum AugmentAction {
    Analyze {
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        #[arg(long, default_value_t = 10)]
        sources: usize,
        #[arg(long, default_value_t = 5)]
        gt_per_scene: usize,
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
        rotate_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-policy summary CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mean per-cell RMSE of every nonzero cell.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Seed of the run; defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// This client handles unlabeled scenes `i` with `i % shards == shard`.
    #[arg(long, default_value_t = 0)]
    shard: usize,
    #[arg(long, default_value_t = 1)]
    shards: usize,
}

#[derive(Subcommand)]
enum ServerAction {
    /// Supervised pretraining; writes the frozen model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Semi-supervised phase from a stored model and client payload files.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        payloads: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Files created by a command; removed again unless the command succeeds.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.created.push(path.to_path_buf());
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    fn commit(mut self) {
        self.done = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.done {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_run_config(&text).with_context(|| format!("in {}", path.display()))
}

fn config_for_seed(rc: &RunConfig, seed: Option<u64>) -> ExperimentConfig {
    ExperimentConfig {
        seed: seed.unwrap_or(rc.seeds[0]),
        ..rc.experiment.clone()
    }
}

fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = decode_checkpoint(&bytes).with_context(|| format!("in {}", path.display()))?;
    if ck.grid != cfg.scene.extent {
        bail!("model {} was trained on a different grid", path.display());
    }
    Ok(ck)
}

fn run_one(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

fn run_prepared(
    cfg: &ExperimentConfig,
    prep: &fgt_core::fleet::Prepared,
) -> Result<ExperimentOutcome> {
    Ok(if cfg.policy == Policy::RawUpcycle {
        run_raw(cfg, prep)?
    } else {
        run_policies(cfg, prep, &[cfg.policy])?.remove(0)
    })
}

fn metrics_csv(rows: &[(u64, ExperimentOutcome)], eval: &EvalConfig) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (seed, out) in rows {
        s.push_str(&metrics_csv_rows(
            *seed,
            out.policy,
            out.pretrained_ap,
            &out.timeline,
            eval,
        ));
    }
    s
}

fn gtdb_build(dir: &Path, out: &Path) -> Result<()> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("no .bin point files in {}", dir.display());
    }
    let mut scenes = Vec::with_capacity(stems.len());
    let mut skipped = 0;
    for bin in &stems {
        let txt = bin.with_extension("txt");
        let points = read_points_bin(bin).with_context(|| format!("in {}", bin.display()))?;
        let labels = read_labels_txt(&txt).with_context(|| format!("in {}", txt.display()))?;
        skipped += labels.skipped;
        scenes.push((points, labels.boxes));
    }
    let db = build_gt_database(scenes.iter().map(|(p, b)| (&p[..], &b[..])))?;
    let mut outputs = Outputs::default();
    outputs.write(out, &encode_gt_database(&db)?)?;
    outputs.commit();
    println!(
        "{} entries from {} scenes ({} labels of unknown class skipped)",
        db.len(),
        scenes.len(),
        skipped
    );
    Ok(())
}

fn gtdb_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let db = decode_gt_database(&bytes).with_context(|| format!("in {}", path.display()))?;
    println!("entry,class,source_scene,points");
    for (i, e) in db.entries().iter().enumerate() {
        println!(
            "{i},{},{},{}",
            e.bbox.class_id,
            e.source_scene,
            e.local_points.len()
        );
    }
    Ok(())
}

fn augment_analyze(cfg: AnalysisConfig, out: Option<&Path>, heatmap: Option<&Path>) -> Result<()> {
    let rows = analyze_augmentations(&cfg)?;
    let mut summary = String::from("policy,mean_rmse,outside_reach\n");
    for r in &rows {
        let _ = writeln!(summary, "{},{},{}", r.name, r.mean_rmse, r.outside_reach);
    }
    let mut outputs = Outputs::default();
    match out {
        Some(p) => outputs.write(p, summary.as_bytes())?,
        None => print!("{summary}"),
    }
    if let Some(p) = heatmap {
        let mut s = String::from("policy,row,col,rmse\n");
        for r in &rows {
            for (yi, xi, v) in r.heatmap.nonzero() {
                let _ = writeln!(s, "{},{yi},{xi},{v}", r.name);
            }
        }
        outputs.write(p, s.as_bytes())?;
    }
    outputs.commit();
    Ok(())
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let rc = load_config(config)?;
    let mut rows = Vec::with_capacity(rc.seeds.len());
    for &seed in &rc.seeds {
        let cfg = config_for_seed(&rc, Some(seed));
        let o = run_one(&cfg).with_context(|| format!("seed {seed}"))?;
        eprintln!("seed {seed}: final AP {:.4}", o.final_ap());
        rows.push((seed, o));
    }
    let mut outputs = Outputs::default();
    outputs.write(out, metrics_csv(&rows, &rc.experiment.eval).as_bytes())?;
    outputs.commit();
    Ok(())
}

fn client(a: &ClientArgs) -> Result<()> {
    if a.shards == 0 || a.shard >= a.shards {
        bail!("shard {} out of range for {} shards", a.shard, a.shards);
    }
    let rc = load_config(&a.config)?;
    let cfg = config_for_seed(&rc, a.seed);
    let ck = load_checkpoint(&a.model, &cfg)?;
    let scenes = unlabeled_scenes(&cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let client = cfg.client_config();
    let mut outputs = Outputs::default();
    let mut n = 0;
    for s in scenes.iter().skip(a.shard).step_by(a.shards) {
        let p = client_infer(&ck.backbone, &ck.head, s, &cfg.scene.extent, &client)?;
        let path = a.out_dir.join(format!("{:016x}.{PAYLOAD_EXT}", s.id));
        outputs.write(&path, &encode_payload(&p)?)?;
        n += 1;
    }
    outputs.commit();
    eprintln!("{n} payloads written to {}", a.out_dir.display());
    Ok(())
}

fn server_pretrain(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let rc = load_config(config)?;
    let cfg = config_for_seed(&rc, seed);
    let (backbone, head) = pretrain_model(&cfg)?;
    let ck = Checkpoint {
        backbone,
        head,
        grid: cfg.scene.extent,
        anchor_z: cfg.scene.anchor_z(),
    };
    let mut outputs = Outputs::default();
    outputs.write(out, &encode_checkpoint(&ck)?)?;
    outputs.commit();
    Ok(())
}

fn server_train(
    config: &Path,
    model: &Path,
    payload_dir: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let rc = load_config(config)?;
    let cfg = config_for_seed(&rc, seed);
    let ck = load_checkpoint(model, &cfg)?;
    let bev = ck.backbone.spec().output_spec(&cfg.scene.extent);
    let mut files: Vec<PathBuf> = fs::read_dir(payload_dir)
        .with_context(|| format!("reading {}", payload_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == PAYLOAD_EXT))
        .collect();
    files.sort();
    let payloads = files
        .iter()
        .map(|f| {
            let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
            decode_payload(&bytes, &bev).with_context(|| format!("in {}", f.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let prep = resume(&cfg, ck.backbone, ck.head, payloads)?;
    let o = run_prepared(&cfg, &prep)?;
    eprintln!("seed {}: final AP {:.4}", cfg.seed, o.final_ap());
    let mut outputs = Outputs::default();
    outputs.write(out, metrics_csv(&[(cfg.seed, o)], &cfg.eval).as_bytes())?;
    outputs.commit();
    Ok(())
}

/// `(file, stem)` pairs of a file or of the `.txt` files of a directory.
fn text_files(path: &Path) -> Result<Vec<(PathBuf, String)>> {
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    if !path.is_dir() {
        return Ok(vec![(path.to_path_buf(), stem(path))]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    Ok(files.into_iter().map(|p| (p.clone(), stem(&p))).collect())
}

fn eval(detections: &Path, labels: &Path, iou: f64, metric: &str) -> Result<()> {
    let cfg = EvalConfig {
        iou_threshold: iou,
        metric: if metric == "3d" {
            Metric::ThreeD
        } else {
            Metric::Bev
        },
        ..EvalConfig::default()
    };
    let label_files = text_files(labels)?;
    let det_files = text_files(detections)?;
    let paired = labels.is_dir() || detections.is_dir();
    if paired && !(labels.is_dir() && detections.is_dir()) {
        bail!("--detections and --labels must both be files or both be directories");
    }
    let mut scenes = Vec::with_capacity(label_files.len());
    for (lp, stem) in &label_files {
        let gts = read_labels_txt(lp)
            .with_context(|| format!("in {}", lp.display()))?
            .boxes;
        let dets = match det_files.iter().find(|(_, s)| !paired || s == stem) {
            Some((dp, _)) => {
                let text =
                    fs::read_to_string(dp).with_context(|| format!("reading {}", dp.display()))?;
                parse_detections_txt(&text).with_context(|| format!("in {}", dp.display()))?
            }
            None => Vec::new(),
        };
        scenes.push((dets, gts));
    }
    if paired {
        if let Some((dp, _)) = det_files
            .iter()
            .find(|(_, s)| !label_files.iter().any(|(_, l)| l == s))
        {
            bail!("{} has no matching label file", dp.display());
        }
    }
    let ap = evaluate_scenes(&scenes, &cfg)?;
    println!("AP {ap:?}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gtdb { action } => match action {
            GtdbAction::Build { labeled_dir, out } => gtdb_build(&labeled_dir, &out),
            GtdbAction::Inspect { db } => gtdb_inspect(&db),
        },
        Command::Augment {
            action:
                AugmentAction::Analyze {
                    scenes,
                    sources,
                    gt_per_scene,
                    rotate_max,
                    seed,
                    out,
                    heatmap,
                },
        } => {
            let cfg = AnalysisConfig {
                scene: SceneSpec::default(),
                backbone: BackboneSpec::default(),
                scenes,
                source_scenes: sources,
                gt_per_scene,
                rotate_max,
                seed,
            };
            augment_analyze(cfg, out.as_deref(), heatmap.as_deref())
        }
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Client(a) => client(&a),
        Command::Server { action } => match action {
            ServerAction::Pretrain { config, out, seed } => server_pretrain(&config, &out, seed),
            ServerAction::Train {
                config,
                model,
                payloads,
                out,
                seed,
            } => server_train(&config, &model, &payloads, &out, seed),
        },
        Command::Eval {
            detections,
            labels,
            iou,
            metric,
        } => eval(&detections, &labels, iou, &metric),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
