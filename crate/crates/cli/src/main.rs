//! Command-line front end: dataset generation, training stages, localization
//! and inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use neumap::config::Config;
use neumap::decoder::DecoderParams;
use neumap::pipeline::{
    build_scene, evaluate, export_heatmap, localize_all, RetrievalIndex, DEFAULT_THRESHOLDS,
};
use neumap::scene::{SceneRepresentation, VoxelId};
use neumap::synthworld::{generate_dataset, Dataset};
use neumap::training::{adapt_scene, finetune, prune_for_finetune, threshold_for_retention, train_stage1};
use neumap::Error;

#[derive(Parser)]
#[command(name = "neumap", version, about = "Voxel code-bank scene maps for visual localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value file; unknown keys are rejected
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set epochs_stage1=10 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, Error> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write dataset.nmds plus manifest.json
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 training: decoder, codes and scales with the L1 term
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune codes by |scale| threshold
    Prune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Threshold; defaults to prune_threshold from the config
        #[arg(long, conflicts_with = "retain")]
        threshold: Option<f64>,
        /// Pick the threshold that keeps at most this fraction of codes
        #[arg(long)]
        retain: Option<f64>,
        /// Where to write the per-block CSV report
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Stage-2 fine-tuning with scales frozen
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit fresh codes for a new dataset against frozen weights
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a pose for every query view
    Localize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Output CSV of poses
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize all queries and score them against ground truth
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print scene (and optionally weight) statistics
    Inspect {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Attention heatmap of one code over a reference or holdout view
    Heatmap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        view: usize,
        /// Use a holdout view instead of a reference view
        #[arg(long)]
        holdout: bool,
        /// Voxel id as ix:iy:iz
        #[arg(long, allow_hyphen_values = true)]
        voxel: String,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        code: usize,
        /// Output prefix; .csv (and .pgm for lattice views) are appended
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_dataset(path: &Path, cfg: &Config) -> Result<Dataset, Error> {
    let ds = Dataset::load(path)?;
    if ds.reference.descriptor_dim != cfg.world.descriptor_dim {
        return Err(Error::Dimension(format!(
            "dataset descriptors are {}-d, config says descriptor_dim = {}",
            ds.reference.descriptor_dim, cfg.world.descriptor_dim
        )));
    }
    Ok(ds)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Gen { cfg, out } => {
            let cfg = cfg.load()?;
            let ds = generate_dataset(&cfg.world)?;
            create_dir(&out)?;
            write(&out.join("dataset.nmds"), ds.to_bytes())?;
            let manifest = serde_json::to_string_pretty(&ds.manifest()).expect("manifest serializes");
            write(&out.join("manifest.json"), manifest + "\n")?;
            write(&out.join("config.txt"), cfg.to_text())?;
            println!(
                "{} points ({} valid), {} reference / {} query / {} holdout views",
                ds.reference.points.len(),
                ds.reference.num_valid_points(),
                ds.reference.views.len(),
                ds.queries.len(),
                ds.holdout.len()
            );
        }
        Command::Train { cfg, data, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data, &cfg)?;
            let (mut scene, dropped) = build_scene(
                &ds.reference,
                cfg.model.side_length,
                cfg.model.bank_dims(),
                cfg.train.min_points,
                cfg.model.init_seed,
            )?;
            if !dropped.is_empty() {
                let ids: Vec<String> = dropped.iter().map(VoxelId::to_string).collect();
                println!("dropped uncovered voxels: {}", ids.join(" "));
            }
            let mut params = DecoderParams::init(cfg.decoder_dims(), cfg.model.init_seed)?;
            let start = Instant::now();
            let log = train_stage1(&mut params, &mut scene, &ds.reference, &cfg.train)?;
            println!("stage 1: {} voxels, {} epochs in {:.1} s", scene.voxels.len(), log.epochs.len(), start.elapsed().as_secs_f64());
            create_dir(&out)?;
            write(&out.join("scene.nmap"), scene.to_bytes())?;
            write(&out.join("weights.nmwt"), params.to_bytes())?;
            write(&out.join("train_log.csv"), log.to_csv())?;
        }
        Command::Prune { cfg, scene, out, threshold, retain, report } => {
            let cfg = cfg.load()?;
            let mut s = SceneRepresentation::load(&scene)?;
            let t = match (threshold, retain) {
                (Some(t), _) => t,
                (None, Some(f)) => threshold_for_retention(&s, f),
                (None, None) => cfg.train.prune_threshold,
            };
            let rep = prune_for_finetune(&mut s, t)?;
            println!(
                "threshold {t:e}: retained {}/{} codes, {} -> {} bytes",
                rep.retained(),
                rep.total(),
                rep.bytes_before,
                rep.bytes_after
            );
            write(&out, s.to_bytes())?;
            if let Some(r) = report {
                write(&r, rep.to_csv())?;
            }
        }
        Command::Finetune { cfg, data, scene, weights, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data, &cfg)?;
            let mut s = SceneRepresentation::load(&scene)?;
            let mut params = DecoderParams::load(&weights)?;
            let log = finetune(&mut params, &mut s, &ds.reference, &cfg.train)?;
            create_dir(&out)?;
            write(&out.join("scene.nmap"), s.to_bytes())?;
            write(&out.join("weights.nmwt"), params.to_bytes())?;
            write(&out.join("finetune_log.csv"), log.to_csv())?;
        }
        Command::Adapt { cfg, data, weights, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data, &cfg)?;
            let params = DecoderParams::load(&weights)?;
            let (fresh, _) = build_scene(
                &ds.reference,
                cfg.model.side_length,
                cfg.model.bank_dims(),
                cfg.train.min_points,
                cfg.model.init_seed,
            )?;
            let (scene, log) = adapt_scene(&params, fresh, &ds.reference, &cfg.train)?;
            create_dir(&out)?;
            write(&out.join("scene.nmap"), scene.to_bytes())?;
            write(&out.join("adapt_log.csv"), log.to_csv())?;
        }
        Command::Localize { cfg, data, scene, weights, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data, &cfg)?;
            let s = SceneRepresentation::load(&scene)?;
            let params = DecoderParams::load(&weights)?;
            let index = RetrievalIndex::new(&ds.reference);
            let results = localize_all(&ds.query_inputs(), &s, &params, &index, &cfg.localize)?;
            let mut csv = String::from("query,status,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2,activated_voxels,candidates,confident,inliers\n");
            for (q, r) in ds.queries.iter().zip(&results) {
                let (status, nums) = match &r.pose {
                    Ok(p) => {
                        let m = p.rotation;
                        let v: Vec<String> = (0..3)
                            .flat_map(|i| (0..3).map(move |j| m[(i, j)]))
                            .chain(p.translation.iter().copied())
                            .map(|x| x.to_string())
                            .collect();
                        ("ok", v.join(","))
                    }
                    Err(f) => (f.name(), vec!["nan"; 12].join(",")),
                };
                csv.push_str(&format!(
                    "{},{status},{nums},{},{},{},{}\n",
                    q.id, r.num_activated_voxels, r.num_candidate_points, r.num_confident_points, r.num_inliers
                ));
            }
            write(&out, csv)?;
            let ok = results.iter().filter(|r| r.pose.is_ok()).count();
            println!("localized {ok}/{} queries", results.len());
        }
        Command::Eval { cfg, data, scene, weights, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data, &cfg)?;
            let s = SceneRepresentation::load(&scene)?;
            let params = DecoderParams::load(&weights)?;
            let index = RetrievalIndex::new(&ds.reference);
            let start = Instant::now();
            let results = localize_all(&ds.query_inputs(), &s, &params, &index, &cfg.localize)?;
            let report = evaluate(&results, &ds.truth.query_poses, &DEFAULT_THRESHOLDS, s.size_bytes(4))?;
            create_dir(&out)?;
            write(&out.join("queries.csv"), report.queries_csv())?;
            write(&out.join("summary.csv"), report.summary_csv())?;
            print!("{}", report.summary());
            println!("wall time {:.2} s", start.elapsed().as_secs_f64());
        }
        Command::Inspect { scene, weights } => {
            let s = SceneRepresentation::load(&scene)?;
            println!("side length      {} m", s.side_length);
            println!("bank dims        T={} N={} D={}", s.dims.blocks, s.dims.codes, s.dims.dim);
            println!("voxels           {}", s.voxels.len());
            println!("codes            {}/{} retained", s.retained_codes(), s.total_codes());
            println!("size_bytes       {}", s.size_bytes(4));
            println!("payload bytes    {}", s.payload_bytes(4));
            for v in s.voxels.values() {
                println!(
                    "  {:<10} origin ({:.3}, {:.3}, {:.3})  members {:>4}  views {:>3}  codes {:>3}",
                    v.id.to_string(),
                    v.origin.x,
                    v.origin.y,
                    v.origin.z,
                    v.members.len(),
                    v.covering_views.len(),
                    v.bank.num_retained()
                );
            }
            if let Some(w) = weights {
                let p = DecoderParams::load(&w)?;
                p.dims.check_bank(s.dims)?;
                println!("decoder          {} tensors, {} scalars, {:?}", p.tensors.len(), p.num_scalars(), p.dims);
            }
        }
        Command::Heatmap { data, scene, weights, view, holdout, voxel, block, code, out } => {
            let ds = Dataset::load(&data)?;
            let s = SceneRepresentation::load(&scene)?;
            let params = DecoderParams::load(&weights)?;
            let views = if holdout { &ds.holdout } else { &ds.reference.views };
            let v = views
                .get(view)
                .ok_or_else(|| Error::Config(format!("no view {view} (have {})", views.len())))?;
            let id: VoxelId = voxel.parse().map_err(|e| Error::Config(format!("--voxel: {e}")))?;
            let files = export_heatmap(&v.keypoints, &s, &params, id, block, code, &out)?;
            println!("wrote {}", files.csv.display());
            match files.pgm {
                Some(p) => println!("wrote {}", p.display()),
                None => println!("keypoints are not on a lattice; no image written"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
