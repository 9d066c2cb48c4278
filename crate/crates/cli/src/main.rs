use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slotforge::features::{generate_scene, load_features, save_features};
use slotforge::masking::{mask_applications, select_indices};
use slotforge::metrics::evaluate;
use slotforge::pipeline::slots_to_text;
use slotforge::trainer::train;
use slotforge::{
    infer, Error, FeatureMap, GroundTruth, InferOptions, LabelGrid, MaskSource, MaskStrategy, MaskingConfig, Matcher,
    Metric, Model, ReferenceHead, RunConfig, SegmentationResult, SyntheticSceneSpec,
};

const FEATURE_EXT: &str = "sltk";
const GT_EXT: &str = "gt";
const LABEL_EXT: &str = "labels";
const SLOTS_EXT: &str = "slots";

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ncheckpoint format SLTF0001\nfeature format SLTK0001\nfloat f64"
);

#[derive(Parser)]
#[command(name = "slotforge", version, long_version = LONG_VERSION, about = "Masked multi-query slot attention")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of feature files.
    Train {
        /// key=value config file, applied on top of the profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "paper")]
        profile: Profile,
        /// Directory of .sltk feature files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config override, wins over the file. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every head on each feature file, fuse, decode and write label grids.
    Infer {
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cosine")]
        fusion_metric: Metric,
        #[arg(long, default_value = "hungarian")]
        fusion_matcher: Matcher,
        /// `random` or a head index.
        #[arg(long, default_value = "random")]
        reference_head: ReferenceHead,
        /// Use only the first H heads.
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "alpha")]
        mask_source: MaskSource,
        /// Also write the fused slots next to each label grid.
        #[arg(long)]
        dump_slots: bool,
    },
    /// Score predicted label grids against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show which patches a masking strategy would zero.
    MaskPreview {
        features: PathBuf,
        #[arg(long, default_value = "background")]
        strategy: MaskStrategy,
        #[arg(long, default_value_t = 70.0)]
        percent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic scenes with ground truth and a manifest.
    GenSynthetic {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        grid_h: usize,
        #[arg(long, default_value_t = 8)]
        grid_w: usize,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long, default_value_t = 16)]
        d_feats: usize,
        #[arg(long, default_value_t = 2.0)]
        background_mean: f64,
        #[arg(long, default_value_t = 0.0)]
        object_lo: f64,
        #[arg(long, default_value_t = 0.5)]
        object_hi: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Capacity { .. } => 2,
        Error::Format { .. }
        | Error::Length { .. }
        | Error::Contract(_)
        | Error::Shape { .. }
        | Error::Bounds { .. } => 3,
        Error::Numeric { .. } => 4,
        Error::Io { .. } => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> slotforge::Result<()> {
    let verbose = cli.verbose > 0;
    match cli.command {
        Command::Train {
            config,
            profile,
            data,
            out,
            overrides,
        } => {
            let mut cfg = match profile {
                Profile::Desk => RunConfig::desk(),
                Profile::Paper => RunConfig::paper(),
            };
            if let Some(path) = config {
                cfg.apply_text(&read_text(&path)?)?;
            }
            for o in &overrides {
                cfg.apply_assignment(o)?;
            }
            let files = list_files(&data, FEATURE_EXT)?;
            if files.is_empty() {
                return Err(Error::Contract(format!(
                    "no .{FEATURE_EXT} files in {}",
                    data.display()
                )));
            }
            let dataset = files.iter().map(load_features).collect::<slotforge::Result<Vec<_>>>()?;
            cfg.model.feat_dim = dataset[0].d_feats();
            cfg.model.num_patches = dataset[0].num_patches();
            cfg.validate()?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| io_err(&out, e))?;
            let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            if verbose {
                eprintln!(
                    "training {} parameters on {} images for {} steps",
                    model.num_parameters(),
                    dataset.len(),
                    cfg.train.total_steps(dataset.len())
                );
            }
            let report = train(&mut model, &dataset, &cfg.train, Some(&out))?;
            if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
                println!(
                    "loss {:.6} -> {:.6} over {} steps",
                    first.loss,
                    last.loss,
                    report.losses.len()
                );
            }
            Ok(())
        }
        Command::Infer {
            features,
            checkpoint,
            out,
            fusion_metric,
            fusion_matcher,
            reference_head,
            heads,
            seed,
            mask_source,
            dump_slots,
        } => {
            let model = Model::load(&checkpoint)?;
            let opts = InferOptions {
                metric: fusion_metric,
                matcher: fusion_matcher,
                reference: reference_head,
                heads,
                mask_source,
                seed,
            };
            let files = if features.is_dir() {
                list_files(&features, FEATURE_EXT)?
            } else {
                vec![features]
            };
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let mask_calls = mask_applications();
            for path in &files {
                let map = load_features(path)?;
                let result = infer(&model, &map, &opts)?;
                let stem = stem(path);
                result
                    .segmentation
                    .to_label_grid()
                    .write(out.join(format!("{stem}.{LABEL_EXT}")))?;
                if dump_slots {
                    let p = out.join(format!("{stem}.{SLOTS_EXT}"));
                    fs::write(&p, slots_to_text(&result.fused)).map_err(|e| io_err(&p, e))?;
                }
                if verbose {
                    eprintln!("{stem}: reference head {}", result.reference);
                }
            }
            if verbose {
                eprintln!("masking calls: {}", mask_applications() - mask_calls);
            }
            println!("wrote {} label grids to {}", files.len(), out.display());
            Ok(())
        }
        Command::Eval { pred, gt, out } => {
            let gt_files = list_files(&gt, GT_EXT)?;
            let mut names = Vec::new();
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for path in &gt_files {
                let name = stem(path);
                let truth = GroundTruth::from_labels(&LabelGrid::read(path)?)?;
                let p = pred.join(format!("{name}.{LABEL_EXT}"));
                let grid = LabelGrid::read(&p)?;
                if (grid.grid_h, grid.grid_w) != (truth.grid_h, truth.grid_w) {
                    return Err(Error::Contract(format!(
                        "{name}: prediction grid {}x{} vs ground truth {}x{}",
                        grid.grid_h, grid.grid_w, truth.grid_h, truth.grid_w
                    )));
                }
                preds.push(SegmentationResult::from_label_grid(&grid));
                gts.push(truth);
                names.push(name);
            }
            let report = evaluate(&preds, &gts, Some(&names))?;
            fs::write(&out, report.to_csv()).map_err(|e| io_err(&out, e))?;
            println!(
                "corloc {:.4} miou {:.4} mbo {:.4} over {} images ({} skipped)",
                report.corloc,
                report.miou,
                report.mbo,
                names.len(),
                report.skipped
            );
            Ok(())
        }
        Command::MaskPreview {
            features,
            strategy,
            percent,
            seed,
        } => {
            let map = load_features(&features)?;
            let cfg = MaskingConfig {
                strategy,
                m_percent: percent,
                seed,
            };
            cfg.validate()?;
            // A closed pipe (`| head`) is not an error worth reporting.
            let _ = write!(
                std::io::stdout().lock(),
                "m {percent}\n{}",
                select_indices(&map, &cfg, seed)
            );
            Ok(())
        }
        Command::GenSynthetic {
            count,
            out,
            seed,
            grid_h,
            grid_w,
            objects,
            d_feats,
            background_mean,
            object_lo,
            object_hi,
            noise,
        } => {
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let mut manifest = String::from("features,ground_truth\n");
            for i in 0..count {
                let spec = SyntheticSceneSpec {
                    grid_h,
                    grid_w,
                    n_objects: objects,
                    d_feats,
                    background_mean,
                    object_mean_range: (object_lo, object_hi),
                    noise_std: noise,
                    seed: seed.wrapping_add(i as u64),
                };
                let (map, truth): (FeatureMap, GroundTruth) = generate_scene(&spec)?;
                let name = format!("scene_{i:05}");
                let feat = format!("{name}.{FEATURE_EXT}");
                let gt = format!("{name}.{GT_EXT}");
                save_features(&map, out.join(&feat))?;
                truth.to_labels().write(out.join(&gt))?;
                manifest.push_str(&format!("{feat},{gt}\n"));
            }
            let path = out.join("manifest.csv");
            fs::write(&path, manifest).map_err(|e| io_err(&path, e))?;
            println!("wrote {count} scenes to {}", out.display());
            Ok(())
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> slotforge::Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Files in `dir` with extension `ext`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> slotforge::Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
