//! Command-line front end for the distillation pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use bevdistill::config::{DatasetConfig, TrainConfig};
use bevdistill::error::{Error, Result};
use bevdistill::export::write_map;
use bevdistill::grid::{cylindrical_bin, height_map, voxelize, encode_xyzi};
use bevdistill::gradsuite::gradcheck_suite;
use bevdistill::model::TEACHER_INPUT_WIDTH;
use bevdistill::pointcloud::{
    read_labels, read_point_cloud_bin, remap_labels, write_labels, write_point_cloud_bin,
    LabelRemap,
};
use bevdistill::synth::{default_classes, synth_scene};
use bevdistill::train::{
    build_dataset, evaluate, metrics_csv, pretrain_teacher, train_student, Checkpoint, Scene,
};

#[derive(Parser)]
#[command(
    name = "bevdistill",
    about = "Voxel-to-BEV knowledge distillation for LiDAR segmentation, desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the voxel teacher on segmentation losses only.
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the BEV student against a frozen teacher checkpoint.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: per-class IoU and mIoU over the dataset.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify every differentiable stage against central finite
    /// differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the height map (and, with labels and a model, the
    /// prediction-error map) of one scan as CSV and PGM.
    ExportMaps {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the configured synthetic scenes as .bin/.label files.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// The remap that applies to label files under the active config:
/// the configured table for file datasets, the identity table for
/// synthetic ones.
fn active_remap(config: &TrainConfig) -> Result<LabelRemap> {
    match &config.dataset {
        DatasetConfig::Files { remap, .. } => LabelRemap::load(remap),
        DatasetConfig::Synthetic { classes, .. } => {
            let n = classes
                .as_ref()
                .map_or(default_classes().len(), Vec::len);
            Ok(LabelRemap::identity(n, 255))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainTeacher { config, out, seed } => {
            let config = load_config(&config, seed)?;
            ensure_dir(&out)?;
            let (checkpoint, report) = pretrain_teacher(&config)?;
            let ckpt_path = out.join("teacher.json");
            checkpoint.save(&ckpt_path)?;
            let csv_path = out.join("teacher_metrics.csv");
            fs::write(&csv_path, metrics_csv(&report.epochs))
                .map_err(|e| Error::io(&csv_path, e))?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "teacher: {} epochs, final total loss {:.6}, train mIoU {:.4}",
                    config.epochs, last.total, last.train_miou
                );
            } else {
                println!("teacher: 0 epochs, checkpoint equals initialization");
            }
            println!("wrote {}", ckpt_path.display());
            Ok(())
        }
        Command::TrainStudent {
            config,
            teacher,
            out,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            ensure_dir(&out)?;
            let teacher_ckpt = Checkpoint::load(&teacher)?;
            let (checkpoint, report) = train_student(&config, &teacher_ckpt)?;
            let ckpt_path = out.join("student.json");
            checkpoint.save(&ckpt_path)?;
            let csv_path = out.join("student_metrics.csv");
            fs::write(&csv_path, metrics_csv(&report.epochs))
                .map_err(|e| Error::io(&csv_path, e))?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "student: {} epochs, final total loss {:.6}, train mIoU {:.4}",
                    config.epochs, last.total, last.train_miou
                );
            }
            if let (Some(first), Some(last)) =
                (report.alignment.first(), report.alignment.last())
            {
                println!(
                    "teacher-student alignment: {:.4} at start, {:.4} at end",
                    first, last
                );
            }
            println!("wrote {}", ckpt_path.display());
            Ok(())
        }
        Command::Evaluate {
            config,
            model,
            out,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            ensure_dir(&out)?;
            let checkpoint = Checkpoint::load(&model)?;
            let data = build_dataset(&config)?;
            let (_, report) = evaluate(&checkpoint, data.eval_scenes(), data.num_classes)?;
            let csv = report.to_csv(&data.class_names);
            let csv_path = out.join("eval_report.csv");
            fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
            println!("mIoU {:.4} over {} scenes", report.mean, data.eval_scenes().len());
            println!("wrote {}", csv_path.display());
            Ok(())
        }
        Command::Gradcheck { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let cases = gradcheck_suite(&config)?;
            let mut lines = String::new();
            let mut all_pass = true;
            for case in &cases {
                let status = if case.pass { "PASS" } else { "FAIL" };
                let line = format!(
                    "{status} {:<20} max rel err {:.3e} ({}[{}])",
                    case.name,
                    case.report.max_rel_err,
                    case.report.worst_param,
                    case.report.worst_index
                );
                println!("{line}");
                lines.push_str(&line);
                lines.push('\n');
                all_pass &= case.pass;
            }
            if let Some(out) = out {
                ensure_dir(&out)?;
                let path = out.join("gradcheck.txt");
                fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
            }
            if all_pass {
                println!("gradcheck: all {} cases pass", cases.len());
                Ok(())
            } else {
                Err(Error::Numeric(
                    "gradcheck: at least one module failed the tolerance".into(),
                ))
            }
        }
        Command::ExportMaps {
            config,
            scan,
            labels,
            model,
            out,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            ensure_dir(&out)?;
            let pc = read_point_cloud_bin(&scan)?;
            let grid = voxelize(&pc, &config.grid, TEACHER_INPUT_WIDTH, encode_xyzi);
            let h = height_map(&grid);
            write_map(&h, &out.join("height_map.csv"), &out.join("height_map.pgm"))?;
            println!("wrote height map ({} nonempty voxels)", grid.len());

            if let (Some(label_path), Some(model_path)) = (labels, model) {
                let remap = active_remap(&config)?;
                let raw = read_labels(&label_path, remap.ignore_id)?;
                let mapped = remap_labels(&raw, &remap)?;
                let checkpoint = Checkpoint::load(&model_path)?;
                let scene = Scene::build(&pc, &mapped, &config.grid)?;
                let errors = error_map(&checkpoint, &scene, &pc, &config)?;
                write_map(
                    &errors,
                    &out.join("error_map.csv"),
                    &out.join("error_map.pgm"),
                )?;
                println!("wrote prediction-error map");
            }
            Ok(())
        }
        Command::SynthData { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let DatasetConfig::Synthetic {
                scenes, classes, ..
            } = &config.dataset
            else {
                return Err(Error::Config(
                    "synth-data needs a synthetic dataset config".into(),
                ));
            };
            let classes = classes.clone().unwrap_or_else(default_classes);
            let scan_dir = out.join("scans");
            let label_dir = out.join("labels");
            ensure_dir(&scan_dir)?;
            ensure_dir(&label_dir)?;
            for i in 0..*scenes {
                let scene_seed =
                    bevdistill::train::derive_seed(config.seed, 2, i as u64);
                let (pc, labels) = synth_scene(scene_seed, &classes, 255);
                write_point_cloud_bin(&scan_dir.join(format!("{i:04}.bin")), &pc)?;
                write_labels(&label_dir.join(format!("{i:04}.label")), &labels)?;
            }
            let remap = remap_json(classes.len());
            let remap_path = out.join("remap.json");
            fs::write(&remap_path, remap).map_err(|e| Error::io(&remap_path, e))?;
            println!("wrote {} scans to {}", scenes, out.display());
            Ok(())
        }
    }
}

/// Identity remap table for `n` synthetic classes.
fn remap_json(n: usize) -> String {
    let mut entries: Vec<String> = (0..n).map(|i| format!("  \"{i}\": {i}")).collect();
    entries.push(format!("  \"num_classes\": {n}"));
    entries.push("  \"ignore_id\": 255".into());
    format!("{{\n{}\n}}\n", entries.join(",\n"))
}

/// Number of misclassified points per pillar.
fn error_map(
    checkpoint: &Checkpoint,
    scene: &Scene,
    pc: &bevdistill::pointcloud::PointCloud,
    config: &TrainConfig,
) -> Result<bevdistill::grid::HeightMap> {
    use bevdistill::store::Binder;
    use bevdistill::tape::Tape;
    use bevdistill::train::CheckpointKind;

    let tape = Tape::new();
    let binder = Binder::new(&tape, &checkpoint.params, false);
    let net = match checkpoint.kind {
        CheckpointKind::Teacher => bevdistill::model::teacher_net(),
        CheckpointKind::Student => bevdistill::model::student_net(),
    };
    let input = match checkpoint.kind {
        CheckpointKind::Teacher => tape.leaf(scene.grid.feats.clone()),
        CheckpointKind::Student => tape.leaf(scene.student_input.clone()),
    };
    let (_, logits) = net.forward(&tape, &binder, input)?;
    let cell_logits = tape.value(logits);
    let rows = match checkpoint.kind {
        CheckpointKind::Teacher => &scene.point_voxel_row,
        CheckpointKind::Student => &scene.point_pillar_row,
    };

    let spec = &config.grid;
    let mut values = vec![0u32; spec.pillar_count()];
    let mut kept = 0usize;
    for p in &pc.points {
        let Some(coord) = cylindrical_bin(p, spec) else { continue };
        let row = rows[kept];
        let label = scene.labels[kept];
        kept += 1;
        if label == scene.ignore_id {
            continue;
        }
        let logits_row = cell_logits.row(row);
        let mut best = 0usize;
        for j in 1..logits_row.len() {
            if logits_row[j] > logits_row[best] {
                best = j;
            }
        }
        if best as u32 != label {
            values[spec.pillar_index(coord.rho, coord.theta)] += 1;
        }
    }
    Ok(bevdistill::grid::HeightMap {
        rho_bins: spec.rho_bins,
        theta_bins: spec.theta_bins,
        values,
    })
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print and exit cleanly; usage mistakes are
            // validation errors (exit 1)
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
