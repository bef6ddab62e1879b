//! The distillation training pipeline: scene preparation, teacher
//! pretraining, student training with the combined objective,
//! evaluation and checkpoints.
//!
//! One training step builds a fresh tape, runs the frozen teacher and the
//! trainable student over every scene of the batch, assembles
//! `wce + lovasz + β1·vpd + β2·lwd + β3·logit` with the components the
//! ablation flags enable, backpropagates once and applies the optimizer
//! in deterministic name order. Runs with the same config and seed are
//! bit-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compress::{compress_scatter_max, compress_z_conv, ZCompressMode};
use crate::config::{DatasetConfig, TrainConfig, NUM_LAYERS};
use crate::error::{Error, Result};
use crate::grid::{
    cylindrical_bin, encode_xyi, encode_xyzi, height_map, match_columns, pillarize, voxelize,
    GridSpec, HeightMap, SparseVoxelGrid,
};
use crate::loss::{logit_kd, lovasz_softmax, total_loss, weighted_ce};
use crate::lwd::{
    columns_in_regions, compress_two_stage, height_embed, lwd_loss, region_weights,
    sample_regions, RegionPartition,
};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::model::{
    student_net, teacher_net, DistillModel, ToyNet, STUDENT_INPUT_WIDTH, TEACHER_INPUT_WIDTH,
};
use crate::pointcloud::{
    compute_class_weights, read_labels, read_point_cloud_bin, remap_labels, LabelRemap,
    LabelSet, PointCloud,
};
use crate::store::{Binder, Optimizer, ParamStore};
use crate::synth::{default_classes, synth_scene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vpd::{cross_attention, flatten_and_transfer, mean_row_cosine, vpd_layer_loss, vpd_total};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed derivation for the independent rng streams
/// (init, data, training order, region sampling).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(base ^ tag.rotate_left(48) ^ splitmix64(index))
}

const TAG_INIT: u64 = 1;
const TAG_DATA_TRAIN: u64 = 2;
const TAG_DATA_VAL: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_LWD: u64 = 5;

/// One preprocessed scan with everything the training step needs.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Train ids of the points that fell inside the grid.
    pub labels: Vec<u32>,
    pub ignore_id: u32,
    /// Teacher-side sparse grid; features are per-voxel `(x,y,z,i)` means.
    pub grid: SparseVoxelGrid,
    /// Occupied pillar indices in ascending order.
    pub occupied: Vec<usize>,
    /// Student input rows, one per occupied pillar: `(x,y,i)` means.
    pub student_input: Tensor,
    /// Per kept point: its voxel row and its occupied-pillar row.
    pub point_voxel_row: Vec<usize>,
    pub point_pillar_row: Vec<usize>,
    /// Teacher column to student pillar correspondence.
    pub matches: Vec<(usize, usize)>,
    pub match_pillars: Vec<usize>,
    /// Height map restricted to voxels with supervised points; drives the
    /// label-weight region probabilities.
    pub lwd_height: HeightMap,
    pub dropped_points: usize,
}

impl Scene {
    pub fn build(pc: &PointCloud, labels: &LabelSet, spec: &GridSpec) -> Result<Scene> {
        if pc.len() != labels.len() {
            return Err(Error::Config(format!(
                "scene has {} points but {} labels",
                pc.len(),
                labels.len()
            )));
        }
        let grid = voxelize(pc, spec, TEACHER_INPUT_WIDTH, encode_xyzi);
        let bev = pillarize(pc, spec, STUDENT_INPUT_WIDTH, encode_xyi);
        let matches = match_columns(&grid, &bev)?;
        let match_pillars: Vec<usize> = matches.iter().map(|&(_, p)| p).collect();
        let occupied = bev.occupied_pillars();
        let mut pillar_row = vec![usize::MAX; spec.pillar_count()];
        for (row, &p) in occupied.iter().enumerate() {
            pillar_row[p] = row;
        }
        let mut student_input = Vec::with_capacity(occupied.len() * STUDENT_INPUT_WIDTH);
        for &p in &occupied {
            student_input.extend_from_slice(bev.feats.row(p));
        }

        let mut kept_labels = Vec::new();
        let mut point_voxel_row = Vec::new();
        let mut point_pillar_row = Vec::new();
        let mut supervised_voxel = vec![false; grid.len()];
        for (i, p) in pc.points.iter().enumerate() {
            let Some(coord) = cylindrical_bin(p, spec) else { continue };
            let vrow = grid.row_of(coord).expect("binned point has a voxel");
            let prow = pillar_row[spec.pillar_index(coord.rho, coord.theta)];
            debug_assert_ne!(prow, usize::MAX);
            let label = labels.labels[i];
            kept_labels.push(label);
            point_voxel_row.push(vrow);
            point_pillar_row.push(prow);
            if label != labels.ignore_id {
                supervised_voxel[vrow] = true;
            }
        }

        let mut lwd_values = vec![0u32; spec.pillar_count()];
        for (row, coord) in grid.coords.iter().enumerate() {
            if supervised_voxel[row] {
                lwd_values[spec.pillar_index(coord.rho, coord.theta)] += 1;
            }
        }
        let lwd_height = HeightMap {
            rho_bins: spec.rho_bins,
            theta_bins: spec.theta_bins,
            values: lwd_values,
        };

        let dropped = grid.dropped_points;
        let n_occupied = occupied.len();
        Ok(Scene {
            labels: kept_labels,
            ignore_id: labels.ignore_id,
            grid,
            occupied,
            student_input: Tensor::matrix(n_occupied, STUDENT_INPUT_WIDTH, student_input),
            point_voxel_row,
            point_pillar_row,
            matches,
            match_pillars,
            lwd_height,
            dropped_points: dropped,
        })
    }

    /// Full geometric height map of the scene (occupied z bins per
    /// column).
    pub fn geometric_height(&self) -> HeightMap {
        height_map(&self.grid)
    }
}

/// Prepared train/validation scenes with shared label metadata.
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub class_weights: Vec<f64>,
    pub ignore_id: u32,
}

impl Dataset {
    pub fn eval_scenes(&self) -> &[Scene] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

/// Builds the dataset the config names: synthetic scenes from derived
/// seeds, or `.bin`/`.label` files remapped to train ids.
pub fn build_dataset(config: &TrainConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetConfig::Synthetic {
            scenes,
            val_scenes,
            classes,
        } => {
            let classes = classes.clone().unwrap_or_else(default_classes);
            let ignore_id = 255u32;
            let mut train = Vec::with_capacity(*scenes);
            let mut label_sets = Vec::new();
            for i in 0..*scenes {
                let seed = derive_seed(config.seed, TAG_DATA_TRAIN, i as u64);
                let (pc, labels) = synth_scene(seed, &classes, ignore_id);
                train.push(Scene::build(&pc, &labels, &config.grid)?);
                label_sets.push(labels);
            }
            let mut val = Vec::with_capacity(*val_scenes);
            for i in 0..*val_scenes {
                let seed = derive_seed(config.seed, TAG_DATA_VAL, i as u64);
                let (pc, labels) = synth_scene(seed, &classes, ignore_id);
                val.push(Scene::build(&pc, &labels, &config.grid)?);
            }
            let refs: Vec<&LabelSet> = label_sets.iter().collect();
            let class_weights = compute_class_weights(&refs, classes.len())?;
            let class_names = config
                .class_names
                .clone()
                .unwrap_or_else(|| classes.iter().map(|c| c.name.clone()).collect());
            Ok(Dataset {
                train,
                val,
                num_classes: classes.len(),
                class_names,
                class_weights,
                ignore_id,
            })
        }
        DatasetConfig::Files {
            scans,
            labels,
            remap,
        } => {
            let remap = LabelRemap::load(remap)?;
            let mut train = Vec::new();
            let mut label_sets = Vec::new();
            for (scan_path, label_path) in scans.iter().zip(labels) {
                let pc = read_point_cloud_bin(scan_path)?;
                let raw = read_labels(label_path, remap.ignore_id)?;
                let mapped = remap_labels(&raw, &remap)?;
                train.push(Scene::build(&pc, &mapped, &config.grid)?);
                label_sets.push(mapped);
            }
            let refs: Vec<&LabelSet> = label_sets.iter().collect();
            let class_weights = compute_class_weights(&refs, remap.num_classes)?;
            let class_names = config.class_names.clone().unwrap_or_else(|| {
                (0..remap.num_classes).map(|k| format!("class_{k}")).collect()
            });
            Ok(Dataset {
                train,
                val: Vec::new(),
                num_classes: remap.num_classes,
                class_names,
                class_weights,
                ignore_id: remap.ignore_id,
            })
        }
    }
}

/// Forward of one network over a scene: per-layer cell features plus
/// logits gathered onto the kept points.
struct NetForward {
    layer_feats: Vec<Var>,
    point_logits: Var,
}

fn forward_teacher(
    tape: &Tape,
    binder: &Binder,
    net: &ToyNet,
    scene: &Scene,
) -> Result<NetForward> {
    let input = tape.leaf(scene.grid.feats.clone());
    let (layer_feats, voxel_logits) = net.forward(tape, binder, input)?;
    let point_logits = tape.gather_rows(voxel_logits, &scene.point_voxel_row);
    Ok(NetForward {
        layer_feats,
        point_logits,
    })
}

fn forward_student(
    tape: &Tape,
    binder: &Binder,
    net: &ToyNet,
    scene: &Scene,
) -> Result<NetForward> {
    let input = tape.leaf(scene.student_input.clone());
    let (layer_feats, pillar_logits) = net.forward(tape, binder, input)?;
    let point_logits = tape.gather_rows(pillar_logits, &scene.point_pillar_row);
    Ok(NetForward {
        layer_feats,
        point_logits,
    })
}

/// Student features at the teacher's matched columns: scatter the
/// occupied-pillar rows into the dense lattice, then gather the matched
/// pillars (unoccupied ones contribute zero rows).
fn matched_student_rows(tape: &Tape, scene: &Scene, feats: Var) -> Var {
    let dense = tape.scatter_add_rows(feats, &scene.occupied, scene.grid.spec.pillar_count());
    tape.gather_rows(dense, &scene.match_pillars)
}

/// Per-scene voxel-to-pillar distillation: compression, domain transfer,
/// cross-attention and the layer losses. Also reports the mean row
/// cosine between the attention output and the transferred teacher
/// features (the alignment trend).
fn vpd_scene_forward(
    tape: &Tape,
    binder: &Binder,
    scene: &Scene,
    teacher_layers: &[Var],
    student_layers: &[Var],
    model: &DistillModel,
    config: &TrainConfig,
) -> Result<(Var, f64)> {
    let nz = config.grid.z_bins;
    let mut layer_losses = Vec::new();
    let mut cosine_sum = 0.0;
    let mut cosine_n = 0usize;
    for module in &model.vpd {
        let t_feats = teacher_layers[module.layer - 1];
        if scene.matches.is_empty() {
            layer_losses.push(tape.constant(0.0));
            continue;
        }
        let compressed = match config.ablation.compression_mode {
            ZCompressMode::ZConv => {
                let params = module
                    .compress_params(binder, nz)
                    .expect("z_conv mode registers kernel parameters");
                compress_z_conv(tape, &scene.grid, t_feats, &params)?
            }
            ZCompressMode::ScatterMax => compress_scatter_max(tape, &scene.grid, t_feats)?,
        };
        let matched = matched_student_rows(tape, scene, student_layers[module.layer - 1]);
        let transfer = module.transfer_params(binder);
        let (f_v, f_b) = flatten_and_transfer(tape, compressed, matched, transfer.as_ref())?;
        let f_b_prime = match module.attention_params(binder) {
            Some(attn) => cross_attention(tape, f_v, f_b, &attn)?,
            None => f_b,
        };
        layer_losses.push(vpd_layer_loss(tape, f_b_prime, f_v)?);
        cosine_sum += mean_row_cosine(&tape.value(f_b_prime), &tape.value(f_v));
        cosine_n += 1;
    }
    let total = vpd_total(tape, &layer_losses)?;
    let alignment = if cosine_n > 0 {
        cosine_sum / cosine_n as f64
    } else {
        0.0
    };
    Ok((total, alignment))
}

/// Per-scene label-weight distillation over a fixed region selection.
fn lwd_scene_forward(
    tape: &Tape,
    binder: &Binder,
    scene: &Scene,
    teacher_layers: &[Var],
    student_layers: &[Var],
    model: &DistillModel,
    config: &TrainConfig,
    part: &RegionPartition,
    selected: &[usize],
) -> Result<Var> {
    let lwd = model.lwd.as_ref().expect("lwd enabled");
    let nz = config.grid.z_bins;
    let last = teacher_layers[NUM_LAYERS - 1];
    let embedded = height_embed(tape, &scene.grid, last, &lwd.embedding(binder))?;
    let f_v_cols = compress_two_stage(tape, &scene.grid, embedded, &lwd.stage_params(binder, nz))?;
    let sel_cols = columns_in_regions(&scene.grid, part, selected);
    let teacher_sel = tape.gather_rows(f_v_cols, &sel_cols);
    let matched = matched_student_rows(tape, scene, student_layers[NUM_LAYERS - 1]);
    let student_sel = tape.gather_rows(matched, &sel_cols);
    lwd_loss(tape, student_sel, teacher_sel)
}

/// Selects the LWD regions for one scene from its label-filtered height
/// map; the rng belongs to the training loop.
fn select_lwd_regions(
    scene: &Scene,
    part: &RegionPartition,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let (_, p) = region_weights(&scene.lwd_height, part)?;
    sample_regions(&p, m, rng)
}

/// Loss components of one step, as plain numbers for the metrics log.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub wce: f64,
    pub lovasz: f64,
    pub vpd: f64,
    pub lwd: f64,
    pub logit: f64,
    pub total: f64,
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub wce: f64,
    pub lovasz: f64,
    pub vpd: f64,
    pub lwd: f64,
    pub logit: f64,
    pub total: f64,
    pub train_miou: f64,
}

/// Training outcome next to the checkpoint: per-epoch averaged loss
/// components plus the teacher-student alignment measured at epoch
/// boundaries (index 0 is the untrained state).
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub alignment: Vec<f64>,
}

/// The pinned metrics-log layout.
pub fn metrics_csv(epochs: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,wce,lovasz,vpd,lwd,logit,total,train_miou\n");
    for e in epochs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.wce, e.lovasz, e.vpd, e.lwd, e.logit, e.total, e.train_miou
        )
        .unwrap();
    }
    out
}

/// Serialized training state: parameters, config snapshot, rng state and
/// epoch counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Student,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn argmax_rows(t: &Tensor) -> Vec<u32> {
    let (r, c) = (t.rows(), t.cols());
    (0..r)
        .map(|i| {
            let row = t.row(i);
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Pretrains the toy teacher on weighted cross-entropy plus
/// Lovász-softmax. The checkpoint with `epochs = 0` equals the
/// initialization.
pub fn pretrain_teacher(config: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    let data = build_dataset(config)?;
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT, 0));
    let teacher = teacher_net();
    teacher.init(
        &mut store,
        &mut init_rng,
        TEACHER_INPUT_WIDTH,
        config.c_v,
        data.num_classes,
    );
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_TRAIN, 0));
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let order = shuffled_indices(data.train.len(), &mut train_rng);
        let mut sums = LossComponents::default();
        let mut steps = 0usize;
        let mut cm = ConfusionMatrix::new(data.num_classes);
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &store, true);
            let mut logit_parts = Vec::new();
            let mut batch_labels: Vec<u32> = Vec::new();
            for &si in batch {
                let scene = &data.train[si];
                let fwd = forward_teacher(&tape, &binder, &teacher, scene)?;
                logit_parts.push(fwd.point_logits);
                batch_labels.extend_from_slice(&scene.labels);
            }
            let logits = tape.concat_rows(&logit_parts)?;
            let wce = weighted_ce(
                &tape,
                logits,
                &batch_labels,
                data.ignore_id,
                &data.class_weights,
            )?;
            let probs = tape.softmax_rows(logits);
            let lovasz = lovasz_softmax(&tape, probs, &batch_labels, data.ignore_id)?;
            let total = tape.add(wce, lovasz)?;

            let preds = argmax_rows(&tape.value(logits));
            cm.accumulate(&preds, &batch_labels, data.ignore_id);
            sums.wce += tape.value(wce).scalar_value()?;
            sums.lovasz += tape.value(lovasz).scalar_value()?;
            sums.total += tape.value(total).scalar_value()?;
            steps += 1;

            let grads = tape.backward(total)?;
            let bound = binder.bound();
            opt.step(&mut store, &bound, &grads);
        }
        let n = steps.max(1) as f64;
        report.epochs.push(EpochMetrics {
            epoch,
            wce: sums.wce / n,
            lovasz: sums.lovasz / n,
            vpd: 0.0,
            lwd: 0.0,
            logit: 0.0,
            total: sums.total / n,
            train_miou: cm.miou().map(|r| r.mean).unwrap_or(0.0),
        });
    }

    let checkpoint = Checkpoint {
        kind: CheckpointKind::Teacher,
        config: config.clone(),
        epoch: config.epochs,
        rng: train_rng,
        params: store,
    };
    Ok((checkpoint, report))
}

/// Trains the student against a frozen teacher with the configured
/// distillation terms. Returns the checkpoint (teacher, student and
/// distillation parameters) and the per-epoch report.
pub fn train_student(
    config: &TrainConfig,
    teacher_ckpt: &Checkpoint,
) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    if teacher_ckpt.kind != CheckpointKind::Teacher {
        return Err(Error::Config(
            "train_student needs a teacher checkpoint".into(),
        ));
    }
    if teacher_ckpt.config.grid != config.grid {
        return Err(Error::Config(
            "teacher checkpoint grid differs from the run config grid".into(),
        ));
    }
    if teacher_ckpt.config.c_v != config.c_v {
        return Err(Error::Config(
            "teacher checkpoint c_v differs from the run config".into(),
        ));
    }
    let data = build_dataset(config)?;
    let teacher = teacher_net();
    let head_classes = teacher_ckpt.params.get(&teacher.head.b).len();
    if head_classes != data.num_classes {
        return Err(Error::Config(format!(
            "teacher predicts {head_classes} classes but the dataset has {}",
            data.num_classes
        )));
    }

    let mut store = teacher_ckpt.params.clone();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT, 1));
    let student = student_net();
    student.init(
        &mut store,
        &mut init_rng,
        STUDENT_INPUT_WIDTH,
        config.c_b,
        data.num_classes,
    );
    let distill = DistillModel::new(config);
    distill.init(&mut store, &mut init_rng, config);

    let part = RegionPartition::new(config.lwd.k_rho, config.lwd.k_theta, &config.grid)?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_TRAIN, 1));
    let mut lwd_rng = ChaCha8Rng::seed_from_u64(
        config
            .lwd
            .seed
            .unwrap_or_else(|| derive_seed(config.seed, TAG_LWD, 0)),
    );
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut report = TrainReport::default();
    if config.ablation.vpd {
        report
            .alignment
            .push(measure_alignment(config, &store, &data.train, &distill)?);
    }

    for epoch in 0..config.epochs {
        let order = shuffled_indices(data.train.len(), &mut train_rng);
        let mut sums = LossComponents::default();
        let mut steps = 0usize;
        let mut cm = ConfusionMatrix::new(data.num_classes);
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let frozen = Binder::new(&tape, &store, false);
            let trainable = Binder::new(&tape, &store, true);

            let mut student_logit_parts = Vec::new();
            let mut teacher_point_logits: Vec<Tensor> = Vec::new();
            let mut batch_labels: Vec<u32> = Vec::new();
            let mut vpd_losses = Vec::new();
            let mut lwd_losses = Vec::new();
            for &si in batch {
                let scene = &data.train[si];
                let t_fwd = forward_teacher(&tape, &frozen, &teacher, scene)?;
                let s_fwd = forward_student(&tape, &trainable, &student, scene)?;
                batch_labels.extend_from_slice(&scene.labels);
                if config.ablation.logit_kd {
                    teacher_point_logits.push(tape.value(t_fwd.point_logits));
                }
                student_logit_parts.push(s_fwd.point_logits);
                if config.ablation.vpd {
                    let (loss, _) = vpd_scene_forward(
                        &tape,
                        &trainable,
                        scene,
                        &t_fwd.layer_feats,
                        &s_fwd.layer_feats,
                        &distill,
                        config,
                    )?;
                    vpd_losses.push(loss);
                }
                if config.lwd.enabled {
                    let selected = select_lwd_regions(scene, &part, config.lwd.m, &mut lwd_rng)?;
                    lwd_losses.push(lwd_scene_forward(
                        &tape,
                        &trainable,
                        scene,
                        &t_fwd.layer_feats,
                        &s_fwd.layer_feats,
                        &distill,
                        config,
                        &part,
                        &selected,
                    )?);
                }
            }
            let logits = tape.concat_rows(&student_logit_parts)?;
            let wce = weighted_ce(
                &tape,
                logits,
                &batch_labels,
                data.ignore_id,
                &data.class_weights,
            )?;
            let probs = tape.softmax_rows(logits);
            let lovasz = lovasz_softmax(&tape, probs, &batch_labels, data.ignore_id)?;
            let l_vpd = if config.ablation.vpd {
                let mut acc = vpd_losses[0];
                for &l in &vpd_losses[1..] {
                    acc = tape.add(acc, l)?;
                }
                tape.scale(acc, 1.0 / vpd_losses.len() as f64)
            } else {
                tape.constant(0.0)
            };
            let l_lwd = if config.lwd.enabled {
                let mut acc = lwd_losses[0];
                for &l in &lwd_losses[1..] {
                    acc = tape.add(acc, l)?;
                }
                tape.scale(acc, 1.0 / lwd_losses.len() as f64)
            } else {
                tape.constant(0.0)
            };
            let l_logit = if config.ablation.logit_kd {
                let mut rows = 0usize;
                let mut buf = Vec::new();
                for t in &teacher_point_logits {
                    rows += t.rows();
                    buf.extend_from_slice(t.data());
                }
                let teacher_concat = Tensor::matrix(rows, data.num_classes, buf);
                logit_kd(&tape, logits, &teacher_concat, config.temperature)?
            } else {
                tape.constant(0.0)
            };
            let total = total_loss(
                &tape,
                wce,
                lovasz,
                l_vpd,
                l_lwd,
                l_logit,
                &config.loss_weights,
            )?;

            let preds = argmax_rows(&tape.value(logits));
            cm.accumulate(&preds, &batch_labels, data.ignore_id);
            sums.wce += tape.value(wce).scalar_value()?;
            sums.lovasz += tape.value(lovasz).scalar_value()?;
            sums.vpd += tape.value(l_vpd).scalar_value()?;
            sums.lwd += tape.value(l_lwd).scalar_value()?;
            sums.logit += tape.value(l_logit).scalar_value()?;
            sums.total += tape.value(total).scalar_value()?;
            steps += 1;

            let grads = tape.backward(total)?;
            let bound = trainable.bound();
            opt.step(&mut store, &bound, &grads);
        }
        let n = steps.max(1) as f64;
        report.epochs.push(EpochMetrics {
            epoch,
            wce: sums.wce / n,
            lovasz: sums.lovasz / n,
            vpd: sums.vpd / n,
            lwd: sums.lwd / n,
            logit: sums.logit / n,
            total: sums.total / n,
            train_miou: cm.miou().map(|r| r.mean).unwrap_or(0.0),
        });
        if config.ablation.vpd {
            report
                .alignment
                .push(measure_alignment(config, &store, &data.train, &distill)?);
        }
    }

    let checkpoint = Checkpoint {
        kind: CheckpointKind::Student,
        config: config.clone(),
        epoch: config.epochs,
        rng: train_rng,
        params: store,
    };
    Ok((checkpoint, report))
}

/// Mean teacher-student row cosine over the training scenes with the
/// current parameters (no training side effects).
pub fn measure_alignment(
    config: &TrainConfig,
    store: &ParamStore,
    scenes: &[Scene],
    distill: &DistillModel,
) -> Result<f64> {
    let teacher = teacher_net();
    let student = student_net();
    let mut total = 0.0;
    let mut n = 0usize;
    for scene in scenes {
        if scene.matches.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, store, false);
        let t_fwd = forward_teacher(&tape, &binder, &teacher, scene)?;
        let s_fwd = forward_student(&tape, &binder, &student, scene)?;
        let (_, cos) = vpd_scene_forward(
            &tape,
            &binder,
            scene,
            &t_fwd.layer_feats,
            &s_fwd.layer_feats,
            distill,
            config,
        )?;
        total += cos;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Numeric(
            "alignment: no scene has matched columns".into(),
        ));
    }
    Ok(total / n as f64)
}

/// Per-point evaluation of a checkpoint over scenes: predictions come
/// from the voxel head (teacher) or pillar head (student).
pub fn evaluate(
    checkpoint: &Checkpoint,
    scenes: &[Scene],
    num_classes: usize,
) -> Result<(ConfusionMatrix, IouReport)> {
    if scenes.is_empty() {
        return Err(Error::Config("evaluate: the dataset is empty".into()));
    }
    let net = match checkpoint.kind {
        CheckpointKind::Teacher => teacher_net(),
        CheckpointKind::Student => student_net(),
    };
    let head_classes = checkpoint.params.get(&net.head.b).len();
    if head_classes != num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {head_classes} classes, dataset has {num_classes}"
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for scene in scenes {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &checkpoint.params, false);
        let fwd = match checkpoint.kind {
            CheckpointKind::Teacher => forward_teacher(&tape, &binder, &net, scene)?,
            CheckpointKind::Student => forward_student(&tape, &binder, &net, scene)?,
        };
        let preds = argmax_rows(&tape.value(fwd.point_logits));
        cm.accumulate(&preds, &scene.labels, scene.ignore_id);
    }
    let report = cm.miou()?;
    Ok((cm, report))
}

/// Per-point accuracy of a checkpoint over scenes.
pub fn point_accuracy(checkpoint: &Checkpoint, scenes: &[Scene]) -> Result<f64> {
    let net = match checkpoint.kind {
        CheckpointKind::Teacher => teacher_net(),
        CheckpointKind::Student => student_net(),
    };
    let mut correct = 0u64;
    let mut total = 0u64;
    for scene in scenes {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &checkpoint.params, false);
        let fwd = match checkpoint.kind {
            CheckpointKind::Teacher => forward_teacher(&tape, &binder, &net, scene)?,
            CheckpointKind::Student => forward_student(&tape, &binder, &net, scene)?,
        };
        let preds = argmax_rows(&tape.value(fwd.point_logits));
        for (&p, &t) in preds.iter().zip(&scene.labels) {
            if t == scene.ignore_id {
                continue;
            }
            total += 1;
            if p == t {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Numeric("accuracy: no supervised points".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Access for the gradient-check suite: builds the store, models and one
/// scene exactly as training would.
pub struct PipelineFixture {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub teacher: ToyNet,
    pub student: ToyNet,
    pub distill: DistillModel,
    pub scene: Scene,
    pub class_weights: Vec<f64>,
    pub ignore_id: u32,
    pub partition: RegionPartition,
    pub lwd_selected: Vec<usize>,
}

impl PipelineFixture {
    /// A miniature but fully wired pipeline with every enabled parameter
    /// registered; the LWD region selection is drawn once and frozen so
    /// the objective stays deterministic.
    pub fn build(config: &TrainConfig) -> Result<PipelineFixture> {
        config.validate()?;
        let data = build_dataset(config)?;
        let scene = data
            .train
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("fixture needs one scene".into()))?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT, 0));
        let teacher = teacher_net();
        teacher.init(
            &mut store,
            &mut rng,
            TEACHER_INPUT_WIDTH,
            config.c_v,
            data.num_classes,
        );
        let student = student_net();
        student.init(
            &mut store,
            &mut rng,
            STUDENT_INPUT_WIDTH,
            config.c_b,
            data.num_classes,
        );
        let distill = DistillModel::new(config);
        distill.init(&mut store, &mut rng, config);
        let partition = RegionPartition::new(config.lwd.k_rho, config.lwd.k_theta, &config.grid)?;
        let lwd_selected = if config.lwd.enabled {
            let mut lwd_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_LWD, 0));
            select_lwd_regions(&scene, &partition, config.lwd.m, &mut lwd_rng)?
        } else {
            Vec::new()
        };
        Ok(PipelineFixture {
            config: config.clone(),
            store,
            teacher,
            student,
            distill,
            scene,
            class_weights: data.class_weights,
            ignore_id: data.ignore_id,
            partition,
            lwd_selected,
        })
    }

    /// Parameter names the student step trains (everything but the
    /// teacher), in deterministic order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| !n.starts_with("teacher."))
            .cloned()
            .collect()
    }

    /// The full combined objective over the fixture scene, with `vars`
    /// overriding the named parameters (the gradient checker's probes).
    pub fn objective(
        &self,
        tape: &Tape,
        overrides: BTreeMap<String, Var>,
    ) -> Result<Var> {
        let binder = Binder::with_overrides(tape, &self.store, overrides);
        let scene = &self.scene;
        let t_fwd = forward_teacher(tape, &binder, &self.teacher, scene)?;
        let s_fwd = forward_student(tape, &binder, &self.student, scene)?;
        let wce = weighted_ce(
            tape,
            s_fwd.point_logits,
            &scene.labels,
            self.ignore_id,
            &self.class_weights,
        )?;
        let probs = tape.softmax_rows(s_fwd.point_logits);
        let lovasz = lovasz_softmax(tape, probs, &scene.labels, self.ignore_id)?;
        let l_vpd = if self.config.ablation.vpd {
            vpd_scene_forward(
                tape,
                &binder,
                scene,
                &t_fwd.layer_feats,
                &s_fwd.layer_feats,
                &self.distill,
                &self.config,
            )?
            .0
        } else {
            tape.constant(0.0)
        };
        let l_lwd = if self.config.lwd.enabled {
            lwd_scene_forward(
                tape,
                &binder,
                scene,
                &t_fwd.layer_feats,
                &s_fwd.layer_feats,
                &self.distill,
                &self.config,
                &self.partition,
                &self.lwd_selected,
            )?
        } else {
            tape.constant(0.0)
        };
        let l_logit = if self.config.ablation.logit_kd {
            let teacher_values = tape.value(t_fwd.point_logits);
            logit_kd(tape, s_fwd.point_logits, &teacher_values, self.config.temperature)?
        } else {
            tape.constant(0.0)
        };
        total_loss(
            tape,
            wce,
            lovasz,
            l_vpd,
            l_lwd,
            l_logit,
            &self.config.loss_weights,
        )
    }
}
