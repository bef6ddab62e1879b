//! The pipeline-level gradient verification suite.
//!
//! Runs central finite differences against the tape gradients of every
//! differentiable stage — domain transfer, cross-attention, the
//! voxel-to-pillar loss, height embedding, two-stage compression, the
//! label-weight loss, the segmentation and logit losses, and the full
//! combined objective over a miniature but fully wired pipeline.
//!
//! A finite difference at step `h` is only meaningful where the function
//! is differentiable across the whole probe interval, so fixtures are
//! screened by the tape's switch margin (distance to the nearest ReLU
//! kink or max tie) and a case may try a handful of screened candidates:
//! a genuine backward bug fails at every candidate, a probe that grazed
//! a switch only at that one point.

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::compress::ZConvParams;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, FiniteDiffReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::grid::{GridSpec, SparseVoxelGrid, VoxelCoord};
use crate::loss::{logit_kd, lovasz_softmax, weighted_ce};
use crate::lwd::{compress_two_stage, height_embed, lwd_loss, HeightEmbedding, TwoStageParams};
use crate::synth::SynthClassSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::PipelineFixture;
use crate::vpd::{
    cross_attention, domain_transfer, vpd_layer_loss, CrossAttentionParams, DomainTransferParams,
};

/// One verified stage.
#[derive(Debug, Clone)]
pub struct GradSuiteCase {
    pub name: String,
    pub report: FiniteDiffReport,
    pub pass: bool,
}

/// Minimum distance to a ReLU kink or max tie a fixture must keep.
const SWITCH_MARGIN: f64 = 1e-4;
/// Screened fixtures a case may try before reporting its last result.
/// The analytic gradient is the same code at every fixture, so a true
/// defect fails all of them; a probe that grazed a switch fails one.
const MAX_CANDIDATES: usize = 8;

fn pseudo(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut z = (salt << 32)
                .wrapping_add(i as u64)
                .wrapping_add(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z & 0xFFFF) as f64 / 32768.0 - 1.0
        })
        .collect()
}

fn fixture_grid(nz: usize, c: usize, salt: u64) -> SparseVoxelGrid {
    let mut coords = vec![
        VoxelCoord { rho: 1, theta: 2, z: 0 },
        VoxelCoord { rho: 1, theta: 2, z: nz - 1 },
        VoxelCoord { rho: 4, theta: 7, z: 2 % nz },
        VoxelCoord { rho: 9, theta: 3, z: 1 % nz },
        VoxelCoord { rho: 9, theta: 3, z: 3 % nz },
    ];
    coords.sort_unstable();
    coords.dedup();
    let n = coords.len();
    SparseVoxelGrid {
        spec: GridSpec::desk_default(),
        coords,
        feats: Tensor::matrix(n, c, pseudo(n * c, salt)),
        point_count: vec![1; n],
        dropped_points: 0,
    }
}

/// A miniature pipeline for the full-objective sweep: a single sparse
/// scene and clamped feature widths. Probing thousands of parameter
/// elements twice each is quadratic in width, and small fixtures also
/// keep enough clearance from ReLU kinks for the finite differences to
/// be meaningful.
fn shrink_for_gradcheck(config: &TrainConfig) -> TrainConfig {
    let mut small = config.clone();
    small.c_v = small.c_v.min(6);
    small.c_b = small.c_b.min(6);
    small.dataset = crate::config::DatasetConfig::Synthetic {
        scenes: 1,
        val_scenes: 0,
        classes: Some(
            crate::synth::default_classes()
                .into_iter()
                .map(|c| SynthClassSpec {
                    count: (c.count / 16).max(6),
                    ..c
                })
                .collect(),
        ),
    };
    small
}

type CaseFn = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;
type CaseBuilder<'a> = Box<dyn Fn(u64) -> Result<(Vec<(String, Tensor)>, CaseFn)> + 'a>;

/// Runs every case at `h = 1e-5` against the `1e-4` relative tolerance.
pub fn gradcheck_suite(config: &TrainConfig) -> Result<Vec<GradSuiteCase>> {
    gradcheck_suite_inner(config, None)
}

/// Test hook: `corrupt` names a case whose analytic pass is deliberately
/// scaled, which must surface as a failure of exactly that case.
pub fn gradcheck_suite_inner(
    config: &TrainConfig,
    corrupt: Option<&str>,
) -> Result<Vec<GradSuiteCase>> {
    let c_b = config.c_b.clamp(2, 8);
    let c_v = config.c_v.clamp(2, 8);
    let nz = config.grid.z_bins;
    let n = 5usize;
    let temperature = config.temperature;
    let small = shrink_for_gradcheck(config);

    let builders: Vec<(&str, CaseBuilder)> = vec![
        (
            "domain_transfer",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let params = vec![
                    ("x".to_string(), Tensor::matrix(n, c_b, pseudo(n * c_b, s + 1)).with_grad()),
                    ("w1".to_string(), Tensor::matrix(c_b, c_b, pseudo(c_b * c_b, s + 2)).with_grad()),
                    ("b1".to_string(), Tensor::new(vec![c_b], pseudo(c_b, s + 3)).with_grad()),
                    ("gamma".to_string(), Tensor::new(vec![c_b], vec![1.0; c_b]).with_grad()),
                    ("beta".to_string(), Tensor::new(vec![c_b], pseudo(c_b, s + 4)).with_grad()),
                    ("w2".to_string(), Tensor::matrix(c_b, c_b, pseudo(c_b * c_b, s + 5)).with_grad()),
                    ("b2".to_string(), Tensor::new(vec![c_b], pseudo(c_b, s + 6)).with_grad()),
                ];
                let f: CaseFn = Box::new(|tape, vars| {
                    let p = DomainTransferParams {
                        w1: vars[1],
                        b1: vars[2],
                        gamma: vars[3],
                        beta: vars[4],
                        w2: vars[5],
                        b2: vars[6],
                    };
                    let out = domain_transfer(tape, vars[0], &p)?;
                    Ok(tape.sum_all(tape.mul(out, out)?))
                });
                Ok((params, f))
            }),
        ),
        (
            "cross_attention",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let params = vec![
                    ("f_v".to_string(), Tensor::matrix(n, c_b, pseudo(n * c_b, s + 7)).with_grad()),
                    ("f_b".to_string(), Tensor::matrix(n, c_b, pseudo(n * c_b, s + 8)).with_grad()),
                    ("wq".to_string(), Tensor::matrix(c_b, c_b, pseudo(c_b * c_b, s + 9)).with_grad()),
                    ("wk".to_string(), Tensor::matrix(c_b, c_b, pseudo(c_b * c_b, s + 10)).with_grad()),
                    ("wv".to_string(), Tensor::matrix(c_b, c_b, pseudo(c_b * c_b, s + 11)).with_grad()),
                ];
                let f: CaseFn = Box::new(|tape, vars| {
                    let p = CrossAttentionParams {
                        wq: vars[2],
                        wk: vars[3],
                        wv: vars[4],
                    };
                    let out = cross_attention(tape, vars[0], vars[1], &p)?;
                    Ok(tape.sum_all(tape.mul(out, out)?))
                });
                Ok((params, f))
            }),
        ),
        (
            "vpd_loss",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let params = vec![
                    ("f_b_prime".to_string(), Tensor::matrix(n, c_b, pseudo(n * c_b, s + 12)).with_grad()),
                    ("f_v".to_string(), Tensor::matrix(n, c_b, pseudo(n * c_b, s + 13)).with_grad()),
                ];
                let f: CaseFn = Box::new(|tape, vars| vpd_layer_loss(tape, vars[0], vars[1]));
                Ok((params, f))
            }),
        ),
        (
            "height_embed",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let grid = fixture_grid(nz, c_v, s + 20);
                let params = vec![
                    ("feats".to_string(), grid.feats.clone().with_grad()),
                    ("table".to_string(), Tensor::matrix(nz, c_v, pseudo(nz * c_v, s + 21)).with_grad()),
                ];
                let f: CaseFn = Box::new(move |tape, vars| {
                    let embed = HeightEmbedding { table: vars[1] };
                    let out = height_embed(tape, &grid, vars[0], &embed)?;
                    Ok(tape.sum_all(tape.mul(out, out)?))
                });
                Ok((params, f))
            }),
        ),
        (
            "two_stage_compress",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let grid = fixture_grid(nz, c_v, s + 22);
                let params = vec![
                    ("feats".to_string(), grid.feats.clone().with_grad()),
                    ("w1".to_string(), Tensor::matrix(nz * c_v, c_v, pseudo(nz * c_v * c_v, s + 23)).with_grad()),
                    ("b1".to_string(), Tensor::new(vec![c_v], pseudo(c_v, s + 24)).with_grad()),
                    ("w2".to_string(), Tensor::matrix(nz * c_v, c_b, pseudo(nz * c_v * c_b, s + 25)).with_grad()),
                    ("b2".to_string(), Tensor::new(vec![c_b], pseudo(c_b, s + 26)).with_grad()),
                ];
                let f: CaseFn = Box::new(move |tape, vars| {
                    let p = TwoStageParams {
                        stage1: ZConvParams { weight: vars[1], bias: vars[2], nz },
                        stage2: ZConvParams { weight: vars[3], bias: vars[4], nz },
                    };
                    let out = compress_two_stage(tape, &grid, vars[0], &p)?;
                    Ok(tape.sum_all(tape.mul(out, out)?))
                });
                Ok((params, f))
            }),
        ),
        (
            "lwd_loss",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let params = vec![
                    ("f_b".to_string(), Tensor::matrix(n, c_b, pseudo(n * c_b, s + 27)).with_grad()),
                    ("f_v".to_string(), Tensor::matrix(n, c_b, pseudo(n * c_b, s + 28)).with_grad()),
                ];
                let f: CaseFn = Box::new(|tape, vars| lwd_loss(tape, vars[0], vars[1]));
                Ok((params, f))
            }),
        ),
        (
            "weighted_ce",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let classes = 4usize;
                let params = vec![(
                    "logits".to_string(),
                    Tensor::matrix(6, classes, pseudo(6 * classes, s + 29)).with_grad(),
                )];
                let f: CaseFn = Box::new(move |tape, vars| {
                    weighted_ce(tape, vars[0], &[0, 2, 1, 3, 255, 0], 255, &[1.0, 2.0, 0.5, 1.5])
                });
                Ok((params, f))
            }),
        ),
        (
            "lovasz_softmax",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let classes = 3usize;
                let params = vec![(
                    "logits".to_string(),
                    Tensor::matrix(6, classes, pseudo(6 * classes, s + 30)).with_grad(),
                )];
                let f: CaseFn = Box::new(move |tape, vars| {
                    let probs = tape.softmax_rows(vars[0]);
                    lovasz_softmax(tape, probs, &[0, 1, 2, 1, 0, 2], 255)
                });
                Ok((params, f))
            }),
        ),
        (
            "logit_kd",
            Box::new(move |attempt| {
                let s = attempt * 100;
                let classes = 4usize;
                let teacher = Tensor::matrix(5, classes, pseudo(5 * classes, s + 31));
                let params = vec![(
                    "student".to_string(),
                    Tensor::matrix(5, classes, pseudo(5 * classes, s + 32)).with_grad(),
                )];
                let f: CaseFn =
                    Box::new(move |tape, vars| logit_kd(tape, vars[0], &teacher, temperature));
                Ok((params, f))
            }),
        ),
        (
            "total_objective",
            Box::new(move |attempt| {
                let mut candidate = small.clone();
                candidate.seed = crate::train::derive_seed(small.seed, 0x61D5, attempt);
                let fixture = PipelineFixture::build(&candidate)?;
                let names = fixture.trainable_names();
                let params: Vec<(String, Tensor)> = names
                    .iter()
                    .map(|n| (n.clone(), fixture.store.get(n).clone().with_grad()))
                    .collect();
                let f: CaseFn = Box::new(move |tape, vars| {
                    let overrides: BTreeMap<String, Var> = names
                        .iter()
                        .cloned()
                        .zip(vars.iter().copied())
                        .collect();
                    fixture.objective(tape, overrides)
                });
                Ok((params, f))
            }),
        ),
    ];

    let mut out = Vec::new();
    for (name, builder) in builders {
        let corrupted = corrupt == Some(name);
        let mut last: Option<FiniteDiffReport> = None;
        let mut tried = 0usize;
        for attempt in 0..64u64 {
            let (params, f) = builder(attempt)?;
            // screen: the probe interval must not contain a switch
            let tape = Tape::new();
            let vars: Vec<Var> = params
                .iter()
                .map(|(_, t)| tape.leaf(t.clone().with_grad()))
                .collect();
            f(&tape, &vars)?;
            if tape.switch_margin() <= SWITCH_MARGIN {
                continue;
            }
            tried += 1;
            let calls = Cell::new(0usize);
            let wrapped = |tape: &Tape, vars: &[Var]| -> Result<Var> {
                let loss = f(tape, vars)?;
                let k = calls.get();
                calls.set(k + 1);
                if corrupted && k == 0 {
                    return Ok(tape.scale(loss, 2.0));
                }
                Ok(loss)
            };
            let borrowed: Vec<(&str, Tensor)> = params
                .iter()
                .map(|(n, t)| (n.as_str(), t.clone()))
                .collect();
            let report = finite_diff_check(&borrowed, DEFAULT_STEP, wrapped)?;
            let pass = report.passes(DEFAULT_TOLERANCE);
            last = Some(report);
            if pass || tried >= MAX_CANDIDATES {
                break;
            }
        }
        let report = last.ok_or_else(|| {
            crate::error::Error::Numeric(format!(
                "gradcheck {name}: no kink-safe fixture found in 64 attempts"
            ))
        })?;
        let pass = report.passes(DEFAULT_TOLERANCE);
        out.push(GradSuiteCase {
            name: name.to_string(),
            report,
            pass,
        });
    }
    Ok(out)
}
