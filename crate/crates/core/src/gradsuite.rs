//! Finite-difference checks of every differentiable component, at 64 bits.

use rand::Rng;

use crate::error::Result;
use crate::loss::{cmpc_loss, cmpm_loss, total_loss, LossConfig};
use crate::model::{gate_apply, Binder, BnMode, DualPath, Init, ModelConfig, PathConfig, PoolMode, StageSpec};
use crate::rng::substream;
use crate::tensor::{grad_check_sampled, GradCheckReport, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const MAX_COORDS: usize = 48;

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Uniform values plus a distinct per-position offset, so no two entries
/// tie within the finite-difference step.
fn untied(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = uniform(shape, rng);
    let mut order: Vec<usize> = (0..t.numel()).collect();
    order.sort_by(|&a, &b| t.data()[a].total_cmp(&t.data()[b]));
    for (rank, &i) in order.iter().enumerate() {
        t.data_mut()[i] += rank as f64 * 1e-3;
    }
    t
}

/// `Σ x ⊙ r` with a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every element.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = substream(seed, "gradsuite-projection", &[]);
    let r = tape.constant(uniform(tape.shape(x), &mut rng));
    let prod = tape.mul(x, r)?;
    tape.sum(prod)
}

/// Small but complete dual-path network used for the composite check.
pub fn tiny_model_config() -> ModelConfig {
    let stages = |strides: [(usize, usize); 4]| -> Vec<StageSpec> {
        [2, 2, 3, 4]
            .into_iter()
            .zip(strides)
            .map(|(width, stride)| StageSpec {
                blocks: 1,
                width,
                stride,
            })
            .collect()
    };
    let mut vision = PathConfig::vision_desk();
    vision.stem.width = 2;
    vision.stages = stages([(1, 1), (2, 2), (2, 2), (2, 2)]);
    let mut text = PathConfig::text_desk(4);
    text.stem.width = 2;
    text.stages = stages([(1, 1), (1, 2), (1, 2), (1, 1)]);
    text.init = Init::Xavier;
    ModelConfig {
        vision,
        text,
        pool: PoolMode::Gmp,
        gated: true,
        reduction: 2,
        num_classes: 3,
    }
}

fn check_cmpm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradsuite", &[0]);
    let pts = [uniform(&[4, 6], &mut rng), uniform(&[4, 6], &mut rng)];
    grad_check_sampled(
        |t, v| Ok(cmpm_loss(t, v[0], v[1], &[0, 1, 0, 2], crate::loss::DEFAULT_EPS)?.total),
        &pts,
        STEP,
        MAX_COORDS,
        seed,
    )
}

fn check_cmpc(seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradsuite", &[1]);
    let pts = [uniform(&[4, 6], &mut rng), uniform(&[4, 6], &mut rng), uniform(&[6, 3], &mut rng)];
    grad_check_sampled(
        |t, v| Ok(cmpc_loss(t, v[0], v[1], v[2], &[0, 1, 0, 2])?.total),
        &pts,
        STEP,
        MAX_COORDS,
        seed,
    )
}

fn check_gate(seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradsuite", &[2]);
    let pts = [untied(&[3, 8], &mut rng), uniform(&[2, 8], &mut rng), uniform(&[8, 2], &mut rng)];
    grad_check_sampled(
        |t, v| {
            let y = gate_apply(t, v[0], v[1], v[2])?;
            project(t, y, seed)
        },
        &pts,
        STEP,
        MAX_COORDS,
        seed,
    )
}

fn check_gmp(seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradsuite", &[3]);
    let pts = [untied(&[2, 3, 2, 4], &mut rng)];
    grad_check_sampled(
        |t, v| {
            let y = t.global_max_pool(v[0])?;
            project(t, y, seed)
        },
        &pts,
        STEP,
        MAX_COORDS,
        seed,
    )
}

fn check_gap(seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradsuite", &[4]);
    let pts = [uniform(&[2, 3, 2, 4], &mut rng)];
    grad_check_sampled(
        |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, seed)
        },
        &pts,
        STEP,
        MAX_COORDS,
        seed,
    )
}

fn check_conv(seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradsuite", &[5]);
    let pts = [uniform(&[2, 5, 4, 3], &mut rng), uniform(&[3, 3, 3, 2], &mut rng)];
    grad_check_sampled(
        |t, v| {
            let y = t.conv2d(v[0], v[1], (2, 2), (1, 1))?;
            project(t, y, seed)
        },
        &pts,
        STEP,
        MAX_COORDS,
        seed,
    )
}

/// Images and captions through both paths, gates, heads and the total
/// loss, differentiated with respect to the inputs and a spread of weights.
fn check_dual_path(seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_model_config();
    let (model, store32) = DualPath::new(cfg, seed)?;
    let store = store32.cast::<f64>();
    let weights = [
        "vision.stage2.block0.conv1.weight",
        "vision.stem.bn.gamma",
        "text.stem.weight",
        "text.stage3.block0.conv2.weight",
        "vision_gate.w1",
        "text_gate.w2",
        "vision_head.weight",
        "text_head.bias",
        "classifier",
    ];
    let ids: Vec<_> = weights.iter().map(|n| store.id(n).expect("tiny model tensor")).collect();
    let mut rng = substream(seed, "gradsuite", &[6]);
    let mut pts = vec![uniform(&[3, 32, 32, 3], &mut rng), uniform(&[3, 1, 8, 4], &mut rng)];
    pts.extend(ids.iter().map(|&id| store.get(id).clone()));
    let labels = [0, 1, 2];
    grad_check_sampled(
        |t, v| {
            let mut b = Binder::frozen(t, &store);
            for (&id, &var) in ids.iter().zip(&v[2..]) {
                b.bind_as(id, var)?;
            }
            let vd = model.encode_images(&mut b, v[0], BnMode::Train)?;
            let td = model.encode_text(&mut b, v[1], BnMode::Train)?;
            let w = b.var(model.classifier());
            total_loss(b.tape, vd, td, w, &labels, &LossConfig::default())
        },
        &pts,
        STEP,
        MAX_COORDS,
        seed,
    )
}

/// Runs every check; `(component, report)` in a fixed order.
pub fn run_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(vec![
        ("cmpm_loss", check_cmpm(seed)?),
        ("cmpc_loss", check_cmpc(seed)?),
        ("gate_apply", check_gate(seed)?),
        ("global_max_pool", check_gmp(seed)?),
        ("global_avg_pool", check_gap(seed)?),
        ("conv2d", check_conv(seed)?),
        ("dual_path", check_dual_path(seed)?),
    ])
}
