#![allow(dead_code)]

use freqmix::attention::{
    block_maps_pooled, fuse_maps, hfab_forward, lfab_forward, sab_forward, tab_forward, Affine, AttentionMaps,
    MixedBlockParams, QKProjector, TemporalBlockParams,
};
use freqmix::frequency::{spectral_pool, Band, FrequencyAxis, FrequencyConfig};
use freqmix::model::{
    channel_split, embed, gradcheck_model, residual_reweight, Branch, ModelConfig, ModelParams, OperatorMode,
};
use freqmix::rng::Rng;
use freqmix::tensor::gradcheck::{grad_check, GradCheckReport};
use freqmix::{Result, Tensor};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

// Block-test dims: J = 4, C_e = 8 (units of 4), F = 6, d = 4.
pub const J: usize = 4;
pub const CE: usize = 8;
pub const CU: usize = CE / 2;
pub const F: usize = 6;
pub const D: usize = 4;

pub fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn uniform(rng: &mut Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-r, r)).collect()).unwrap()
}

pub fn affine(rng: &mut Rng, i: usize, o: usize) -> Affine {
    let bound = (6.0 / (i + o) as f64).sqrt();
    Affine { weight: uniform(rng, &[i, o], bound), bias: uniform(rng, &[o], 0.1) }
}

pub fn mixed_block(rng: &mut Rng, c: usize, d: usize) -> MixedBlockParams {
    let mut proj = || QKProjector { q: affine(rng, c, d), k: affine(rng, c, d) };
    MixedBlockParams { unit1: proj(), unit2: proj() }
}

pub fn freq_cfg() -> FrequencyConfig {
    FrequencyConfig::new(3, 0.2, 1.2, FrequencyAxis::Temporal)
}

fn affine_leaves(a: &Affine) -> [Tensor; 2] {
    [a.weight.clone(), a.bias.clone()]
}

fn affine_from(x: &[Tensor]) -> Affine {
    Affine { weight: x[0].clone(), bias: x[1].clone() }
}

fn block_leaves(b: &MixedBlockParams) -> Vec<Tensor> {
    [&b.unit1.q, &b.unit1.k, &b.unit2.q, &b.unit2.k].into_iter().flat_map(affine_leaves).collect()
}

fn block_from(x: &[Tensor]) -> MixedBlockParams {
    MixedBlockParams {
        unit1: QKProjector { q: affine_from(&x[0..2]), k: affine_from(&x[2..4]) },
        unit2: QKProjector { q: affine_from(&x[4..6]), k: affine_from(&x[6..8]) },
    }
}

fn named(label: &str, leaves: Vec<Tensor>) -> Vec<(String, Tensor)> {
    leaves.into_iter().enumerate().map(|(i, t)| (format!("{label}.{i}"), t)).collect()
}

fn readout(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.sum_all())
}

// Gradient check of a spatial or frequency block through a random read-out
// of its self and mix maps, over both inputs and all eight projections.
fn check_mixed(
    label: &str,
    rng: &mut Rng,
    block: impl Fn(&Tensor, &Tensor, &MixedBlockParams) -> Result<AttentionMaps>,
) -> GradCheckReport {
    let (x1, x2) = (normal(rng, &[J, CU, F]), normal(rng, &[J, CU, F]));
    let params = mixed_block(rng, CU, D);
    let (w1, w2) = (normal(rng, &[J, J]), normal(rng, &[J, J]));
    let mut leaves = vec![x1, x2];
    leaves.extend(block_leaves(&params));
    grad_check(
        |x| {
            let m = block(&x[0], &x[1], &block_from(&x[2..]))?;
            readout(&m.self_map, &w1)?.add(&readout(&m.mix_map, &w2)?)
        },
        &named(label, leaves),
        EPS,
        TOL,
        0,
    )
    .unwrap()
}

/// One report per block type plus the tiny end-to-end model.
pub fn block_gradchecks(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = Rng::new(seed);
    let cfg = freq_cfg();
    let mut out = Vec::new();
    out.push(("sab", check_mixed("sab", &mut rng, sab_forward)));
    out.push(("hfab", check_mixed("hfab", &mut rng, |a, b, p| hfab_forward(a, b, &cfg, p))));
    out.push(("lfab", check_mixed("lfab", &mut rng, |a, b, p| lfab_forward(a, b, &cfg, p))));

    let maps: Vec<Tensor> = (0..3).map(|_| normal(&mut rng, &[J, J])).collect();
    let v = normal(&mut rng, &[J, CE, F]);
    let proj = affine(&mut rng, 3 * CE, CE);
    let w = normal(&mut rng, &[J, CE, F]);
    let mut leaves = maps;
    leaves.push(v);
    leaves.extend(affine_leaves(&proj));
    let fusion = grad_check(
        |x| readout(&fuse_maps(&x[0..3], &x[3], &affine_from(&x[4..6]))?, &w),
        &named("fusion", leaves),
        EPS,
        TOL,
        0,
    )
    .unwrap();
    out.push(("fusion", fusion));

    let x_t = normal(&mut rng, &[J, CE, F]);
    let (q, k, v) = (affine(&mut rng, CE, D), affine(&mut rng, CE, D), affine(&mut rng, CE, CE));
    let w = normal(&mut rng, &[J, CE, F]);
    let mut leaves = vec![x_t];
    for a in [&q, &k, &v] {
        leaves.extend(affine_leaves(a));
    }
    let tab = grad_check(
        |x| {
            let p = TemporalBlockParams {
                groups: 2,
                q: affine_from(&x[1..3]),
                k: affine_from(&x[3..5]),
                v: affine_from(&x[5..7]),
            };
            readout(&tab_forward(&x[0], &p)?.out, &w)
        },
        &named("tab", leaves),
        EPS,
        TOL,
        0,
    )
    .unwrap();
    out.push(("tab", tab));

    let x_t = normal(&mut rng, &[J, CE, F]);
    let head = affine(&mut rng, CE, 3);
    let mut leaves = vec![x_t];
    leaves.extend(affine_leaves(&head));
    let head = grad_check(
        |x| {
            let pooled = x[0].mean_axis(2)?.mean_axis(0)?.reshape(&[1, CE])?;
            affine_from(&x[1..3]).apply(&pooled)?.cross_entropy(&[2])
        },
        &named("head", leaves),
        EPS,
        TOL,
        0,
    )
    .unwrap();
    out.push(("head", head));

    out.push(("model", gradcheck_model(&ModelConfig::tiny(), seed, 2, EPS, TOL, 0).unwrap()));
    out
}

/// Maps of every block of every branch, rebuilt from public pieces.
/// Temporal frequency axis only.
pub fn all_block_maps(x: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Vec<(Branch, Vec<AttentionMaps>)> {
    assert_eq!(cfg.freq.axis, FrequencyAxis::Temporal);
    let (x1, x2) = channel_split(&embed(x, params).unwrap()).unwrap();
    let mut out = Vec::new();
    for (branch, blocks) in [(Branch::Spatial, &params.sab), (Branch::High, &params.hfab), (Branch::Low, &params.lfab)]
    {
        if blocks.is_empty() {
            continue;
        }
        let band = match (branch, cfg.operator) {
            (Branch::Spatial, _) => None,
            (_, OperatorMode::Uniform) => Some(Band::Uniform),
            (Branch::High, _) => Some(Band::High),
            (Branch::Low, _) => Some(Band::Low),
        };
        let pool = |u: &Tensor| match band {
            None => u.mean_axis(2).unwrap(),
            Some(b) => spectral_pool(u, &cfg.freq, b).unwrap(),
        };
        let (mut r1, mut r2) = (pool(&x1), pool(&x2));
        let mut maps: Vec<AttentionMaps> = Vec::new();
        for block in blocks.iter() {
            if let Some(prev) = maps.last() {
                r1 = residual_reweight(&r1, &prev.fused).unwrap();
                r2 = residual_reweight(&r2, &prev.fused).unwrap();
            }
            maps.push(block_maps_pooled(&r1, &r2, block).unwrap());
        }
        out.push((branch, maps));
    }
    out
}

/// Largest deviation of any row sum of a square map from `target`.
pub fn row_sum_error(m: &Tensor, target: f64) -> f64 {
    let n = m.shape()[1];
    m.data().chunks(n).map(|r| (r.iter().sum::<f64>() - target).abs()).fold(0.0, f64::max)
}
