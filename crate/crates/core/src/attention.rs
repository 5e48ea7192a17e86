//! Spatial, frequency and temporal attention blocks and map fusion.
//!
//! Spatial and frequency blocks only ever look at their input units through
//! a pooled `J×(C/2)` summary, so the `*_pooled` entry points take that
//! summary directly; the unit-tensor entry points pool and delegate.

use crate::error::{Error, Result};
use crate::frequency::{spectral_pool, Band, FrequencyConfig};
use crate::tensor::Tensor;

/// `x W + b`; `weight` is `in×out`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Over the last axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.affine(&self.weight, &self.bias)
    }

    /// Over an arbitrary axis.
    pub fn apply_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let wt = self.weight.permute(&[1, 0])?;
        x.mix_axis(&wt, axis)?.add_broadcast(&self.bias, &[axis])
    }
}

/// Query/key projection for one unit: pooled features, then `relu(affine)`.
#[derive(Clone, Debug)]
pub struct QKProjector {
    pub q: Affine,
    pub k: Affine,
}

impl QKProjector {
    pub fn d(&self) -> usize {
        self.q.out_dim()
    }

    pub fn project_pooled(&self, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        if pooled.rank() != 2 || pooled.shape()[1] != self.q.in_dim() {
            return Err(Error::dim(
                "qk_project",
                format!("pooled {:?} for projector input {}", pooled.shape(), self.q.in_dim()),
            ));
        }
        Ok((self.q.apply(pooled)?.relu(), self.k.apply(pooled)?.relu()))
    }
}

/// Mean over frames, then the projector.
pub fn qk_project(x_unit: &Tensor, p: &QKProjector) -> Result<(Tensor, Tensor)> {
    if x_unit.rank() != 3 {
        return Err(Error::dim("qk_project", format!("expected J×C×F, got {:?}", x_unit.shape())));
    }
    p.project_pooled(&x_unit.mean_axis(2)?)
}

#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub self_map: Tensor,
    pub mix_map: Tensor,
    pub fused: Tensor,
}

pub fn mixed_attention_pair(q1: &Tensor, k1: &Tensor, q2: &Tensor) -> Result<AttentionMaps> {
    let d = q1.shape().last().copied().unwrap_or(0);
    if q1.rank() != 2 || k1.shape() != q1.shape() || q2.shape() != q1.shape() {
        return Err(Error::dim(
            "mixed_attention",
            format!("Q1 {:?}, K1 {:?}, Q2 {:?}", q1.shape(), k1.shape(), q2.shape()),
        ));
    }
    let kt = k1.permute(&[1, 0])?;
    let scale = 1.0 / (d as f64).sqrt();
    let self_map = q1.matmul(&kt)?.scale(scale).softmax_lastdim()?;
    let mix_map = q2.matmul(&kt)?.scale(scale).softmax_lastdim()?;
    let fused = self_map.add(&mix_map)?;
    Ok(AttentionMaps { self_map, mix_map, fused })
}

/// Projectors for the two units of one spatial or frequency block. The
/// second unit's key projection exists but the mixed pair never reads it.
#[derive(Clone, Debug)]
pub struct MixedBlockParams {
    pub unit1: QKProjector,
    pub unit2: QKProjector,
}

pub fn block_maps_pooled(p1: &Tensor, p2: &Tensor, params: &MixedBlockParams) -> Result<AttentionMaps> {
    let (q1, k1) = params.unit1.project_pooled(p1)?;
    let (q2, _k2) = params.unit2.project_pooled(p2)?;
    mixed_attention_pair(&q1, &k1, &q2)
}

pub fn sab_forward(x1: &Tensor, x2: &Tensor, params: &MixedBlockParams) -> Result<AttentionMaps> {
    block_maps_pooled(&x1.mean_axis(2)?, &x2.mean_axis(2)?, params)
}

/// Frequency block with the given band operator.
pub fn frequency_block_forward(
    x1: &Tensor,
    x2: &Tensor,
    cfg: &FrequencyConfig,
    band: Band,
    params: &MixedBlockParams,
) -> Result<AttentionMaps> {
    let p1 = spectral_pool(x1, cfg, band)?;
    let p2 = spectral_pool(x2, cfg, band)?;
    block_maps_pooled(&p1, &p2, params)
}

pub fn hfab_forward(
    x1: &Tensor,
    x2: &Tensor,
    cfg: &FrequencyConfig,
    params: &MixedBlockParams,
) -> Result<AttentionMaps> {
    frequency_block_forward(x1, x2, cfg, Band::High, params)
}

pub fn lfab_forward(
    x1: &Tensor,
    x2: &Tensor,
    cfg: &FrequencyConfig,
    params: &MixedBlockParams,
) -> Result<AttentionMaps> {
    frequency_block_forward(x1, x2, cfg, Band::Low, params)
}

/// Apply each `J×J` map to `v` over joints, stack the results on channels
/// and project back to `C_e` channels.
pub fn fuse_maps(maps: &[Tensor], v: &Tensor, proj: &Affine) -> Result<Tensor> {
    if v.rank() != 3 {
        return Err(Error::dim("fuse_maps", format!("V must be J×C×F, got {:?}", v.shape())));
    }
    if proj.in_dim() != maps.len() * v.shape()[1] || proj.out_dim() != v.shape()[1] {
        return Err(Error::dim(
            "fuse_maps",
            format!(
                "{} maps over {} channels need a {}→{} projection, got {:?}",
                maps.len(),
                v.shape()[1],
                maps.len() * v.shape()[1],
                v.shape()[1],
                proj.weight.shape()
            ),
        ));
    }
    let applied = maps.iter().map(|m| v.mix_axis(m, 0)).collect::<Result<Vec<_>>>()?;
    proj.apply_axis(&Tensor::concat(&applied, 1)?, 1)
}

/// Index table for the group-transpose channel permutation: channels viewed
/// as `g × (C/g)`, transposed, flattened.
pub fn channel_transform_index(channels: usize, g: usize) -> Result<Vec<usize>> {
    if g == 0 || !channels.is_multiple_of(g) {
        return Err(Error::Config(format!("{g} groups do not divide {channels} channels")));
    }
    let per = channels / g;
    Ok((0..channels).map(|p| (p % g) * per + p / g).collect())
}

pub fn channel_transform(x: &Tensor, g: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim("channel_transform", format!("expected J×C×F, got {:?}", x.shape())));
    }
    x.gather_axis(1, &channel_transform_index(x.shape()[1], g)?)
}

#[derive(Clone, Debug)]
pub struct TemporalBlockParams {
    pub groups: usize,
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
}

#[derive(Clone, Debug)]
pub struct TemporalOutput {
    pub out: Tensor,
    /// `F×F`, entries in (0.5, sigmoid(1)].
    pub map: Tensor,
}

/// Temporal attention. The frame mixing averages over source frames
/// (`out_f = (1/F) Σ_g T[f,g] V_t[g]`) so the gain stays bounded as F grows.
pub fn tab_forward(x_t: &Tensor, p: &TemporalBlockParams) -> Result<TemporalOutput> {
    if x_t.rank() != 3 {
        return Err(Error::dim("tab_forward", format!("expected J×C×F, got {:?}", x_t.shape())));
    }
    let frames = x_t.shape()[2];
    let ct = channel_transform(x_t, p.groups)?;
    let q = p.q.apply(&ct.mean_axis(0)?.permute(&[1, 0])?)?.relu();
    let k = p.k.apply(&ct.max_axis(0)?.permute(&[1, 0])?)?.relu();
    let d = q.shape()[1] as f64;
    let map = q.matmul(&k.permute(&[1, 0])?)?.scale(1.0 / d.sqrt()).softmax_lastdim()?.sigmoid();
    let v_t = p.v.apply_axis(x_t, 1)?;
    let out = v_t.mix_axis(&map.scale(1.0 / frames as f64), 2)?;
    Ok(TemporalOutput { out, map })
}
