//! Full network: embedding, channel split, stacked spatial/frequency
//! blocks, map fusion, temporal attention and the classification head.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    block_maps_pooled, fuse_maps, tab_forward, Affine, AttentionMaps, MixedBlockParams, QKProjector,
    TemporalBlockParams,
};
use crate::error::{Error, Result};
use crate::frequency::{band_frame_weights, band_matrix, map_partition, Band, FrequencyAxis, FrequencyConfig};
use crate::rng::Rng;
use crate::tensor::checkpoint::{self, NamedArray, Precision};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::Tensor;

/// How frequency blocks scale their spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    /// High blocks amplify the high band, low blocks attenuate the low band.
    #[default]
    HighLow,
    /// Every frequency block sees the unscaled spectrum.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub in_channels: usize,
    pub frames: usize,
    pub embed_channels: usize,
    pub attn_dim: usize,
    pub n_hfab: usize,
    pub n_lfab: usize,
    pub n_sab: usize,
    pub n_tab: usize,
    pub num_classes: usize,
    pub freq: FrequencyConfig,
    pub ct_groups: usize,
    pub seed: u64,
    #[serde(default)]
    pub operator: OperatorMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let frames = 64;
        ModelConfig {
            joints: 25,
            in_channels: 3,
            frames,
            embed_channels: 36,
            attn_dim: 18,
            n_hfab: 2,
            n_lfab: 2,
            n_sab: 1,
            n_tab: 1,
            num_classes: 4,
            freq: FrequencyConfig::new(
                map_partition(13, frames).expect("default partition"),
                0.2,
                1.2,
                FrequencyAxis::Temporal,
            ),
            ct_groups: 4,
            seed: 0,
            operator: OperatorMode::HighLow,
        }
    }
}

/// One family of stacked blocks feeding a single fused map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Spatial,
    High,
    Low,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Spatial => "sab",
            Branch::High => "hfab",
            Branch::Low => "lfab",
        }
    }
}

impl ModelConfig {
    /// Block-count equivalent of the earlier design: seven frequency blocks
    /// with one uniform operator, seven spatial blocks, one temporal block.
    pub fn v1_style(&self) -> ModelConfig {
        ModelConfig { n_hfab: 7, n_lfab: 0, n_sab: 7, n_tab: 1, operator: OperatorMode::Uniform, ..self.clone() }
    }

    /// Smallest config that still exercises every block: 4 joints, 2 input
    /// channels, 6 frames, 8 embedding channels, 3 classes.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            joints: 4,
            in_channels: 2,
            frames: 6,
            embed_channels: 8,
            attn_dim: 4,
            num_classes: 3,
            freq: FrequencyConfig::new(3, 0.2, 1.2, FrequencyAxis::Temporal),
            ct_groups: 2,
            ..ModelConfig::default()
        }
    }

    pub fn unit_channels(&self) -> usize {
        self.embed_channels / 2
    }

    pub fn block_count(&self, b: Branch) -> usize {
        match b {
            Branch::Spatial => self.n_sab,
            Branch::High => self.n_hfab,
            Branch::Low => self.n_lfab,
        }
    }

    /// Branches with at least one block, in fusion order.
    pub fn branches(&self) -> Vec<Branch> {
        [Branch::Spatial, Branch::High, Branch::Low].into_iter().filter(|&b| self.block_count(b) > 0).collect()
    }

    fn band(&self, b: Branch) -> Option<Band> {
        match (b, self.operator) {
            (Branch::Spatial, _) => None,
            (_, OperatorMode::Uniform) => Some(Band::Uniform),
            (Branch::High, OperatorMode::HighLow) => Some(Band::High),
            (Branch::Low, OperatorMode::HighLow) => Some(Band::Low),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("joints", self.joints),
            ("in_channels", self.in_channels),
            ("frames", self.frames),
            ("embed_channels", self.embed_channels),
            ("attn_dim", self.attn_dim),
            ("num_classes", self.num_classes),
            ("ct_groups", self.ct_groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed_channels = {} must be even to split into two units",
                self.embed_channels
            )));
        }
        if !self.embed_channels.is_multiple_of(self.ct_groups) {
            return Err(Error::Config(format!(
                "ct_groups = {} must divide embed_channels = {}",
                self.ct_groups, self.embed_channels
            )));
        }
        if self.n_hfab + self.n_lfab > 0 {
            let len = match self.freq.axis {
                FrequencyAxis::Temporal => self.frames,
                FrequencyAxis::Joint => self.joints,
            };
            self.freq.validate(len)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: Affine,
    pub joint_table: Tensor,
    pub frame_table: Tensor,
    pub sab: Vec<MixedBlockParams>,
    pub hfab: Vec<MixedBlockParams>,
    pub lfab: Vec<MixedBlockParams>,
    /// Present iff at least one branch exists.
    pub value: Option<Affine>,
    pub fusion: Option<Affine>,
    pub tab: Vec<TemporalBlockParams>,
    pub head: Affine,
}

fn affine_fields<'a>(prefix: &str, a: &'a mut Affine, out: &mut Vec<(String, &'a mut Tensor)>) {
    out.push((format!("{prefix}.weight"), &mut a.weight));
    out.push((format!("{prefix}.bias"), &mut a.bias));
}

fn block_fields<'a>(prefix: &str, blocks: &'a mut [MixedBlockParams], out: &mut Vec<(String, &'a mut Tensor)>) {
    for (i, b) in blocks.iter_mut().enumerate() {
        for (u, unit) in [(1, &mut b.unit1), (2, &mut b.unit2)] {
            affine_fields(&format!("{prefix}.{i}.unit{u}.q"), &mut unit.q, out);
            affine_fields(&format!("{prefix}.{i}.unit{u}.k"), &mut unit.k, out);
        }
    }
}

fn zero_affine(i: usize, o: usize) -> Affine {
    Affine {
        weight: Tensor::param(&[i, o], vec![0.0; i * o]).expect("shape"),
        bias: Tensor::param(&[o], vec![0.0; o]).expect("shape"),
    }
}

fn zero_block(c: usize, d: usize) -> MixedBlockParams {
    let proj = || QKProjector { q: zero_affine(c, d), k: zero_affine(c, d) };
    MixedBlockParams { unit1: proj(), unit2: proj() }
}

impl ModelParams {
    /// All-zero parameters with the right shapes, tracked.
    pub fn zeros(cfg: &ModelConfig) -> Result<ModelParams> {
        cfg.validate()?;
        let (ce, cu, d) = (cfg.embed_channels, cfg.unit_channels(), cfg.attn_dim);
        let branches = cfg.branches().len();
        Ok(ModelParams {
            embed: zero_affine(cfg.in_channels, ce),
            joint_table: Tensor::param(&[cfg.joints, ce], vec![0.0; cfg.joints * ce])?,
            frame_table: Tensor::param(&[cfg.frames, ce], vec![0.0; cfg.frames * ce])?,
            sab: (0..cfg.n_sab).map(|_| zero_block(cu, d)).collect(),
            hfab: (0..cfg.n_hfab).map(|_| zero_block(cu, d)).collect(),
            lfab: (0..cfg.n_lfab).map(|_| zero_block(cu, d)).collect(),
            value: (branches > 0).then(|| zero_affine(ce, ce)),
            fusion: (branches > 0).then(|| zero_affine(branches * ce, ce)),
            tab: (0..cfg.n_tab)
                .map(|_| TemporalBlockParams {
                    groups: cfg.ct_groups,
                    q: zero_affine(ce, d),
                    k: zero_affine(ce, d),
                    v: zero_affine(ce, ce),
                })
                .collect(),
            head: zero_affine(ce, cfg.num_classes),
        })
    }

    /// Every parameter with its stable name, in checkpoint order.
    pub fn fields_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        affine_fields("embed", &mut self.embed, &mut out);
        out.push(("embed.joint_table".into(), &mut self.joint_table));
        out.push(("embed.frame_table".into(), &mut self.frame_table));
        block_fields("sab", &mut self.sab, &mut out);
        block_fields("hfab", &mut self.hfab, &mut out);
        block_fields("lfab", &mut self.lfab, &mut out);
        if let Some(v) = self.value.as_mut() {
            affine_fields("value", v, &mut out);
        }
        if let Some(f) = self.fusion.as_mut() {
            affine_fields("fusion", f, &mut out);
        }
        for (i, t) in self.tab.iter_mut().enumerate() {
            affine_fields(&format!("tab.{i}.q"), &mut t.q, &mut out);
            affine_fields(&format!("tab.{i}.k"), &mut t.k, &mut out);
            affine_fields(&format!("tab.{i}.v"), &mut t.v, &mut out);
        }
        affine_fields("head", &mut self.head, &mut out);
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut copy = self.clone();
        copy.fields_mut().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(Tensor::numel).sum()
    }

    /// Same structure with every tensor replaced, in [`Self::named`] order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<ModelParams> {
        let mut out = self.clone();
        let mut fields = out.fields_mut();
        if fields.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{} replacement tensors for {} parameters",
                tensors.len(),
                fields.len()
            )));
        }
        for ((name, slot), t) in fields.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim(
                    "with_tensors",
                    format!("{name}: {:?} replaced by {:?}", slot.shape(), t.shape()),
                ));
            }
            **slot = t;
        }
        drop(fields);
        Ok(out)
    }

    /// Untracked copy, for inference without graph bookkeeping.
    pub fn detached(&self) -> ModelParams {
        let ts = self.tensors().iter().map(Tensor::detach).collect();
        self.with_tensors(ts).expect("same shapes")
    }

    /// Fresh tracked leaves with the same values.
    pub fn tracked(&self) -> ModelParams {
        let ts = self.tensors().iter().map(|t| t.detach_with_grad(true)).collect();
        self.with_tensors(ts).expect("same shapes")
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.named()
            .into_iter()
            .map(|(name, t)| NamedArray { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect()
    }

    pub fn from_arrays(cfg: &ModelConfig, arrays: &[NamedArray]) -> Result<ModelParams> {
        let template = ModelParams::zeros(cfg)?;
        let by_name: HashMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        if by_name.len() != arrays.len() {
            return Err(Error::Contract("duplicate parameter names in checkpoint".into()));
        }
        let named = template.named();
        if named.len() != arrays.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, config needs {}",
                arrays.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in &named {
            let a =
                by_name.get(name.as_str()).ok_or_else(|| Error::Contract(format!("checkpoint is missing {name}")))?;
            if a.shape != t.shape() {
                return Err(Error::dim("checkpoint", format!("{name}: {:?} vs {:?}", a.shape, t.shape())));
            }
            tensors.push(Tensor::param(&a.shape, a.data.clone())?);
        }
        template.with_tensors(tensors)
    }
}

/// Whether weight decay applies to the named parameter: weights only, not
/// biases or positional tables.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with("_table"))
}

/// Xavier-uniform weights, zero biases and tables; deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(cfg)?;
    let mut rng = Rng::new(seed);
    for (name, slot) in params.fields_mut() {
        if name.ends_with(".weight") {
            let (fan_in, fan_out) = (slot.shape()[0], slot.shape()[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..slot.numel()).map(|_| rng.uniform_range(-bound, bound)).collect();
            *slot = Tensor::param(slot.shape(), data)?;
        }
    }
    Ok(params)
}

/// Closed-form learnable entry count.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let (j, f, ci, ce, d, k) =
        (cfg.joints, cfg.frames, cfg.in_channels, cfg.embed_channels, cfg.attn_dim, cfg.num_classes);
    let cu = ce / 2;
    let embed = ci * ce + ce + j * ce + f * ce;
    let per_block = 4 * (cu * d + d);
    let blocks = (cfg.n_sab + cfg.n_hfab + cfg.n_lfab) * per_block;
    let b = cfg.branches().len();
    let fusion = if b > 0 { (ce * ce + ce) + (b * ce * ce + ce) } else { 0 };
    let tab = cfg.n_tab * (2 * (ce * d + d) + ce * ce + ce);
    let head = ce * k + k;
    embed + blocks + fusion + tab + head
}

/// Channel embedding plus joint and frame tables: `J×C_in×F → J×C_e×F`.
pub fn embed(x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let ce = params.embed.out_dim();
    if x.rank() != 3 || x.shape()[1] != params.embed.in_dim() {
        return Err(Error::dim("embed", format!("input {:?} for {}→{ce} embedding", x.shape(), params.embed.in_dim())));
    }
    if x.shape()[0] != params.joint_table.shape()[0] || x.shape()[2] != params.frame_table.shape()[0] {
        return Err(Error::dim(
            "embed",
            format!(
                "input {:?} against joint table {:?} and frame table {:?}",
                x.shape(),
                params.joint_table.shape(),
                params.frame_table.shape()
            ),
        ));
    }
    params
        .embed
        .apply_axis(x, 1)?
        .add_broadcast(&params.joint_table, &[0, 1])?
        .add_broadcast(&params.frame_table.permute(&[1, 0])?, &[1, 2])
}

pub fn channel_split(x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.rank() != 3 || !x.shape()[1].is_multiple_of(2) {
        return Err(Error::dim("channel_split", format!("need J×C×F with even C, got {:?}", x.shape())));
    }
    let half = x.shape()[1] / 2;
    let parts = x.split(1, &[half, half])?;
    Ok((parts[0].clone(), parts[1].clone()))
}

/// Residual re-weighting between stacked blocks: `u + ½·M·u` over joints.
/// The fused map has rows summing to 2, so `½·M` is row-stochastic.
pub fn residual_reweight(unit: &Tensor, fused: &Tensor) -> Result<Tensor> {
    unit.add(&unit.mix_axis(&fused.scale(0.5), 0)?)
}

// Frame reduction that a branch's features start from. Every later step of
// the branch mixes joints only, so it commutes with this reduction.
fn reduce_frames(unit: &Tensor, cfg: &ModelConfig, band: Option<Band>) -> Result<Tensor> {
    let (j, c, f) = (unit.shape()[0], unit.shape()[1], unit.shape()[2]);
    match band {
        Some(b) if cfg.freq.axis == FrequencyAxis::Temporal => {
            let w = Tensor::new(&[1, f], band_frame_weights(&cfg.freq, b, f))?;
            unit.mix_axis(&w, 2)?.reshape(&[j, c])
        }
        _ => unit.mean_axis(2),
    }
}

fn branch_features(reduced: &Tensor, cfg: &ModelConfig, band: Option<Band>) -> Result<Tensor> {
    match band {
        Some(b) if cfg.freq.axis == FrequencyAxis::Joint => {
            let j = reduced.shape()[0];
            reduced.mix_axis(&Tensor::new(&[j, j], band_matrix(&cfg.freq, b, j))?, 0)
        }
        _ => Ok(reduced.clone()),
    }
}

/// Final fused map of one branch, plus the last block's maps.
pub fn branch_maps(
    x1: &Tensor,
    x2: &Tensor,
    cfg: &ModelConfig,
    branch: Branch,
    blocks: &[MixedBlockParams],
) -> Result<AttentionMaps> {
    let band = cfg.band(branch);
    let mut r1 = reduce_frames(x1, cfg, band)?;
    let mut r2 = reduce_frames(x2, cfg, band)?;
    let mut last = None;
    for (i, block) in blocks.iter().enumerate() {
        if i > 0 {
            let m: &AttentionMaps = last.as_ref().expect("previous block");
            r1 = residual_reweight(&r1, &m.fused)?;
            r2 = residual_reweight(&r2, &m.fused)?;
        }
        let p1 = branch_features(&r1, cfg, band)?;
        let p2 = branch_features(&r2, cfg, band)?;
        last = Some(block_maps_pooled(&p1, &p2, block)?);
    }
    last.ok_or_else(|| Error::Contract(format!("branch {} has no blocks", branch.name())))
}

#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub logits: Tensor,
    pub branch_maps: Vec<(Branch, AttentionMaps)>,
    pub temporal_maps: Vec<Tensor>,
}

/// One `J×C_in×F` sample to `1×num_classes` logits, keeping every map.
pub fn forward_sample(x: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<SampleTrace> {
    if x.shape() != [cfg.joints, cfg.in_channels, cfg.frames] {
        return Err(Error::dim(
            "forward",
            format!("sample {:?}, config wants [{}, {}, {}]", x.shape(), cfg.joints, cfg.in_channels, cfg.frames),
        ));
    }
    let e = embed(x, params)?;
    let (x1, x2) = channel_split(&e)?;
    let mut branch_maps_out = Vec::new();
    for b in cfg.branches() {
        let blocks = match b {
            Branch::Spatial => &params.sab,
            Branch::High => &params.hfab,
            Branch::Low => &params.lfab,
        };
        branch_maps_out.push((b, branch_maps(&x1, &x2, cfg, b, blocks)?));
    }
    let mut x_t = if branch_maps_out.is_empty() {
        e
    } else {
        let (value, fusion) = params
            .value
            .as_ref()
            .zip(params.fusion.as_ref())
            .ok_or_else(|| Error::Contract("parameters lack the value/fusion projections".into()))?;
        let v = value.apply_axis(&e, 1)?;
        let maps: Vec<Tensor> = branch_maps_out.iter().map(|(_, m)| m.fused.clone()).collect();
        fuse_maps(&maps, &v, fusion)?
    };
    let mut temporal_maps = Vec::new();
    for tab in &params.tab {
        let out = tab_forward(&x_t, tab)?;
        x_t = out.out;
        temporal_maps.push(out.map);
    }
    let ce = x_t.shape()[1];
    let pooled = x_t.mean_axis(2)?.mean_axis(0)?.reshape(&[1, ce])?;
    let logits = params.head.apply(&pooled)?;
    Ok(SampleTrace { logits, branch_maps: branch_maps_out, temporal_maps })
}

/// `B` samples to `B×num_classes` logits.
pub fn forward(batch: &[Tensor], params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let rows = batch.iter().map(|x| forward_sample(x, params, cfg).map(|t| t.logits)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Contract("forward on an empty batch".into()));
    }
    Tensor::concat(&rows, 0)
}

/// Mean cross-entropy of `batch` against `labels`.
pub fn batch_loss(batch: &[Tensor], labels: &[usize], params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    forward(batch, params, cfg)?.cross_entropy(labels)
}

/// Finite-difference check of the whole model's loss gradient at a random
/// point: seeded weights, biases and tables drawn in ±0.1, and a random
/// batch of `batch` samples.
pub fn gradcheck_model(
    cfg: &ModelConfig,
    seed: u64,
    batch: usize,
    eps: f64,
    tol: f64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let base = init_params(cfg, seed)?;
    let mut rng = Rng::derive(seed, 1);
    let mut named = base.named();
    for (name, t) in named.iter_mut() {
        if !name.ends_with(".weight") {
            let data = (0..t.numel()).map(|_| rng.uniform_range(-0.1, 0.1)).collect();
            *t = Tensor::param(t.shape(), data)?;
        }
    }
    let len = cfg.joints * cfg.in_channels * cfg.frames;
    let xs = (0..batch.max(1))
        .map(|_| Tensor::new(&[cfg.joints, cfg.in_channels, cfg.frames], (0..len).map(|_| rng.normal()).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..xs.len()).map(|i| i % cfg.num_classes).collect();
    grad_check(
        |leaves| batch_loss(&xs, &labels, &base.with_tensors(leaves.to_vec())?, cfg),
        &named,
        eps,
        tol,
        per_tensor,
    )
}

/// Checkpoint: one JSON line with the config, then the FMV2 payload.
pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ModelParams, precision: Precision) -> Result<()> {
    let bytes = model_bytes(cfg, params, precision)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn model_bytes(cfg: &ModelConfig, params: &ModelParams, precision: Precision) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(cfg).map_err(|e| Error::Contract(format!("config serialization: {e}")))?;
    out.push(b'\n');
    out.write_all(&checkpoint::encode(&params.to_arrays(), precision)?).expect("writing to a Vec cannot fail");
    Ok(out)
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let cfg: ModelConfig = serde_json::from_str(header.trim_end()).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let (_, arrays) = checkpoint::decode(&rest, path)?;
    let params = ModelParams::from_arrays(&cfg, &arrays)?;
    Ok((cfg, params))
}
