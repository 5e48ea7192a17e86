//! Orthonormal DCT-II / DCT-III along one axis, and the high/low band
//! operators that rescale coefficients on either side of a partition.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Joint count the published partition values refer to.
pub const REFERENCE_JOINTS: usize = 25;

/// Which axis of a `J×C×F` unit carries the transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyAxis {
    #[default]
    Temporal,
    Joint,
}

impl FrequencyAxis {
    /// Axis index within a `J×C×F` tensor.
    pub fn index(self) -> usize {
        match self {
            FrequencyAxis::Temporal => 2,
            FrequencyAxis::Joint => 0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(FrequencyAxis::Temporal),
            "joint" => Ok(FrequencyAxis::Joint),
            other => Err(Error::Config(format!("frequency axis must be temporal or joint, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    High,
    Low,
    /// Every coefficient kept at unit scale.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyConfig {
    /// Number of low-band coefficients on the transform axis.
    pub partition: usize,
    pub ell: f64,
    pub h: f64,
    pub axis: FrequencyAxis,
    /// Allows `h = ell = 1`, which turns both operators into the identity.
    #[serde(default)]
    pub permissive: bool,
}

impl FrequencyConfig {
    pub fn new(partition: usize, ell: f64, h: f64, axis: FrequencyAxis) -> Self {
        FrequencyConfig { partition, ell, h, axis, permissive: false }
    }

    /// Identity operators, for checks that compare against an unscaled path.
    pub fn identity(partition: usize, axis: FrequencyAxis) -> Self {
        FrequencyConfig { partition, ell: 1.0, h: 1.0, axis, permissive: true }
    }

    pub fn validate(&self, axis_len: usize) -> Result<()> {
        if self.partition < 1 || self.partition >= axis_len {
            return Err(Error::Config(format!("partition {} must satisfy 1 <= N < {axis_len}", self.partition)));
        }
        if self.permissive && self.ell == 1.0 && self.h == 1.0 {
            return Ok(());
        }
        if !(self.ell > 0.0 && self.ell < 1.0) {
            return Err(Error::Config(format!("ell = {} must lie in (0, 1)", self.ell)));
        }
        // The upper end is closed: the default pair ell = 0.2, h = 1.2 sits on it.
        if !(self.h > 1.0 && self.h <= 1.0 + self.ell + 1e-12) {
            return Err(Error::Config(format!("h = {} must lie in (1, 1 + ell] = (1, {}]", self.h, 1.0 + self.ell)));
        }
        Ok(())
    }

    /// Per-coefficient scales of one band operator over an axis of `len`.
    pub fn band_scales(&self, band: Band, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| match band {
                Band::High if i >= self.partition => self.h,
                Band::Low if i < self.partition => self.ell,
                _ => 1.0,
            })
            .collect()
    }
}

/// Scale a partition quoted against 25 joints to an axis of `axis_len`.
pub fn map_partition(n_ref: usize, axis_len: usize) -> Result<usize> {
    if !(1..=REFERENCE_JOINTS).contains(&n_ref) || axis_len < 2 {
        return Err(Error::Config(format!(
            "map_partition needs 1 <= N <= {REFERENCE_JOINTS} and length >= 2, got N = {n_ref}, length = {axis_len}"
        )));
    }
    let mapped = (n_ref as f64 / REFERENCE_JOINTS as f64 * axis_len as f64).round() as usize;
    Ok(mapped.clamp(1, axis_len - 1))
}

/// Coefficients along `axis`; index 0 is the DC term.
#[derive(Clone, Debug)]
pub struct SpectralTensor {
    pub tensor: Tensor,
    pub axis: usize,
}

impl SpectralTensor {
    pub fn len(&self) -> usize {
        self.tensor.shape()[self.axis]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major `n×n` DCT-II matrix: `D[i][f] = sqrt(2/n) c_i cos(pi (2f+1) i / 2n)`
/// with `c_0 = 1/sqrt(2)` and `c_i = 1` otherwise. Orthogonal, so its
/// transpose is the inverse.
pub fn dct_matrix(n: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("dct cache poisoned");
    map.entry(n)
        .or_insert_with(|| {
            let scale = (2.0 / n as f64).sqrt();
            // DC row written as 1/sqrt(n) directly so n = 1 is exact.
            let mut d = vec![1.0 / (n as f64).sqrt(); n * n];
            for i in 1..n {
                for f in 0..n {
                    d[i * n + f] = scale * (PI * (2 * f + 1) as f64 * i as f64 / (2 * n) as f64).cos();
                }
            }
            Arc::new(d)
        })
        .clone()
}

fn idct_matrix(n: usize) -> Vec<f64> {
    crate::tensor::gemm::transpose(n, n, &dct_matrix(n))
}

/// DCT of one slice.
pub fn dct_slice(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::dim("dct", "zero-length axis"));
    }
    let n = x.len();
    let d = dct_matrix(n);
    Ok(crate::tensor::gemm::gemm(n, n, 1, &d, x))
}

pub fn dct(x: &Tensor, axis: usize) -> Result<SpectralTensor> {
    crate::tensor::check_axis("dct", x.shape(), axis)?;
    let n = x.shape()[axis];
    let d = Tensor::new(&[n, n], dct_matrix(n).to_vec())?;
    Ok(SpectralTensor { tensor: x.mix_axis(&d, axis)?, axis })
}

pub fn idct(s: &SpectralTensor) -> Result<Tensor> {
    let n = s.len();
    let dt = Tensor::new(&[n, n], idct_matrix(n))?;
    s.tensor.mix_axis(&dt, s.axis)
}

fn apply_band(s: &SpectralTensor, cfg: &FrequencyConfig, band: Band) -> Result<SpectralTensor> {
    cfg.validate(s.len())?;
    let scales = cfg.band_scales(band, s.len());
    Ok(SpectralTensor { tensor: s.tensor.scale_axis(s.axis, &scales)?, axis: s.axis })
}

/// Multiply coefficients at index >= N by `h`.
pub fn apply_high_operator(s: &SpectralTensor, cfg: &FrequencyConfig) -> Result<SpectralTensor> {
    apply_band(s, cfg, Band::High)
}

/// Multiply coefficients at index < N by `ell`.
pub fn apply_low_operator(s: &SpectralTensor, cfg: &FrequencyConfig) -> Result<SpectralTensor> {
    apply_band(s, cfg, Band::Low)
}

/// Frame weights `Dᵀs / F`: the mean over coefficients of a band-scaled
/// temporal spectrum, as one linear functional of the `f` frames.
pub fn band_frame_weights(cfg: &FrequencyConfig, band: Band, f: usize) -> Vec<f64> {
    let s = cfg.band_scales(band, f);
    let d = dct_matrix(f);
    (0..f).map(|t| (0..f).map(|i| d[i * f + t] * s[i]).sum::<f64>() / f as f64).collect()
}

/// `diag(s)·D`, the band-scaled transform over an axis of `n`.
pub fn band_matrix(cfg: &FrequencyConfig, band: Band, n: usize) -> Vec<f64> {
    let s = cfg.band_scales(band, n);
    let d = dct_matrix(n);
    (0..n * n).map(|k| d[k] * s[k / n]).collect()
}

/// Band-scaled spectrum of a `J×C×F` unit, mean-pooled over the frame
/// axis (the coefficient axis in temporal mode), giving `J×C`.
///
/// Computed without materializing the spectrum. Temporal mode collapses
/// to [`band_frame_weights`]; joint mode pools frames first and then
/// applies [`band_matrix`] over joints.
pub fn spectral_pool(unit: &Tensor, cfg: &FrequencyConfig, band: Band) -> Result<Tensor> {
    if unit.rank() != 3 {
        return Err(Error::dim("spectral_pool", format!("expected J×C×F, got {:?}", unit.shape())));
    }
    let (j, c, f) = (unit.shape()[0], unit.shape()[1], unit.shape()[2]);
    match cfg.axis {
        FrequencyAxis::Temporal => {
            cfg.validate(f)?;
            let w = Tensor::new(&[1, f], band_frame_weights(cfg, band, f))?;
            unit.mix_axis(&w, 2)?.reshape(&[j, c])
        }
        FrequencyAxis::Joint => {
            cfg.validate(j)?;
            let m = Tensor::new(&[j, j], band_matrix(cfg, band, j))?;
            unit.mean_axis(2)?.mix_axis(&m, 0)
        }
    }
}

/// Reference path for [`spectral_pool`]: explicit transform, band operator,
/// then a mean over frames.
pub fn spectral_pool_unfused(unit: &Tensor, cfg: &FrequencyConfig, band: Band) -> Result<Tensor> {
    let s = dct(unit, cfg.axis.index())?;
    let scaled = match band {
        Band::High => apply_high_operator(&s, cfg)?,
        Band::Low => apply_low_operator(&s, cfg)?,
        Band::Uniform => s,
    };
    scaled.tensor.mean_axis(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandEnergy {
    pub joint: usize,
    pub low: f64,
    pub high: f64,
}

impl BandEnergy {
    /// High-band share of the total, 0 for a silent joint.
    pub fn ratio(&self) -> f64 {
        let total = self.low + self.high;
        if total > 0.0 {
            self.high / total
        } else {
            0.0
        }
    }
}

/// Per-joint temporal-spectrum energy below and above `partition`, summed
/// over channels, for a `J×C×F` array.
pub fn band_energies(coords: &[f64], j: usize, c: usize, f: usize, partition: usize) -> Result<Vec<BandEnergy>> {
    if coords.len() != j * c * f {
        return Err(Error::dim("band_energies", format!("{} values for {j}×{c}×{f}", coords.len())));
    }
    let mut out = Vec::with_capacity(j);
    for joint in 0..j {
        let (mut low, mut high) = (0.0, 0.0);
        for ch in 0..c {
            let start = (joint * c + ch) * f;
            for (i, v) in dct_slice(&coords[start..start + f])?.iter().enumerate() {
                if i < partition {
                    low += v * v;
                } else {
                    high += v * v;
                }
            }
        }
        out.push(BandEnergy { joint, low, high });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct evaluation of the forward transform, 1-based as usually written.
    fn dct_oracle(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (1..=x.len())
            .map(|i| {
                let delta: f64 = if i == 1 { 1.0 } else { 0.0 };
                let s: f64 = (1..=x.len())
                    .map(|f| x[f - 1] * (PI * (2.0 * f as f64 - 1.0) * (i as f64 - 1.0) / (2.0 * n)).cos())
                    .sum();
                (2.0 / n).sqrt() / (1.0 + delta).sqrt() * s
            })
            .collect()
    }

    #[test]
    fn constant_slice_has_only_dc() {
        let c = 1.7;
        let out = dct_slice(&[c; 8]).unwrap();
        assert!((out[0] - c * 8f64.sqrt()).abs() < 1e-12);
        assert!(out[1..].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(dct_slice(&[3.25]).unwrap(), vec![3.25]);
        assert!(dct_slice(&[]).is_err());
    }

    #[test]
    fn impulse_matches_direct_formula() {
        let got = dct_slice(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for (g, w) in got.iter().zip(dct_oracle(&[1.0, 0.0, 0.0, 0.0])) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let f = 6;
        let mut coeffs = vec![0.0; f];
        coeffs[0] = 0.4 * (f as f64).sqrt();
        let s = SpectralTensor { tensor: Tensor::new(&[1, f], coeffs).unwrap(), axis: 1 };
        let x = idct(&s).unwrap();
        assert!(x.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        let zero = SpectralTensor { tensor: Tensor::zeros(&[2, f]).unwrap(), axis: 1 };
        assert!(idct(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_operators_on_four_coefficients() {
        let cfg = FrequencyConfig::new(2, 0.2, 1.2, FrequencyAxis::Temporal);
        let s = SpectralTensor { tensor: Tensor::new(&[4], vec![1.0; 4]).unwrap(), axis: 0 };
        assert_eq!(apply_high_operator(&s, &cfg).unwrap().tensor.data(), &[1.0, 1.0, 1.2, 1.2]);
        assert_eq!(apply_low_operator(&s, &cfg).unwrap().tensor.data(), &[0.2, 0.2, 1.0, 1.0]);
        let id = FrequencyConfig::identity(2, FrequencyAxis::Temporal);
        assert_eq!(apply_high_operator(&s, &id).unwrap().tensor.data(), s.tensor.data());
        assert_eq!(apply_low_operator(&s, &id).unwrap().tensor.data(), s.tensor.data());
        let bad = FrequencyConfig::new(4, 0.2, 1.2, FrequencyAxis::Temporal);
        assert!(apply_high_operator(&s, &bad).is_err());
    }

    #[test]
    fn config_bounds() {
        let ok = FrequencyConfig::new(13, 0.2, 1.2, FrequencyAxis::Joint);
        assert!(ok.validate(25).is_ok());
        assert!(FrequencyConfig::new(13, 0.2, 1.0, FrequencyAxis::Joint).validate(25).is_err());
        assert!(FrequencyConfig::new(13, 0.2, 1.21, FrequencyAxis::Joint).validate(25).is_err());
        assert!(FrequencyConfig::new(13, 1.0, 1.5, FrequencyAxis::Joint).validate(25).is_err());
        assert!(FrequencyConfig::new(0, 0.2, 1.1, FrequencyAxis::Joint).validate(25).is_err());
        let mut id = FrequencyConfig::identity(13, FrequencyAxis::Joint);
        assert!(id.validate(25).is_ok());
        id.permissive = false;
        assert!(id.validate(25).is_err());
    }

    #[test]
    fn partition_mapping() {
        assert_eq!(map_partition(13, 25).unwrap(), 13);
        assert_eq!(map_partition(13, 64).unwrap(), 33);
        assert_eq!(map_partition(1, 2).unwrap(), 1);
        assert_eq!(map_partition(25, 25).unwrap(), 24);
        assert!(map_partition(0, 25).is_err());
        assert!(map_partition(26, 25).is_err());
        assert!(map_partition(5, 1).is_err());
    }

    #[test]
    fn band_energy_of_pure_tone() {
        // A single cosine basis vector puts all its energy in one coefficient.
        let f = 16;
        let d = dct_matrix(f);
        let row = 10;
        let coords: Vec<f64> = d[row * f..(row + 1) * f].to_vec();
        let e = band_energies(&coords, 1, 1, f, 8).unwrap();
        assert!(e[0].low < 1e-20);
        assert!((e[0].high - 1.0).abs() < 1e-12);
        assert!((e[0].ratio() - 1.0).abs() < 1e-12);
    }
}
