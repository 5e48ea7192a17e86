//! Skeleton sequences: JSONL and SKL1 storage, normalization, modality
//! streams, the synthetic frequency-signature dataset and split manifests.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SKL_MAGIC: [u8; 4] = *b"SKL1";
/// Bytes before the first record: magic plus record count.
pub const SKL_HEADER_BYTES: usize = 8;
/// Per-record header: label, subject, view, J, C as u16, then F as u32.
pub const SKL_RECORD_HEADER_BYTES: usize = 14;
/// Stored in place of an absent subject or view id.
const ABSENT: u16 = u16::MAX;

/// One sample. `coords` is `J×C×F`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub joints: usize,
    pub channels: usize,
    pub frames: usize,
    pub coords: Vec<f64>,
    pub label: usize,
    pub subject: Option<u32>,
    pub view: Option<u32>,
}

impl SkeletonSequence {
    pub fn new(
        joints: usize,
        channels: usize,
        frames: usize,
        coords: Vec<f64>,
        label: usize,
    ) -> Result<SkeletonSequence> {
        let s = SkeletonSequence { joints, channels, frames, coords, label, subject: None, view: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.joints * self.channels * self.frames;
        if self.coords.len() != want {
            return Err(Error::dim(
                "skeleton",
                format!("{} coordinates for {}×{}×{}", self.coords.len(), self.joints, self.channels, self.frames),
            ));
        }
        if let Some(i) = self.coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("skeleton coordinate {i} is {}", self.coords[i])));
        }
        Ok(())
    }

    pub fn at(&self, j: usize, c: usize, f: usize) -> f64 {
        self.coords[(j * self.channels + c) * self.frames + f]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.joints, self.channels, self.frames], self.coords.clone())
    }

    fn with_coords(&self, coords: Vec<f64>) -> SkeletonSequence {
        SkeletonSequence { coords, ..self.clone() }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view: Option<u32>,
    /// `frames[f][j][c]`.
    frames: Vec<Vec<Vec<f64>>>,
}

/// Parse JSONL text; `path` only labels errors.
pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<SkeletonSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let bad =
            |column: usize, message: String| Error::Parse { path: path.to_path_buf(), line: line_no, column, message };
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| bad(e.column(), e.to_string()))?;
        let frames = rec.frames.len();
        if frames == 0 {
            return Err(bad(1, "record has no frames".into()));
        }
        let joints = rec.frames[0].len();
        let channels = rec.frames[0].first().map_or(0, Vec::len);
        if joints == 0 || channels == 0 {
            return Err(bad(1, "first frame has no joints or no channels".into()));
        }
        let mut coords = vec![0.0; joints * channels * frames];
        for (f, frame) in rec.frames.iter().enumerate() {
            if frame.len() != joints {
                return Err(bad(1, format!("frame {f} has {} joints, expected {joints}", frame.len())));
            }
            for (j, joint) in frame.iter().enumerate() {
                if joint.len() != channels {
                    return Err(bad(
                        1,
                        format!("frame {f} joint {j} has {} channels, expected {channels}", joint.len()),
                    ));
                }
                for (c, v) in joint.iter().enumerate() {
                    coords[(j * channels + c) * frames + f] = *v;
                }
            }
        }
        let seq = SkeletonSequence {
            joints,
            channels,
            frames,
            coords,
            label: rec.label,
            subject: rec.subject,
            view: rec.view,
        };
        seq.validate().map_err(|e| bad(1, e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SkeletonSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn to_jsonl(seqs: &[SkeletonSequence]) -> Result<String> {
    let mut out = String::new();
    for s in seqs {
        s.validate()?;
        let frames = (0..s.frames)
            .map(|f| (0..s.joints).map(|j| (0..s.channels).map(|c| s.at(j, c, f)).collect()).collect())
            .collect();
        let rec = JsonRecord { label: s.label, subject: s.subject, view: s.view, frames };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Contract(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, seqs: &[SkeletonSequence]) -> Result<()> {
    std::fs::write(path, to_jsonl(seqs)?).map_err(|e| Error::io(path, e))
}

fn to_u16(what: &str, v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit the SKL1 u16 field")))
}

fn optional_id(what: &str, v: Option<u32>) -> Result<u16> {
    match v {
        None => Ok(ABSENT),
        Some(x) => to_u16(what, x as usize)
            .ok()
            .filter(|&x| x != ABSENT)
            .ok_or_else(|| Error::Contract(format!("{what} id {x} is out of the SKL1 range"))),
    }
}

/// SKL1 bytes. Payload values are stored as f32, so coordinates that are
/// not exactly representable in f32 are rounded.
pub fn encode_binary(seqs: &[SkeletonSequence]) -> Result<Vec<u8>> {
    let count = u32::try_from(seqs.len()).map_err(|_| Error::Contract("too many records for SKL1".into()))?;
    let mut out = Vec::with_capacity(record_offsets(seqs).last().copied().unwrap_or(SKL_HEADER_BYTES));
    out.extend_from_slice(&SKL_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for s in seqs {
        s.validate()?;
        for v in [
            to_u16("label", s.label)?,
            optional_id("subject", s.subject)?,
            optional_id("view", s.view)?,
            to_u16("joints", s.joints)?,
            to_u16("channels", s.channels)?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let frames = u32::try_from(s.frames).map_err(|_| Error::Contract("frame count exceeds u32".into()))?;
        out.extend_from_slice(&frames.to_le_bytes());
        for v in &s.coords {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Byte offset of every record in the SKL1 layout, plus the total length.
pub fn record_offsets(seqs: &[SkeletonSequence]) -> Vec<usize> {
    let mut at = SKL_HEADER_BYTES;
    let mut offs = vec![at];
    for s in seqs {
        at += SKL_RECORD_HEADER_BYTES + 4 * s.coords.len();
        offs.push(at);
    }
    offs
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Truncated {
                what: format!("{} ({what})", self.path.display()),
                expected: (self.at + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_binary(buf: &[u8], path: &Path) -> Result<Vec<SkeletonSequence>> {
    let mut cur = Cursor { buf, at: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != SKL_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: SKL_MAGIC, found: magic.to_vec() });
    }
    let count = cur.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let id = |v: u16| if v == ABSENT { None } else { Some(u32::from(v)) };
    for r in 0..count {
        let what = format!("record {r} header");
        let label = cur.u16(&what)? as usize;
        let subject = id(cur.u16(&what)?);
        let view = id(cur.u16(&what)?);
        let joints = cur.u16(&what)? as usize;
        let channels = cur.u16(&what)? as usize;
        let frames = cur.u32(&what)? as usize;
        let n = joints * channels * frames;
        let payload = cur.take(4 * n, &format!("record {r} payload"))?;
        let coords =
            payload.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))).collect();
        let seq = SkeletonSequence { joints, channels, frames, coords, label, subject, view };
        seq.validate()?;
        out.push(seq);
    }
    if cur.at != buf.len() {
        return Err(Error::Contract(format!(
            "{}: {} trailing bytes after {count} records",
            path.display(),
            buf.len() - cur.at
        )));
    }
    Ok(out)
}

pub fn load_binary(path: &Path) -> Result<Vec<SkeletonSequence>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_binary(&buf, path)
}

pub fn write_binary(path: &Path, seqs: &[SkeletonSequence]) -> Result<()> {
    let bytes = encode_binary(seqs)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Load either format, by magic number.
pub fn load_any(path: &Path) -> Result<Vec<SkeletonSequence>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.starts_with(&SKL_MAGIC) {
        decode_binary(&buf, path)
    } else {
        let text = String::from_utf8(buf).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            column: 0,
            message: format!("neither SKL1 nor UTF-8 JSONL: {e}"),
        })?;
        parse_jsonl(&text, path)
    }
}

/// `.skl` / `.bin` write SKL1, anything else JSONL.
pub fn write_any(path: &Path, seqs: &[SkeletonSequence]) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("skl") | Some("bin") => write_binary(path, seqs),
        _ => write_jsonl(path, seqs),
    }
}

#[derive(Clone, Debug)]
pub struct Normalized {
    /// `J×C×F_target`.
    pub tensor: Tensor,
    /// The centered sequence had no extent; `tensor` is all zeros.
    pub degenerate: bool,
}

/// Root-center every frame, resample frames linearly to `f_target`, and
/// scale so the mean per-frame coordinate RMS is 1.
pub fn normalize(s: &SkeletonSequence, f_target: usize) -> Result<Normalized> {
    s.validate()?;
    if s.frames == 0 || f_target == 0 || s.joints == 0 || s.channels == 0 {
        return Err(Error::dim("normalize", format!("{}×{}×{} to {f_target} frames", s.joints, s.channels, s.frames)));
    }
    let (j_n, c_n, f_n) = (s.joints, s.channels, s.frames);
    let mut out = vec![0.0; j_n * c_n * f_target];
    for j in 0..j_n {
        for c in 0..c_n {
            let centered: Vec<f64> = (0..f_n).map(|f| s.at(j, c, f) - s.at(0, c, f)).collect();
            let row = &mut out[(j * c_n + c) * f_target..(j * c_n + c + 1) * f_target];
            resample_into(&centered, row);
        }
    }
    let mut rms_sum = 0.0;
    for f in 0..f_target {
        let sq: f64 = (0..j_n * c_n).map(|r| out[r * f_target + f].powi(2)).sum();
        rms_sum += (sq / (j_n * c_n) as f64).sqrt();
    }
    let mean_rms = rms_sum / f_target as f64;
    let degenerate = !(mean_rms > 0.0 && mean_rms.is_finite());
    if degenerate {
        out.iter_mut().for_each(|v| *v = 0.0);
    } else {
        out.iter_mut().for_each(|v| *v /= mean_rms);
    }
    Ok(Normalized { tensor: Tensor::new(&[j_n, c_n, f_target], out)?, degenerate })
}

// Linear interpolation with both endpoints pinned; integer positions copy
// the source value exactly.
fn resample_into(src: &[f64], dst: &mut [f64]) {
    let (n, m) = (src.len(), dst.len());
    if m == 1 || n == 1 {
        dst.iter_mut().for_each(|v| *v = src[0]);
        return;
    }
    for (i, v) in dst.iter_mut().enumerate() {
        let pos = (i * (n - 1)) as f64 / (m - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        let t = pos - lo as f64;
        *v = if t == 0.0 { src[lo] } else { src[lo] + t * (src[lo + 1] - src[lo]) };
    }
}

/// Parent of every joint in a simple chain rooted at joint 0.
pub fn chain_parents(joints: usize) -> Vec<Option<usize>> {
    (0..joints).map(|j| j.checked_sub(1)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Modalities {
    pub joint: SkeletonSequence,
    pub bone: SkeletonSequence,
    pub joint_motion: SkeletonSequence,
    pub bone_motion: SkeletonSequence,
}

impl Modalities {
    pub fn streams(&self) -> [(&'static str, &SkeletonSequence); 4] {
        [
            ("joint", &self.joint),
            ("bone", &self.bone),
            ("joint_motion", &self.joint_motion),
            ("bone_motion", &self.bone_motion),
        ]
    }
}

/// Stream names in ensemble order.
pub const MODALITIES: [&str; 4] = ["joint", "bone", "joint_motion", "bone_motion"];

/// Bones are child minus parent (zero for roots). Motion is the forward
/// frame difference, with the sequence padded by repeating its last frame,
/// so the final motion frame is zero.
pub fn derive_modalities(s: &SkeletonSequence, parents: &[Option<usize>]) -> Result<Modalities> {
    s.validate()?;
    if parents.len() != s.joints {
        return Err(Error::Contract(format!("parent table has {} entries for {} joints", parents.len(), s.joints)));
    }
    if let Some((j, p)) =
        parents.iter().enumerate().find_map(|(j, p)| p.filter(|&p| p >= s.joints || p == j).map(|p| (j, p)))
    {
        return Err(Error::Contract(format!("joint {j} has invalid parent {p}")));
    }
    let (c_n, f_n) = (s.channels, s.frames);
    let mut bone = vec![0.0; s.coords.len()];
    for (j, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            for c in 0..c_n {
                for f in 0..f_n {
                    bone[(j * c_n + c) * f_n + f] = s.at(j, c, f) - s.at(*p, c, f);
                }
            }
        }
    }
    let motion = |x: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; x.len()];
        for (mr, xr) in m.chunks_mut(f_n).zip(x.chunks(f_n)) {
            for f in 0..f_n.saturating_sub(1) {
                mr[f] = xr[f + 1] - xr[f];
            }
        }
        m
    };
    Ok(Modalities {
        joint: s.clone(),
        joint_motion: s.with_coords(motion(&s.coords)),
        bone_motion: s.with_coords(motion(&bone)),
        bone: s.with_coords(bone),
    })
}

/// Subjects and views cycle through these many ids in synthetic data.
pub const SYNTH_SUBJECTS: u32 = 10;
pub const SYNTH_VIEWS: u32 = 3;
/// Rest spacing between neighbouring joints of the synthetic chain.
const SYNTH_BONE: f64 = 0.1;

/// Class `k`'s temporal frequency, as the DCT index its trajectory peaks
/// at. The first half of the classes sit in the bottom third of the
/// spectrum, the rest in the top 40%.
pub fn synth_frequency(class: usize, num_classes: usize, frames: usize) -> usize {
    let n_lo = num_classes.div_ceil(2);
    let n_hi = num_classes - n_lo;
    let (start, width, rank, count) =
        if class < n_lo { (0.08, 0.20, class, n_lo) } else { (0.62, 0.22, class - n_lo, n_hi) };
    let frac = if count > 1 { start + width * rank as f64 / (count - 1) as f64 } else { start };
    ((frac * frames as f64).round() as usize).clamp(1, frames.saturating_sub(1).max(1))
}

/// One synthetic sample. The skeleton is a chain along y; joint `j`
/// circles in the x–z plane with radius growing along the chain, at the
/// class frequency, lagging its parent by one frame. Phase and amplitude
/// come from `rng`; coordinates are rounded to f32 so both storage formats
/// hold them exactly.
pub fn synth_sample(
    class: usize,
    num_classes: usize,
    joints: usize,
    frames: usize,
    noise_sigma: f64,
    rng: &mut Rng,
) -> SkeletonSequence {
    let k = synth_frequency(class, num_classes, frames);
    let omega = PI * k as f64 / frames as f64;
    let phase = rng.uniform_range(0.0, TAU);
    let amp = rng.uniform_range(0.5, 1.5);
    let mut coords = vec![0.0; joints * 3 * frames];
    let reach = joints.saturating_sub(1).max(1) as f64;
    for j in 0..joints {
        let radius = amp * j as f64 / reach;
        for f in 0..frames {
            let theta = omega * (f as f64 + 0.5 - j as f64) + phase;
            let base = [radius * theta.cos(), SYNTH_BONE * j as f64, radius * theta.sin()];
            for (c, b) in base.iter().enumerate() {
                coords[(j * 3 + c) * frames + f] = b + noise_sigma * rng.normal();
            }
        }
    }
    for v in &mut coords {
        *v = f64::from(*v as f32);
    }
    SkeletonSequence { joints, channels: 3, frames, coords, label: class, subject: None, view: None }
}

/// `samples_per_class` samples of each class, class-major. Sample `i`
/// draws from its own stream of `seed` and gets subject `i % 10` and view
/// `(i / 10) % 3`, counting within its class.
pub fn synth_generate(
    num_classes: usize,
    samples_per_class: usize,
    joints: usize,
    frames: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<Vec<SkeletonSequence>> {
    if num_classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {num_classes}")));
    }
    if joints == 0 || frames == 0 {
        return Err(Error::Config(format!("{joints} joints × {frames} frames")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {noise_sigma}")));
    }
    let mut out = Vec::with_capacity(num_classes * samples_per_class);
    for class in 0..num_classes {
        for i in 0..samples_per_class {
            let stream = (class * samples_per_class + i) as u64;
            let mut rng = Rng::derive(seed, stream);
            let mut s = synth_sample(class, num_classes, joints, frames, noise_sigma, &mut rng);
            s.subject = Some(i as u32 % SYNTH_SUBJECTS);
            s.view = Some((i as u32 / SYNTH_SUBJECTS) % SYNTH_VIEWS);
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKey {
    Subject,
    View,
}

impl SplitKey {
    pub fn parse(s: &str) -> Result<SplitKey> {
        match s {
            "subject" | "xsub" => Ok(SplitKey::Subject),
            "view" | "xview" => Ok(SplitKey::View),
            _ => Err(Error::Config(format!("split key must be subject or view, got {s:?}"))),
        }
    }

    fn of(self, s: &SkeletonSequence) -> Option<u32> {
        match self {
            SplitKey::Subject => s.subject,
            SplitKey::View => s.view,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    /// Byte offset of the record in the dataset's SKL1 layout.
    pub offset: usize,
    pub label: usize,
    pub subject: Option<u32>,
    pub view: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
    pub split_key: SplitKey,
    pub test_ids: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    /// Samples whose key is in `test_ids` form the test split; the rest
    /// train. Samples without the key are rejected.
    pub fn build(
        seqs: &[SkeletonSequence],
        class_names: Vec<String>,
        split_key: SplitKey,
        test_ids: &[u32],
    ) -> Result<DatasetManifest> {
        let offsets = record_offsets(seqs);
        let test_set: BTreeSet<u32> = test_ids.iter().copied().collect();
        let (mut train, mut test, mut samples) = (Vec::new(), Vec::new(), Vec::new());
        for (i, s) in seqs.iter().enumerate() {
            if s.label >= class_names.len() {
                return Err(Error::Contract(format!(
                    "sample {i} has label {} but only {} classes",
                    s.label,
                    class_names.len()
                )));
            }
            let key = split_key
                .of(s)
                .ok_or_else(|| Error::Contract(format!("sample {i} has no {split_key:?} id to split on")))?;
            if test_set.contains(&key) {
                test.push(i);
            } else {
                train.push(i);
            }
            samples.push(ManifestEntry {
                index: i,
                offset: offsets[i],
                label: s.label,
                subject: s.subject,
                view: s.view,
            });
        }
        Ok(DatasetManifest { class_names, samples, split_key, test_ids: test_set.into_iter().collect(), train, test })
    }

    /// Subject split holding out the two highest synthetic subject ids.
    pub fn synth_default(seqs: &[SkeletonSequence], num_classes: usize) -> Result<DatasetManifest> {
        let names = (0..num_classes).map(|k| format!("class{k}")).collect();
        DatasetManifest::build(seqs, names, SplitKey::Subject, &[SYNTH_SUBJECTS - 2, SYNTH_SUBJECTS - 1])
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}
