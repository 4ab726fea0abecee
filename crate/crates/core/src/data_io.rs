//! Datasets, checkpoints and learning curves on disk.
//!
//! Dataset files are `ROFGDS1\0`, five little-endian `u32` header fields
//! (N, C, H, W, classes), the `f32` image payload and `u16` labels. Every
//! write goes to a temporary sibling first and is renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::rng::{stream, Rng};

pub const DATASET_MAGIC: &[u8; 8] = b"ROFGDS1\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ROFGCK1\0";

pub const CURVES_HEADER: &str = "epoch,lr,train_nat_acc,train_rob_acc,test_nat_acc,test_rob_acc,\
train_adv_loss,test_adv_loss,aug_rounds_mean,small_loss_frac";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled images `[N, C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: DenseArray,
    labels: Vec<usize>,
    split: Split,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: DenseArray, labels: Vec<usize>, split: Split, class_count: usize) -> Result<Self> {
        let bad = |detail: String| Err(Error::contract("Dataset", detail));
        if images.shape().len() != 4 {
            return bad(format!("images must be [N, C, H, W], got {:?}", images.shape()));
        }
        if images.rows() == 0 {
            return bad("empty dataset".into());
        }
        if labels.len() != images.rows() {
            return bad(format!("{} labels for {} images", labels.len(), images.rows()));
        }
        if class_count < 2 || class_count > u16::MAX as usize + 1 {
            return bad(format!("class count {class_count}"));
        }
        if let Some(i) = labels.iter().position(|&l| l >= class_count) {
            return bad(format!("label {} at row {i} with {class_count} classes", labels[i]));
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return bad(format!("pixel {} at flat index {i} outside [0, 1]", images.data()[i]));
        }
        Ok(Self {
            images,
            labels,
            split,
            class_count,
        })
    }

    pub fn images(&self) -> &DenseArray {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one example.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels of the given rows.
    pub fn batch(&self, rows: &[usize]) -> (DenseArray, Vec<usize>) {
        (
            self.images.select_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian clusters around centers spaced on a circle.
    Blobs,
    /// Concentric rings, one radius per class.
    Rings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Render {
    /// The 2-D point itself, stored as `[N, 1, 1, 2]`.
    Features,
    /// A `side x side` one-channel image with a bright spot at the point.
    Image { side: usize },
}

/// Parameters of the synthetic desk-scale datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub render: Render,
    pub n_train: usize,
    pub n_test: usize,
    pub class_count: usize,
    /// Standard deviation of the point around its class template, in unit-square
    /// coordinates.
    pub noise: f32,
    /// Standard deviation of per-pixel Gaussian texture (image render only).
    pub pixel_noise: f32,
    /// Spot radius in pixels (image render only).
    pub spot_width: f32,
    /// Fraction of training labels reassigned by a random permutation
    /// (class counts are preserved). Test labels are never touched.
    pub label_noise: f32,
    /// Distractor spots per image at uniform positions with amplitude in
    /// `[0.3, 1]` (image render only). They carry no label information.
    pub clutter: usize,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, render: Render, n_train: usize, n_test: usize, class_count: usize) -> Self {
        Self {
            kind,
            render,
            n_train,
            n_test,
            class_count,
            noise: 0.0,
            pixel_noise: 0.0,
            spot_width: 1.5,
            label_noise: 0.0,
            clutter: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::contract("gen_synthetic", detail));
        if self.n_train == 0 || self.n_test == 0 || self.class_count < 2 {
            return bad(format!(
                "need positive sizes and >= 2 classes, got {}/{}/{}",
                self.n_train, self.n_test, self.class_count
            ));
        }
        for (name, v) in [("noise", self.noise), ("pixel_noise", self.pixel_noise)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v}"));
            }
        }
        if !(self.spot_width > 0.0) || !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!(
                "spot_width = {}, label_noise = {}",
                self.spot_width, self.label_noise
            ));
        }
        if let Render::Image { side } = self.render {
            if side == 0 {
                return bad("zero image side".into());
            }
        }
        Ok(())
    }

    fn point(&self, class: usize, rng: &mut Rng) -> (f32, f32) {
        let c = self.class_count as f32;
        match self.kind {
            SyntheticKind::Blobs => {
                let angle = std::f32::consts::TAU * class as f32 / c;
                (
                    0.5 + 0.3 * angle.cos() + self.noise * rng.normal(),
                    0.5 + 0.3 * angle.sin() + self.noise * rng.normal(),
                )
            }
            SyntheticKind::Rings => {
                let radius = 0.05 + 0.4 * class as f32 / (c - 1.0) + self.noise * rng.normal();
                let angle = std::f32::consts::TAU * rng.uniform();
                (0.5 + radius * angle.cos(), 0.5 + radius * angle.sin())
            }
        }
    }

    fn render_into(&self, (px, py): (f32, f32), rng: &mut Rng, out: &mut Vec<f32>) {
        match self.render {
            Render::Features => out.extend([px.clamp(0.0, 1.0), py.clamp(0.0, 1.0)]),
            Render::Image { side } => {
                let s = side as f32;
                let mut spots = vec![(px * s - 0.5, py * s - 0.5, 1.0f32)];
                for _ in 0..self.clutter {
                    let (u, v) = (rng.uniform(), rng.uniform());
                    spots.push((u * s - 0.5, v * s - 0.5, rng.uniform_range(0.3, 1.0)));
                }
                let inv = 1.0 / (2.0 * self.spot_width * self.spot_width);
                for r in 0..side {
                    for c in 0..side {
                        let intensity: f32 = spots
                            .iter()
                            .map(|&(cx, cy, a)| a * (-((c as f32 - cx).powi(2) + (r as f32 - cy).powi(2)) * inv).exp())
                            .sum();
                        let texture = if self.pixel_noise > 0.0 {
                            self.pixel_noise * rng.normal()
                        } else {
                            0.0
                        };
                        out.push((intensity + texture).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }

    fn generate(&self, n: usize, split: Split, rng: &mut Rng) -> Result<Dataset> {
        // Stratified: class k gets floor(n / C) or one more, then shuffled.
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.class_count).collect();
        rng.shuffle(&mut labels);
        let (h, w) = match self.render {
            Render::Features => (1, 2),
            Render::Image { side } => (side, side),
        };
        let mut data = Vec::with_capacity(n * h * w);
        for &l in &labels {
            let p = self.point(l, rng);
            self.render_into(p, rng, &mut data);
        }
        if split == Split::Train && self.label_noise > 0.0 {
            let k = (self.label_noise * n as f32).round() as usize;
            let mut rows: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut rows);
            let chosen = &rows[..k];
            let mut moved: Vec<usize> = chosen.iter().map(|&r| labels[r]).collect();
            rng.shuffle(&mut moved);
            for (&r, l) in chosen.iter().zip(moved) {
                labels[r] = l;
            }
        }
        Dataset::new(DenseArray::new(vec![n, 1, h, w], data)?, labels, split, self.class_count)
    }
}

/// Train and test sets drawn from disjoint streams of `rng`.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &Rng) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = spec.generate(spec.n_train, Split::Train, &mut rng.derive(&[stream::DATA_TRAIN]))?;
    let test = spec.generate(spec.n_test, Split::Test, &mut rng.derive(&[stream::DATA_TEST]))?;
    Ok((train, test))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Sequential little-endian reader that reports byte offsets.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn err(&self, section: &str, detail: impl std::fmt::Display) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            detail: format!("{section}: {detail}"),
        }
    }

    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.err(
                section,
                format!("truncated, need {n} bytes but {remaining} remain"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self, section: &str) -> Result<()> {
        let extra = self.bytes.len() - self.pos;
        if extra > 0 {
            return Err(self.err(section, format!("{extra} trailing bytes")));
        }
        Ok(())
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let s = ds.images.shape();
    let mut out = Vec::with_capacity(28 + ds.images.len() * 4 + ds.len() * 2);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [s[0], s[1], s[2], s[3], ds.class_count] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in ds.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8], split: Split) -> Result<Dataset> {
    let mut cur = Cursor::new(bytes);
    if cur.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "magic: not a ROFGDS1 dataset".into(),
        });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = cur.u32("header")? as usize;
    }
    let [n, c, h, w, classes] = dims;
    if n == 0 || c == 0 || h == 0 || w == 0 || classes < 2 {
        return Err(Error::Parse {
            offset: 8,
            detail: format!("header: degenerate dims N={n} C={c} H={h} W={w} classes={classes}"),
        });
    }
    let count = [c, h, w]
        .iter()
        .try_fold(n, |acc, &d| acc.checked_mul(d))
        .filter(|&k| k.checked_mul(4).is_some())
        .ok_or_else(|| cur.err("header", "image payload size overflows"))?;
    let payload_start = cur.pos;
    let raw = cur.take(count * 4, "images")?;
    let mut images = Vec::with_capacity(count);
    for (i, b) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parse {
                offset: (payload_start + 4 * i) as u64,
                detail: format!("images: pixel {v} outside [0, 1]"),
            });
        }
        images.push(v);
    }
    let labels_start = cur.pos;
    let raw = cur.take(n * 2, "labels")?;
    let mut labels = Vec::with_capacity(n);
    for (i, b) in raw.chunks_exact(2).enumerate() {
        let l = u16::from_le_bytes([b[0], b[1]]) as usize;
        if l >= classes {
            return Err(Error::Parse {
                offset: (labels_start + 2 * i) as u64,
                detail: format!("labels: label {l} out of range for {classes} classes"),
            });
        }
        labels.push(l);
    }
    cur.finish("labels")?;
    Dataset::new(DenseArray::new(vec![n, c, h, w], images)?, labels, split, classes)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    atomic_write(path, &encode_dataset(ds))
}

/// Loads a dataset file; the split is not stored on disk and is supplied by
/// the caller.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    decode_dataset(&read_file(path)?, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    BestRobust,
    Last,
}

impl CheckpointKind {
    fn tag(self) -> &'static str {
        match self {
            CheckpointKind::BestRobust => "best-robust",
            CheckpointKind::Last => "last",
        }
    }
}

/// Parameters and optimizer velocity at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub kind: CheckpointKind,
    /// Test robust accuracy at `epoch`.
    pub metric: f64,
    pub params: ModelParams,
    pub velocity: ModelParams,
}

// Layout: magic, u32 manifest length, UTF-8 manifest, raw f32 payload in
// manifest order. Manifest lines: `epoch=`, `kind=`, `metric=` and one
// `<group> <name> <d0,d1,..>` line per array.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut manifest = String::new();
    let _ = writeln!(manifest, "epoch={}", ck.epoch);
    let _ = writeln!(manifest, "kind={}", ck.kind.tag());
    let _ = writeln!(manifest, "metric={:?}", ck.metric);
    let groups = [("param", &ck.params), ("velocity", &ck.velocity)];
    for (group, set) in groups {
        for (name, arr) in set.iter() {
            let dims: Vec<String> = arr.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(manifest, "{group} {name} {}", dims.join(","));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, set) in groups {
        for arr in set.arrays() {
            for v in arr.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "magic: not a ROFGCK1 checkpoint".into(),
        });
    }
    let len = cur.u32("manifest length")? as usize;
    let manifest_at = cur.pos as u64;
    let manifest = std::str::from_utf8(cur.take(len, "manifest")?).map_err(|e| Error::Parse {
        offset: manifest_at,
        detail: format!("manifest: {e}"),
    })?;
    let bad = |detail: String| Error::Parse {
        offset: manifest_at,
        detail: format!("manifest: {detail}"),
    };
    let (mut epoch, mut kind, mut metric) = (None, None, None);
    let mut arrays: Vec<(bool, String, Vec<usize>)> = Vec::new();
    for line in manifest.lines() {
        if let Some(v) = line.strip_prefix("epoch=") {
            epoch = Some(v.parse::<usize>().map_err(|e| bad(format!("epoch: {e}")))?);
        } else if let Some(v) = line.strip_prefix("kind=") {
            kind = Some(match v {
                "best-robust" => CheckpointKind::BestRobust,
                "last" => CheckpointKind::Last,
                other => return Err(bad(format!("unknown kind {other:?}"))),
            });
        } else if let Some(v) = line.strip_prefix("metric=") {
            metric = Some(v.parse::<f64>().map_err(|e| bad(format!("metric: {e}")))?);
        } else {
            let parts: Vec<&str> = line.split(' ').collect();
            let [group, name, dims] = parts[..] else {
                return Err(bad(format!("unrecognized line {line:?}")));
            };
            let velocity = match group {
                "param" => false,
                "velocity" => true,
                other => return Err(bad(format!("unknown group {other:?}"))),
            };
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("shape of {name}: {e}")))?;
            arrays.push((velocity, name.to_string(), shape));
        }
    }
    let (Some(epoch), Some(kind), Some(metric)) = (epoch, kind, metric) else {
        return Err(bad("missing epoch, kind or metric".into()));
    };
    let (mut params, mut velocity) = (Vec::new(), Vec::new());
    for (is_velocity, name, shape) in arrays {
        let bytes = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("shape of {name} overflows")))?;
        let raw = cur.take(bytes, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let entry = (name, DenseArray::new(shape, data)?);
        if is_velocity {
            velocity.push(entry);
        } else {
            params.push(entry);
        }
    }
    cur.finish("payload")?;
    Ok(Checkpoint {
        epoch,
        kind,
        metric,
        params: ModelParams::from_entries(params),
        velocity: ModelParams::from_entries(velocity),
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// One row of the learning curves.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CurveRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_nat_acc: f64,
    pub train_rob_acc: f64,
    pub test_nat_acc: f64,
    pub test_rob_acc: f64,
    pub train_adv_loss: f64,
    pub test_adv_loss: f64,
    pub aug_rounds_mean: f64,
    pub small_loss_frac: f64,
}

/// Rounds to the 6 decimals the CSV stores, so in-memory records and
/// parsed-back records compare equal.
pub fn quantize6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl CurveRecord {
    fn values(&self) -> [f64; 9] {
        [
            self.lr,
            self.train_nat_acc,
            self.train_rob_acc,
            self.test_nat_acc,
            self.test_rob_acc,
            self.train_adv_loss,
            self.test_adv_loss,
            self.aug_rounds_mean,
            self.small_loss_frac,
        ]
    }

    /// Copy with every metric rounded to the stored precision.
    pub fn quantized(&self) -> Self {
        let v = self.values().map(quantize6);
        Self {
            epoch: self.epoch,
            lr: v[0],
            train_nat_acc: v[1],
            train_rob_acc: v[2],
            test_nat_acc: v[3],
            test_rob_acc: v[4],
            train_adv_loss: v[5],
            test_adv_loss: v[6],
            aug_rounds_mean: v[7],
            small_loss_frac: v[8],
        }
    }
}

pub fn format_curves(records: &[CurveRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::contract("write_curves", "no records"));
    }
    if let Some(w) = records.windows(2).find(|w| w[1].epoch <= w[0].epoch) {
        return Err(Error::contract(
            "write_curves",
            format!("epochs not strictly increasing: {} then {}", w[0].epoch, w[1].epoch),
        ));
    }
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in records {
        if r.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "write_curves",
                node: None,
                step: Some(r.epoch),
            });
        }
        let _ = write!(out, "{}", r.epoch);
        for v in r.values() {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_curves(text: &str) -> Result<Vec<CurveRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVES_HEADER) {
        return Err(Error::Parse {
            offset: 0,
            detail: "header: unexpected curves header".into(),
        });
    }
    let mut offset = CURVES_HEADER.len() as u64 + 1;
    let mut records = Vec::new();
    for line in lines {
        let bad = |detail: String| Error::Parse {
            offset,
            detail: format!("row: {detail}"),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(bad(format!("{} fields", fields.len())));
        }
        let epoch = fields[0].parse::<usize>().map_err(|e| bad(format!("epoch: {e}")))?;
        let mut v = [0.0f64; 9];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}")))?;
        }
        records.push(CurveRecord {
            epoch,
            lr: v[0],
            train_nat_acc: v[1],
            train_rob_acc: v[2],
            test_nat_acc: v[3],
            test_rob_acc: v[4],
            train_adv_loss: v[5],
            test_adv_loss: v[6],
            aug_rounds_mean: v[7],
            small_loss_frac: v[8],
        });
        offset += line.len() as u64 + 1;
    }
    if records.is_empty() {
        return Err(Error::Parse {
            offset,
            detail: "rows: no records".into(),
        });
    }
    Ok(records)
}

/// Rewrites the whole curves file atomically.
pub fn write_curves(records: &[CurveRecord], path: &Path) -> Result<()> {
    atomic_write(path, format_curves(records)?.as_bytes())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRecord>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to() as u64,
        detail: "curves: invalid UTF-8".into(),
    })?;
    parse_curves(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        let mut s = SyntheticSpec::new(SyntheticKind::Blobs, Render::Image { side: 8 }, 30, 20, 10);
        s.noise = 0.05;
        s.pixel_noise = 0.05;
        s
    }

    #[test]
    fn stratified_counts() {
        let (train, test) = gen_synthetic(&small_spec(), &Rng::new(3)).unwrap();
        assert_eq!(train.class_counts(), vec![3; 10]);
        assert_eq!(test.class_counts(), vec![2; 10]);
        assert_eq!(train.split(), Split::Train);
    }

    #[test]
    fn label_noise_keeps_counts() {
        let mut spec = small_spec();
        spec.label_noise = 0.5;
        let (train, _) = gen_synthetic(&spec, &Rng::new(3)).unwrap();
        assert_eq!(train.class_counts(), vec![3; 10]);
        let clean = gen_synthetic(&small_spec(), &Rng::new(3)).unwrap().0;
        assert_eq!(train.images(), clean.images());
        assert_ne!(train.labels(), clean.labels());
    }

    #[test]
    fn dataset_round_trip() {
        let (train, _) = gen_synthetic(&small_spec(), &Rng::new(9)).unwrap();
        let back = decode_dataset(&encode_dataset(&train), Split::Train).unwrap();
        assert_eq!(back, train);
    }

    #[test]
    fn truncated_dataset_names_section() {
        let (train, _) = gen_synthetic(&small_spec(), &Rng::new(9)).unwrap();
        let bytes = encode_dataset(&train);
        let err = decode_dataset(&bytes[..bytes.len() - 1], Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { ref detail, .. } if detail.starts_with("labels")));
        let err = decode_dataset(&bytes[..40], Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 28, ref detail } if detail.starts_with("images")));
        let err = decode_dataset(&bytes[..6], Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { ref detail, .. } if detail.starts_with("magic")));
    }

    #[test]
    fn curves_validation() {
        let r = CurveRecord {
            epoch: 3,
            ..Default::default()
        };
        assert!(format_curves(&[]).is_err());
        assert!(format_curves(&[r, r]).is_err());
        let text = format_curves(&[r]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_curves(&text).unwrap(), vec![r]);
    }
}
