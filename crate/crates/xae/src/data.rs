//! Dataset plumbing: the labeled-patch container and its binary file
//! format, the IDX digit-file reader, sub-dataset assembly per source
//! group, patch import from netpbm images, and sliding-window patch
//! extraction with probability-map inference.
//!
//! Flattening convention, used identically everywhere a patch becomes a
//! vector: channel-major, then row, then column — index
//! `c·(h·w) + r·w + col`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::FcnModel;
use crate::error::{Result, XaeError};
use crate::labels::{LabelSet, PartitionSpec};
use crate::model::XaeModel;
use crate::netpbm;

/// Labeled patches of one fixed geometry with a label id ↔ name table.
/// Values are stored as f32 in [0,1]; math runs in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    channels: usize,
    height: usize,
    width: usize,
    table: BTreeMap<u32, String>,
    labels: Vec<u32>,
    /// Record-major values, `len·dim` entries.
    data: Vec<f32>,
}

impl PatchDataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        table: BTreeMap<u32, String>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(XaeError::InvalidData(format!(
                "degenerate patch geometry {channels}x{height}x{width}"
            )));
        }
        Ok(PatchDataset {
            channels,
            height,
            width,
            table,
            labels: Vec::new(),
            data: Vec::new(),
        })
    }

    pub fn push(&mut self, label: u32, values: &[f32]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(XaeError::DimMismatch {
                expected: self.dim(),
                got: values.len(),
            });
        }
        if !self.table.contains_key(&label) {
            return Err(XaeError::InvalidData(format!(
                "record {}: label id {label} missing from the label table",
                self.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(XaeError::InvalidData(format!(
                "record {}: value {v} outside [0,1]",
                self.len()
            )));
        }
        self.labels.push(label);
        self.data.extend_from_slice(values);
        Ok(())
    }

    /// Flat vector length: channels·height·width.
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn table(&self) -> &BTreeMap<u32, String> {
        &self.table
    }

    pub fn label_of(&self, k: usize) -> u32 {
        self.labels[k]
    }

    pub fn values_of(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim()..(k + 1) * self.dim()]
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        self.table.get(&id).map(String::as_str)
    }

    /// Label ids present in the table, ascending.
    pub fn label_ids(&self) -> Vec<u32> {
        self.table.keys().copied().collect()
    }

    /// Record count per table label id (zero entries included).
    pub fn counts_per_label(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> =
            self.table.keys().map(|&id| (id, 0)).collect();
        for &l in &self.labels {
            *counts.get_mut(&l).expect("record labels are in the table") += 1;
        }
        counts
    }

    /// Gather records as f64 rows (one row per index, in given order).
    pub fn to_rows_f64(&self, indices: &[usize]) -> Array2<f64> {
        let dim = self.dim();
        let mut out = Array2::zeros((indices.len(), dim));
        for (row, &k) in indices.iter().enumerate() {
            let src = self.values_of(k);
            for (c, &v) in src.iter().enumerate() {
                out[[row, c]] = v as f64;
            }
        }
        out
    }

    /// New dataset holding the records at `indices` (order preserved);
    /// the label table is carried over unchanged so class identity is
    /// stable across subsets.
    pub fn subset(&self, indices: &[usize]) -> Result<PatchDataset> {
        let mut out = PatchDataset::new(self.channels, self.height, self.width, self.table.clone())?;
        for &k in indices {
            if k >= self.len() {
                return Err(XaeError::InvalidData(format!(
                    "subset index {k} out of range for {} records",
                    self.len()
                )));
            }
            out.labels.push(self.labels[k]);
            out.data.extend_from_slice(self.values_of(k));
        }
        Ok(out)
    }

    /// Keep only records (and table entries) whose label is in `keep`.
    pub fn filter_labels(&self, keep: &LabelSet) -> Result<PatchDataset> {
        let table: BTreeMap<u32, String> = self
            .table
            .iter()
            .filter(|(id, _)| keep.contains(**id))
            .map(|(id, name)| (*id, name.clone()))
            .collect();
        let mut out = PatchDataset::new(self.channels, self.height, self.width, table)?;
        for k in 0..self.len() {
            if keep.contains(self.labels[k]) {
                out.labels.push(self.labels[k]);
                out.data.extend_from_slice(self.values_of(k));
            }
        }
        Ok(out)
    }

    /// Cap the record count per label: labels above the cap keep a
    /// seeded random sample (dataset order preserved among survivors).
    pub fn subsample_per_label(&self, cap: usize, seed: u64) -> Result<PatchDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (k, &l) in self.labels.iter().enumerate() {
            by_label.entry(l).or_default().push(k);
        }
        let mut kept = Vec::new();
        // Ascending label order; the rng is consumed only by labels
        // that actually exceed the cap.
        for (_, mut idx) in by_label {
            if idx.len() > cap {
                idx.shuffle(&mut rng);
                idx.truncate(cap);
            }
            kept.extend(idx);
        }
        kept.sort_unstable();
        self.subset(&kept)
    }
}

/// Read a pair of IDX files (big-endian; magic 2051 for images with
/// dims [count, rows, cols], magic 2049 for labels with [count]) into a
/// single-channel dataset; bytes scale to [0,1] by /255.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<PatchDataset> {
    const IMAGE_MAGIC: u32 = 2051;
    const LABEL_MAGIC: u32 = 2049;

    fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
        let end = off + 4;
        if end > bytes.len() {
            return Err(XaeError::MalformedFile {
                path: path.into(),
                reason: "truncated header".into(),
            });
        }
        Ok(u32::from_be_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]))
    }

    let img_bytes = std::fs::read(image_path).map_err(|e| XaeError::io(image_path, e))?;
    let magic = be_u32(&img_bytes, 0, image_path)?;
    if magic != IMAGE_MAGIC {
        return Err(XaeError::BadMagic {
            path: image_path.into(),
            got: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = be_u32(&img_bytes, 4, image_path)? as usize;
    let rows = be_u32(&img_bytes, 8, image_path)? as usize;
    let cols = be_u32(&img_bytes, 12, image_path)? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() < expected {
        return Err(XaeError::MalformedFile {
            path: image_path.into(),
            reason: format!(
                "truncated pixel data: expected {expected} bytes, found {}",
                img_bytes.len()
            ),
        });
    }

    let lbl_bytes = std::fs::read(label_path).map_err(|e| XaeError::io(label_path, e))?;
    let magic = be_u32(&lbl_bytes, 0, label_path)?;
    if magic != LABEL_MAGIC {
        return Err(XaeError::BadMagic {
            path: label_path.into(),
            got: magic,
            expected: LABEL_MAGIC,
        });
    }
    let label_count = be_u32(&lbl_bytes, 4, label_path)? as usize;
    if lbl_bytes.len() < 8 + label_count {
        return Err(XaeError::MalformedFile {
            path: label_path.into(),
            reason: "truncated label data".into(),
        });
    }
    if count != label_count {
        return Err(XaeError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let labels = &lbl_bytes[8..8 + label_count];
    let table: BTreeMap<u32, String> = labels
        .iter()
        .map(|&l| (l as u32, l.to_string()))
        .collect();
    let mut ds = PatchDataset::new(1, rows, cols, table)?;
    let dim = rows * cols;
    let mut buf = vec![0f32; dim];
    for k in 0..count {
        let src = &img_bytes[16 + k * dim..16 + (k + 1) * dim];
        for (dst, &b) in buf.iter_mut().zip(src) {
            *dst = b as f32 / 255.0;
        }
        ds.push(labels[k] as u32, &buf)?;
    }
    Ok(ds)
}

const XPD_MAGIC: [u8; 4] = *b"XPD1";

/// Write the labeled-patch container: magic "XPD1"; little-endian u32
/// version=1, record_count, channels, height, width, label_count; the
/// label table as (u32 id, u16 name length, UTF-8 name) entries; then
/// per record a u32 label id followed by the f32 values.
pub fn save_patches(ds: &PatchDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| XaeError::io(path, e);
    w.write_all(&XPD_MAGIC).map_err(io_err)?;
    for v in [
        1u32,
        ds.len() as u32,
        ds.channels as u32,
        ds.height as u32,
        ds.width as u32,
        ds.table.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for (id, name) in &ds.table {
        w.write_all(&id.to_le_bytes()).map_err(io_err)?;
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(XaeError::InvalidData(format!(
                "label name for id {id} exceeds {} bytes",
                u16::MAX
            )));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
    }
    for k in 0..ds.len() {
        w.write_all(&ds.labels[k].to_le_bytes()).map_err(io_err)?;
        for &v in ds.values_of(k) {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read a container written by [`save_patches`]; round trips are exact
/// at f32 precision.
pub fn load_patches(path: &Path) -> Result<PatchDataset> {
    let bytes = std::fs::read(path).map_err(|e| XaeError::io(path, e))?;
    let malformed = |reason: String| XaeError::MalformedFile {
        path: path.into(),
        reason,
    };
    if bytes.len() < 4 + 6 * 4 {
        return Err(malformed("file too short for a header".into()));
    }
    if bytes[..4] != XPD_MAGIC {
        return Err(XaeError::BadMagic {
            path: path.into(),
            got: u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
            expected: u32::from_le_bytes(XPD_MAGIC),
        });
    }
    let le_u32 = |off: usize| u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
    let version = le_u32(4);
    if version != 1 {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let record_count = le_u32(8) as usize;
    let channels = le_u32(12) as usize;
    let height = le_u32(16) as usize;
    let width = le_u32(20) as usize;
    let label_count = le_u32(24) as usize;
    let mut pos = 28;
    let mut table = BTreeMap::new();
    for _ in 0..label_count {
        if pos + 6 > bytes.len() {
            return Err(malformed("truncated label table".into()));
        }
        let id = le_u32(pos);
        let name_len = u16::from_le_bytes([bytes[pos + 4], bytes[pos + 5]]) as usize;
        pos += 6;
        if pos + name_len > bytes.len() {
            return Err(malformed("truncated label name".into()));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| malformed(format!("label id {id}: name is not UTF-8")))?;
        if table.insert(id, name.to_string()).is_some() {
            return Err(malformed(format!("duplicate label id {id} in table")));
        }
        pos += name_len;
    }
    let mut ds = PatchDataset::new(channels, height, width, table)?;
    let dim = ds.dim();
    let record_bytes = 4 + dim * 4;
    let expected_end = pos + record_count * record_bytes;
    if bytes.len() < expected_end {
        return Err(malformed(format!(
            "truncated records: expected {expected_end} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected_end {
        return Err(malformed("trailing bytes after records".into()));
    }
    let mut values = vec![0f32; dim];
    for k in 0..record_count {
        let label = le_u32(pos);
        pos += 4;
        for v in values.iter_mut() {
            *v = f32::from_le_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]);
            pos += 4;
        }
        ds.push(label, &values).map_err(|e| match e {
            XaeError::InvalidData(reason) => malformed(format!("record {k}: {reason}")),
            other => other,
        })?;
    }
    Ok(ds)
}

/// Per-source-group record assignment over one dataset. Groups
/// partition the records: every record appears in exactly one group.
#[derive(Debug, Clone)]
pub struct GroupedData {
    dataset: PatchDataset,
    spec: PartitionSpec,
    groups: Vec<Vec<usize>>,
}

impl GroupedData {
    pub fn dataset(&self) -> &PatchDataset {
        &self.dataset
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Record indices of group i, ascending.
    pub fn group_indices(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    /// All of group i's records as f64 rows.
    pub fn group_rows(&self, i: usize) -> Array2<f64> {
        self.dataset.to_rows_f64(&self.groups[i])
    }
}

/// Assign every record to exactly one source group whose label set
/// contains its label. Records of a label shared by several groups are
/// split evenly between them by a seeded shuffle; counts per group
/// differ by at most one. A label belonging to no group is an error.
pub fn assemble_groups(
    dataset: PatchDataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<GroupedData> {
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, &l) in dataset.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); spec.source_groups().len()];
    // Ascending label order; the rng is consumed only by shared labels.
    for (label, mut records) in by_label {
        let containing: Vec<usize> = spec
            .source_groups()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(label))
            .map(|(i, _)| i)
            .collect();
        match containing.len() {
            0 => {
                let name = dataset
                    .name_of(label)
                    .map(str::to_string)
                    .unwrap_or_else(|| label.to_string());
                return Err(XaeError::OrphanLabel(name));
            }
            1 => groups[containing[0]].extend(records),
            g => {
                records.shuffle(&mut rng);
                for (t, k) in records.into_iter().enumerate() {
                    groups[containing[t % g]].push(k);
                }
            }
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(GroupedData {
        dataset,
        spec: spec.clone(),
        groups,
    })
}

/// A real-valued image in the crate's channel-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(XaeError::DimMismatch {
                expected: channels * height * width,
                got: data.len(),
            });
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    /// Convert an 8-bit netpbm raster (interleaved) to channel-major
    /// values in [0,1].
    pub fn from_pnm(pnm: &netpbm::PnmImage) -> Image {
        let (c, h, w) = (pnm.channels, pnm.height, pnm.width);
        let mut data = vec![0f32; c * h * w];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    data[ch * h * w + r * w + col] =
                        pnm.pixels[(r * w + col) * c + ch] as f32 / 255.0;
                }
            }
        }
        Image {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[channel * self.height * self.width + row * self.width + col]
    }

    /// Flatten the patch with top-left (top, left) in the record
    /// convention: channel-major, then row, then column.
    pub fn crop_flat(&self, top: usize, left: usize, h: usize, w: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for r in 0..h {
                for col in 0..w {
                    out.push(self.get(c, top + r, left + col));
                }
            }
        }
        out
    }
}

/// Iterator over all fully contained patch positions, row-major.
pub struct SlidingWindows<'a> {
    image: &'a Image,
    patch_h: usize,
    patch_w: usize,
    stride: usize,
    row: usize,
    col: usize,
    done: bool,
}

impl<'a> Iterator for SlidingWindows<'a> {
    type Item = (usize, usize, Vec<f32>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let (row, col) = (self.row, self.col);
        let patch = self.image.crop_flat(row, col, self.patch_h, self.patch_w);
        // Advance row-major over valid top-left positions.
        if col + self.stride + self.patch_w <= self.image.width {
            self.col += self.stride;
        } else {
            self.col = 0;
            if row + self.stride + self.patch_h <= self.image.height {
                self.row += self.stride;
            } else {
                self.done = true;
            }
        }
        Some((row, col, patch))
    }
}

/// All top-left positions (row-major) where the patch fits entirely.
pub fn sliding_window(
    image: &Image,
    patch_h: usize,
    patch_w: usize,
    stride: usize,
) -> Result<SlidingWindows<'_>> {
    if stride == 0 {
        return Err(XaeError::InvalidConfig("stride must be at least 1".into()));
    }
    if patch_h == 0 || patch_w == 0 || patch_h > image.height || patch_w > image.width {
        return Err(XaeError::InvalidData(format!(
            "patch {patch_h}x{patch_w} does not fit image {}x{}",
            image.height, image.width
        )));
    }
    Ok(SlidingWindows {
        image,
        patch_h,
        patch_w,
        stride,
        row: 0,
        col: 0,
        done: false,
    })
}

/// Positive-class probability at every window position: entry (i, j)
/// is the classifier's probability on the patch at top-left
/// (i·stride, j·stride). Dimensions are ⌈(H−h+1)/stride⌉ ×
/// ⌈(W−w+1)/stride⌉.
pub fn probability_map(
    image: &Image,
    xae: &XaeModel,
    clf: &FcnModel,
    positive: usize,
    patch_h: usize,
    patch_w: usize,
    stride: usize,
) -> Result<Array2<f64>> {
    let dim = image.channels * patch_h * patch_w;
    if dim != xae.input_dim() {
        return Err(XaeError::DimMismatch {
            expected: xae.input_dim(),
            got: dim,
        });
    }
    if positive >= clf.class_count() {
        return Err(XaeError::InvalidConfig(format!(
            "positive class index {positive} out of range for {} classes",
            clf.class_count()
        )));
    }
    let windows = sliding_window(image, patch_h, patch_w, stride)?;
    let rows_out = (image.height - patch_h) / stride + 1;
    let cols_out = (image.width - patch_w) / stride + 1;
    let mut map = Array2::zeros((rows_out, cols_out));
    for (top, left, patch) in windows {
        let x = ndarray::Array1::from_iter(patch.into_iter().map(f64::from));
        let z = xae.encode(x.view())?;
        let p = clf.predict_proba(z.values().view())?;
        map[[top / stride, left / stride]] = p[positive];
    }
    Ok(map)
}

/// Build a dataset from a CSV manifest of `path,label` lines referring
/// to 8-bit PGM/PPM images (paths resolved relative to the manifest).
/// All images must share one geometry; label ids are assigned 0.. in
/// sorted label-name order.
pub fn import_patches(manifest: &Path) -> Result<PatchDataset> {
    let text = std::fs::read_to_string(manifest).map_err(|e| XaeError::io(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut entries: Vec<(std::path::PathBuf, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "path,label" {
            continue;
        }
        let (path, label) = line.split_once(',').ok_or_else(|| {
            XaeError::InvalidData(format!(
                "{}:{}: expected `path,label`",
                manifest.display(),
                lineno + 1
            ))
        })?;
        entries.push((base.join(path.trim()), label.trim().to_string()));
    }
    if entries.is_empty() {
        return Err(XaeError::InvalidData(format!(
            "{}: manifest lists no images",
            manifest.display()
        )));
    }
    let mut names: Vec<String> = entries.iter().map(|(_, l)| l.clone()).collect();
    names.sort();
    names.dedup();
    let table: BTreeMap<u32, String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u32, n.clone()))
        .collect();
    let id_of = |name: &str| -> u32 {
        names.binary_search_by(|n| n.as_str().cmp(name)).expect("name from names") as u32
    };
    let mut ds: Option<PatchDataset> = None;
    for (path, label) in &entries {
        let pnm = netpbm::read_pnm(path)?;
        let img = Image::from_pnm(&pnm);
        let ds = match &mut ds {
            Some(ds) => {
                if ds.geometry() != img.geometry() {
                    return Err(XaeError::InvalidData(format!(
                        "{}: geometry {:?} differs from the first image's {:?}",
                        path.display(),
                        img.geometry(),
                        ds.geometry()
                    )));
                }
                ds
            }
            None => {
                let (c, h, w) = img.geometry();
                ds.insert(PatchDataset::new(c, h, w, table.clone())?)
            }
        };
        ds.push(id_of(label), &img.data)?;
    }
    Ok(ds.expect("at least one entry"))
}
