//! Embedding datasets: the open-world split, a Gaussian-mixture generator and
//! the on-disk formats.
//!
//! Embedding file (little-endian): `SSOCEMB1`, `u32` rows, `u32` dim,
//! `u8` views per row (1 or 2), then `rows * views * dim` `f32` values with the
//! second view (if any) following the first within each row.
//!
//! Label sidecar: `SSOCLAB1`, `u32` count, then one `i64` per row, `-1` meaning
//! unknown.
//!
//! Labels of the labeled rows live next to the labeled embedding file with the
//! extension `.lab`. Ground truth for unlabeled rows is a separate sidecar that
//! nothing on the training path opens.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SSOCEMB1";
pub const LABEL_MAGIC: &[u8; 8] = b"SSOCLAB1";

/// Labeled and unlabeled embeddings of one open-world problem.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub labeled: Matrix,
    pub labels: Vec<usize>,
    pub unlabeled: Matrix,
    /// Optional second augmented view of each unlabeled row.
    pub unlabeled_view2: Option<Matrix>,
    pub known_classes: usize,
    pub novel_classes: usize,
}

impl EmbeddingDataset {
    pub fn dim(&self) -> usize {
        self.labeled.cols().max(self.unlabeled.cols())
    }

    pub fn class_count(&self) -> usize {
        self.known_classes + self.novel_classes
    }

    pub fn with_novel_classes(mut self, novel_classes: usize) -> Self {
        self.novel_classes = novel_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.labeled.rows() > 0 && self.labeled.cols() != d
            || self.unlabeled.rows() > 0 && self.unlabeled.cols() != d
        {
            return Err(Error::Shape("labeled and unlabeled dims differ".into()));
        }
        if self.labels.len() != self.labeled.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} labeled rows",
                self.labels.len(),
                self.labeled.rows()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.known_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside known classes [0, {})",
                self.known_classes
            )));
        }
        if let Some(v2) = &self.unlabeled_view2 {
            if v2.shape() != self.unlabeled.shape() {
                return Err(Error::Shape("second view shape differs from first".into()));
            }
        }
        let finite = self.labeled.is_finite()
            && self.unlabeled.is_finite()
            && self.unlabeled_view2.as_ref().is_none_or(Matrix::is_finite);
        if !finite {
            return Err(Error::InvalidArgument("non-finite embedding values".into()));
        }
        Ok(())
    }

    /// All embeddings (labeled rows first, then unlabeled first views).
    pub fn all_embeddings(&self) -> Matrix {
        if self.labeled.rows() == 0 {
            return self.unlabeled.clone();
        }
        if self.unlabeled.rows() == 0 {
            return self.labeled.clone();
        }
        Matrix::vstack(&[&self.labeled, &self.unlabeled]).expect("validated dims")
    }
}

/// Ground-truth class ids of unlabeled rows, kept apart from the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth(pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub label_ratio: f64,
    pub novel_ratio: f64,
    pub seed: u64,
    /// Shuffle class ids before choosing the known ones.
    pub shuffle_classes: bool,
}

impl SplitSpec {
    pub fn new(label_ratio: f64, novel_ratio: f64, seed: u64) -> Self {
        Self {
            label_ratio,
            novel_ratio,
            seed,
            shuffle_classes: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub class_count: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Minimum pairwise center distance in units of `within_class_std`.
    pub center_separation: f64,
    pub within_class_std: f64,
    pub seed: u64,
}

impl MixtureSpec {
    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidArgument("mixture needs at least 2 classes".into()));
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("mixture counts must be positive".into()));
        }
        if !(self.center_separation > 0.0) || !(self.within_class_std > 0.0) {
            return Err(Error::InvalidArgument(
                "separation and within-class std must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`generate_mixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub centers: Matrix,
}

const CENTER_ATTEMPTS: usize = 10_000;

/// Samples an isotropic Gaussian mixture.
///
/// Centers lie on the sphere of radius `center_separation * within_class_std`
/// so that every center has the same norm and dot-product scoring agrees with
/// nearest-center scoring. Points come out grouped by class.
pub fn generate_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = spec.center_separation * spec.within_class_std;
    let min_sq = radius * radius;

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.class_count);
    while centers.len() < spec.class_count {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let c = random_direction(&mut rng, spec.dim, radius);
            if centers.iter().all(|o| squared_distance(o, &c) >= min_sq) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailed(format!(
                "could not place center {} of {} at separation {} in {} dimensions",
                centers.len(),
                spec.class_count,
                spec.center_separation,
                spec.dim
            )));
        }
    }

    let n = spec.class_count * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &cv in c {
                let g: f64 = rng.sample(StandardNormal);
                data.push(cv + spec.within_class_std * g);
            }
            labels.push(k);
        }
    }
    Ok(Mixture {
        points: Matrix::new(n, spec.dim, data)?,
        labels,
        centers: Matrix::from_rows(&centers)?,
    })
}

fn random_direction(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::numerics::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

/// Labeled/unlabeled partition of a fully labeled sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorldSplit {
    pub dataset: EmbeddingDataset,
    pub ground_truth: GroundTruth,
    /// `class_map[original] = re-indexed id`.
    pub class_map: Vec<usize>,
}

fn known_class_count(classes: usize, novel_ratio: f64) -> usize {
    ((1.0 - novel_ratio) * classes as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Splits labeled samples into the open-world setting.
///
/// The first `ceil((1 - novel_ratio) * C)` classes (after the optional class
/// shuffle) are known; `label_ratio` of each known class is labeled and the
/// rest joins every novel-class sample in the unlabeled set.
pub fn split_open_world(points: &Matrix, labels: &[usize], split: &SplitSpec) -> Result<OpenWorldSplit> {
    if !(split.label_ratio > 0.0 && split.label_ratio <= 1.0) {
        return Err(Error::InvalidSplit(format!(
            "label_ratio {} outside (0, 1]",
            split.label_ratio
        )));
    }
    if !(split.novel_ratio >= 0.0 && split.novel_ratio < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "novel_ratio {} outside [0, 1)",
            split.novel_ratio
        )));
    }
    if labels.len() != points.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            labels.len(),
            points.rows()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    if let Some(missing) = members.iter().position(Vec::is_empty) {
        return Err(Error::InvalidSplit(format!(
            "labels are not contiguous: class {missing} has no samples"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    let mut order: Vec<usize> = (0..classes).collect();
    if split.shuffle_classes {
        order.shuffle(&mut rng);
    }
    let mut class_map = vec![0; classes];
    for (new, &orig) in order.iter().enumerate() {
        class_map[orig] = new;
    }

    let known = known_class_count(classes, split.novel_ratio);
    if known == 0 {
        return Err(Error::InvalidSplit("split leaves zero known classes".into()));
    }

    let mut labeled_idx = Vec::new();
    let mut unlabeled_idx = Vec::new();
    for (new, &orig) in order.iter().enumerate() {
        let mut idx = members[orig].clone();
        if new < known {
            idx.shuffle(&mut rng);
            let take = (split.label_ratio * idx.len() as f64).round() as usize;
            labeled_idx.extend_from_slice(&idx[..take]);
            unlabeled_idx.extend_from_slice(&idx[take..]);
        } else {
            unlabeled_idx.extend(idx);
        }
    }
    if labeled_idx.is_empty() {
        return Err(Error::InvalidSplit("split produces an empty labeled set".into()));
    }
    unlabeled_idx.shuffle(&mut rng);

    let dataset = EmbeddingDataset {
        labeled: points.select_rows(&labeled_idx),
        labels: labeled_idx.iter().map(|&i| class_map[labels[i]]).collect(),
        unlabeled: points.select_rows(&unlabeled_idx),
        unlabeled_view2: None,
        known_classes: known,
        novel_classes: classes - known,
    };
    let ground_truth = GroundTruth(unlabeled_idx.iter().map(|&i| class_map[labels[i]]).collect());
    Ok(OpenWorldSplit {
        dataset,
        ground_truth,
        class_map,
    })
}

// ---------------------------------------------------------------------------
// binary formats

pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Self { path, buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let m = self.take(8, "magic")?;
        if m != expected {
            return Err(Error::format(
                self.path,
                "magic",
                format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(m)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn i64(&mut self, field: &'static str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f32_block(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4, field)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn f64_block(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, field)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.path,
                "payload",
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) mod bin {
    pub fn put_u32(out: &mut Vec<u8>, v: u32) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(out: &mut Vec<u8>, v: u64) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_field(path: &Path, value: usize, field: &'static str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::format(path, field, format!("{value} exceeds u32")))
}

/// Embedding rows plus an optional second view.
pub fn write_embeddings(path: &Path, view1: &Matrix, view2: Option<&Matrix>) -> Result<()> {
    if let Some(v2) = view2 {
        if v2.shape() != view1.shape() {
            return Err(Error::Shape("second view shape differs from first".into()));
        }
    }
    let (rows, dim) = view1.shape();
    let views = if view2.is_some() { 2 } else { 1 };
    let mut out = Vec::with_capacity(17 + rows * dim * views * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    bin::put_u32(&mut out, u32_field(path, rows, "rows")?);
    bin::put_u32(&mut out, u32_field(path, dim, "dim")?);
    out.push(views as u8);
    for r in 0..rows {
        bin::put_f32s(&mut out, view1.row(r));
        if let Some(v2) = view2 {
            bin::put_f32s(&mut out, v2.row(r));
        }
    }
    write_file(path, &out)
}

pub fn read_embeddings(path: &Path) -> Result<(Matrix, Option<Matrix>)> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(EMBEDDING_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let dim = r.u32("dim")? as usize;
    let views = r.u8("views")?;
    if views != 1 && views != 2 {
        return Err(Error::format(path, "views", format!("must be 1 or 2, found {views}")));
    }
    let mut v1 = Vec::with_capacity(rows * dim);
    let mut v2 = Vec::with_capacity(if views == 2 { rows * dim } else { 0 });
    for _ in 0..rows {
        v1.extend(r.f32_block(dim, "rows")?);
        if views == 2 {
            v2.extend(r.f32_block(dim, "rows")?);
        }
    }
    r.finish()?;
    let view1 = Matrix::new(rows, dim, v1)?;
    let view2 = (views == 2).then(|| Matrix::new(rows, dim, v2)).transpose()?;
    if !view1.is_finite() || !view2.as_ref().is_none_or(Matrix::is_finite) {
        return Err(Error::format(path, "rows", "non-finite value"));
    }
    Ok((view1, view2))
}

pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + labels.len() * 8);
    out.extend_from_slice(LABEL_MAGIC);
    bin::put_u32(&mut out, u32_field(path, labels.len(), "count")?);
    for &y in labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(LABEL_MAGIC)?;
    let count = r.u32("count")? as usize;
    let labels = (0..count)
        .map(|_| r.i64("labels"))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if let Some(bad) = labels.iter().find(|&&y| y < -1) {
        return Err(Error::format(path, "labels", format!("invalid label {bad}")));
    }
    Ok(labels)
}

/// Path of the label sidecar that accompanies a labeled embedding file.
pub fn labeled_sidecar_path(labeled_path: &Path) -> PathBuf {
    labeled_path.with_extension("lab")
}

/// Reads a dataset from a labeled and an unlabeled embedding file.
///
/// The known class count is one more than the largest labeled label. The
/// novel class count is not recorded in the files; it starts at zero and is
/// set with [`EmbeddingDataset::with_novel_classes`].
pub fn read_dataset(labeled_path: &Path, unlabeled_path: &Path) -> Result<EmbeddingDataset> {
    let (labeled, extra) = read_embeddings(labeled_path)?;
    if extra.is_some() {
        return Err(Error::format(labeled_path, "views", "labeled file must have one view"));
    }
    let (unlabeled, unlabeled_view2) = read_embeddings(unlabeled_path)?;
    if labeled.cols() != unlabeled.cols() {
        return Err(Error::format(
            unlabeled_path,
            "dim",
            format!(
                "dimension mismatch: labeled file has d={}, unlabeled file has d={}",
                labeled.cols(),
                unlabeled.cols()
            ),
        ));
    }
    let sidecar = labeled_sidecar_path(labeled_path);
    let raw = read_labels(&sidecar)?;
    if raw.len() != labeled.rows() {
        return Err(Error::format(
            &sidecar,
            "count",
            format!("{} labels for {} labeled rows", raw.len(), labeled.rows()),
        ));
    }
    let labels = raw
        .iter()
        .map(|&y| {
            usize::try_from(y).map_err(|_| Error::format(&sidecar, "labels", "labeled row marked unknown"))
        })
        .collect::<Result<Vec<_>>>()?;
    let known_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = EmbeddingDataset {
        labeled,
        labels,
        unlabeled,
        unlabeled_view2,
        known_classes,
        novel_classes: 0,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the labeled file, its label sidecar and the unlabeled file.
pub fn write_dataset(dataset: &EmbeddingDataset, labeled_path: &Path, unlabeled_path: &Path) -> Result<()> {
    dataset.validate()?;
    write_embeddings(labeled_path, &dataset.labeled, None)?;
    let labels: Vec<i64> = dataset.labels.iter().map(|&y| y as i64).collect();
    write_labels(&labeled_sidecar_path(labeled_path), &labels)?;
    write_embeddings(unlabeled_path, &dataset.unlabeled, dataset.unlabeled_view2.as_ref())
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let raw: Vec<i64> = truth.0.iter().map(|&y| y as i64).collect();
    write_labels(path, &raw)
}

/// Reads a ground-truth sidecar; every entry must be a known class id.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let raw = read_labels(path)?;
    raw.iter()
        .map(|&y| usize::try_from(y).map_err(|_| Error::format(path, "labels", "unknown ground-truth label")))
        .collect::<Result<Vec<_>>>()
        .map(GroundTruth)
}
