//! Paired multi-modal datasets: file loading, train/query splits and a
//! synthetic generator.
//!
//! Feature files hold one sample per row. Two encodings are accepted:
//!
//! * CSV, optional header row, one numeric column per feature.
//! * `DSM1` binary: magic `"DSM1"`, rows `u64`, cols `u64`, then `rows × cols`
//!   `f64` values row-major; every number little-endian.
//!
//! Label files are CSV (or `DSM1`): either one 0/1 column per category, or a
//! single column of zero-based category indices that is expanded to one-hot.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"DSM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` is CSV, anything else the binary container.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Binary => "dsm",
        }
    }
}

/// `n` objects observed in every modality, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    /// Raw features per modality, `d_m × n`.
    pub modalities: Vec<DMatrix<f64>>,
    pub labels: LabelMatrix,
    pub names: Option<Vec<String>>,
}

impl PairedDataset {
    pub fn new(modalities: Vec<DMatrix<f64>>, labels: LabelMatrix, names: Option<Vec<String>>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::InvalidData("dataset needs at least one modality".into()));
        }
        let n = labels.len();
        if let Some((m, x)) = modalities.iter().enumerate().find(|(_, x)| x.ncols() != n) {
            return Err(Error::InvalidData(format!(
                "modality {m} has {} samples, labels have {n}",
                x.ncols()
            )));
        }
        if names.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::InvalidData("sample names do not match the sample count".into()));
        }
        Ok(Self {
            modalities,
            labels,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            modalities: self
                .modalities
                .iter()
                .map(|x| x.select_columns(indices.iter()))
                .collect(),
            labels: self.labels.select(indices),
            names: self
                .names
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a samples-as-rows CSV into a row list, skipping a non-numeric first row.
fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(parse_err(
                            path,
                            line,
                            format!("expected {} columns, found {}", first.len(), row.len()),
                        ));
                    }
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(parse_err(path, line, "non-finite value"));
                }
                rows.push(row);
            }
            Err(_) if idx == 0 => continue, // header
            Err(e) => return Err(parse_err(path, line, format!("not a number: {e}"))),
        }
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(rows)
}

fn rows_to_columns(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows[0].len(), rows.len(), |i, j| rows[j][i])
}

/// Reads a `DSM1` container as a `rows × cols` matrix.
pub fn read_binary_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..4] != MATRIX_MAGIC {
        return Err(bad("not a DSM1 matrix file".into()));
    }
    let rows = u64::from_le_bytes(buf[4..12].try_into().unwrap());
    let cols = u64::from_le_bytes(buf[12..20].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(20))
        .ok_or_else(|| bad("matrix size overflows".into()))?;
    if expected != buf.len() as u64 {
        return Err(bad(format!(
            "{rows}x{cols} matrix needs {expected} bytes, file has {}",
            buf.len()
        )));
    }
    let vals: Vec<f64> = buf[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows as usize, cols as usize, &vals))
}

pub fn write_binary_matrix(path: &Path, rows_major: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 8 * rows_major.len());
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(rows_major.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(rows_major.ncols() as u64).to_le_bytes());
    for i in 0..rows_major.nrows() {
        for j in 0..rows_major.ncols() {
            buf.extend_from_slice(&rows_major[(i, j)].to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Features of one modality as `d × n` (file rows are samples).
pub fn load_features(path: &Path, format: Format) -> Result<DMatrix<f64>> {
    let x = match format {
        Format::Csv => rows_to_columns(&read_csv_rows(path)?),
        Format::Binary => read_binary_matrix(path)?.transpose(),
    };
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "{}: non-finite value for sample {}",
            path.display(),
            pos / x.nrows().max(1)
        )));
    }
    Ok(x)
}

pub fn load_labels(path: &Path) -> Result<LabelMatrix> {
    let mut head = [0u8; 4];
    let is_binary = std::fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut head))
        .is_ok()
        && &head == MATRIX_MAGIC;
    let rows: Vec<Vec<f64>> = if is_binary {
        let m = read_binary_matrix(path)?;
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    } else {
        read_csv_rows(path)?
    };
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no label rows"));
    }
    if rows[0].len() == 1 {
        let mut indices = Vec::with_capacity(rows.len());
        for (j, r) in rows.iter().enumerate() {
            let v = r[0];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidData(format!(
                    "{}: label {v} of sample {j} is not a category index",
                    path.display()
                )));
            }
            indices.push(v as usize);
        }
        let categories = indices.iter().max().map_or(1, |m| m + 1);
        LabelMatrix::from_indices(&indices, categories)
    } else {
        LabelMatrix::from_dense(rows_to_columns(&rows))
    }
    .map_err(|e| match e {
        Error::InvalidData(msg) => Error::InvalidData(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads one feature file per modality plus a label file and checks they agree.
pub fn load_dataset(feature_paths: &[PathBuf], label_path: &Path, format: Format) -> Result<PairedDataset> {
    if feature_paths.is_empty() {
        return Err(Error::InvalidArgument("no feature files given".into()));
    }
    let mut modalities = Vec::with_capacity(feature_paths.len());
    for path in feature_paths {
        modalities.push(load_features(path, format)?);
    }
    for (path, x) in feature_paths.iter().zip(&modalities).skip(1) {
        if x.ncols() != modalities[0].ncols() {
            return Err(Error::InvalidData(format!(
                "{} has {} samples but {} has {}",
                path.display(),
                x.ncols(),
                feature_paths[0].display(),
                modalities[0].ncols()
            )));
        }
    }
    let labels = load_labels(label_path)?;
    if labels.len() != modalities[0].ncols() {
        return Err(Error::InvalidData(format!(
            "{} has {} samples but {} has {}",
            label_path.display(),
            labels.len(),
            feature_paths[0].display(),
            modalities[0].ncols()
        )));
    }
    PairedDataset::new(modalities, labels, None)
}

fn write_csv(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `d × n` features with one sample per row.
pub fn save_features(path: &Path, x: &DMatrix<f64>, format: Format) -> Result<()> {
    match format {
        Format::Csv => write_csv(path, x.column_iter().map(|c| c.iter().copied().collect())),
        Format::Binary => write_binary_matrix(path, &x.transpose()),
    }
}

/// Writes labels as one-hot CSV rows.
pub fn save_labels(path: &Path, labels: &LabelMatrix) -> Result<()> {
    write_csv(path, labels.matrix().column_iter().map(|c| c.iter().copied().collect()))
}

/// Writes `modality_<m>.<ext>` files and `labels.csv` into `dir`, returning
/// the feature paths and the label path.
pub fn save_dataset(ds: &PairedDataset, dir: &Path, format: Format) -> Result<(Vec<PathBuf>, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (m, x) in ds.modalities.iter().enumerate() {
        let path = dir.join(format!("modality_{m}.{}", format.extension()));
        save_features(&path, x, format)?;
        paths.push(path);
    }
    let label_path = dir.join("labels.csv");
    save_labels(&label_path, &ds.labels)?;
    Ok((paths, label_path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub seed: u64,
}

/// Seeded random partition of `0..n` into `train_count` training and
/// `n - train_count` query indices.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.train_count == 0 || spec.train_count >= n {
        return Err(Error::InvalidArgument(format!(
            "train count must be in 1..{n}, got {}",
            spec.train_count
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let query = order.split_off(spec.train_count);
    Ok((order, query))
}

pub fn split(ds: &PairedDataset, spec: SplitSpec) -> Result<(PairedDataset, PairedDataset)> {
    let (train, query) = split_indices(ds.len(), spec)?;
    Ok((ds.select(&train), ds.select(&query)))
}

/// Parameters of [`synth_multimodal`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Feature dimension of each modality.
    pub dims: Vec<usize>,
    /// Standard deviation of the per-sample Gaussian noise.
    pub noise: f64,
    /// Fraction of samples whose label is reassigned to another class.
    pub cross_noise: f64,
    pub seed: u64,
}

/// Gaussian clusters, one standard-normal center per class per modality, with
/// samples shuffled into random order.
pub fn synth_multimodal(spec: &SynthSpec) -> Result<PairedDataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.dims.is_empty() || spec.dims.contains(&0) {
        return Err(Error::InvalidArgument(
            "classes, per-class count and every dimension must be positive".into(),
        ));
    }
    if !spec.noise.is_finite() || spec.noise < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise must be non-negative, got {}",
            spec.noise
        )));
    }
    if !(0.0..=1.0).contains(&spec.cross_noise) {
        return Err(Error::InvalidArgument(format!(
            "cross_noise is a fraction in [0, 1], got {}",
            spec.cross_noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let class_of = |slot: usize| order[slot] / spec.per_class;
    let mut modalities = Vec::with_capacity(spec.dims.len());
    for &d in &spec.dims {
        let centers = DMatrix::from_fn(d, spec.classes, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let x = DMatrix::from_fn(d, n, |i, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            centers[(i, class_of(j))] + spec.noise * z
        });
        modalities.push(x);
    }
    let mut labels: Vec<usize> = (0..n).map(class_of).collect();
    if spec.cross_noise > 0.0 && spec.classes > 1 {
        let flips = (spec.cross_noise * n as f64).round() as usize;
        for j in rand::seq::index::sample(&mut rng, n, flips) {
            let shift = rng.random_range(1..spec.classes);
            labels[j] = (labels[j] + shift) % spec.classes;
        }
    }
    PairedDataset::new(
        modalities,
        LabelMatrix::from_indices(&labels, spec.classes)?,
        Some((0..n).map(|j| format!("s{j}")).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_fixture_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img.csv", "f0,f1,f2\n1,2,3\n4.5,-5,6e-1\n");
        let txt = write(dir.path(), "txt.csv", "0.25,0.75\n1,0\n");
        let lab = write(dir.path(), "lab.csv", "1\n0\n");
        let ds = load_dataset(&[img, txt], &lab, Format::Csv).unwrap();
        assert_eq!(
            ds.modalities[0],
            DMatrix::from_row_slice(3, 2, &[1.0, 4.5, 2.0, -5.0, 3.0, 0.6])
        );
        assert_eq!(ds.modalities[1], DMatrix::from_row_slice(2, 2, &[0.25, 1.0, 0.75, 0.0]));
        assert_eq!(
            ds.labels.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
    }

    #[test]
    fn mismatched_sample_counts_name_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "1\n2\n3\n");
        let b = write(dir.path(), "b.csv", "1\n2\n");
        let l = write(dir.path(), "l.csv", "0\n0\n0\n");
        let msg = load_dataset(&[a, b], &l, Format::Csv).unwrap_err().to_string();
        assert!(msg.contains("a.csv") && msg.contains("b.csv"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "1,2\n3,4\n5,x\n");
        match load_features(&a, Format::Csv).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        let ragged = write(dir.path(), "r.csv", "1,2\n3\n");
        assert!(load_features(&ragged, Format::Csv).is_err());
    }

    #[test]
    fn non_binary_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l.csv", "1,0\n0.5,1\n");
        assert!(matches!(load_labels(&l), Err(Error::InvalidData(_))));
        let l = write(dir.path(), "i.csv", "1\n-2\n");
        assert!(load_labels(&l).is_err());
    }

    #[test]
    fn csv_and_binary_encodings_agree() {
        let ds = synth_multimodal(&SynthSpec {
            classes: 3,
            per_class: 4,
            dims: vec![5, 2],
            noise: 0.3,
            cross_noise: 0.0,
            seed: 9,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv_paths, labels) = save_dataset(&ds, &dir.path().join("csv"), Format::Csv).unwrap();
        let (bin_paths, _) = save_dataset(&ds, &dir.path().join("bin"), Format::Binary).unwrap();
        let from_csv = load_dataset(&csv_paths, &labels, Format::Csv).unwrap();
        let from_bin = load_dataset(&bin_paths, &labels, Format::Binary).unwrap();
        assert_eq!(from_csv, from_bin);
        assert_eq!(from_csv.modalities, ds.modalities);
        assert_eq!(from_csv.labels, ds.labels);
    }

    #[test]
    fn truncated_binary_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dsm");
        write_binary_matrix(&p, &DMatrix::from_element(3, 2, 1.5)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_binary_matrix(&p), Err(Error::Format(_))));
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let (train, query) = split_indices(
            50,
            SplitSpec {
                train_count: 49,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(query.len(), 1);
        let mut all: Vec<usize> = train.iter().chain(&query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(
            split_indices(
                50,
                SplitSpec {
                    train_count: 30,
                    seed: 4
                }
            )
            .unwrap(),
            split_indices(
                50,
                SplitSpec {
                    train_count: 30,
                    seed: 4
                }
            )
            .unwrap()
        );
        assert!(split_indices(
            50,
            SplitSpec {
                train_count: 50,
                seed: 0
            }
        )
        .is_err());
        assert!(split_indices(
            50,
            SplitSpec {
                train_count: 0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn noiseless_classes_are_identical() {
        let ds = synth_multimodal(&SynthSpec {
            classes: 3,
            per_class: 5,
            dims: vec![4, 6],
            noise: 0.0,
            cross_noise: 0.0,
            seed: 2,
        })
        .unwrap();
        for x in &ds.modalities {
            for a in 0..ds.len() {
                for b in 0..ds.len() {
                    if ds.labels.shares_category(a, &ds.labels, b) {
                        assert_eq!(x.column(a), x.column(b));
                    }
                }
            }
        }
    }

    #[test]
    fn synth_is_seeded() {
        let spec = SynthSpec {
            classes: 2,
            per_class: 3,
            dims: vec![2],
            noise: 0.5,
            cross_noise: 0.5,
            seed: 3,
        };
        assert_eq!(synth_multimodal(&spec).unwrap(), synth_multimodal(&spec).unwrap());
        let other = SynthSpec {
            seed: 4,
            ..spec.clone()
        };
        assert_ne!(synth_multimodal(&spec).unwrap(), synth_multimodal(&other).unwrap());
        assert!(synth_multimodal(&SynthSpec { dims: vec![0], ..spec }).is_err());
    }

    #[test]
    fn nearest_centroid_separates_clusters() {
        let ds = synth_multimodal(&SynthSpec {
            classes: 3,
            per_class: 50,
            dims: vec![8, 12],
            noise: 0.1,
            cross_noise: 0.0,
            seed: 17,
        })
        .unwrap();
        let class: Vec<usize> = (0..ds.len())
            .map(|j| (0..3).find(|&k| ds.labels.is_active(k, j)).unwrap())
            .collect();
        for x in &ds.modalities {
            let mut centroids = DMatrix::zeros(x.nrows(), 3);
            for (j, &k) in class.iter().enumerate() {
                let mut col = centroids.column_mut(k);
                col += x.column(j) / 50.0;
            }
            let correct = (0..ds.len())
                .filter(|&j| {
                    let best = (0..3)
                        .min_by(|&a, &b| {
                            let da = (x.column(j) - centroids.column(a)).norm();
                            let db = (x.column(j) - centroids.column(b)).norm();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    best == class[j]
                })
                .count();
            assert_eq!(correct, ds.len());
        }
    }
}
