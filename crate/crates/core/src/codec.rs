//! Trained hash functions, out-of-sample encoding, packed binary codes, and
//! the model file container.
//!
//! Codes are `±1` in the optimizer and bits on disk: `-1 → 0`, `+1 → 1`.
//! Bit `j` of word `w` holds code position `64·w + j`.
//!
//! Model file layout (all integers `u64` little-endian, all reals IEEE-754
//! `f64` little-endian, matrices row-major):
//!
//! | field | type |
//! |---|---|
//! | magic `"DSH1"` | 4 bytes |
//! | version (= 1) | u64 |
//! | bits `r`, modalities `v` | u64 × 2 |
//! | beta, eta, lambda, gamma | f64 × 4 |
//! | anchors, max_iters | u64 × 2 |
//! | tol | f64 |
//! | seed, dcc_sweeps, iterations | u64 × 3 |
//! | final objective | f64 |
//! | alpha | f64 × v |
//! | per modality: dim `d`, anchors `M` | u64 × 2 |
//! | per modality: sigma | f64 |
//! | per modality: centering mean | f64 × d |
//! | per modality: anchors `d × M` | f64 × dM |
//! | per modality: projection `r × M` | f64 × rM |

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{kernel_features, KernelMap, ModalityMatrix};
use crate::optimizer::{sgn, TrainConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"DSH1";
pub const MODEL_VERSION: u64 = 1;

/// Hash function of one modality: center, kernelize, project, take signs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityRecord {
    /// `r × M`.
    pub projection: DMatrix<f64>,
    pub kernel: KernelMap,
    /// Training mean subtracted from queries before kernelization.
    pub mean: DVector<f64>,
}

/// Training provenance carried along with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub config: TrainConfig,
    pub iterations: usize,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    bits: usize,
    modalities: Vec<ModalityRecord>,
    alpha: DVector<f64>,
    meta: ModelMeta,
}

impl HashModel {
    pub fn new(bits: usize, modalities: Vec<ModalityRecord>, alpha: DVector<f64>, meta: ModelMeta) -> Result<Self> {
        if bits == 0 || modalities.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one bit and one modality".into(),
            ));
        }
        if alpha.len() != modalities.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} modality weights for {} modalities",
                alpha.len(),
                modalities.len()
            )));
        }
        if alpha.iter().any(|a| a.is_nan() || *a < 0.0) || (alpha.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidData("modality weights are not on the simplex".into()));
        }
        for (m, rec) in modalities.iter().enumerate() {
            let (r, cols) = rec.projection.shape();
            if r != bits || cols != rec.kernel.num_anchors() || rec.mean.len() != rec.kernel.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "modality {m}: projection {r}x{cols}, {} anchors of dimension {}, mean of length {}",
                    rec.kernel.num_anchors(),
                    rec.kernel.dim(),
                    rec.mean.len()
                )));
            }
        }
        Ok(Self {
            bits,
            modalities,
            alpha,
            meta,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn modalities(&self) -> &[ModalityRecord] {
        &self.modalities
    }

    pub fn modality(&self, m: usize) -> Result<&ModalityRecord> {
        self.modalities
            .get(m)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {m}, model has {}", self.modalities.len())))
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    /// Real-valued projection `P_m κ(X - mean)` for raw samples `X` (`d × n`).
    pub fn project(&self, x: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
        let rec = self.modality(m)?;
        if x.nrows() != rec.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "modality {m} expects {} features, got {}",
                rec.mean.len(),
                x.nrows()
            )));
        }
        let mut centered = x.clone();
        for mut col in centered.column_iter_mut() {
            col -= &rec.mean;
        }
        let kappa = kernel_features(&rec.kernel, &ModalityMatrix::new(centered, m)?)?;
        Ok(&rec.projection * kappa)
    }

    /// Codes for every column of `x`.
    pub fn encode_batch(&self, x: &DMatrix<f64>, m: usize) -> Result<CodeMatrix> {
        Ok(CodeMatrix::from_signs(&self.project(x, m)?))
    }
}

/// `±1` code of a single raw sample from modality `m`.
pub fn encode(model: &HashModel, x: &[f64], m: usize) -> Result<Vec<i8>> {
    let col = DMatrix::from_column_slice(x.len(), 1, x);
    let proj = model.project(&col, m)?;
    Ok(proj.iter().map(|&v| sgn(v) as i8).collect())
}

pub fn words_per_code(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Packs a `±1` code, `+1` as a set bit.
pub fn pack(code: &[i8]) -> Vec<u64> {
    let mut words = vec![0u64; words_per_code(code.len())];
    for (i, &c) in code.iter().enumerate() {
        if c > 0 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

pub fn unpack(words: &[u64], bits: usize) -> Result<Vec<i8>> {
    if words.len() != words_per_code(bits) {
        return Err(Error::DimensionMismatch(format!(
            "{} words cannot hold exactly {bits} bits",
            words.len()
        )));
    }
    Ok((0..bits)
        .map(|i| if words[i / 64] >> (i % 64) & 1 == 1 { 1 } else { -1 })
        .collect())
}

/// Number of differing bits between two packed codes of equal length.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// `n` packed codes of `r` bits each, stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    bits: usize,
    len: usize,
    words: Vec<u64>,
}

impl CodeMatrix {
    /// Signs of an `r × n` real matrix, zero mapping to `+1`.
    pub fn from_signs(values: &DMatrix<f64>) -> Self {
        let (bits, len) = values.shape();
        let stride = words_per_code(bits);
        let mut words = vec![0u64; stride * len];
        for (j, col) in values.column_iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                if v >= 0.0 {
                    words[j * stride + i / 64] |= 1 << (i % 64);
                }
            }
        }
        Self { bits, len, words }
    }

    pub fn from_codes(codes: &[Vec<i8>], bits: usize) -> Result<Self> {
        let mut words = Vec::with_capacity(codes.len() * words_per_code(bits));
        for (j, c) in codes.iter().enumerate() {
            if c.len() != bits {
                return Err(Error::DimensionMismatch(format!(
                    "code {j} has {} bits, expected {bits}",
                    c.len()
                )));
            }
            words.extend(pack(c));
        }
        Ok(Self {
            bits,
            len: codes.len(),
            words,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words_per_code(&self) -> usize {
        words_per_code(self.bits)
    }

    /// Packed words of code `j`.
    pub fn code(&self, j: usize) -> &[u64] {
        let stride = self.words_per_code();
        &self.words[j * stride..(j + 1) * stride]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u64]> {
        self.words.chunks(self.words_per_code().max(1)).take(self.len)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut words = Vec::with_capacity(indices.len() * self.words_per_code());
        for &j in indices {
            words.extend_from_slice(self.code(j));
        }
        Self {
            bits: self.bits,
            len: indices.len(),
            words,
        }
    }

    /// `r × n` matrix of `±1`.
    pub fn to_signs(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.bits, self.len, |i, j| {
            if self.code(j)[i / 64] >> (i % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn row_major(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        // every count is followed by at least that many bytes of payload
        if v > self.buf.len() as u64 {
            return Err(Error::Format(format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
        let bytes = self.take(len)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }
}

/// Serializes `model` into the `DSH1` container.
pub fn model_to_bytes(model: &HashModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u64(MODEL_VERSION);
    w.usize(model.bits);
    w.usize(model.modalities.len());
    let cfg = &model.meta.config;
    for v in [cfg.beta, cfg.eta, cfg.lambda, cfg.gamma] {
        w.f64(v);
    }
    w.usize(cfg.anchors);
    w.usize(cfg.max_iters);
    w.f64(cfg.tol);
    w.u64(cfg.seed);
    w.usize(cfg.dcc_sweeps);
    w.usize(model.meta.iterations);
    w.f64(model.meta.final_objective);
    for &a in model.alpha.iter() {
        w.f64(a);
    }
    for rec in &model.modalities {
        w.usize(rec.kernel.dim());
        w.usize(rec.kernel.num_anchors());
        w.f64(rec.kernel.sigma());
        for &v in rec.mean.iter() {
            w.f64(v);
        }
        w.row_major(rec.kernel.anchors());
        w.row_major(&rec.projection);
    }
    w.0
}

pub fn model_from_bytes(buf: &[u8]) -> Result<HashModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("bad magic, not a model file".into()));
    }
    let version = r.u64()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {MODEL_VERSION}"
        )));
    }
    let bits = r.count("bit count")?;
    let v = r.count("modality count")?;
    let (beta, eta, lambda, gamma) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let anchors = r.count("anchor count")?;
    let max_iters = r.u64()? as usize;
    let tol = r.f64()?;
    let seed = r.u64()?;
    let dcc_sweeps = r.u64()? as usize;
    let iterations = r.u64()? as usize;
    let final_objective = r.f64()?;
    let alpha = DVector::from_iterator(v, (0..v).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
    let mut modalities = Vec::with_capacity(v);
    for m in 0..v {
        let dim = r.count("feature dimension")?;
        let count = r.count("anchor count")?;
        let sigma = r.f64()?;
        let mean = DVector::from_vec((0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        let anchors_m = r.row_major(dim, count)?;
        let projection = r.row_major(bits, count)?;
        modalities.push(ModalityRecord {
            projection,
            kernel: KernelMap::new(anchors_m, sigma, m).map_err(|e| Error::Format(e.to_string()))?,
            mean,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let meta = ModelMeta {
        config: TrainConfig {
            bits,
            beta,
            eta,
            lambda,
            gamma,
            anchors,
            max_iters,
            tol,
            seed,
            dcc_sweeps,
        },
        iterations,
        final_objective,
    };
    HashModel::new(bits, modalities, alpha, meta).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_model(model: &HashModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HashModel> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_model(seed: u64, bits: usize, dims: &[usize], anchors: usize) -> HashModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modalities = dims
            .iter()
            .enumerate()
            .map(|(m, &d)| ModalityRecord {
                projection: DMatrix::from_fn(bits, anchors, |_, _| rng.random_range(-1.0..1.0)),
                kernel: KernelMap::new(
                    DMatrix::from_fn(d, anchors, |_, _| rng.random_range(-1.0..1.0)),
                    rng.random_range(0.5..3.0),
                    m,
                )
                .unwrap(),
                mean: DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5)),
            })
            .collect();
        let v = dims.len();
        HashModel::new(
            bits,
            modalities,
            DVector::from_element(v, 1.0 / v as f64),
            ModelMeta {
                config: TrainConfig {
                    bits,
                    anchors,
                    seed,
                    ..Default::default()
                },
                iterations: 7,
                final_objective: 123.5,
            },
        )
        .unwrap()
    }

    #[test]
    fn pack_small_case() {
        assert_eq!(pack(&[1, -1, 1]), vec![5]);
        assert_eq!(pack(&[-1; 70]), vec![0, 0]);
        assert!(unpack(&[5], 65).is_err());
    }

    #[test]
    fn encode_matches_hand_pipeline() {
        let model = random_model(1, 20, &[3, 5], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rec = &model.modalities()[1];
        let sigma = rec.kernel.sigma();
        let mut expect = Vec::new();
        for i in 0..20 {
            let mut acc = 0.0;
            for a in 0..6 {
                let mut dist = 0.0;
                for (k, xk) in x.iter().enumerate() {
                    let diff = (xk - rec.mean[k]) - rec.kernel.anchors()[(k, a)];
                    dist += diff * diff;
                }
                acc += rec.projection[(i, a)] * (-dist / sigma).exp();
            }
            expect.push(if acc >= 0.0 { 1i8 } else { -1 });
        }
        assert_eq!(encode(&model, &x, 1).unwrap(), expect);
    }

    #[test]
    fn zero_projection_encodes_all_ones() {
        let mut model = random_model(2, 9, &[4], 3);
        model.modalities[0].projection.fill(0.0);
        assert_eq!(encode(&model, &[0.1, 0.2, 0.3, 0.4], 0).unwrap(), vec![1; 9]);
    }

    #[test]
    fn encode_errors() {
        let model = random_model(3, 8, &[4], 3);
        assert!(matches!(encode(&model, &[0.0; 4], 2), Err(Error::InvalidArgument(_))));
        assert!(matches!(encode(&model, &[0.0; 3], 0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn model_bytes_round_trip() {
        let model = random_model(4, 70, &[3, 8], 5);
        let bytes = model_to_bytes(&model);
        assert_eq!(&bytes[..4], b"DSH1");
        assert_eq!(model_from_bytes(&bytes).unwrap(), model);
    }

    #[test]
    fn model_file_round_trip() {
        let model = random_model(5, 16, &[2, 2], 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsh");
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }

    #[test]
    fn corrupt_model_files() {
        let bytes = model_to_bytes(&random_model(6, 16, &[3], 4));
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(model_from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(model_from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes;
        bad.push(0);
        assert!(model_from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(code in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..256)) {
            let words = pack(&code);
            prop_assert_eq!(words.len(), code.len().div_ceil(64));
            prop_assert_eq!(unpack(&words, code.len()).unwrap(), code);
        }

        #[test]
        fn hamming_counts_mismatches(
            pair in (1usize..4096).prop_flat_map(|r| (
                proptest::collection::vec(any::<bool>(), r),
                proptest::collection::vec(any::<bool>(), r),
            ))
        ) {
            let to_code = |v: &[bool]| v.iter().map(|&b| if b { 1i8 } else { -1 }).collect::<Vec<_>>();
            let (a, b) = (to_code(&pair.0), to_code(&pair.1));
            let mismatches = a.iter().zip(&b).filter(|(x, y)| x != y).count() as u32;
            prop_assert_eq!(hamming(&pack(&a), &pack(&b)), mismatches);
        }

        #[test]
        fn codes_invariant_to_positive_projection_scale(seed in 0u64..500, scale in 1e-3f64..1e3) {
            let model = random_model(seed, 24, &[4], 6);
            let mut scaled = model.clone();
            scaled.modalities[0].projection *= scale;
            let x = DMatrix::from_fn(4, 10, |i, j| ((i * 31 + j * 17 + seed as usize) % 13) as f64 / 13.0 - 0.5);
            prop_assert_eq!(model.encode_batch(&x, 0).unwrap(), scaled.encode_batch(&x, 0).unwrap());
        }
    }

    #[test]
    fn code_matrix_signs_round_trip() {
        let signs = DMatrix::from_fn(70, 5, |i, j| if (i * j) % 3 == 0 { 1.0 } else { -1.0 });
        let codes = CodeMatrix::from_signs(&signs);
        assert_eq!(codes.to_signs(), signs);
        assert_eq!(codes.iter().count(), 5);
        assert_eq!(codes.select(&[4, 0]).code(1), codes.code(0));
    }
}
