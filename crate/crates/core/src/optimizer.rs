//! Alternating minimization of the relaxed hashing objective
//!
//! ```text
//! Σ_m (α_m)^γ ‖B - P_m κ_m‖²  +  β‖WB - L‖²  +  η‖B - DL‖²
//!     + λ(‖D‖² + ‖W‖² + Σ_m ‖P_m‖²)
//! ```
//!
//! over the unified codes `B ∈ {-1,+1}^{r×n}`, the classifier `W`, the class
//! basis `D`, the per-modality projections `P_m` and the modality weights `α`
//! on the simplex. Each block is solved exactly with the others held fixed,
//! so the objective never increases from one block update to the next.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{HashModel, ModalityRecord, ModelMeta};
use crate::error::{Error, Result};
use crate::kernel::{center_features, kernel_features, sample_anchors, KernelMap};
use crate::labels::LabelMatrix;

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Code length `r`.
    pub bits: usize,
    /// Classifier loss weight.
    pub beta: f64,
    /// Label-consistent factorization weight.
    pub eta: f64,
    /// Ridge regularizer shared by `D`, `W` and every `P_m`.
    pub lambda: f64,
    /// Modality-weight smoothing exponent, must exceed 1.
    pub gamma: f64,
    /// Number of kernel anchors `M` per modality.
    pub anchors: usize,
    pub max_iters: usize,
    /// Stop once the relative objective change drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Cyclic passes over the rows of `B` per code update.
    pub dcc_sweeps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bits: 16,
            beta: 1.0,
            eta: 1.0,
            lambda: 1e-4,
            gamma: 2.0,
            anchors: 500,
            max_iters: 50,
            tol: 1e-5,
            seed: 0,
            dcc_sweeps: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.bits == 0 {
            return bad("code length must be at least 1");
        }
        for (name, v) in [("beta", self.beta), ("eta", self.eta), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.gamma.is_finite() || self.gamma <= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "gamma must be finite and greater than 1, got {}",
                self.gamma
            )));
        }
        if self.anchors == 0 {
            return bad("anchor count must be at least 1");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tol must be non-negative, got {}",
                self.tol
            )));
        }
        if self.dcc_sweeps == 0 {
            return bad("dcc_sweeps must be at least 1");
        }
        Ok(())
    }
}

/// All blocks of the alternating optimization.
#[derive(Debug, Clone)]
pub struct OptState {
    /// Unified codes, `r × n`, entries in `{-1, +1}`.
    pub b: DMatrix<f64>,
    /// Classifier, `c × r`.
    pub w: DMatrix<f64>,
    /// Class basis, `r × c`.
    pub d: DMatrix<f64>,
    /// Projections, one `r × M` matrix per modality.
    pub p: Vec<DMatrix<f64>>,
    /// Modality weights on the simplex.
    pub alpha: DVector<f64>,
    /// Cached kernel features, one `M × n` matrix per modality.
    pub kappa: Vec<DMatrix<f64>>,
    pub objective_trace: Vec<f64>,
}

impl OptState {
    /// Starting point: Gaussian sign codes, all other blocks zero, uniform weights.
    pub fn init(kappa: Vec<DMatrix<f64>>, bits: usize, categories: usize, seed: u64) -> Result<Self> {
        let Some(first) = kappa.first() else {
            return Err(Error::InvalidArgument("at least one modality is required".into()));
        };
        let n = first.ncols();
        if kappa.iter().any(|k| k.ncols() != n) {
            return Err(Error::DimensionMismatch(
                "kernel features disagree on the sample count".into(),
            ));
        }
        let v = kappa.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(bits, n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sgn(z)
        });
        Ok(Self {
            b,
            w: DMatrix::zeros(categories, bits),
            d: DMatrix::zeros(bits, categories),
            p: kappa.iter().map(|k| DMatrix::zeros(bits, k.nrows())).collect(),
            alpha: DVector::from_element(v, 1.0 / v as f64),
            kappa,
            objective_trace: Vec::new(),
        })
    }

    pub fn bits(&self) -> usize {
        self.b.nrows()
    }

    pub fn len(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.b.ncols() == 0
    }

    pub fn modalities(&self) -> usize {
        self.kappa.len()
    }

    fn check(&self, labels: Option<&LabelMatrix>) -> Result<()> {
        let (r, n) = self.b.shape();
        let v = self.kappa.len();
        let mismatch = |what: String| Err(Error::DimensionMismatch(what));
        if self.p.len() != v || self.alpha.len() != v {
            return mismatch(format!(
                "{v} modalities but {} projections and {} weights",
                self.p.len(),
                self.alpha.len()
            ));
        }
        for (m, (p, k)) in self.p.iter().zip(&self.kappa).enumerate() {
            if k.ncols() != n || p.nrows() != r || p.ncols() != k.nrows() {
                return mismatch(format!(
                    "modality {m}: projection {}x{}, kernel features {}x{}, codes {r}x{n}",
                    p.nrows(),
                    p.ncols(),
                    k.nrows(),
                    k.ncols()
                ));
            }
        }
        if self.w.ncols() != r || self.d.nrows() != r || self.w.nrows() != self.d.ncols() {
            return mismatch(format!(
                "classifier {}x{} and basis {}x{} do not fit {r}-bit codes",
                self.w.nrows(),
                self.w.ncols(),
                self.d.nrows(),
                self.d.ncols()
            ));
        }
        if let Some(l) = labels {
            if l.len() != n || l.categories() != self.w.nrows() {
                return mismatch(format!(
                    "labels are {}x{}, expected {}x{n}",
                    l.categories(),
                    l.len(),
                    self.w.nrows()
                ));
            }
        }
        Ok(())
    }

    /// `(α_m)^γ` for every modality.
    fn weight_powers(&self, gamma: f64) -> Vec<f64> {
        self.alpha.iter().map(|a| a.powf(gamma)).collect()
    }

    /// `‖B - P_m κ_m‖²_F` for every modality.
    pub fn modality_losses(&self) -> Vec<f64> {
        losses_from(&self.b, &self.projections())
    }

    /// The products `P_m κ_m`, each `r × n`.
    fn projections(&self) -> Vec<DMatrix<f64>> {
        self.p.iter().zip(&self.kappa).map(|(p, k)| mul(p, k)).collect()
    }
}

fn losses_from(b: &DMatrix<f64>, projected: &[DMatrix<f64>]) -> Vec<f64> {
    projected
        .iter()
        .map(|pk| b.iter().zip(pk.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

/// `A Bᵀ` without materializing the transpose.
fn mul_tr(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "inner dimensions differ");
    gemm(a, b, b.nrows(), b.nrows() as isize, 1)
}

/// `A B`.
fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    gemm(a, b, b.ncols(), 1, b.nrows() as isize)
}

/// `A` times the `k × q` operand stored in `b` with the given strides.
fn gemm(a: &DMatrix<f64>, b: &DMatrix<f64>, q: usize, rsb: isize, csb: isize) -> DMatrix<f64> {
    let (p, k) = a.shape();
    let mut out = DMatrix::zeros(p, q);
    if p == 0 || q == 0 || k == 0 {
        return out;
    }
    // SAFETY: callers pass strides that keep every `k × q` index inside `b`,
    // and `a` and `out` are dense column-major buffers of the stated shapes.
    unsafe {
        matrixmultiply::dgemm(
            p,
            k,
            q,
            1.0,
            a.as_ptr(),
            1,
            p as isize,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            1,
            p as isize,
        );
    }
    out
}

/// Sign with `sgn(0) = +1`.
#[inline]
pub fn sgn(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Value of the relaxed objective at `state`.
pub fn objective(state: &OptState, cfg: &TrainConfig, labels: &LabelMatrix) -> Result<f64> {
    state.check(Some(labels))?;
    Ok(objective_with(state, cfg, labels, &state.projections()))
}

fn objective_with(state: &OptState, cfg: &TrainConfig, labels: &LabelMatrix, projected: &[DMatrix<f64>]) -> f64 {
    let l = labels.matrix();
    let powers = state.weight_powers(cfg.gamma);
    let fit: f64 = powers
        .iter()
        .zip(losses_from(&state.b, projected))
        .map(|(a, c)| a * c)
        .sum();
    let classifier = cfg.beta * (&state.w * &state.b - l).norm_squared();
    let factorization = cfg.eta * (&state.b - &state.d * l).norm_squared();
    let ridge = cfg.lambda
        * (state.d.norm_squared() + state.w.norm_squared() + state.p.iter().map(|p| p.norm_squared()).sum::<f64>());
    fit + classifier + factorization + ridge
}

/// Solves `X (scale·G + λI) = scale·R` for symmetric positive semi-definite `G`
/// by Cholesky. A zero `scale` leaves only the ridge, whose minimizer is zero.
fn ridge_solve(
    gram: DMatrix<f64>,
    rhs_t: DMatrix<f64>,
    scale: f64,
    lambda: f64,
    block: &'static str,
) -> Result<DMatrix<f64>> {
    if scale == 0.0 {
        return Ok(DMatrix::zeros(rhs_t.ncols(), rhs_t.nrows()));
    }
    let mut system = gram * scale;
    for i in 0..system.nrows() {
        system[(i, i)] += lambda;
    }
    let scale_diag = system.diagonal().amax();
    let chol = nalgebra::Cholesky::new(system).ok_or(Error::Singular(block))?;
    // exact zero pivots slip through the factorization on rank-deficient input
    let tiny = f64::EPSILON * scale_diag * chol.l_dirty().nrows() as f64;
    if chol.l_dirty().diagonal().iter().any(|p| p.is_nan() || p * p <= tiny) {
        return Err(Error::Singular(block));
    }
    let x = chol.solve(&(rhs_t * scale));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(block));
    }
    Ok(x.transpose())
}

/// Classifier update `W = βLBᵀ(βBBᵀ + λI)⁻¹`.
pub fn update_w(state: &OptState, cfg: &TrainConfig, labels: &LabelMatrix) -> Result<DMatrix<f64>> {
    state.check(Some(labels))?;
    classifier_solve(&state.b, labels.matrix(), cfg.beta, cfg.lambda)
}

fn classifier_solve(b: &DMatrix<f64>, l: &DMatrix<f64>, beta: f64, lambda: f64) -> Result<DMatrix<f64>> {
    ridge_solve(mul_tr(b, b), mul_tr(b, l), beta, lambda, "classifier")
}

/// Projection update `P_m = a Bκᵀ(a κκᵀ + λI)⁻¹` with `a = (α_m)^γ`.
pub fn update_p(state: &OptState, cfg: &TrainConfig, m: usize) -> Result<DMatrix<f64>> {
    state.check(None)?;
    let kappa = state
        .kappa
        .get(m)
        .ok_or_else(|| Error::InvalidArgument(format!("modality {m} out of range 0..{}", state.modalities())))?;
    let weight = state.alpha[m].powf(cfg.gamma);
    ridge_solve(
        mul_tr(kappa, kappa),
        mul_tr(kappa, &state.b),
        weight,
        cfg.lambda,
        "projection",
    )
}

/// Class basis update `D = ηBLᵀ(ηLLᵀ + λI)⁻¹`.
pub fn update_d(state: &OptState, cfg: &TrainConfig, labels: &LabelMatrix) -> Result<DMatrix<f64>> {
    state.check(Some(labels))?;
    let l = labels.matrix();
    ridge_solve(mul_tr(l, l), mul_tr(l, &state.b), cfg.eta, cfg.lambda, "basis")
}

/// Linear term of the code subproblem, `r × n`:
/// `Q = Σ_m (α_m)^γ P_m κ_m + βWᵀL + ηDL`.
pub fn code_target(state: &OptState, cfg: &TrainConfig, labels: &LabelMatrix) -> Result<DMatrix<f64>> {
    state.check(Some(labels))?;
    Ok(code_target_with(state, cfg, labels, &state.projections()))
}

fn code_target_with(
    state: &OptState,
    cfg: &TrainConfig,
    labels: &LabelMatrix,
    projected: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let mixed = state.w.transpose() * cfg.beta + &state.d * cfg.eta;
    let mut q = mixed * labels.matrix();
    for (pk, a) in projected.iter().zip(state.weight_powers(cfg.gamma)) {
        if a != 0.0 {
            q.zip_apply(pk, |t, v| *t += a * v);
        }
    }
    q
}

/// Code subproblem value `-2 tr(BᵀQ) + β‖WB‖²`. With `B` restricted to
/// `±1`, this differs from the full objective only by a constant.
pub fn code_objective(b: &DMatrix<f64>, q: &DMatrix<f64>, w: &DMatrix<f64>, beta: f64) -> f64 {
    -2.0 * b.dot(q) + beta * (w * b).norm_squared()
}

/// Bit `k` of one code given the other bits:
/// `sgn(q_k - β Σ_{j≠k} (WᵀW)_{jk} b_j)`.
#[inline]
fn dcc_bit(code: &[f64], q: &[f64], wtw: &DMatrix<f64>, beta: f64, k: usize) -> f64 {
    let g = &wtw.as_slice()[k * code.len()..(k + 1) * code.len()];
    let full: f64 = code.iter().zip(g).map(|(b, g)| b * g).sum();
    sgn(q[k] - beta * (full - code[k] * g[k]))
}

/// Replaces bit row `k` of the `r × n` codes with its exact minimizer given
/// the other rows and returns whether it changed. `q` is the output of
/// [`code_target`] and `wtw` is `WᵀW`.
pub fn dcc_update_row(b: &mut DMatrix<f64>, q: &DMatrix<f64>, wtw: &DMatrix<f64>, beta: f64, k: usize) -> bool {
    let mut changed = false;
    for (mut code, target) in b.column_iter_mut().zip(q.column_iter()) {
        let new = dcc_bit(code.as_slice(), target.as_slice(), wtw, beta, k);
        if code[k] != new {
            code[k] = new;
            changed = true;
        }
    }
    changed
}

/// Cyclic coordinate descent over the rows of `B`, at most `dcc_sweeps`
/// passes, stopping once a pass changes nothing.
pub fn update_b_dcc(state: &OptState, cfg: &TrainConfig, labels: &LabelMatrix) -> Result<DMatrix<f64>> {
    state.check(Some(labels))?;
    Ok(dcc_with(state, cfg, labels, &state.projections()))
}

fn dcc_with(state: &OptState, cfg: &TrainConfig, labels: &LabelMatrix, projected: &[DMatrix<f64>]) -> DMatrix<f64> {
    let q = code_target_with(state, cfg, labels, projected);
    let wtw = state.w.tr_mul(&state.w);
    let mut b = state.b.clone();
    // a row update only couples bits of the same sample, so sweeping each
    // code to its own fixed point matches sweeping whole rows in turn
    for (mut code, target) in b.column_iter_mut().zip(q.column_iter()) {
        let code = code.as_mut_slice();
        for _ in 0..cfg.dcc_sweeps {
            let mut changed = false;
            for k in 0..code.len() {
                let new = dcc_bit(code, target.as_slice(), &wtw, cfg.beta, k);
                if code[k] != new {
                    code[k] = new;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    b
}

/// Closed-form simplex weights `α_m ∝ (γ C_m)^{1/(1-γ)}`.
///
/// When some losses are exactly zero the weight is split uniformly among
/// those modalities, which is the limit of the formula as they approach zero.
pub fn modality_weights(losses: &[f64], gamma: f64) -> Result<DVector<f64>> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("no modality losses".into()));
    }
    if !gamma.is_finite() || gamma <= 1.0 {
        return Err(Error::InvalidArgument(format!("gamma must exceed 1, got {gamma}")));
    }
    if let Some(c) = losses.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(Error::InvalidData(format!(
            "modality loss {c} is not a finite non-negative value"
        )));
    }
    let zeros = losses.iter().filter(|&&c| c == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        return Ok(DVector::from_iterator(
            losses.len(),
            losses.iter().map(|&c| if c == 0.0 { share } else { 0.0 }),
        ));
    }
    // log-domain keeps tiny or huge losses from under/overflowing the power
    let exponent = 1.0 / (1.0 - gamma);
    let logs: Vec<f64> = losses.iter().map(|c| (gamma * c).ln() * exponent).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(DVector::from_iterator(raw.len(), raw.iter().map(|w| w / total)))
}

/// Modality weight update from the current per-modality fitting losses.
pub fn update_alpha(state: &OptState, cfg: &TrainConfig) -> Result<DVector<f64>> {
    state.check(None)?;
    modality_weights(&state.modality_losses(), cfg.gamma)
}

/// Block updated by a [`Trainer`] step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Classifier,
    Projection(usize),
    Basis,
    Codes,
    Weights,
}

/// Per-run statistics.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub converged: bool,
    pub initial_objective: f64,
    /// Objective after each full iteration.
    pub objective_trace: Vec<f64>,
    pub iteration_seconds: Vec<f64>,
    /// Kernel features and initialization.
    pub setup_seconds: f64,
    pub total_seconds: f64,
    pub alpha: Vec<f64>,
}

impl TrainReport {
    /// Line-oriented log: one line per iteration followed by a summary line.
    pub fn to_log(&self) -> String {
        let mut out = format!(
            "setup seconds={:.6} objective={:.12e}\n",
            self.setup_seconds, self.initial_objective
        );
        let mut prev = self.initial_objective;
        for (i, (f, s)) in self.objective_trace.iter().zip(&self.iteration_seconds).enumerate() {
            out.push_str(&format!(
                "iter {} objective={:.12e} rel_change={:.3e} seconds={:.6}\n",
                i + 1,
                f,
                relative_change(prev, *f),
                s
            ));
            prev = *f;
        }
        let alpha: Vec<String> = self.alpha.iter().map(|a| format!("{a:.6}")).collect();
        out.push_str(&format!(
            "done iterations={} converged={} seconds={:.6} alpha=[{}]\n",
            self.iterations,
            self.converged,
            self.total_seconds,
            alpha.join(", ")
        ));
        out
    }
}

/// State after one completed iteration, passed to [`Trainer::run_with`].
#[derive(Debug, Clone, Copy)]
pub struct Progress {
    /// 1-based.
    pub iteration: usize,
    pub objective: f64,
    pub relative_change: f64,
    pub seconds: f64,
}

/// `|f_k - f_{k-1}| / max(f_{k-1}, 1e-12)`.
pub fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.max(1e-12)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HashModel,
    pub state: OptState,
    pub report: TrainReport,
}

/// Stepwise driver; [`train`] runs it to convergence. Exposed so callers can
/// observe the objective between individual block updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    labels: LabelMatrix,
    state: OptState,
    kernels: Vec<KernelMap>,
    means: Vec<DVector<f64>>,
    /// `P_m κ_m`, refreshed whenever a projection changes.
    projected: Vec<DMatrix<f64>>,
    setup_seconds: f64,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Trainer {
    /// Centers every modality, samples anchors, caches kernel features and
    /// initializes the blocks. `modalities` hold raw `d_m × n` features.
    pub fn new(modalities: &[DMatrix<f64>], labels: &LabelMatrix, cfg: &TrainConfig) -> Result<Self> {
        let started = Instant::now();
        cfg.validate()?;
        if modalities.is_empty() {
            return Err(Error::InvalidArgument("at least one modality is required".into()));
        }
        let n = labels.len();
        for (m, x) in modalities.iter().enumerate() {
            if x.ncols() != n {
                return Err(Error::InvalidArgument(format!(
                    "modality {m} has {} samples but labels have {n}",
                    x.ncols()
                )));
            }
        }
        if cfg.anchors > n {
            return Err(Error::InvalidArgument(format!(
                "{} anchors requested from {n} training samples",
                cfg.anchors
            )));
        }
        let mut kernels = Vec::with_capacity(modalities.len());
        let mut means = Vec::with_capacity(modalities.len());
        let mut kappa = Vec::with_capacity(modalities.len());
        for (m, x) in modalities.iter().enumerate() {
            let (centered, mean) = center_features(x, m)?;
            let map = sample_anchors(&centered, cfg.anchors, derive_seed(cfg.seed, 1 + m as u64))?;
            kappa.push(kernel_features(&map, &centered)?);
            kernels.push(map);
            means.push(mean);
        }
        let state = OptState::init(kappa, cfg.bits, labels.categories(), derive_seed(cfg.seed, 0))?;
        let projected = state.projections();
        Ok(Self {
            projected,
            cfg: cfg.clone(),
            labels: labels.clone(),
            state,
            kernels,
            means,
            setup_seconds: started.elapsed().as_secs_f64(),
        })
    }

    pub fn state(&self) -> &OptState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn kernels(&self) -> &[KernelMap] {
        &self.kernels
    }

    pub fn objective(&self) -> Result<f64> {
        Ok(objective_with(&self.state, &self.cfg, &self.labels, &self.projected))
    }

    /// Applies a single block update in place.
    pub fn step(&mut self, block: Block) -> Result<()> {
        match block {
            Block::Classifier => self.state.w = update_w(&self.state, &self.cfg, &self.labels)?,
            Block::Projection(m) => {
                self.state.p[m] = update_p(&self.state, &self.cfg, m)?;
                self.projected[m] = mul(&self.state.p[m], &self.state.kappa[m]);
            }
            Block::Basis => self.state.d = update_d(&self.state, &self.cfg, &self.labels)?,
            Block::Codes => self.state.b = dcc_with(&self.state, &self.cfg, &self.labels, &self.projected),
            Block::Weights => {
                self.state.alpha = modality_weights(&losses_from(&self.state.b, &self.projected), self.cfg.gamma)?
            }
        }
        Ok(())
    }

    /// Block order of one full iteration.
    pub fn schedule(&self) -> Vec<Block> {
        let mut blocks = vec![Block::Classifier];
        blocks.extend((0..self.state.modalities()).map(Block::Projection));
        blocks.extend([Block::Basis, Block::Codes, Block::Weights]);
        blocks
    }

    /// One full pass over every block; returns the objective afterwards and
    /// appends it to the trace.
    pub fn iterate(&mut self) -> Result<f64> {
        for block in self.schedule() {
            self.step(block)?;
        }
        let f = self.objective()?;
        self.state.objective_trace.push(f);
        Ok(f)
    }

    /// Iterates until the relative change falls below `tol` or `max_iters`
    /// passes have run.
    pub fn run(self) -> Result<TrainOutcome> {
        self.run_with(|_| {})
    }

    /// Like [`Trainer::run`], calling `progress` after every iteration.
    pub fn run_with(mut self, mut progress: impl FnMut(&Progress)) -> Result<TrainOutcome> {
        let started = Instant::now();
        let initial = self.objective()?;
        let mut prev = initial;
        let mut seconds = Vec::new();
        let mut converged = false;
        for _ in 0..self.cfg.max_iters {
            let t = Instant::now();
            let f = self.iterate()?;
            seconds.push(t.elapsed().as_secs_f64());
            progress(&Progress {
                iteration: seconds.len(),
                objective: f,
                relative_change: relative_change(prev, f),
                seconds: seconds[seconds.len() - 1],
            });
            if relative_change(prev, f) < self.cfg.tol {
                converged = true;
                break;
            }
            prev = f;
        }
        let report = TrainReport {
            iterations: seconds.len(),
            converged,
            initial_objective: initial,
            objective_trace: self.state.objective_trace.clone(),
            iteration_seconds: seconds,
            setup_seconds: self.setup_seconds,
            total_seconds: self.setup_seconds + started.elapsed().as_secs_f64(),
            alpha: self.state.alpha.iter().copied().collect(),
        };
        let model = self.model(
            report.iterations,
            report.objective_trace.last().copied().unwrap_or(initial),
        )?;
        Ok(TrainOutcome {
            model,
            state: self.state,
            report,
        })
    }

    fn model(&self, iterations: usize, final_objective: f64) -> Result<HashModel> {
        let records = self
            .kernels
            .iter()
            .zip(&self.means)
            .zip(&self.state.p)
            .map(|((k, mean), p)| ModalityRecord {
                projection: p.clone(),
                kernel: k.clone(),
                mean: mean.clone(),
            })
            .collect();
        HashModel::new(
            self.cfg.bits,
            records,
            self.state.alpha.clone(),
            ModelMeta {
                config: self.cfg.clone(),
                iterations,
                final_objective,
            },
        )
    }
}

/// Learns unified codes and per-modality hash functions from raw paired
/// features (`d_m × n` each) and labels.
pub fn train(modalities: &[DMatrix<f64>], labels: &LabelMatrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(modalities, labels, cfg)?.run()
}
