//! Cross-attention from class centers (queries) to a batch of embeddings
//! (keys and values), with its hand-derived backward pass.
//!
//! ```text
//! Q = A Wq    K = Z Wk    V = Z Wv
//! S = softmax(Q Kᵀ / √d)        (one row per class)
//! ΔA = S V
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{bin, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, row_softmax, Matrix};
use crate::parallel;

pub const MODEL_MAGIC: &[u8; 8] = b"SSOCMDL1";

/// Query, key and value projections, all `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionParams {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
        }
    }

    /// Identity plus seeded Gaussian noise with standard deviation `noise`.
    pub fn perturbed_identity(d: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let mut m = Matrix::identity(d);
            for v in m.data_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v += noise * g;
            }
            m
        };
        let (w_q, w_k, w_v) = (draw(), draw(), draw());
        Self { w_q, w_k, w_v }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if m.shape() != (d, d) {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> [&Matrix; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn blocks_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

/// The recurrent class-center state `A_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub centers: Matrix,
    /// Number of residual updates applied so far.
    pub step: u64,
}

impl ClassCenters {
    pub fn new(centers: Matrix) -> Self {
        Self { centers, step: 0 }
    }

    pub fn class_count(&self) -> usize {
        self.centers.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    None,
    L2,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "l2" => Ok(Self::L2),
            _ => Err(Error::Config(format!("unknown norm mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::L2 => "l2",
        })
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub centers: Matrix,
    pub z: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// `(S+N) x B`, rows sum to one.
    pub weights: Matrix,
    scale: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub z: Matrix,
}

pub fn cross_attention_forward(
    centers: &ClassCenters,
    z: &Matrix,
    params: &AttentionParams,
) -> Result<(Matrix, AttentionCache)> {
    params.validate()?;
    let d = params.dim();
    if z.cols() != d || centers.centers.cols() != d {
        return Err(Error::Shape(format!(
            "attention dim {d}, batch dim {}, center dim {}",
            z.cols(),
            centers.centers.cols()
        )));
    }
    if z.rows() == 0 {
        return Err(Error::Shape("attention batch is empty".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let q = centers.centers.matmul(&params.w_q)?;
    let k = z.matmul(&params.w_k)?;
    let v = z.matmul(&params.w_v)?;
    let logits = q.matmul_t(&k)?.scaled(scale);
    let weights = row_softmax(&logits, 1.0)?;
    let delta = weights.matmul(&v)?;
    let cache = AttentionCache {
        centers: centers.centers.clone(),
        z: z.clone(),
        q,
        k,
        v,
        weights,
        scale,
    };
    Ok((delta, cache))
}

/// Backward of [`cross_attention_forward`] for an upstream gradient `dΔA`.
pub fn cross_attention_backward(cache: &AttentionCache, d_delta: &Matrix, params: &AttentionParams) -> Result<AttentionGrads> {
    if d_delta.shape() != (cache.weights.rows(), cache.v.cols()) {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            d_delta.rows(),
            d_delta.cols(),
            cache.weights.rows(),
            cache.v.cols()
        )));
    }
    let s = &cache.weights;
    // dS = dΔA Vᵀ, dV = Sᵀ dΔA
    let d_s = d_delta.matmul_t(&cache.v)?;
    let d_v = s.t_matmul(d_delta)?;

    // softmax Jacobian row by row: dL = s ⊙ (dS − ⟨dS, s⟩)
    let mut d_logits = d_s;
    let b = d_logits.cols();
    parallel::for_each_row(d_logits.data_mut(), b, |i, row| {
        let si = s.row(i);
        let inner = dot(row, si);
        for (g, &p) in row.iter_mut().zip(si) {
            *g = p * (*g - inner);
        }
    });
    d_logits.scale(cache.scale);

    let d_q = d_logits.matmul(&cache.k)?;
    let d_k = d_logits.t_matmul(&cache.q)?;

    let w_q = cache.centers.t_matmul(&d_q)?;
    let w_k = cache.z.t_matmul(&d_k)?;
    let w_v = cache.z.t_matmul(&d_v)?;
    let mut z = d_k.matmul_t(&params.w_k)?;
    z.add_assign(&d_v.matmul_t(&params.w_v)?)?;
    Ok(AttentionGrads { w_q, w_k, w_v, z })
}

/// Residual update `A_{t+1} = A_t + ΔA`, optionally row-normalized.
///
/// The result carries no gradient history.
pub fn update_centers(centers: &ClassCenters, delta: &Matrix, norm_mode: NormMode) -> Result<ClassCenters> {
    let mut next = centers.centers.add(delta)?;
    if norm_mode == NormMode::L2 {
        next = l2_normalize_rows(&next)?;
    }
    Ok(ClassCenters {
        centers: next,
        step: centers.step + 1,
    })
}

/// A trained model: attention projections plus class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: AttentionParams,
    pub centers: ClassCenters,
    pub known_classes: usize,
}

impl Model {
    pub fn novel_classes(&self) -> usize {
        self.centers.class_count() - self.known_classes
    }
}

pub(crate) fn encode_model(model: &Model, path: &Path) -> Result<Vec<u8>> {
    let d = model.params.dim();
    let to_u32 = |v: usize, field: &'static str| {
        u32::try_from(v).map_err(|_| Error::format(path, field, format!("{v} exceeds u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    bin::put_u32(&mut out, to_u32(d, "d")?);
    bin::put_u32(&mut out, to_u32(model.known_classes, "known_classes")?);
    bin::put_u32(&mut out, to_u32(model.novel_classes(), "novel_classes")?);
    for m in model.params.blocks() {
        bin::put_f32s(&mut out, m.data());
    }
    bin::put_f32s(&mut out, model.centers.centers.data());
    Ok(out)
}

pub(crate) fn decode_model(r: &mut Reader<'_>) -> Result<Model> {
    r.magic(MODEL_MAGIC)?;
    let d = r.u32("d")? as usize;
    let known = r.u32("known_classes")? as usize;
    let novel = r.u32("novel_classes")? as usize;
    let mut block = |field| -> Result<Matrix> { Matrix::new(d, d, r.f32_block(d * d, field)?) };
    let w_q = block("w_q")?;
    let w_k = block("w_k")?;
    let w_v = block("w_v")?;
    let k = known + novel;
    let centers = Matrix::new(k, d, r.f32_block(k * d, "centers")?)?;
    Ok(Model {
        params: AttentionParams { w_q, w_k, w_v },
        centers: ClassCenters::new(centers),
        known_classes: known,
    })
}

pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    write_file(path, &encode_model(model, path)?)
}

/// Reads the model block of a checkpoint, ignoring any optimizer block.
pub fn read_model(path: &Path) -> Result<Model> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    decode_model(&mut r)
}
