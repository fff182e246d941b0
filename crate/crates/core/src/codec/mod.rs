//! The encode/decode abstraction shared by both assimilation pipelines.
//!
//! Two implementations ship: [`LinearCodec`], an orthonormal basis projection
//! (the PCA special case, which satisfies the orthonormal-latent assumption
//! exactly), and [`NeuralCodec`], a dense autoencoder with learnable
//! leaky-rectifier activations trained by Adam on the reconstruction loss.

mod io;
mod neural;
mod train;

pub use io::{
    load_codec, save_codec, save_linear_codec, save_neural_codec, AdamMoments, LoadedCodec,
};
pub use neural::NeuralCodec;
pub use train::{grad_check, param_checksum, train_codec, LossKind, TrainConfig, TrainReport};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::field::FieldSeries;
use crate::reduced::SvdFactors;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("input length {got} does not match expected dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("latent size {m} exceeds the available {s} basis columns")]
    LatentTooLarge { m: usize, s: usize },
    #[error("codec produced a non-finite output")]
    NonFiniteOutput,
    #[error("invalid codec architecture: {0}")]
    BadArchitecture(&'static str),
    #[error("invalid training configuration: {0}")]
    BadConfig(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("data series is empty")]
    EmptyData,
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// A deterministic encode/decode pair mapping states of size n to latent
/// vectors of size m and back.
pub trait Codec {
    fn input_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn encode(&self, x: &[f64]) -> Result<Vec<f64>, CodecError>;
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>, CodecError>;
}

/// Orthonormal linear codec: `encode(x) = Q^T x`, `decode(z) = Q z` with
/// `Q^T Q = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec {
    q: DMatrix<f64>,
}

impl LinearCodec {
    /// Wraps an n x m matrix with orthonormal columns. Orthonormality is the
    /// caller's contract; it is what makes encode a left inverse of decode.
    pub fn new(q: DMatrix<f64>) -> Result<Self, CodecError> {
        if q.ncols() == 0 || q.nrows() < q.ncols() {
            return Err(CodecError::BadArchitecture("Q must be tall with at least one column"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::NonFiniteOutput);
        }
        Ok(Self { q })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.q
    }
}

impl Codec for LinearCodec {
    fn input_dim(&self) -> usize {
        self.q.nrows()
    }

    fn latent_dim(&self) -> usize {
        self.q.ncols()
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>, CodecError> {
        if x.len() != self.q.nrows() {
            return Err(CodecError::DimensionMismatch { got: x.len(), want: self.q.nrows() });
        }
        let z = self.q.tr_mul(&DVector::from_column_slice(x));
        finite_vec(z.as_slice().to_vec())
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>, CodecError> {
        if z.len() != self.q.ncols() {
            return Err(CodecError::DimensionMismatch { got: z.len(), want: self.q.ncols() });
        }
        let x = &self.q * DVector::from_column_slice(z);
        finite_vec(x.as_slice().to_vec())
    }
}

pub(crate) fn finite_vec(v: Vec<f64>) -> Result<Vec<f64>, CodecError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CodecError::NonFiniteOutput);
    }
    Ok(v)
}

/// Builds the PCA codec from the top `m` left singular vectors.
pub fn make_linear_codec(factors: &SvdFactors, m: usize) -> Result<LinearCodec, CodecError> {
    let s = factors.sample_count();
    if m == 0 || m > s {
        return Err(CodecError::LatentTooLarge { m, s });
    }
    LinearCodec::new(factors.u().columns(0, m).clone_owned())
}

/// Empirical second-moment matrix of the latent vectors, `Z Z^T / count`,
/// plus a scalar score `|G / diag_scale - I|_F / m` quantifying how far the
/// latent features are from orthonormal. The score is a diagnostic; how
/// small it gets for a trained codec is data-dependent.
pub fn latent_gram(
    codec: &dyn Codec,
    data: &FieldSeries,
) -> Result<(DMatrix<f64>, f64), CodecError> {
    if data.is_empty() {
        return Err(CodecError::EmptyData);
    }
    let m = codec.latent_dim();
    let mut gram = DMatrix::zeros(m, m);
    for step in data.steps() {
        let z = codec.encode(step.values())?;
        for i in 0..m {
            for j in 0..m {
                gram[(i, j)] += z[i] * z[j];
            }
        }
    }
    gram /= data.len() as f64;
    let diag_scale = (gram.diagonal().sum() / m as f64).max(f64::MIN_POSITIVE);
    let deviation = (&gram / diag_scale - DMatrix::identity(m, m)).norm();
    Ok((gram, deviation / m as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Grid3, StateField};
    use crate::reduced::BackgroundMatrix;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_matrix(n: usize, s: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::stream(seed);
        DMatrix::from_fn(n, s, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn factors(n: usize, s: usize, seed: u64) -> (DMatrix<f64>, SvdFactors) {
        let v = random_matrix(n, s, seed);
        let bg = BackgroundMatrix::from_parts(v.clone(), DVector::zeros(n)).unwrap();
        (v, crate::reduced::compute_svd(&bg).unwrap())
    }

    #[test]
    fn full_latent_reconstructs_ensemble_columns() {
        let (v, f) = factors(30, 6, 4);
        let codec = make_linear_codec(&f, 6).unwrap();
        for j in 0..6 {
            let col: Vec<f64> = v.column(j).iter().copied().collect();
            let back = codec.decode(&codec.encode(&col).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&col) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_input_encodes_to_zero() {
        let (_, f) = factors(20, 4, 9);
        let codec = make_linear_codec(&f, 4).unwrap();
        // Build a vector orthogonal to every basis column.
        let mut x = DVector::from_fn(20, |i, _| ((i * 7 + 3) % 11) as f64 - 5.0);
        for k in 0..4 {
            let q = codec.basis().column(k).clone_owned();
            let proj = q.dot(&x);
            x.axpy(-proj, &q, 1.0);
        }
        let z = codec.encode(x.as_slice()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn basis_unit_vector_roundtrips() {
        let (_, f) = factors(15, 3, 2);
        let codec = make_linear_codec(&f, 3).unwrap();
        let q1: Vec<f64> = codec.basis().column(0).iter().copied().collect();
        let z = codec.encode(&q1).unwrap();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-10);
        assert!(z[1].abs() < 1e-10 && z[2].abs() < 1e-10);
    }

    #[test]
    fn decode_encode_matches_gram_schmidt_projection() {
        // Independent oracle: re-orthonormalize Q by modified Gram-Schmidt
        // and evaluate the projector as a sum of rank-one terms.
        let (_, f) = factors(25, 6, 33);
        let codec = make_linear_codec(&f, 3).unwrap();
        let mut basis: Vec<DVector<f64>> =
            (0..3).map(|k| codec.basis().column(k).clone_owned()).collect();
        for i in 0..3 {
            for j in 0..i {
                let proj = basis[j].dot(&basis[i]);
                let prev = basis[j].clone();
                basis[i].axpy(-proj, &prev, 1.0);
            }
            let n = basis[i].norm();
            basis[i] /= n;
        }
        let mut rng = crate::rng::stream(5);
        let x = DVector::from_fn(25, |_, _| rng.gen_range(-2.0..2.0));
        let mut projected = DVector::zeros(25);
        for q in &basis {
            projected.axpy(q.dot(&x), q, 1.0);
        }
        let through = codec.decode(&codec.encode(x.as_slice()).unwrap()).unwrap();
        for (a, b) in through.iter().zip(projected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn encode_of_decode_is_identity_on_latents() {
        let (_, f) = factors(18, 5, 12);
        let codec = make_linear_codec(&f, 4).unwrap();
        let z = [0.3, -0.8, 1.4, 0.05];
        let back = codec.encode(&codec.decode(&z).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&z) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn projector_is_idempotent() {
        let (_, f) = factors(22, 5, 21);
        let codec = make_linear_codec(&f, 3).unwrap();
        let mut rng = crate::rng::stream(8);
        let x: Vec<f64> = (0..22).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let once = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        let twice = codec.decode(&codec.encode(&once).unwrap()).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn latent_too_large_is_rejected() {
        let (_, f) = factors(10, 3, 1);
        assert!(matches!(
            make_linear_codec(&f, 4),
            Err(CodecError::LatentTooLarge { m: 4, s: 3 })
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (_, f) = factors(10, 3, 1);
        let codec = make_linear_codec(&f, 2).unwrap();
        assert!(matches!(
            codec.encode(&[0.0; 4]),
            Err(CodecError::DimensionMismatch { got: 4, want: 10 })
        ));
        assert!(matches!(
            codec.decode(&[0.0; 3]),
            Err(CodecError::DimensionMismatch { got: 3, want: 2 })
        ));
    }

    #[test]
    fn latent_gram_isotropic_case_scores_zero() {
        // Data columns proportional to the basis columns: Z = c * I.
        let (_, f) = factors(12, 4, 6);
        let codec = make_linear_codec(&f, 4).unwrap();
        let g = Grid3::new(12, 1, 1).unwrap();
        let steps: Vec<StateField> = (0..4)
            .map(|k| {
                let col: Vec<f64> = codec.basis().column(k).iter().map(|v| v * 2.5).collect();
                StateField::new(g, col).unwrap()
            })
            .collect();
        let data = crate::field::FieldSeries::new(g, steps).unwrap();
        let (gram, score) = latent_gram(&codec, &data).unwrap();
        assert!(score < 1e-10, "score = {score}");
        assert_abs_diff_eq!(gram[(0, 0)], 2.5 * 2.5 / 4.0, epsilon = 1e-9);
    }

    #[test]
    fn latent_gram_flags_duplicated_features() {
        // Encoder that duplicates one input component: off-diagonal
        // correlation 1 keeps the score bounded away from zero.
        let mut codec = NeuralCodec::new(vec![2, 2], 0).unwrap();
        codec.params_mut().fill(0.0);
        // Encoder weight layout is row-major [out][in].
        let p = codec.params_mut();
        p[0] = 1.0; // W[0][0]
        p[2] = 1.0; // W[1][0]
        let g = Grid3::new(2, 1, 1).unwrap();
        let steps = vec![
            StateField::new(g, vec![1.0, 0.3]).unwrap(),
            StateField::new(g, vec![-2.0, 0.1]).unwrap(),
        ];
        let data = crate::field::FieldSeries::new(g, steps).unwrap();
        let (_, score) = latent_gram(&codec, &data).unwrap();
        assert!(score > 0.5, "score = {score}");
    }
}
