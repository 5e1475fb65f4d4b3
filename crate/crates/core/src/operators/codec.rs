use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Rng, Vector};

/// Encoder/decoder pair between data space and the latent space in which
/// the diffusion runs. For the orthogonal kind `decode = Eᵀ` and `E Eᵀ = I`,
/// so `decode` is an isometry and `encode ∘ decode` is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentCodec {
    Identity { dim: usize },
    OrthogonalLinear { encoder: Matrix },
}

impl LatentCodec {
    pub fn identity(dim: usize) -> Self {
        LatentCodec::Identity { dim }
    }

    pub fn orthogonal(encoder: Matrix) -> Result<Self> {
        let gram = &encoder * encoder.transpose();
        let err = (gram - Matrix::identity(encoder.nrows(), encoder.nrows())).amax();
        if err > 1e-10 {
            return Err(Error::InvalidParameter(format!(
                "encoder rows are not orthonormal (max |E Eᵀ - I| = {err:e})"
            )));
        }
        Ok(LatentCodec::OrthogonalLinear { encoder })
    }

    /// 2×2 block pooling scaled by 1/2: latent dimension `d/4`, orthonormal rows.
    pub fn pooling(height: usize, width: usize) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "pooling codec needs even image sides, got {height}x{width}"
            )));
        }
        let (lh, lw) = (height / 2, width / 2);
        let mut e = Matrix::zeros(lh * lw, height * width);
        for r in 0..height {
            for c in 0..width {
                e[((r / 2) * lw + c / 2, r * width + c)] = 0.5;
            }
        }
        Self::orthogonal(e)
    }

    /// Random orthonormal rows from the QR factorisation of a Gaussian matrix.
    pub fn random_orthogonal(latent_dim: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if latent_dim > dim || latent_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "latent dimension {latent_dim} must lie in [1, {dim}]"
            )));
        }
        let g = Matrix::from_iterator(dim, latent_dim, crate::standard_normal(dim * latent_dim, rng).iter().cloned());
        let q = g.qr().q();
        Self::orthogonal(q.transpose())
    }

    pub fn data_dim(&self) -> usize {
        match self {
            LatentCodec::Identity { dim } => *dim,
            LatentCodec::OrthogonalLinear { encoder } => encoder.ncols(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            LatentCodec::Identity { dim } => *dim,
            LatentCodec::OrthogonalLinear { encoder } => encoder.nrows(),
        }
    }

    pub fn encode(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.data_dim() {
            return Err(Error::dim("encode input", self.data_dim(), x.len()));
        }
        Ok(match self {
            LatentCodec::Identity { .. } => x.clone(),
            LatentCodec::OrthogonalLinear { encoder } => encoder * x,
        })
    }

    pub fn decode(&self, z: &Vector) -> Result<Vector> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim("decode input", self.latent_dim(), z.len()));
        }
        Ok(match self {
            LatentCodec::Identity { .. } => z.clone(),
            LatentCodec::OrthogonalLinear { encoder } => encoder.tr_mul(z),
        })
    }

    /// `Dᵀ u`, the pull-back of a data-space gradient into latent space.
    pub fn decode_adjoint(&self, u: &Vector) -> Result<Vector> {
        self.encode(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{rng_from_seed, standard_normal};

    #[test]
    fn identity_round_trip() {
        let c = LatentCodec::identity(5);
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(c.decode(&c.encode(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn orthogonal_codecs_are_isometric() {
        let mut rng = rng_from_seed(5);
        for codec in [
            LatentCodec::pooling(8, 8).unwrap(),
            LatentCodec::random_orthogonal(16, 64, &mut rng).unwrap(),
        ] {
            assert_eq!(codec.latent_dim(), 16);
            for _ in 0..10 {
                let z = standard_normal(16, &mut rng);
                let x = codec.decode(&z).unwrap();
                assert!((x.norm() - z.norm()).abs() < 1e-10);
                assert!((codec.encode(&x).unwrap() - &z).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_non_orthonormal_encoder() {
        assert!(LatentCodec::orthogonal(Matrix::from_row_slice(1, 2, &[1.0, 1.0])).is_err());
        assert!(LatentCodec::pooling(3, 4).is_err());
        assert!(LatentCodec::identity(3).encode(&Vector::zeros(4)).is_err());
    }
}
