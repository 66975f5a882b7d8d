use serde::{Deserialize, Serialize};

use super::{check_len, BaselineError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DctConfig {
    pub block_len: usize,
    /// Coefficients retained per block.
    pub keep_k: usize,
}

impl Default for DctConfig {
    fn default() -> Self {
        Self {
            block_len: 128,
            keep_k: 16,
        }
    }
}

impl DctConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.block_len == 0 || self.keep_k == 0 || self.keep_k > self.block_len {
            return Err(BaselineError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Orthonormal DCT-II of size `n` as a dense matrix; row `k` is basis vector
/// `k`, so the forward transform is `B x` and the inverse is `B^T c`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    n: usize,
    rows: Vec<f64>,
}

impl DctBasis {
    pub fn new(n: usize) -> Self {
        let mut rows = Vec::with_capacity(n * n);
        for k in 0..n {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for i in 0..n {
                let arg = std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64;
                rows.push(scale * arg.cos());
            }
        }
        Self { n, rows }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Basis vector `k` as a time-domain block.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.n..(k + 1) * self.n]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .chunks_exact(self.n)
            .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn inverse(&self, c: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (r, &ck) in self.rows.chunks_exact(self.n).zip(c) {
            if ck != 0.0 {
                for (xi, b) in x.iter_mut().zip(r) {
                    *xi += ck * b;
                }
            }
        }
        x
    }
}

/// Block DCT with largest-magnitude coefficient truncation.
#[derive(Clone, Debug)]
pub struct DctCodec {
    cfg: DctConfig,
    basis: DctBasis,
}

impl DctCodec {
    pub fn new(cfg: DctConfig) -> Result<Self, BaselineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            basis: DctBasis::new(cfg.block_len),
        })
    }

    pub fn config(&self) -> DctConfig {
        self.cfg
    }

    /// Retained `(indices, coefficients)`, indices ascending.
    pub fn compress(&self, block: &[f64]) -> Result<(Vec<usize>, Vec<f64>), BaselineError> {
        check_len(self.cfg.block_len, block.len())?;
        let c = self.basis.forward(block);
        let mut order: Vec<usize> = (0..c.len()).collect();
        // Stable on ties: lower index wins.
        order.sort_by(|&a, &b| c[b].abs().total_cmp(&c[a].abs()).then(a.cmp(&b)));
        let mut idx: Vec<usize> = order[..self.cfg.keep_k].to_vec();
        idx.sort_unstable();
        let coeffs = idx.iter().map(|&i| c[i]).collect();
        Ok((idx, coeffs))
    }

    pub fn decompress(&self, indices: &[usize], coefficients: &[f64]) -> Result<Vec<f64>, BaselineError> {
        let n = self.cfg.block_len;
        if indices.len() != coefficients.len() {
            return Err(BaselineError::MalformedIndices(format!(
                "{} indices for {} coefficients",
                indices.len(),
                coefficients.len()
            )));
        }
        let mut dense = vec![0.0; n];
        let mut seen = vec![false; n];
        for (&i, &v) in indices.iter().zip(coefficients) {
            if i >= n {
                return Err(BaselineError::MalformedIndices(format!(
                    "index {i} outside block of {n}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(BaselineError::MalformedIndices(format!("index {i} repeated")));
            }
            dense[i] = v;
        }
        Ok(self.basis.inverse(&dense))
    }

    /// Payload of one block: 16-bit coefficient plus its index.
    pub fn block_bits(&self) -> u64 {
        self.cfg.keep_k as u64 * (16 + index_bits(self.cfg.block_len))
    }
}

pub(super) fn index_bits(n: usize) -> u64 {
    u64::from(usize::BITS - (n.max(2) - 1).leading_zeros())
}

pub fn dct_compress(block: &[f64], cfg: DctConfig) -> Result<(Vec<usize>, Vec<f64>), BaselineError> {
    DctCodec::new(cfg)?.compress(block)
}

pub fn dct_decompress(indices: &[usize], coefficients: &[f64], cfg: DctConfig) -> Result<Vec<f64>, BaselineError> {
    DctCodec::new(cfg)?.decompress(indices, coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: usize, k: usize) -> DctConfig {
        DctConfig {
            block_len: n,
            keep_k: k,
        }
    }

    /// Textbook O(n^2) DCT-II with orthonormal scaling, written independently
    /// of the matrix form.
    fn reference_dct(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let s: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (std::f64::consts::PI / n * (i as f64 + 0.5) * k as f64).cos())
                    .sum();
                s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
            })
            .collect()
    }

    #[test]
    fn matches_reference_transform() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let b = DctBasis::new(16);
        for (a, r) in b.forward(&x).iter().zip(reference_dct(&x)) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_block_is_pure_dc() {
        let x = vec![3.5; 32];
        let (idx, c) = dct_compress(&x, cfg(32, 1)).unwrap();
        assert_eq!(idx, vec![0]);
        assert!((c[0] - 3.5 * 32f64.sqrt()).abs() < 1e-12);
        let y = dct_decompress(&idx, &c, cfg(32, 1)).unwrap();
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-12));
        let full = DctBasis::new(32).forward(&x);
        assert!(full[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn basis_aligned_cosine_has_one_coefficient() {
        let b = DctBasis::new(64);
        let x = b.row(5).iter().map(|v| v * 2.0).collect::<Vec<_>>();
        let c = b.forward(&x);
        let nonzero: Vec<usize> = (0..64).filter(|&k| c[k].abs() > 1e-9).collect();
        assert_eq!(nonzero, vec![5]);
        let (idx, coeffs) = dct_compress(&x, cfg(64, 1)).unwrap();
        assert_eq!(idx, vec![5]);
        let y = dct_decompress(&idx, &coeffs, cfg(64, 1)).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            dct_compress(&[1.0; 5], cfg(8, 2)),
            Err(BaselineError::LengthMismatch { .. })
        ));
        assert!(DctCodec::new(cfg(8, 0)).is_err());
        assert!(DctCodec::new(cfg(8, 9)).is_err());
        let codec = DctCodec::new(cfg(8, 2)).unwrap();
        assert!(codec.decompress(&[1, 1], &[1.0, 2.0]).is_err());
        assert!(codec.decompress(&[8], &[1.0]).is_err());
        assert!(codec.decompress(&[1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn payload_accounting() {
        // 16 coefficients, 7 index bits each for 128-sample blocks.
        assert_eq!(DctCodec::new(cfg(128, 16)).unwrap().block_bits(), 16 * 23);
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(129), 8);
    }

    proptest! {
        #[test]
        fn energy_is_conserved(x in prop::collection::vec(-500.0f64..500.0, 1..100)) {
            let b = DctBasis::new(x.len());
            let c = b.forward(&x);
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let ec: f64 = c.iter().map(|v| v * v).sum();
            prop_assert!((ex - ec).abs() <= 1e-9 * ex.max(1e-300));
        }

        #[test]
        fn full_retention_is_lossless(x in prop::collection::vec(-500.0f64..500.0, 1..100)) {
            let c = cfg(x.len(), x.len());
            let (idx, coeffs) = dct_compress(&x, c).unwrap();
            let y = dct_decompress(&idx, &coeffs, c).unwrap();
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn more_coefficients_never_hurt(x in prop::collection::vec(-100.0f64..100.0, 32), k in 1usize..32) {
            let err = |k: usize| {
                let c = cfg(32, k);
                let (i, v) = dct_compress(&x, c).unwrap();
                let y = dct_decompress(&i, &v, c).unwrap();
                x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            };
            prop_assert!(err(k + 1) <= err(k) + 1e-9);
        }
    }
}
