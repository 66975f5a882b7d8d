use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dct::DctBasis;
use super::{check_len, BaselineError};

/// Relative residual at which pursuit stops early.
const RESIDUAL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsConfig {
    /// Block length N.
    pub block_len: usize,
    /// Measurements per block M.
    pub n_measurements: usize,
    pub sensing_seed: u64,
    /// Pursuit iterations.
    pub sparsity_k: usize,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            block_len: 128,
            n_measurements: 32,
            sensing_seed: 0,
            sparsity_k: 8,
        }
    }
}

impl CsConfig {
    /// Default sparsity of a quarter of the measurements.
    pub fn with_measurements(block_len: usize, n_measurements: usize, sensing_seed: u64) -> Self {
        Self {
            block_len,
            n_measurements,
            sensing_seed,
            sparsity_k: (n_measurements / 4).max(1),
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let ok = self.block_len > 0
            && self.n_measurements > 0
            && self.n_measurements <= self.block_len
            && self.sparsity_k > 0
            && self.sparsity_k <= self.n_measurements;
        if ok {
            Ok(())
        } else {
            Err(BaselineError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub fn compression_ratio(&self) -> f64 {
        self.block_len as f64 / self.n_measurements as f64
    }
}

/// Seeded Gaussian sensing with orthogonal-matching-pursuit recovery in the
/// DCT dictionary.
#[derive(Clone, Debug)]
pub struct CsCodec {
    cfg: CsConfig,
    /// Row-major M x N, unit-norm rows.
    phi: Vec<f64>,
    /// Sensing matrix applied to each DCT atom, column-major N x M, with
    /// the column norms.
    atoms: Vec<f64>,
    atom_norms: Vec<f64>,
    basis: DctBasis,
}

impl CsCodec {
    pub fn new(cfg: CsConfig) -> Result<Self, BaselineError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sensing_seed);
        let n = cfg.block_len;
        let mut phi: Vec<f64> = (0..cfg.n_measurements * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for row in phi.chunks_exact_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self::with_matrix(cfg, phi))
    }

    /// Codec with an explicit sensing matrix (row-major M x N), e.g. the
    /// identity.
    pub fn with_matrix(cfg: CsConfig, phi: Vec<f64>) -> Self {
        assert_eq!(phi.len(), cfg.n_measurements * cfg.block_len, "sensing matrix shape");
        let basis = DctBasis::new(cfg.block_len);
        let mut atoms = Vec::with_capacity(cfg.block_len * cfg.n_measurements);
        let mut atom_norms = Vec::with_capacity(cfg.block_len);
        for k in 0..cfg.block_len {
            let col = apply(&phi, cfg.block_len, basis.row(k));
            atom_norms.push(col.iter().map(|v| v * v).sum::<f64>().sqrt());
            atoms.extend(col);
        }
        Self {
            cfg,
            phi,
            atoms,
            atom_norms,
            basis,
        }
    }

    pub fn identity(block_len: usize) -> Self {
        let mut phi = vec![0.0; block_len * block_len];
        for i in 0..block_len {
            phi[i * block_len + i] = 1.0;
        }
        let cfg = CsConfig {
            block_len,
            n_measurements: block_len,
            sensing_seed: 0,
            sparsity_k: block_len,
        };
        Self::with_matrix(cfg, phi)
    }

    pub fn config(&self) -> CsConfig {
        self.cfg
    }

    pub fn sensing_matrix(&self) -> &[f64] {
        &self.phi
    }

    pub fn compress(&self, block: &[f64]) -> Result<Vec<f64>, BaselineError> {
        check_len(self.cfg.block_len, block.len())?;
        Ok(apply(&self.phi, self.cfg.block_len, block))
    }

    fn atom(&self, k: usize) -> &[f64] {
        let m = self.cfg.n_measurements;
        &self.atoms[k * m..(k + 1) * m]
    }

    /// Orthogonal matching pursuit with `sparsity_k` iterations.
    pub fn decompress(&self, y: &[f64]) -> Result<Vec<f64>, BaselineError> {
        self.decompress_with(y, self.cfg.sparsity_k)
    }

    /// As [`CsCodec::decompress`] with an explicit iteration count.
    pub fn decompress_with(&self, y: &[f64], iterations: usize) -> Result<Vec<f64>, BaselineError> {
        Ok(self.basis.inverse(&self.pursue(y, iterations)?.0))
    }

    /// DCT-domain estimate and final residual norm.
    pub fn pursue(&self, y: &[f64], iterations: usize) -> Result<(Vec<f64>, f64), BaselineError> {
        let m = self.cfg.n_measurements;
        let n = self.cfg.block_len;
        check_len(m, y.len())?;
        let y_norm = norm(y);
        let mut coeffs = vec![0.0; n];
        if y_norm == 0.0 {
            return Ok((coeffs, 0.0));
        }
        // Orthonormal basis q of the selected atoms' span (modified
        // Gram-Schmidt) and the triangular factor r, column by column.
        let mut support: Vec<usize> = Vec::new();
        let mut q: Vec<Vec<f64>> = Vec::new();
        let mut r: Vec<Vec<f64>> = Vec::new();
        let mut residual = y.to_vec();
        for _ in 0..iterations.min(m) {
            if norm(&residual) <= RESIDUAL_TOL * y_norm {
                break;
            }
            let best = (0..n)
                .filter(|k| !support.contains(k) && self.atom_norms[*k] > 0.0)
                .map(|k| (k, dot(self.atom(k), &residual).abs() / self.atom_norms[k]))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            let Some((k, _)) = best else { break };
            let mut v = self.atom(k).to_vec();
            let mut col = Vec::with_capacity(q.len() + 1);
            for qi in &q {
                let c = dot(qi, &v);
                v.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * b);
                col.push(c);
            }
            let vn = norm(&v);
            if vn <= 1e-12 * self.atom_norms[k] {
                break;
            }
            v.iter_mut().for_each(|a| *a /= vn);
            col.push(vn);
            let proj = dot(&v, &residual);
            residual.iter_mut().zip(&v).for_each(|(a, b)| *a -= proj * b);
            support.push(k);
            q.push(v);
            r.push(col);
        }
        // Back-substitution of r z = q^T y.
        let qty: Vec<f64> = q.iter().map(|qi| dot(qi, y)).collect();
        let s = support.len();
        let mut z = vec![0.0; s];
        for i in (0..s).rev() {
            let mut acc = qty[i];
            for j in i + 1..s {
                acc -= r[j][i] * z[j];
            }
            z[i] = acc / r[i][i];
        }
        for (&k, v) in support.iter().zip(z) {
            coeffs[k] = v;
        }
        Ok((coeffs, norm(&residual)))
    }

    /// Payload of one block: M 16-bit measurements.
    pub fn block_bits(&self) -> u64 {
        self.cfg.n_measurements as u64 * 16
    }
}

fn apply(phi: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    phi.chunks_exact(n).map(|row| dot(row, x)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cs_compress(block: &[f64], cfg: CsConfig) -> Result<Vec<f64>, BaselineError> {
    CsCodec::new(cfg)?.compress(block)
}

pub fn cs_decompress(y: &[f64], cfg: CsConfig) -> Result<Vec<f64>, BaselineError> {
    CsCodec::new(cfg)?.decompress(y)
}
