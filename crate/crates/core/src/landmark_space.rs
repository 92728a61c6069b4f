//! PCA coefficient space for facial landmarks.
//!
//! Projection drops the boost weights; reconstruction applies them:
//! `shape = (h ⊙ ω) U + M`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::media::{LandmarkSet, LANDMARK_DIM};
use crate::{Error, Result};

pub const DEFAULT_COMPONENTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    mean: Vec<f64>,
    /// `k` rows of length 136, orthonormal.
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    boost: Vec<f64>,
    total_variance: f64,
}

/// Coefficients `h` of one shape in a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaCoeffs {
    pub values: Vec<f64>,
}

impl PcaCoeffs {
    pub fn zeros(k: usize) -> Self {
        Self { values: vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fits the mean shape and the `k` leading eigenvectors of the (population) covariance.
pub fn fit_basis(shapes: &[LandmarkSet], k: usize) -> Result<PcaBasis> {
    if k == 0 || k > LANDMARK_DIM {
        return Err(Error::Config(format!("component count must be in 1..={LANDMARK_DIM}, got {k}")));
    }
    if shapes.len() < k + 1 {
        return Err(Error::Config(format!(
            "fitting {k} components needs at least {} shapes, got {}",
            k + 1,
            shapes.len()
        )));
    }
    let n = shapes.len() as f64;
    let flat: Vec<Vec<f64>> = shapes.iter().map(|s| s.flatten_f64()).collect();
    let mut mean = vec![0.0; LANDMARK_DIM];
    for row in &flat {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(LANDMARK_DIM, LANDMARK_DIM);
    for row in &flat {
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..LANDMARK_DIM {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..LANDMARK_DIM {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..LANDMARK_DIM {
        for j in i..LANDMARK_DIM {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..LANDMARK_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = (top * 1e-9).max(1e-18);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if k > rank {
        return Err(Error::RankDeficient { requested: k, achievable: rank });
    }
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        components.push(v);
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }
    log::info!(
        "fitted {k} landmark components retaining {:.2}% of variance",
        100.0 * eigenvalues.iter().sum::<f64>() / total_variance.max(f64::MIN_POSITIVE)
    );
    Ok(PcaBasis { mean, components, eigenvalues, boost: vec![1.0; k], total_variance })
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    format: String,
    version: u32,
    k: usize,
    dim: usize,
    total_variance: f64,
}

const BASIS_FORMAT: &str = "landmark-pca";
const BASIS_VERSION: u32 = 1;

impl PcaBasis {
    pub fn from_parts(mean: Vec<f64>, components: Vec<Vec<f64>>, eigenvalues: Vec<f64>, boost: Vec<f64>) -> Result<Self> {
        let k = components.len();
        if mean.len() != LANDMARK_DIM
            || components.iter().any(|c| c.len() != LANDMARK_DIM)
            || eigenvalues.len() != k
            || boost.len() != k
        {
            return Err(Error::Shape("inconsistent basis dimensions".into()));
        }
        if boost.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::Config("boost weights must be strictly positive".into()));
        }
        let total_variance = eigenvalues.iter().sum();
        Ok(Self { mean, components, eigenvalues, boost, total_variance })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_shape(&self) -> LandmarkSet {
        LandmarkSet::from_flat_f64(&self.mean).expect("mean has landmark dimension")
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn boost(&self) -> &[f64] {
        &self.boost
    }

    /// Fraction of the fitting set's variance captured by the retained components.
    pub fn retained_variance(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.total_variance.max(f64::MIN_POSITIVE)
    }

    pub fn set_boost(&mut self, boost: Vec<f64>) -> Result<()> {
        if boost.len() != self.k() {
            return Err(Error::Shape(format!("boost needs {} weights, got {}", self.k(), boost.len())));
        }
        if boost.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::Config("boost weights must be strictly positive".into()));
        }
        self.boost = boost;
        Ok(())
    }

    /// `h = (x - M) Uᵀ` on a flattened shape.
    pub fn project_flat(&self, flat: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|u| u.iter().zip(flat.iter().zip(&self.mean)).map(|(ui, (x, m))| ui * (x - m)).sum())
            .collect()
    }

    /// `(h ⊙ ω) U + M` as a flat vector.
    pub fn reconstruct_flat(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for ((u, &hj), &wj) in self.components.iter().zip(h).zip(&self.boost) {
            let c = hj * wj;
            for (o, ui) in out.iter_mut().zip(u) {
                *o += c * ui;
            }
        }
        out
    }

    pub fn project(&self, shape: &LandmarkSet) -> PcaCoeffs {
        PcaCoeffs { values: self.project_flat(&shape.flatten_f64()) }
    }

    /// Raw reconstruction; coordinates may leave the unit box.
    pub fn reconstruct(&self, coeffs: &PcaCoeffs) -> Result<LandmarkSet> {
        if coeffs.len() != self.k() {
            return Err(Error::Shape(format!("basis has {} components, coefficients have {}", self.k(), coeffs.len())));
        }
        LandmarkSet::from_flat_f64(&self.reconstruct_flat(&coeffs.values))
    }

    /// `out_t = p_t - example + M`: keeps each frame's motion relative to the example shape
    /// and replaces the identity by the mean shape.
    pub fn remove_identity(&self, sequence: &[LandmarkSet], example: &LandmarkSet) -> Vec<LandmarkSet> {
        let ex = example.flatten_f64();
        sequence
            .iter()
            .map(|p| {
                let flat: Vec<f64> = p
                    .flatten_f64()
                    .iter()
                    .zip(&ex)
                    .zip(&self.mean)
                    .map(|((x, e), m)| x - e + m)
                    .collect();
                LandmarkSet::from_flat_f64(&flat).expect("landmark dimension")
            })
            .collect()
    }

    /// Inverse of [`PcaBasis::remove_identity`] for a single shape.
    pub fn restore_identity(&self, shape: &LandmarkSet, example: &LandmarkSet) -> LandmarkSet {
        let ex = example.flatten_f64();
        let flat: Vec<f64> = shape
            .flatten_f64()
            .iter()
            .zip(&ex)
            .zip(&self.mean)
            .map(|((x, e), m)| x - m + e)
            .collect();
        LandmarkSet::from_flat_f64(&flat).expect("landmark dimension")
    }

    /// Largest entry of `|U Uᵀ - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BasisHeader {
            format: BASIS_FORMAT.into(),
            version: BASIS_VERSION,
            k: self.k(),
            dim: LANDMARK_DIM,
            total_variance: self.total_variance,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let floats = self
            .mean
            .iter()
            .chain(self.components.iter().flatten())
            .chain(&self.eigenvalues)
            .chain(&self.boost);
        for &v in floats {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Data("basis file truncated".into()));
        }
        let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() < 4 + hlen {
            return Err(Error::Data("basis header truncated".into()));
        }
        let header: BasisHeader = serde_json::from_slice(&bytes[4..4 + hlen])?;
        if header.format != BASIS_FORMAT || header.version != BASIS_VERSION || header.dim != LANDMARK_DIM {
            return Err(Error::Data(format!(
                "unsupported basis file ({} v{}, dim {})",
                header.format, header.version, header.dim
            )));
        }
        let k = header.k;
        let floats: Vec<f64> = bytes[4 + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let expected = LANDMARK_DIM + k * LANDMARK_DIM + 2 * k;
        if floats.len() != expected || (bytes.len() - 4 - hlen) % 4 != 0 {
            return Err(Error::Data(format!("basis data has {} values, expected {expected}", floats.len())));
        }
        let mean = floats[..LANDMARK_DIM].to_vec();
        let comp_end = LANDMARK_DIM + k * LANDMARK_DIM;
        let components = floats[LANDMARK_DIM..comp_end].chunks(LANDMARK_DIM).map(|c| c.to_vec()).collect();
        let eigenvalues = floats[comp_end..comp_end + k].to_vec();
        let boost = floats[comp_end + k..].to_vec();
        let mut basis = Self::from_parts(mean, components, eigenvalues, boost)?;
        basis.total_variance = header.total_variance;
        Ok(basis)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Content hash of the serialized basis; checkpoints record it.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..16])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_shapes(n: usize, seed: u64) -> Vec<LandmarkSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let flat: Vec<f32> = (0..LANDMARK_DIM).map(|_| rng.gen_range(0.2..0.8)).collect();
                LandmarkSet::from_flat(&flat).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_shapes_have_zero_rank() {
        let shapes = vec![random_shapes(1, 1)[0]; 10];
        match fit_basis(&shapes, 1) {
            Err(Error::RankDeficient { requested: 1, achievable: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rank_one_data_recovers_direction() {
        let base = random_shapes(1, 2)[0].flatten_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir: Vec<f64> = (0..LANDMARK_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let shapes: Vec<LandmarkSet> = (0..30)
            .map(|i| {
                let t = (i as f64 - 15.0) * 0.002;
                let flat: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + t * d).collect();
                LandmarkSet::from_flat_f64(&flat).unwrap()
            })
            .collect();
        let basis = fit_basis(&shapes, 1).unwrap();
        let dot: f64 = basis.components()[0].iter().zip(&dir).map(|(u, d)| u * d / norm).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-5, "dot {dot}");
        assert!(matches!(fit_basis(&shapes, 2), Err(Error::RankDeficient { achievable: 1, .. })));
    }

    #[test]
    fn mean_projects_to_zero_and_components_to_unit_vectors() {
        let basis = fit_basis(&random_shapes(60, 3), 10).unwrap();
        let zero = basis.project_flat(basis.mean());
        assert!(zero.iter().all(|v| v.abs() < 1e-12));
        for j in 0..basis.k() {
            let shape: Vec<f64> = basis.mean().iter().zip(&basis.components()[j]).map(|(m, u)| m + u).collect();
            let h = basis.project_flat(&shape);
            for (i, v) in h.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_coefficients_reconstruct_the_mean() {
        let basis = fit_basis(&random_shapes(40, 4), 5).unwrap();
        assert_eq!(basis.reconstruct_flat(&[0.0; 5]), basis.mean());
    }

    #[test]
    fn project_ignores_boost() {
        let shapes = random_shapes(40, 5);
        let mut basis = fit_basis(&shapes, 5).unwrap();
        let before = basis.project(&shapes[3]);
        basis.set_boost(vec![2.0, 1.0, 3.0, 1.0, 0.5]).unwrap();
        assert_eq!(basis.project(&shapes[3]), before);
        assert!(basis.set_boost(vec![1.0, 0.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn identity_removal_maps_example_to_mean() {
        let shapes = random_shapes(30, 6);
        let basis = fit_basis(&shapes, 4).unwrap();
        let example = shapes[0];
        let out = basis.remove_identity(&[example, example], &example);
        for s in out {
            for (a, b) in s.flatten_f64().iter().zip(basis.mean()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn serialization_round_trip_keeps_hash() {
        let basis = fit_basis(&random_shapes(30, 7), 6).unwrap();
        let loaded = PcaBasis::from_bytes(&basis.to_bytes()).unwrap();
        assert_eq!(loaded.hash(), basis.hash());
        assert!(loaded.orthonormality_error() < 1e-6);
        let mut bytes = basis.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(PcaBasis::from_bytes(&bytes).is_err());
    }
}
