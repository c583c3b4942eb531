//! Dense numeric kit: the symmetric bilinear parameter, Moore-Penrose
//! pseudoinverse via SVD, and elementwise SGD/Adam with per-parameter state.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A square parameter used through its symmetrization `(W + Wᵀ)/2`. The raw
/// matrix is what gets stored and updated; gradients of the bilinear form are
/// symmetric, so the asymmetric part of the initialization never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricParam {
    raw: DMatrix<f64>,
}

impl SymmetricParam {
    pub fn new(raw: DMatrix<f64>) -> Result<SymmetricParam> {
        if raw.nrows() != raw.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric parameter must be square, got {}x{}",
                raw.nrows(),
                raw.ncols()
            )));
        }
        Ok(SymmetricParam { raw })
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.raw
    }

    /// Materializes `(W + Wᵀ)/2`.
    pub fn effective(&self) -> DMatrix<f64> {
        (&self.raw + self.raw.transpose()) * 0.5
    }

    /// `(W + Wᵀ)/2 · v` without materializing the symmetrization.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} against parameter of dimension {}",
                v.len(),
                self.dim()
            )));
        }
        Ok((&self.raw * v + self.raw.tr_mul(v)) * 0.5)
    }
}

/// The bilinear form `xᵀ (W + Wᵀ)/2 y`.
pub fn bilinear(x: &DVector<f64>, w: &SymmetricParam, y: &DVector<f64>) -> Result<f64> {
    if x.len() != w.dim() || y.len() != w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "bilinear form: {} and {} against dimension {}",
            x.len(),
            y.len(),
            w.dim()
        )));
    }
    Ok(x.dot(&w.apply(y)?))
}

/// Default singular value cutoff factor: machine epsilon times the larger
/// matrix dimension (relative to the largest singular value).
pub fn default_pinv_tolerance(rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols) as f64
}

/// Moore-Penrose pseudoinverse via SVD. Singular values at or below
/// `tol * σ_max` are treated as zero; `tol` defaults to
/// `default_pinv_tolerance`.
pub fn pseudoinverse(m: &DMatrix<f64>, tol: Option<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pseudoinverse input".into()));
    }
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    let tol = tol.unwrap_or_else(|| default_pinv_tolerance(m.nrows(), m.ncols()));
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = tol * smax;
    let k = svd.singular_values.len();
    let mut sigma_inv = DMatrix::zeros(k, k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cutoff {
            sigma_inv[(i, i)] = 1.0 / s;
        }
    }
    Ok(v_t.transpose() * sigma_inv * u.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Elementwise optimizer with lazily created per-parameter state, keyed by an
/// opaque id. Parameters never stepped keep their bits, so freezing a vector
/// is just never passing it in.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    slots: HashMap<u64, AdamSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Optimizer {
        Optimizer {
            kind,
            learning_rate,
            slots: HashMap::new(),
        }
    }

    /// One update of a single parameter block. Entries where `frozen` is true
    /// are left untouched, moments included.
    pub fn step(
        &mut self,
        key: u64,
        param: &mut [f64],
        grad: &[f64],
        frozen: Option<&[bool]>,
    ) -> Result<()> {
        if grad.len() != param.len() || frozen.map_or(false, |f| f.len() != param.len()) {
            return Err(Error::DimensionMismatch(format!(
                "optimizer step: parameter of length {} with gradient of length {}",
                param.len(),
                grad.len()
            )));
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..param.len() {
                    if frozen.map_or(false, |f| f[i]) {
                        continue;
                    }
                    param[i] -= lr * grad[i];
                }
            }
            OptimizerKind::Adam => {
                let slot = self.slots.entry(key).or_insert_with(|| AdamSlot {
                    m: vec![0.0; param.len()],
                    v: vec![0.0; param.len()],
                    t: 0,
                });
                if slot.m.len() != param.len() {
                    return Err(Error::DimensionMismatch(
                        "optimizer state does not match parameter length".into(),
                    ));
                }
                slot.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
                for i in 0..param.len() {
                    if frozen.map_or(false, |f| f[i]) {
                        continue;
                    }
                    slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of a scalar function, for gradient checks.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn bilinear_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = rng.gen_range(1..6);
            let w = SymmetricParam::new(random_matrix(&mut rng, d, d)).unwrap();
            let x = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let y = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let eff = w.effective();
            let mut expect = 0.0;
            for i in 0..d {
                for j in 0..d {
                    expect += x[i] * eff[(i, j)] * y[j];
                }
            }
            let got = bilinear(&x, &w, &y).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_rejects_mismatched_dimensions() {
        let w = SymmetricParam::new(DMatrix::zeros(3, 3)).unwrap();
        let x = DVector::zeros(2);
        let y = DVector::zeros(3);
        assert!(bilinear(&x, &w, &y).is_err());
    }

    #[test]
    fn pseudoinverse_satisfies_penrose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(rows, cols) in &[(5, 3), (3, 5), (4, 4), (6, 2)] {
            let a = random_matrix(&mut rng, rows, cols);
            let p = pseudoinverse(&a, None).unwrap();
            let apa = &a * &p * &a;
            let pap = &p * &a * &p;
            let ap = &a * &p;
            let pa = &p * &a;
            assert!((apa - &a).norm() < 1e-8, "A P A = A");
            assert!((pap - &p).norm() < 1e-8, "P A P = P");
            assert!((&ap - ap.transpose()).norm() < 1e-8, "A P symmetric");
            assert!((&pa - pa.transpose()).norm() < 1e-8, "P A symmetric");
        }
    }

    #[test]
    fn pseudoinverse_recovers_planted_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let c = random_matrix(&mut rng, 4 * d, d);
        let target = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let b = &c * &target;
        let recovered = pseudoinverse(&c, None).unwrap() * b;
        assert!((recovered - target).norm() < 1e-6);
    }

    #[test]
    fn pseudoinverse_of_rank_deficient_matrix_is_minimum_norm() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let p = pseudoinverse(&a, None).unwrap();
        let apa = &a * &p * &a;
        assert!((apa - &a).norm() < 1e-10);
        let b = DVector::from_column_slice(&[1.0, 1.0, 0.0]);
        let x = &p * b;
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!(x[1].abs() < 1e-10);
    }

    #[test]
    fn pseudoinverse_rejects_non_finite_input() {
        let a = DMatrix::from_row_slice(1, 2, &[f64::NAN, 1.0]);
        assert!(pseudoinverse(&a, None).is_err());
    }

    #[test]
    fn sgd_step_moves_against_the_gradient() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut p = vec![1.0, 2.0];
        opt.step(0, &mut p, &[1.0, -1.0], None).unwrap();
        assert_eq!(p, vec![0.9, 2.1]);
    }

    #[test]
    fn frozen_entries_keep_their_bits() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.05);
            let mut p: Vec<f64> = vec![0.123456789, -0.987654321];
            let before = p[1].to_bits();
            for _ in 0..5 {
                opt.step(7, &mut p, &[0.3, 0.4], Some(&[false, true])).unwrap();
            }
            assert_eq!(p[1].to_bits(), before);
            assert_ne!(p[0], 0.123456789);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);
        let mut p = vec![3.0, -2.0];
        for _ in 0..400 {
            let grad: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(1, &mut p, &grad, None).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn distinct_keys_have_independent_state() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        opt.step(1, &mut a, &[1.0], None).unwrap();
        opt.step(1, &mut a, &[1.0], None).unwrap();
        opt.step(2, &mut b, &[1.0], None).unwrap();
        let mut fresh = Optimizer::new(OptimizerKind::Adam, 0.1);
        let mut c = vec![1.0];
        fresh.step(9, &mut c, &[1.0], None).unwrap();
        assert_eq!(b, c, "state under a new key starts from scratch");
        assert_ne!(a, b);
    }

    #[test]
    fn central_difference_matches_analytic_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let g = central_difference(f, &[1.5, -2.0], 1e-5);
        assert!((g[0] - (2.0 * 1.5 - 6.0)).abs() < 1e-6);
        assert!((g[1] - 4.5).abs() < 1e-6);
    }
}
