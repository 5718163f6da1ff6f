//! Dense symmetric spectral analysis of feature correlations.
//!
//! Everything here is a pure function of its inputs. Matrices are small
//! (k up to a few thousand) and dense, so the eigensolver is nalgebra's
//! symmetric QR iteration; this module only adds the ordering, sign and
//! clamping conventions on top of it.

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{RdmError, Result};

/// Eigenvalues in `(-CLAMP_TOL, 0)` are round-off and clamped to zero.
pub const CLAMP_TOL: f64 = 1e-10;

/// Eigenvalues closer than this are treated as a tie when ordering eigenpairs.
pub const TIE_TOL: f64 = 1e-9;

/// Default share of the target trace covered by the alignment directions.
pub const DEFAULT_COVERAGE: f64 = 0.9999;

/// A batch of feature vectors, one sample per row (n × k).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    data: DMatrix<f64>,
}

impl FeatureBatch {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(RdmError::invalid(format!(
                "feature batch must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RdmError::invalid("feature batch has non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(RdmError::invalid("ragged rows in feature batch"));
        }
        Self::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }
}

/// Non-negative eigenvalues in non-increasing order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    /// Sorts `values` descending and clamps round-off negatives to zero.
    /// Fails when any value is below `-CLAMP_TOL` or not finite.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RdmError::invalid("spectrum must be non-empty"));
        }
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(RdmError::invalid("spectrum has non-finite values"));
            }
            if *v < -CLAMP_TOL {
                return Err(RdmError::invalid(format!(
                    "eigenvalue {v:e} is negative beyond clamp tolerance"
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }

    pub fn top(&self, r: usize) -> &[f64] {
        &self.values[..r.min(self.values.len())]
    }

    /// `index,eigenvalue` rows, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{}", fmt_f64(*v));
        }
        out
    }
}

/// Orthonormal eigenvectors stored column-wise, ordered to match a [`Spectrum`].
#[derive(Clone, Debug, PartialEq)]
pub struct EigenBasis {
    vectors: DMatrix<f64>,
}

impl EigenBasis {
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    /// `max |VᵀV - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.vectors.ncols();
        let gram = self.vectors.transpose() * &self.vectors;
        (gram - DMatrix::identity(k, k)).amax()
    }

    /// `V diag(values) Vᵀ`.
    pub fn compose(&self, values: &[f64]) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * values[j]
        });
        scaled * self.vectors.transpose()
    }
}

/// A symmetric k × k second-moment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationEstimate {
    matrix: DMatrix<f64>,
    sample_count: usize,
}

impl CorrelationEstimate {
    /// Symmetrizes `matrix`. `sample_count == 0` marks an exact (analytic) value.
    pub fn new(matrix: DMatrix<f64>, sample_count: usize) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(RdmError::invalid(format!(
                "correlation must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(RdmError::invalid("correlation has non-finite entries"));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        Ok(Self {
            matrix: sym,
            sample_count,
        })
    }

    pub fn exact(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix, 0)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn is_exact(&self) -> bool {
        self.sample_count == 0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            matrix: &self.matrix * c,
            sample_count: self.sample_count,
        }
    }
}

/// `(1/n) Σ_x f(x) f(x)ᵀ`.
pub fn correlation(batch: &FeatureBatch) -> CorrelationEstimate {
    let n = batch.rows();
    let m = batch.data().transpose() * batch.data() / n as f64;
    CorrelationEstimate::new(m, n).expect("finite batch gives finite correlation")
}

/// Symmetrized positive-pair correlation `(1/2n) Σ_i (a_i b_iᵀ + b_i a_iᵀ)`.
pub fn cross_correlation(a: &FeatureBatch, b: &FeatureBatch) -> Result<CorrelationEstimate> {
    if a.shape() != b.shape() {
        return Err(RdmError::invalid(format!(
            "pair batches differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.rows();
    let m = a.data().transpose() * b.data() / n as f64;
    CorrelationEstimate::new(m, n)
}

/// Eigenvalues (possibly negative) and basis with the deterministic
/// ordering and sign conventions. Used directly for indefinite matrices.
pub fn eigh_signed(c: &CorrelationEstimate) -> Result<(Vec<f64>, EigenBasis)> {
    let m = c.matrix();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(RdmError::invalid("eigh input has non-finite entries"));
    }
    let k = m.nrows();
    let eig = SymmetricEigen::new(m.clone());

    let mut pairs: Vec<(f64, DVector<f64>)> = (0..k)
        .map(|j| {
            let mut v = eig.eigenvectors.column(j).into_owned();
            fix_sign(&mut v);
            (eig.eigenvalues[j], v)
        })
        .collect();

    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Within runs of tied eigenvalues, order by the sign-fixed eigenvector.
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < k && (pairs[end - 1].0 - pairs[end].0).abs() < TIE_TOL {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|a, b| lex_desc(&a.1, &b.1));
        }
        start = end;
    }

    let values = pairs.iter().map(|p| p.0).collect();
    let vectors = DMatrix::from_fn(k, k, |i, j| pairs[j].1[i]);
    Ok((values, EigenBasis { vectors }))
}

/// Spectral decomposition `C = V Λ Vᵀ` of a positive semidefinite correlation.
pub fn eigh(c: &CorrelationEstimate) -> Result<(Spectrum, EigenBasis)> {
    let (values, basis) = eigh_signed(c)?;
    Ok((Spectrum::new(values)?, basis))
}

pub fn spectrum(c: &CorrelationEstimate) -> Result<Spectrum> {
    Ok(eigh(c)?.0)
}

fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

fn lex_desc(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match y.total_cmp(x) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Shannon entropy (natural log) of a non-negative weight vector after
/// normalization, with `0 ln 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    -weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let q = w / total;
            q * q.ln()
        })
        .sum::<f64>()
}

/// `exp(H(λ / Σλ))`, in `[1, k]`.
pub fn effective_rank(s: &Spectrum) -> Result<f64> {
    if s.sum() <= 0.0 {
        return Err(RdmError::DegenerateSpectrum(
            "effective rank of an all-zero spectrum".into(),
        ));
    }
    Ok(entropy(s.values()).exp())
}

pub fn effective_rank_of(c: &CorrelationEstimate) -> Result<f64> {
    effective_rank(&spectrum(c)?)
}

/// Mean cosine between the top target eigenvectors `u_i` and `C_p u_i`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Alignment {
    pub value: f64,
    /// Number of target eigenvectors averaged over.
    pub directions: usize,
    /// Indices `i` where `C_p u_i` vanished; these contribute zero.
    pub degenerate: Vec<usize>,
}

pub fn eigenspace_alignment(
    c_p: &CorrelationEstimate,
    c_z: &CorrelationEstimate,
    coverage: f64,
) -> Result<Alignment> {
    if c_p.dim() != c_z.dim() {
        return Err(RdmError::invalid(format!(
            "alignment of {}x{} against {}x{}",
            c_p.dim(),
            c_p.dim(),
            c_z.dim(),
            c_z.dim()
        )));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(RdmError::invalid(format!(
            "coverage must be in (0, 1], got {coverage}"
        )));
    }
    let (spec_z, basis) = eigh(c_z)?;
    let total = spec_z.sum();
    if total <= 0.0 {
        return Err(RdmError::DegenerateSpectrum(
            "target correlation has zero trace".into(),
        ));
    }

    let mut m = spec_z.len();
    let mut acc = 0.0;
    for (i, v) in spec_z.values().iter().enumerate() {
        acc += v;
        if acc >= coverage * total {
            m = i + 1;
            break;
        }
    }

    let scale = c_p.matrix().amax();
    let mut degenerate = Vec::new();
    let mut sum = 0.0;
    for i in 0..m {
        let u = basis.column(i);
        let cu = c_p.matrix() * &u;
        let norm = cu.norm();
        if norm <= f64::EPSILON * scale.max(f64::MIN_POSITIVE) || norm == 0.0 {
            degenerate.push(i);
            continue;
        }
        sum += u.dot(&cu) / (u.norm() * norm);
    }
    Ok(Alignment {
        value: sum / m as f64,
        directions: m,
        degenerate,
    })
}

/// Online filter values `g_i = sqrt(λᵖ_i / λᶻ_i)` paired by rank, sorted by λᶻ ascending.
/// Indices with `λᶻ_i <= CLAMP_TOL` are dropped.
pub fn empirical_filter(spec_p: &Spectrum, spec_z: &Spectrum) -> Result<Vec<(f64, f64)>> {
    if spec_p.len() != spec_z.len() {
        return Err(RdmError::invalid(format!(
            "spectra differ in length: {} vs {}",
            spec_p.len(),
            spec_z.len()
        )));
    }
    let mut out: Vec<(f64, f64)> = spec_p
        .values()
        .iter()
        .zip(spec_z.values())
        .filter(|(_, z)| **z > CLAMP_TOL)
        .map(|(p, z)| (*z, (p / z).sqrt()))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Floats are written with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn correlation_examples() {
        let c = correlation(&FeatureBatch::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert_eq!(c.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));

        let c = correlation(&FeatureBatch::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        assert_eq!(c.matrix(), &(DMatrix::identity(2, 2) * 0.5));

        let c = correlation(&FeatureBatch::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap());
        assert_eq!(c.matrix(), &DMatrix::identity(2, 2));
        assert_eq!(c.sample_count(), 2);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(matches!(
            FeatureBatch::new(DMatrix::zeros(0, 3)),
            Err(RdmError::InvalidInput(_))
        ));
    }

    #[test]
    fn cross_correlation_examples() {
        let a = FeatureBatch::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0]]).unwrap();
        let same = cross_correlation(&a, &a).unwrap();
        assert!((same.matrix() - correlation(&a).matrix()).amax() < 1e-15);

        let a1 = FeatureBatch::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b1 = FeatureBatch::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let c = cross_correlation(&a1, &b1).unwrap();
        assert_eq!(c.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));

        let neg = FeatureBatch::new(-a.data().clone()).unwrap();
        let c = cross_correlation(&a, &neg).unwrap();
        assert!((c.matrix() + correlation(&a).matrix()).amax() < 1e-15);

        let wrong = FeatureBatch::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(cross_correlation(&a1, &wrong).is_err());
    }

    #[test]
    fn eigh_diagonal_input() {
        let c = CorrelationEstimate::exact(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, 3.0, 2.0,
        ])))
        .unwrap();
        let (s, v) = eigh(&c).unwrap();
        assert_eq!(s.values(), &[3.0, 2.0, 1.0]);
        let expected = DMatrix::from_row_slice(3, 3, &[0., 0., 1., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(v.vectors(), &expected);
    }

    #[test]
    fn eigh_identity_is_ordered_canonically() {
        let c = CorrelationEstimate::exact(DMatrix::identity(4, 4)).unwrap();
        let (s, v) = eigh(&c).unwrap();
        assert_eq!(s.values(), &[1.0; 4]);
        assert!((v.vectors() - DMatrix::<f64>::identity(4, 4)).amax() < 1e-15);
    }

    #[test]
    fn eigh_sign_convention() {
        let c = CorrelationEstimate::exact(DMatrix::from_row_slice(
            2,
            2,
            &[2.0, -1.0, -1.0, 2.0],
        ))
        .unwrap();
        let (s, v) = eigh(&c).unwrap();
        assert!(close(s.values()[0], 3.0, 1e-12));
        for j in 0..2 {
            let col = v.column(j);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
        // equal magnitudes: the lowest index wins
        assert!(v.column(0)[0] > 0.0);
        assert!(v.column(1)[0] > 0.0);
    }

    #[test]
    fn eigh_rejects_non_finite() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(CorrelationEstimate::exact(m).is_err());
    }

    #[test]
    fn spectrum_clamps_round_off() {
        let s = Spectrum::new(vec![1.0, -1e-12, 0.5]).unwrap();
        assert_eq!(s.values(), &[1.0, 0.5, 0.0]);
        assert!(Spectrum::new(vec![1.0, -1e-6]).is_err());
    }

    #[test]
    fn effective_rank_examples() {
        let s = Spectrum::new(vec![1.0; 7]).unwrap();
        assert!(close(effective_rank(&s).unwrap(), 7.0, 1e-12));
        let s = Spectrum::new(vec![5.0, 0.0, 0.0]).unwrap();
        assert_eq!(effective_rank(&s).unwrap(), 1.0);
        let s = Spectrum::new(vec![2.0, 1.0, 1.0]).unwrap();
        assert!(close(effective_rank(&s).unwrap(), 2f64.powf(1.5), 1e-12));
        let s = Spectrum::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            effective_rank(&s),
            Err(RdmError::DegenerateSpectrum(_))
        ));
    }

    #[test]
    fn alignment_examples() {
        let cz = CorrelationEstimate::exact(DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.3, 0.3, 0.8],
        ))
        .unwrap();
        let a = eigenspace_alignment(&cz, &cz, DEFAULT_COVERAGE).unwrap();
        assert!(close(a.value, 1.0, 1e-12));
        let a = eigenspace_alignment(&cz.scaled(2.0), &cz, DEFAULT_COVERAGE).unwrap();
        assert!(close(a.value, 1.0, 1e-12));

        // C_z = diag(1, 0.5); C_p = R diag(1, 0.5) Rᵀ with a 45° rotation.
        let cz = CorrelationEstimate::exact(DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.0, 0.0, 0.5],
        ))
        .unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = DMatrix::from_row_slice(2, 2, &[h, -h, h, h]);
        let cp = CorrelationEstimate::exact(&r * cz.matrix() * r.transpose()).unwrap();
        let a = eigenspace_alignment(&cp, &cz, DEFAULT_COVERAGE).unwrap();
        assert_eq!(a.directions, 2);
        assert!(close(a.value, 0.75 / 0.625f64.sqrt(), 1e-12));
    }

    #[test]
    fn alignment_degenerate_direction_contributes_zero() {
        let cz = CorrelationEstimate::exact(DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.0, 0.0, 1.0],
        ))
        .unwrap();
        let cp = CorrelationEstimate::exact(DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.0, 0.0, 0.0],
        ))
        .unwrap();
        let a = eigenspace_alignment(&cp, &cz, 1.0).unwrap();
        assert_eq!(a.degenerate, vec![1]);
        assert!(close(a.value, 0.5, 1e-15));
    }

    #[test]
    fn empirical_filter_examples() {
        let z = Spectrum::new(vec![4.0, 1.0]).unwrap();
        let g = empirical_filter(&z, &z).unwrap();
        assert!(g.iter().all(|(_, v)| *v == 1.0));

        let p = Spectrum::new(vec![16.0, 1.0]).unwrap();
        let g = empirical_filter(&p, &z).unwrap();
        assert_eq!(g, vec![(1.0, 1.0), (4.0, 2.0)]);

        // cubic online spectrum: g(λ) = λ
        let p = Spectrum::new(vec![64.0, 1.0]).unwrap();
        let g = empirical_filter(&p, &z).unwrap();
        assert_eq!(g, vec![(1.0, 1.0), (4.0, 4.0)]);

        let p = z.scaled(0.25).unwrap();
        let g = empirical_filter(&p, &z).unwrap();
        assert!(g.iter().all(|(_, v)| close(*v, 0.5, 1e-15)));

        let z0 = Spectrum::new(vec![4.0, 0.0]).unwrap();
        assert_eq!(empirical_filter(&z0, &z0).unwrap().len(), 1);
    }

    #[test]
    fn spectrum_csv() {
        let s = Spectrum::new(vec![2.0, 0.5]).unwrap();
        assert_eq!(
            s.to_csv(),
            "index,eigenvalue\n0,2.0000000000000000e0\n1,5.0000000000000000e-1\n"
        );
    }
}
