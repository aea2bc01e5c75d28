//! Elasticity tensors in engineering (Voigt) notation and their rotation.
//!
//! Component order is `(11, 22, 12)` in 2D and `(11, 22, 33, 23, 31, 12)` in
//! 3D, with engineering shear strains. A rotation `R` carries the material
//! axes as its rows; a tensor given in the material frame is brought to the
//! global frame by `D' = Rbar D Rbar^T`.

use nalgebra::{DMatrix, Matrix3};

use crate::error::{Error, Result};

/// Symmetric elasticity matrix, 3x3 in 2D and 6x6 in 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct VoigtTensor(DMatrix<f64>);

impl VoigtTensor {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let m = entries.nrows();
        if entries.ncols() != m || (m != 3 && m != 6) {
            return Err(Error::invalid(format!(
                "Voigt tensor must be 3x3 or 6x6, got {}x{}",
                m,
                entries.ncols()
            )));
        }
        let scale = entries.amax().max(f64::MIN_POSITIVE);
        if (&entries - entries.transpose()).amax() > 1e-9 * scale {
            return Err(Error::invalid("Voigt tensor is not symmetric"));
        }
        Ok(Self(entries))
    }

    pub fn from_planar(m: &Matrix3<f64>) -> Self {
        Self(DMatrix::from_iterator(3, 3, m.iter().copied()))
    }

    /// Plane-stress isotropic tensor.
    pub fn isotropic_plane_stress(e: f64, nu: f64) -> Self {
        Self::from_planar(&plane_stress(e, nu))
    }

    pub fn isotropic_3d(e: f64, nu: f64) -> Self {
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        let mut d = DMatrix::zeros(6, 6);
        for i in 0..3 {
            for j in 0..3 {
                d[(i, j)] = lambda;
            }
            d[(i, i)] += 2.0 * mu;
            d[(i + 3, i + 3)] = mu;
        }
        Self(d)
    }

    pub fn dim(&self) -> usize {
        if self.0.nrows() == 3 {
            2
        } else {
            3
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_planar(&self) -> Option<Matrix3<f64>> {
        (self.0.nrows() == 3).then(|| Matrix3::from_iterator(self.0.iter().copied()))
    }

    pub fn is_positive_definite(&self) -> bool {
        self.0.clone().cholesky().is_some()
    }
}

pub fn plane_stress(e: f64, nu: f64) -> Matrix3<f64> {
    let c = e / (1.0 - nu * nu);
    Matrix3::new(c, c * nu, 0.0, c * nu, c, 0.0, 0.0, 0.0, c * (1.0 - nu) / 2.0)
}

/// Tensor rotation operator built from a rotation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VoigtRotation(DMatrix<f64>);

impl VoigtRotation {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn to_planar(&self) -> Option<Matrix3<f64>> {
        (self.0.nrows() == 3).then(|| Matrix3::from_iterator(self.0.iter().copied()))
    }
}

/// Builds `Rbar` from blocks `A, B, C, D` of the 6x6 operator. In 2D the 3D
/// operator of the in-plane rotation is restricted to rows and columns
/// `{11, 22, 12}`.
pub fn rotation_to_voigt(r: &DMatrix<f64>) -> Result<VoigtRotation> {
    let k = r.nrows();
    if r.ncols() != k || (k != 2 && k != 3) {
        return Err(Error::invalid(format!("rotation must be 2x2 or 3x3, got {}x{}", k, r.ncols())));
    }
    let eye = DMatrix::<f64>::identity(k, k);
    if (r.transpose() * r - eye).amax() > 1e-8 || r.determinant() < 0.0 {
        return Err(Error::invalid("matrix is not a proper rotation"));
    }
    if k == 3 {
        return Ok(VoigtRotation(voigt_rotation_3d(r)));
    }
    let mut r3 = DMatrix::<f64>::identity(3, 3);
    r3.view_mut((0, 0), (2, 2)).copy_from(r);
    let full = voigt_rotation_3d(&r3);
    let keep = [0usize, 1, 5];
    Ok(VoigtRotation(DMatrix::from_fn(3, 3, |i, j| full[(keep[i], keep[j])])))
}

fn voigt_rotation_3d(r: &DMatrix<f64>) -> DMatrix<f64> {
    // l_i, m_i, n_i are the rows of R
    let l = |i: usize| r[(0, i)];
    let m = |i: usize| r[(1, i)];
    let n = |i: usize| r[(2, i)];
    let mut out = DMatrix::zeros(6, 6);
    for i in 0..3 {
        // A and B: normal rows
        out[(i, 0)] = l(i) * l(i);
        out[(i, 1)] = m(i) * m(i);
        out[(i, 2)] = n(i) * n(i);
        out[(i, 3)] = 2.0 * m(i) * n(i);
        out[(i, 4)] = 2.0 * n(i) * l(i);
        out[(i, 5)] = 2.0 * l(i) * m(i);
        // C and D: shear rows pair (i+1, i+2)
        let a = (i + 1) % 3;
        let b = (i + 2) % 3;
        out[(i + 3, 0)] = l(a) * l(b);
        out[(i + 3, 1)] = m(a) * m(b);
        out[(i + 3, 2)] = n(a) * n(b);
        out[(i + 3, 3)] = m(a) * n(b) + m(b) * n(a);
        out[(i + 3, 4)] = n(a) * l(b) + n(b) * l(a);
        out[(i + 3, 5)] = m(a) * l(b) + m(b) * l(a);
    }
    out
}

/// `D' = Rbar D Rbar^T`.
pub fn rotate_tensor(d: &VoigtTensor, r: &DMatrix<f64>) -> Result<VoigtTensor> {
    let rbar = rotation_to_voigt(r)?;
    if rbar.0.nrows() != d.0.nrows() {
        return Err(Error::invalid("rotation and tensor dimensions differ"));
    }
    let out = &rbar.0 * &d.0 * rbar.0.transpose();
    Ok(VoigtTensor(symmetrize(out)))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Planar `Rbar` for a 2x2 rotation; no validation, used in element loops.
pub fn planar_rotation_operator(r: &nalgebra::Matrix2<f64>) -> Matrix3<f64> {
    let (l1, l2) = (r[(0, 0)], r[(0, 1)]);
    let (m1, m2) = (r[(1, 0)], r[(1, 1)]);
    Matrix3::new(
        l1 * l1,
        m1 * m1,
        2.0 * l1 * m1,
        l2 * l2,
        m2 * m2,
        2.0 * l2 * m2,
        l1 * l2,
        m1 * m2,
        m1 * l2 + m2 * l1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, Rotation3, Vector3};

    fn rot2(theta: f64) -> DMatrix<f64> {
        let (s, c) = theta.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, s, -s, c])
    }

    #[test]
    fn identity_maps_to_identity() {
        for k in [2, 3] {
            let rb = rotation_to_voigt(&DMatrix::identity(k, k)).unwrap();
            let m = if k == 2 { 3 } else { 6 };
            assert_relative_eq!(rb.matrix(), &DMatrix::identity(m, m), epsilon = 1e-15);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        // l = (0, 1, 0), m = (-1, 0, 0), n = (0, 0, 1)
        let r = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let rb = rotation_to_voigt(&r).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(6, 6, &[
            0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, -1.0,
        ]);
        assert_relative_eq!(rb.matrix(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn rejects_reflections_and_non_orthonormal() {
        let refl = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(rotation_to_voigt(&refl).is_err());
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(rotation_to_voigt(&skew).is_err());
    }

    #[test]
    fn planar_fast_path_matches_restriction() {
        for theta in [0.0, 0.3, -1.2, 2.9] {
            let r = rot2(theta);
            let slow = rotation_to_voigt(&r).unwrap().to_planar().unwrap();
            let fast = planar_rotation_operator(&Matrix2::from_iterator(r.iter().copied()));
            assert_relative_eq!(slow, fast, epsilon = 1e-15);
        }
    }

    #[test]
    fn isotropic_is_rotation_invariant() {
        let d = VoigtTensor::isotropic_plane_stress(2.0, 0.3);
        for theta in [0.1, 0.7, 1.9] {
            let out = rotate_tensor(&d, &rot2(theta)).unwrap();
            assert_relative_eq!(out.matrix(), d.matrix(), epsilon = 1e-10);
        }
        let d3 = VoigtTensor::isotropic_3d(1.0, 0.25);
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.8);
        let r = DMatrix::from_iterator(3, 3, r.matrix().iter().copied());
        assert_relative_eq!(rotate_tensor(&d3, &r).unwrap().matrix(), d3.matrix(), epsilon = 1e-10);
    }

    #[test]
    fn orthotropic_quarter_turn_swaps_axes() {
        let d = VoigtTensor::new(DMatrix::from_row_slice(3, 3, &[5.0, 0.4, 0.0, 0.4, 1.0, 0.0, 0.0, 0.0, 0.2])).unwrap();
        let out = rotate_tensor(&d, &rot2(std::f64::consts::FRAC_PI_2)).unwrap();
        assert_relative_eq!(out.matrix()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.matrix()[(1, 1)], 5.0, epsilon = 1e-12);
        assert_relative_eq!(out.matrix()[(0, 1)], 0.4, epsilon = 1e-12);
        assert_relative_eq!(out.matrix()[(2, 2)], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn rotating_by_identity_is_noop() {
        let d = VoigtTensor::new(DMatrix::from_row_slice(3, 3, &[5.0, 0.4, 0.1, 0.4, 1.0, 0.2, 0.1, 0.2, 0.3])).unwrap();
        assert_eq!(rotate_tensor(&d, &DMatrix::identity(2, 2)).unwrap().matrix(), d.matrix());
    }

    #[test]
    fn material_axis_carries_the_stiffness() {
        // stiff material axis 1 rotated to 45 degrees: uniaxial strain along
        // that direction must see the full stiffness
        let d = VoigtTensor::new(DMatrix::from_row_slice(3, 3, &[5.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.1])).unwrap();
        let theta: f64 = 0.6;
        let out = rotate_tensor(&d, &rot2(theta)).unwrap();
        let (s, c) = theta.sin_cos();
        let strain = nalgebra::DVector::from_vec(vec![c * c, s * s, 2.0 * s * c]);
        let energy = (strain.transpose() * out.matrix() * &strain)[(0, 0)];
        assert_relative_eq!(energy, 5.0, epsilon = 1e-12);
    }
}
