//! Physical-space geometry: points, 3x3 matrices, affine transforms.
//!
//! All coordinates are in millimeters. Transforms act on physical points,
//! never on voxel indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn mat_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat_inverse(m: &Mat3) -> Result<Mat3> {
    let det = mat_det(m);
    if det.abs() < 1e-12 {
        return Err(Error::SingularTransform(det));
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, d) = ((j + 1) % 3, (j + 2) % 3);
            // cofactor transpose
            out[j][i] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv_det;
        }
    }
    Ok(out)
}

/// Rotation matrix from a rotation vector (axis * angle, Rodrigues formula).
pub fn rotation_from_vector(r: Point3) -> Mat3 {
    let angle = norm(r);
    if angle < 1e-12 {
        return IDENTITY3;
    }
    let axis = scale(r, 1.0 / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rotation angle (radians) of a rotation matrix.
pub fn rotation_angle(m: &Mat3) -> f64 {
    let trace = m[0][0] + m[1][1] + m[2][2];
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Affine map on physical points: `p -> matrix * p + translation`.
///
/// Registration transforms map points from the fixed image's space into the
/// moving image's space, matching the pull-back convention of
/// [`crate::volume::resample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: Mat3,
    pub translation: Point3,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: Point3) -> Self {
        Self {
            matrix: IDENTITY3,
            translation: t,
        }
    }

    /// Rigid transform rotating about `center` then translating.
    pub fn rigid_about(rotation: Mat3, center: Point3, translation: Point3) -> Self {
        // p -> R*(p - c) + c + t
        let t = add(sub(center, mat_vec(&rotation, center)), translation);
        Self {
            matrix: rotation,
            translation: t,
        }
    }

    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        add(mat_vec(&self.matrix, p), self.translation)
    }

    pub fn det(&self) -> f64 {
        mat_det(&self.matrix)
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = mat_inverse(&self.matrix)?;
        Ok(AffineTransform {
            matrix: inv,
            translation: scale(mat_vec(&inv, self.translation), -1.0),
        })
    }

    /// Composition `self(other(p))`.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: mat_mul(&self.matrix, &other.matrix),
            translation: add(mat_vec(&self.matrix, other.translation), self.translation),
        }
    }

    /// Deviation of the linear part from a proper rotation, `max|R R^T - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let rrt = mat_mul(&self.matrix, &mat_transpose(&self.matrix));
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                err = err.max((rrt[i][j] - expect).abs());
            }
        }
        err
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trip() {
        let t = AffineTransform {
            matrix: [[1.2, 0.1, 0.0], [-0.2, 0.9, 0.05], [0.0, 0.1, 1.1]],
            translation: [3.0, -2.0, 7.5],
        };
        let inv = t.inverse().unwrap();
        let p = [1.0, 2.0, 3.0];
        let q = inv.apply(t.apply(p));
        for d in 0..3 {
            assert!((q[d] - p[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let t = AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        };
        assert!(matches!(t.inverse(), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn rodrigues_angle_round_trip() {
        let r = rotation_from_vector([0.0, 0.0, 15f64.to_radians()]);
        assert!((rotation_angle(&r) - 15f64.to_radians()).abs() < 1e-12);
        let p = r[0][0] * r[0][0] + r[1][0] * r[1][0] + r[2][0] * r[2][0];
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compose_matches_sequential_apply() {
        let a = AffineTransform {
            matrix: rotation_from_vector([0.1, 0.2, 0.3]),
            translation: [1.0, 2.0, 3.0],
        };
        let b = AffineTransform {
            matrix: rotation_from_vector([-0.2, 0.1, 0.05]),
            translation: [-4.0, 0.5, 2.0],
        };
        let c = a.compose(&b);
        let p = [0.3, -1.2, 5.0];
        let expect = a.apply(b.apply(p));
        let got = c.apply(p);
        for d in 0..3 {
            assert!((got[d] - expect[d]).abs() < 1e-12);
        }
    }
}
