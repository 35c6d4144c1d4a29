//! Fixed-size 3×3 helpers: symmetric eigendecomposition by cyclic Jacobi
//! rotations and an SVD built on top of it.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: &Vec3, c: f64) -> Vec3 {
    [a[0] * c, a[1] * c, a[2] * c]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = sub(a, b);
    dot(&d, &d)
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn from_columns(c: &[Vec3; 3]) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (j, col) in c.iter().enumerate() {
        for i in 0..3 {
            m[i][j] = col[i];
        }
    }
    m
}

/// Eigendecomposition of a symmetric matrix: eigenvalues in descending order
/// and the matching unit eigenvectors as the columns of the returned matrix.
pub fn sym_eig3(a: &Mat3) -> (Vec3, Mat3) {
    let mut m = *a;
    let mut v = IDENTITY3;
    for _sweep in 0..64 {
        let off = m[0][1].abs() + m[0][2].abs() + m[1][2].abs();
        let diag = m[0][0].abs() + m[1][1].abs() + m[2][2].abs();
        if off == 0.0 || off <= f64::EPSILON * 1e-3 * diag {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = m[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // m ← Jᵀ m J with J the (p, q) rotation.
            for k in 0..3 {
                let mkp = m[k][p];
                let mkq = m[k][q];
                m[k][p] = c * mkp - s * mkq;
                m[k][q] = s * mkp + c * mkq;
            }
            for k in 0..3 {
                let mpk = m[p][k];
                let mqk = m[q][k];
                m[p][k] = c * mpk - s * mqk;
                m[q][k] = s * mpk + c * mqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let vals = [m[order[0]][order[0]], m[order[1]][order[1]], m[order[2]][order[2]]];
    let vecs = from_columns(&[
        column(&v, order[0]),
        column(&v, order[1]),
        column(&v, order[2]),
    ]);
    (vals, vecs)
}

/// `m = U · diag(s) · Vᵀ` with `s` descending and nonnegative.
#[derive(Clone, Copy, Debug)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        let mut us = self.u;
        for row in us.iter_mut() {
            for j in 0..3 {
                row[j] *= self.s[j];
            }
        }
        mat_mul(&us, &transpose(&self.v))
    }
}

fn any_orthogonal(a: &Vec3) -> Vec3 {
    // Cross with the axis least aligned with `a`.
    let axis = if a[0].abs() <= a[1].abs() && a[0].abs() <= a[2].abs() {
        [1.0, 0.0, 0.0]
    } else if a[1].abs() <= a[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let c = cross(a, &axis);
    scale(&c, 1.0 / norm(&c))
}

/// SVD of a 3×3 matrix via the symmetric eigenproblem of `mᵀm`.
///
/// Rank-deficient inputs still yield orthonormal `U` and `V`; missing left
/// singular directions are completed by cross products.
pub fn svd3(m: &Mat3) -> Svd3 {
    let ata = mat_mul(&transpose(m), m);
    let (_, v) = sym_eig3(&ata);
    let vc = [column(&v, 0), column(&v, 1), column(&v, 2)];
    let mv = [mat_vec(m, &vc[0]), mat_vec(m, &vc[1]), mat_vec(m, &vc[2])];
    let scale_ref = m.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
    let tiny = scale_ref * 1e-14 + f64::MIN_POSITIVE;

    let n1 = norm(&mv[0]);
    let u1 = if n1 > tiny {
        scale(&mv[0], 1.0 / n1)
    } else {
        [1.0, 0.0, 0.0]
    };
    let r2 = sub(&mv[1], &scale(&u1, dot(&u1, &mv[1])));
    let n2 = norm(&r2);
    let u2 = if n2 > tiny {
        scale(&r2, 1.0 / n2)
    } else {
        any_orthogonal(&u1)
    };
    let mut u3 = cross(&u1, &u2);
    let mut s = [n1, dot(&u2, &mv[1]), dot(&u3, &mv[2])];
    if s[2] < 0.0 {
        s[2] = -s[2];
        u3 = scale(&u3, -1.0);
    }
    let mut uc = [u1, u2, u3];
    let mut vc = vc;
    // Recomputed singular values can swap order when nearly equal.
    for i in 0..3 {
        for j in 0..2 - i {
            if s[j] < s[j + 1] {
                s.swap(j, j + 1);
                uc.swap(j, j + 1);
                vc.swap(j, j + 1);
            }
        }
    }
    Svd3 {
        u: from_columns(&uc),
        s,
        v: from_columns(&vc),
    }
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let r = mat_mul(&transpose(a), b);
    let c = (r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0;
    let s = norm(&[r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]]) / 2.0;
    s.atan2(c)
}

/// Rotation of `angle` radians about the unit `axis` (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = scale(axis, 1.0 / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_diff(a: &Mat3, b: &Mat3) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn orthonormal_err(m: &Mat3) -> f64 {
        max_diff(&mat_mul(&transpose(m), m), &IDENTITY3)
    }

    #[test]
    fn identity_decomposes_trivially() {
        let d = svd3(&IDENTITY3);
        assert_eq!(d.s, [1.0, 1.0, 1.0]);
        assert!(max_diff(&d.u, &IDENTITY3) < 1e-15);
        assert!(max_diff(&d.v, &IDENTITY3) < 1e-15);
    }

    #[test]
    fn diagonal_singular_values() {
        let m = [[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]];
        let d = svd3(&m);
        assert!((d.s[0] - 3.0).abs() < 1e-12);
        assert!((d.s[1] - 2.0).abs() < 1e-12);
        assert!((d.s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_matrices_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut m = [[0.0; 3]; 3];
            for v in m.iter_mut().flatten() {
                *v = rng.random_range(-5.0..5.0);
            }
            let d = svd3(&m);
            assert!(max_diff(&d.reconstruct(), &m) < 1e-9);
            assert!(orthonormal_err(&d.u) < 1e-9);
            assert!(orthonormal_err(&d.v) < 1e-9);
            assert!(d.s[0] >= d.s[1] && d.s[1] >= d.s[2] && d.s[2] >= 0.0);
            let duv = det(&mat_mul(&d.u, &transpose(&d.v)));
            assert!((duv.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_inputs_stay_orthonormal() {
        let rank1 = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.0, -2.0, -3.0]];
        let zero = [[0.0; 3]; 3];
        let rank2 = [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 2.0]];
        for m in [rank1, zero, rank2] {
            let d = svd3(&m);
            assert!(max_diff(&d.reconstruct(), &m) < 1e-9, "{m:?}");
            assert!(orthonormal_err(&d.u) < 1e-9);
            assert!(orthonormal_err(&d.v) < 1e-9);
        }
    }

    #[test]
    fn sym_eig_recovers_spectrum() {
        let r = axis_angle(&[1.0, 2.0, -0.5], 0.7);
        let d = [[5.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, -1.0]];
        let a = mat_mul(&mat_mul(&r, &d), &transpose(&r));
        let (vals, vecs) = sym_eig3(&a);
        assert!((vals[0] - 5.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        assert!((vals[2] + 1.0).abs() < 1e-12);
        assert!(orthonormal_err(&vecs) < 1e-12);
    }

    #[test]
    fn rotation_angle_of_quarter_turn() {
        let r = axis_angle(&[0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let a = rotation_angle(&IDENTITY3, &r);
        assert!((a.to_degrees() - 90.0).abs() < 1e-9);
    }
}
