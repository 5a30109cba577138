use rand::Rng;
use rand_distr::StandardNormal;

use crate::moldata::Vec3;

/// A proper rotation, stored as an orthonormal 3×3 matrix with det +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    matrix: [[f64; 3]; 3],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    /// Trusts the caller that `matrix` is a rotation; see [`Rotation::is_valid`].
    pub fn from_matrix(matrix: [[f64; 3]; 3]) -> Self {
        Self { matrix }
    }

    /// Rotation for the unit quaternion `(w, x, y, z)`; the input is normalized.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        Self {
            matrix: [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ],
        }
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { matrix: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Haar-uniform sample: a normalized 4D standard Gaussian is a uniform
    /// unit quaternion.
    pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            if q.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
                return Self::from_quaternion(q);
            }
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    /// Row-major flattening, the 9-value encoding fed to the transformation network.
    pub fn flat(&self) -> [f64; 9] {
        let m = &self.matrix;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        let m = &self.matrix;
        std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }

    /// `self · other`: apply `other` first.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (a, b) = (&self.matrix, &other.matrix);
        Rotation { matrix: std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum())) }
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.matrix;
        Rotation { matrix: std::array::from_fn(|i| std::array::from_fn(|j| m[j][i])) }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entry of `|RᵀR - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let p = self.transpose().compose(self);
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.matrix[i][j] - target).abs());
            }
        }
        worst
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthogonality_error() <= tol && (self.determinant() - 1.0).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quarter_turn_about_z() {
        let v = Rotation::about_z(std::f64::consts::FRAC_PI_2).apply(&[1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2] == 0.0);
    }

    #[test]
    fn identity_leaves_vectors_unchanged() {
        let v = [0.3, -1.25, 7.0];
        assert_eq!(Rotation::IDENTITY.apply(&v), v);
    }

    #[test]
    fn samples_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(Rotation::sample_uniform(&mut rng).is_valid(1e-10));
        }
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (g1, g2) = (Rotation::sample_uniform(&mut rng), Rotation::sample_uniform(&mut rng));
            let v = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let seq = g2.apply(&g1.apply(&v));
            let once = g2.compose(&g1).apply(&v);
            for k in 0..3 {
                assert!((seq[k] - once[k]).abs() < 1e-12);
            }
        }
    }
}
