//! Planar homographies in double precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("homography is singular (|det| = {0:e})")]
    Singular(f64),
    #[error("point ({x}, {y}) maps to infinity")]
    AtInfinity { x: f64, y: f64 },
}

/// 3×3 projective transform acting on `(x, y, 1)` column vectors, `x` being the
/// column coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

const DET_EPS: f64 = 1e-12;

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    pub fn from_row_major(v: [f64; 9]) -> Self {
        Homography([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_invertible(&self) -> bool {
        self.determinant().abs() > DET_EPS
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let det = self.determinant();
        if det.abs() <= DET_EPS {
            return Err(GeometryError::Singular(det));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = adj[r][c] / det;
            }
        }
        Ok(Homography(inv))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = (0..3).map(|k| self.0[r][k] * other.0[k][c]).sum();
            }
        }
        Homography(out)
    }

    pub fn project(&self, x: f64, y: f64) -> Result<(f64, f64), GeometryError> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < DET_EPS {
            return Err(GeometryError::AtInfinity { x, y });
        }
        let u = m[0][0] * x + m[0][1] * y + m[0][2];
        let v = m[1][0] * x + m[1][1] * y + m[1][2];
        Ok((u / w, v / w))
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Projects a point with `h`, the free-function form used by the losses.
pub fn project(point: (f64, f64), h: &Homography) -> Result<(f64, f64), GeometryError> {
    h.project(point.0, point.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_translation() {
        assert_eq!(project((3.5, -2.0), &Homography::IDENTITY).unwrap(), (3.5, -2.0));
        assert_eq!(
            project((3.5, -2.0), &Homography::translation(5.0, 1.0)).unwrap(),
            (8.5, -1.0)
        );
    }

    #[test]
    fn general_projection_by_hand() {
        let h = Homography::from_row_major([1.1, 0.2, 3.0, -0.1, 0.9, 4.0, 0.001, 0.002, 1.0]);
        // (x, y) = (10, 20):
        //   u = 11 + 4 + 3 = 18, v = -1 + 18 + 4 = 21, w = 0.01 + 0.04 + 1 = 1.05
        let (x, y) = h.project(10.0, 20.0).unwrap();
        assert!((x - 18.0 / 1.05).abs() < 1e-12);
        assert!((y - 21.0 / 1.05).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        let h = Homography::from_row_major([1.1, 0.2, 3.0, -0.1, 0.9, 4.0, 0.001, 0.002, 1.0]);
        let inv = h.inverse().unwrap();
        let (x, y) = h.project(42.0, 17.0).unwrap();
        let (bx, by) = inv.project(x, y).unwrap();
        assert!((bx - 42.0).abs() < 1e-9 && (by - 17.0).abs() < 1e-9);
        let id = h.compose(&inv);
        for r in 0..3 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((id.0[r][c] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_cases() {
        let singular = Homography::from_row_major([1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0]);
        assert!(matches!(singular.inverse(), Err(GeometryError::Singular(_))));
        let h = Homography::from_row_major([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -5.0]);
        assert!(matches!(h.project(5.0, 1.0), Err(GeometryError::AtInfinity { .. })));
    }
}
