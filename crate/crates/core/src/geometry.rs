use serde::{Deserialize, Serialize};

/// 2-D affine map `p -> A p + t`, stored as the top two rows of a 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Self {
        Self {
            m: [[a, b, tx], [c, d, ty]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, tx, 0.0, 1.0, ty)
    }

    pub fn linear(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self::new(a, b, 0.0, c, d, 0.0)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [[a, b, tx], [c, d, ty]] = self.m;
        (a * x + b * y + tx, c * x + d * y + ty)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then_after(&self, other: &Affine2) -> Affine2 {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let [[e, f, ux], [g, h, uy]] = other.m;
        Affine2::new(
            a * e + b * g,
            a * f + b * h,
            a * ux + b * uy + tx,
            c * e + d * g,
            c * f + d * h,
            c * ux + d * uy + ty,
        )
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine2::new(ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)))
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Conjugates a linear-about-origin map so it acts about `(cx, cy)`.
    pub fn about(&self, cx: f64, cy: f64) -> Affine2 {
        Affine2::translation(cx, cy)
            .then_after(self)
            .then_after(&Affine2::translation(-cx, -cy))
    }
}
