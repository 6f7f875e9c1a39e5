//! Paraxial ray-transfer (ABCD) optics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

/// Transverse ray coordinates: position (µm) and angle (rad) per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayState {
    pub r: [f64; 2],
    pub theta: [f64; 2],
}

impl RayState {
    pub fn new(r: [f64; 2], theta: [f64; 2]) -> Self {
        RayState { r, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(&self.theta).all(|v| v.is_finite())
    }
}

/// 2×2 ray transfer matrix applied identically to both transverse axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayTransferMatrix {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl RayTransferMatrix {
    pub const IDENTITY: RayTransferMatrix = RayTransferMatrix {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
    };

    pub fn free_space(d_um: f64) -> Self {
        RayTransferMatrix {
            a: 1.0,
            b: d_um,
            c: 0.0,
            d: 1.0,
        }
    }

    pub fn thin_lens(f_um: f64) -> Self {
        RayTransferMatrix {
            a: 1.0,
            b: 0.0,
            c: -1.0 / f_um,
            d: 1.0,
        }
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// Matrix with the second output row negated, i.e. the same system seen
    /// with reversed output angles.
    pub fn flip_output_angle(&self) -> Self {
        RayTransferMatrix {
            c: -self.c,
            d: -self.d,
            ..*self
        }
    }
}

impl Mul for RayTransferMatrix {
    type Output = RayTransferMatrix;

    fn mul(self, o: RayTransferMatrix) -> RayTransferMatrix {
        RayTransferMatrix {
            a: self.a * o.a + self.b * o.c,
            b: self.a * o.b + self.b * o.d,
            c: self.c * o.a + self.d * o.c,
            d: self.c * o.b + self.d * o.d,
        }
    }
}

/// Optical element as declared in the experiment config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Element {
    FreeSpace { d_um: f64 },
    ThinLens { f_um: f64 },
}

impl Element {
    pub fn matrix(&self) -> Result<RayTransferMatrix> {
        match *self {
            Element::FreeSpace { d_um } => {
                if !d_um.is_finite() {
                    return Err(Error::InvalidParameter("free-space distance must be finite".into()));
                }
                Ok(RayTransferMatrix::free_space(d_um))
            }
            Element::ThinLens { f_um } => {
                if f_um == 0.0 || !f_um.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "thin lens focal length must be finite and non-zero, got {f_um}"
                    )));
                }
                Ok(RayTransferMatrix::thin_lens(f_um))
            }
        }
    }
}

/// Ordered list of elements; the first element acts first.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalSystem {
    elements: Vec<Element>,
    matrix: RayTransferMatrix,
}

impl OpticalSystem {
    pub fn new(elements: Vec<Element>) -> Result<Self> {
        let matrix = compose(&elements)?;
        Ok(OpticalSystem { elements, matrix })
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn matrix(&self) -> RayTransferMatrix {
        self.matrix
    }

    /// Lateral magnification A when the system images (B ≈ 0).
    pub fn magnification(&self) -> Option<f64> {
        let scale = self.matrix.a.abs().max(1.0);
        (self.matrix.b.abs() < 1e-9 * scale.max(1.0)).then_some(self.matrix.a)
    }

    /// Focal-plane scale B (µm per rad) when the system Fourier-transforms (A ≈ 0).
    pub fn fourier_scale_um(&self) -> Option<f64> {
        (self.matrix.a.abs() < 1e-9).then_some(self.matrix.b)
    }

    /// 4f relay with magnification −f2/f1.
    pub fn relay_4f(f1_um: f64, f2_um: f64) -> Result<Self> {
        Self::new(vec![
            Element::FreeSpace { d_um: f1_um },
            Element::ThinLens { f_um: f1_um },
            Element::FreeSpace { d_um: f1_um + f2_um },
            Element::ThinLens { f_um: f2_um },
            Element::FreeSpace { d_um: f2_um },
        ])
    }

    /// f–lens–f Fourier-transforming system (A = 0, B = f).
    pub fn fourier(f_um: f64) -> Result<Self> {
        Self::new(vec![
            Element::FreeSpace { d_um: f_um },
            Element::ThinLens { f_um },
            Element::FreeSpace { d_um: f_um },
        ])
    }
}

/// Ordered product of element matrices (rightmost acts first).
pub fn compose(elements: &[Element]) -> Result<RayTransferMatrix> {
    if elements.is_empty() {
        return Err(Error::InvalidParameter("optical system has no elements".into()));
    }
    let mut m = RayTransferMatrix::IDENTITY;
    for e in elements {
        m = e.matrix()? * m;
    }
    let det = m.det();
    if (det - 1.0).abs() > 1e-9 * (m.a.abs() * m.d.abs() + m.b.abs() * m.c.abs()).max(1.0) {
        log::warn!("composed system has det {det}, expected 1");
    }
    Ok(m)
}

pub fn apply(m: &RayTransferMatrix, ray: &RayState) -> Result<RayState> {
    if !ray.is_finite() {
        return Err(Error::NonFinite("ray".into()));
    }
    Ok(apply_unchecked(m, ray))
}

#[inline]
pub(crate) fn apply_unchecked(m: &RayTransferMatrix, ray: &RayState) -> RayState {
    let mut out = RayState::new([0.0; 2], [0.0; 2]);
    for i in 0..2 {
        out.r[i] = m.a * ray.r[i] + m.b * ray.theta[i];
        out.theta[i] = m.c * ray.r[i] + m.d * ray.theta[i];
    }
    out
}

pub const DEFAULT_B_THRESHOLD_UM: f64 = 1.0;

/// Recovers (θ1, θ2) from input and output positions: θ1 = (r2 − A r1)/B.
pub fn solve_angles(
    m: &RayTransferMatrix,
    r1: [f64; 2],
    r2: [f64; 2],
    b_threshold_um: f64,
) -> Result<([f64; 2], [f64; 2])> {
    if m.b.abs() < b_threshold_um {
        return Err(Error::DegenerateSystem {
            b: m.b.abs(),
            threshold: b_threshold_um,
        });
    }
    if !r1.iter().chain(&r2).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("positions".into()));
    }
    let mut t1 = [0.0; 2];
    let mut t2 = [0.0; 2];
    for i in 0..2 {
        t1[i] = (r2[i] - m.a * r1[i]) / m.b;
        t2[i] = m.c * r1[i] + m.d * t1[i];
    }
    Ok((t1, t2))
}

/// Ray slope for a transverse wavenumber: k⊥ / k_z.
pub fn slope_from_k(k_perp: [f64; 2], k: f64) -> [f64; 2] {
    let kz = (k * k - k_perp[0] * k_perp[0] - k_perp[1] * k_perp[1]).max(0.0).sqrt();
    [k_perp[0] / kz, k_perp[1] / kz]
}

/// Inverse of [`slope_from_k`]: k⊥ = k s / sqrt(1 + |s|²).
pub fn k_from_slope(s: [f64; 2], k: f64) -> [f64; 2] {
    let n = (1.0 + s[0] * s[0] + s[1] * s[1]).sqrt();
    [k * s[0] / n, k * s[1] / n]
}
