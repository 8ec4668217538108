//! Quadratic smoothing penalty on the network output.
//!
//! `R(y) = ½‖∇₁y‖² + ½‖∇₂y‖²` per channel, summed over channels, where `∇₁`
//! and `∇₂` are forward differences along rows and columns with the last
//! difference dropped. The gradient `∇₁ᵀ∇₁y + ∇₂ᵀ∇₂y` is then the 5-point
//! Laplacian with Neumann boundaries (up to sign).

use crate::error::{Error, Result};
use crate::tensor::FeatureField;

/// Forward differences along one image axis and their transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffAxis {
    /// First coordinate (rows): `d(i,j) = y(i+1,j) - y(i,j)` for `i < H-1`.
    Vertical,
    /// Second coordinate (columns): `d(i,j) = y(i,j+1) - y(i,j)` for `j < W-1`.
    Horizontal,
}

impl DiffAxis {
    /// Applies the difference operator. The output has the input's shape; the
    /// dropped last difference is stored as zero.
    pub fn apply(self, y: &FeatureField) -> FeatureField {
        let (c, h, w) = y.shape();
        FeatureField::from_fn(c, h, w, |ch, r, col| match self {
            DiffAxis::Vertical if r + 1 < h => y.get(ch, r + 1, col) - y.get(ch, r, col),
            DiffAxis::Horizontal if col + 1 < w => y.get(ch, r, col + 1) - y.get(ch, r, col),
            _ => 0.0,
        })
    }

    /// Transpose of [`DiffAxis::apply`]: `(Dᵀd)(k) = d(k-1) - d(k)` along the axis,
    /// with the out-of-range and dropped differences read as zero.
    pub fn apply_transpose(self, d: &FeatureField) -> FeatureField {
        let (c, h, w) = d.shape();
        let extent = match self {
            DiffAxis::Vertical => h,
            DiffAxis::Horizontal => w,
        };
        FeatureField::from_fn(c, h, w, |ch, r, col| {
            let pos = match self {
                DiffAxis::Vertical => r,
                DiffAxis::Horizontal => col,
            };
            let at = |p: usize| {
                let (rr, cc) = match self {
                    DiffAxis::Vertical => (p, col),
                    DiffAxis::Horizontal => (r, p),
                };
                d.get(ch, rr, cc)
            };
            let incoming = if pos >= 1 { at(pos - 1) } else { 0.0 };
            let outgoing = if pos + 1 < extent { at(pos) } else { 0.0 };
            incoming - outgoing
        })
    }
}

/// `R(y)`; fields with a single row and column give 0.
pub fn smoother_value(y: &FeatureField) -> f64 {
    let (c, h, w) = y.shape();
    let mut total = 0.0;
    for ch in 0..c {
        let plane = y.plane(ch);
        for r in 0..h {
            let row = &plane[r * w..(r + 1) * w];
            for col in 0..w {
                if col + 1 < w {
                    let d = row[col + 1] - row[col];
                    total += d * d;
                }
                if r + 1 < h {
                    let d = plane[(r + 1) * w + col] - row[col];
                    total += d * d;
                }
            }
        }
    }
    0.5 * total
}

/// `∇R(y) = ∇₁ᵀ∇₁y + ∇₂ᵀ∇₂y`, evaluated as the Neumann 5-point stencil.
pub fn smoother_grad(y: &FeatureField) -> FeatureField {
    let (c, h, w) = y.shape();
    let mut g = FeatureField::zeros(c, h, w);
    for ch in 0..c {
        let plane = y.plane(ch);
        let out = g.plane_mut(ch);
        for r in 0..h {
            for col in 0..w {
                let center = plane[r * w + col];
                let mut acc = 0.0;
                if r > 0 {
                    acc += center - plane[(r - 1) * w + col];
                }
                if r + 1 < h {
                    acc += center - plane[(r + 1) * w + col];
                }
                if col > 0 {
                    acc += center - plane[r * w + col - 1];
                }
                if col + 1 < w {
                    acc += center - plane[r * w + col + 1];
                }
                out[r * w + col] = acc;
            }
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegularizerKind {
    #[default]
    None,
    QuadraticSmoother,
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(RegularizerKind::None),
            "quadratic" | "quadratic_smoother" | "smoother" => Ok(RegularizerKind::QuadraticSmoother),
            other => Err(Error::Parameter(format!("unknown regularizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegularizerKind::None => "none",
            RegularizerKind::QuadraticSmoother => "quadratic_smoother",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub alpha: f64,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            alpha: 0.0,
        }
    }

    pub fn smoother(alpha: f64) -> Result<Self> {
        let spec = Self {
            kind: RegularizerKind::QuadraticSmoother,
            alpha,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Parameter(format!(
                "regularization strength must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Strength actually applied; `None` acts as zero.
    pub fn effective_alpha(&self) -> f64 {
        match self.kind {
            RegularizerKind::None => 0.0,
            RegularizerKind::QuadraticSmoother => self.alpha,
        }
    }

    /// Unscaled `R(y)` and `∇R(y)`.
    pub fn raw(&self, y: &FeatureField) -> (f64, FeatureField) {
        match self.kind {
            RegularizerKind::None => (0.0, FeatureField::zeros(y.channels(), y.height(), y.width())),
            RegularizerKind::QuadraticSmoother => (smoother_value(y), smoother_grad(y)),
        }
    }
}

/// `(α R(y), α ∇R(y))`.
pub fn apply(spec: &RegularizerSpec, y: &FeatureField) -> (f64, FeatureField) {
    let alpha = spec.effective_alpha();
    let (value, mut grad) = spec.raw(y);
    grad.scale(alpha);
    (alpha * value, grad)
}
