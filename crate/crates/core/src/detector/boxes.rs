use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset variances `(v0, v1)` for centers and log-sizes.
pub const VARIANCES: (f64, f64) = (0.1, 0.2);

/// Axis-aligned box in center form, normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Regression target of `gt` relative to `anchor`.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    gt.validate()?;
    anchor.validate()?;
    let (v0, v1) = VARIANCES;
    Ok([
        (gt.cx - anchor.cx) / (v0 * anchor.w),
        (gt.cy - anchor.cy) / (v0 * anchor.h),
        (gt.w / anchor.w).ln() / v1,
        (gt.h / anchor.h).ln() / v1,
    ])
}

/// Inverse of [`encode_box`].
pub fn decode_box(offsets: &[f64; 4], anchor: &BBox) -> Result<BBox> {
    anchor.validate()?;
    let (v0, v1) = VARIANCES;
    BBox::new(
        anchor.cx + offsets[0] * v0 * anchor.w,
        anchor.cy + offsets[1] * v0 * anchor.h,
        anchor.w * (offsets[2] * v1).exp(),
        anchor.h * (offsets[3] * v1).exp(),
    )
}
