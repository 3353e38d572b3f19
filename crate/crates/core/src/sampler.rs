//! Differentiable crop extraction.
//!
//! Output pixel `(i, j)` of an `n x n` crop samples the source at normalized
//! coordinate `(x + s*u_j, y + s*v_i)` where `u, v` run over `[-1, 1]` in `n`
//! even steps. Normalized `-1` and `+1` land on the first and last pixel
//! centers of every pyramid level, so one `θ` addresses all levels.

use serde::{Deserialize, Serialize};

use crate::imagecore::{Image, Pyramid};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplerError {
    #[error("output size {0} is degenerate (must be at least 2)")]
    DegenerateSize(usize),
    #[error("invalid crop parameters {0:?}")]
    InvalidParams(CropParams),
    #[error("no pyramid levels to sample")]
    NoLevels,
}

/// Crop center `(x, y)` in normalized image coordinates and scale `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub x: f64,
    pub y: f64,
    pub s: f64,
}

impl CropParams {
    pub fn new(x: f64, y: f64, s: f64) -> Self {
        Self { x, y, s }
    }

    /// Half-width of the feasible center interval at this scale.
    pub fn bound(&self) -> f64 {
        (1.0 - self.s).max(0.0)
    }

    /// True when the crop stays inside the image.
    pub fn is_feasible(&self) -> bool {
        let b = self.bound();
        self.s > 0.0 && self.s <= 1.0 && self.x.abs() <= b && self.y.abs() <= b
    }
}

/// Clamps the center so the crop stays inside the image; `s` is untouched.
pub fn clip_params(theta: CropParams) -> CropParams {
    let b = theta.bound();
    CropParams { x: theta.x.clamp(-b, b), y: theta.y.clamp(-b, b), s: theta.s }
}

/// Per-pixel partial derivatives of the crop with respect to `(x, y, s)`,
/// laid out like the crop image.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub ds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CropResult {
    pub image: Image,
    pub jacobian: Jacobian,
}

impl CropResult {
    /// Contracts a per-pixel cotangent with the jacobian: `Σ_p g_p ∂p/∂θ`.
    pub fn pullback(&self, pixel_grad: &[f64]) -> [f64; 3] {
        assert_eq!(pixel_grad.len(), self.jacobian.dx.len(), "pixel gradient size mismatch");
        let mut out = [0.0; 3];
        for (k, &g) in pixel_grad.iter().enumerate() {
            out[0] += g * self.jacobian.dx[k];
            out[1] += g * self.jacobian.dy[k];
            out[2] += g * self.jacobian.ds[k];
        }
        out
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelBox {
    pub fn width(&self) -> i64 {
        (self.x1 - self.x0).max(0)
    }

    pub fn height(&self) -> i64 {
        (self.y1 - self.y0).max(0)
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = PixelBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        let union = self.area() + other.area() - inter.area();
        if union == 0 {
            return 0.0;
        }
        inter.area() as f64 / union as f64
    }
}

/// Maps normalized crop parameters onto a clamped integer pixel rectangle.
pub fn theta_to_pixel_box(theta: CropParams, img_w: usize, img_h: usize) -> PixelBox {
    let (w, h) = (img_w as f64, img_h as f64);
    let edge = |c: f64, extent: f64| ((c * extent / 2.0) + extent / 2.0).round().clamp(0.0, extent) as i64;
    PixelBox {
        x0: edge(theta.x - theta.s, w),
        y0: edge(theta.y - theta.s, h),
        x1: edge(theta.x + theta.s, w),
        y1: edge(theta.y + theta.s, h),
    }
}

struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
    // 1 where the coordinate lies inside [0, n-1), 0 where it is clamped
    live: f64,
    // ∂(pixel coordinate)/∂(crop center) and /∂(crop scale)
    d_center: f64,
    d_scale: f64,
}

fn grid_u(k: usize, out_size: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / (out_size - 1) as f64
}

/// Source coordinate, in pixels along an axis of `n_src` samples, of every
/// output sample along that axis.
pub fn sample_positions(center: f64, scale: f64, out_size: usize, n_src: usize) -> Vec<f64> {
    let half_span = (n_src - 1) as f64 / 2.0;
    (0..out_size).map(|k| (center + scale * grid_u(k, out_size) + 1.0) * half_span).collect()
}

fn taps(center: f64, scale: f64, out_size: usize, n_src: usize) -> Vec<Tap> {
    let half_span = (n_src - 1) as f64 / 2.0;
    sample_positions(center, scale, out_size, n_src)
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let u = grid_u(k, out_size);
            let max = (n_src - 1) as f64;
            let pc = p.clamp(0.0, max);
            let lo = (pc.floor() as usize).min(n_src - 1);
            let hi = (lo + 1).min(n_src - 1);
            let live = if p >= 0.0 && p < max { 1.0 } else { 0.0 };
            Tap { lo, hi, frac: pc - lo as f64, live, d_center: half_span, d_scale: half_span * u }
        })
        .collect()
}

fn check(theta: CropParams, out_size: usize) -> Result<(), SamplerError> {
    if out_size < 2 {
        return Err(SamplerError::DegenerateSize(out_size));
    }
    if !(theta.x.is_finite() && theta.y.is_finite() && theta.s.is_finite() && theta.s > 0.0) {
        return Err(SamplerError::InvalidParams(theta));
    }
    Ok(())
}

/// Adds `weight * Sample(img, θ)` (and optionally its jacobian) into the
/// output buffers.
fn accumulate(
    img: &Image,
    theta: CropParams,
    out_size: usize,
    weight: f64,
    values: &mut [f64],
    jac: Option<&mut Jacobian>,
) {
    let ch = img.channels();
    let stride = img.width() * ch;
    let data = img.data();
    let cols = taps(theta.x, theta.s, out_size, img.width());
    let rows = taps(theta.y, theta.s, out_size, img.height());

    match jac {
        None => {
            for (r, out_row) in rows.iter().zip(values.chunks_exact_mut(out_size * ch)) {
                let top = &data[r.lo * stride..(r.lo + 1) * stride];
                let bot = &data[r.hi * stride..(r.hi + 1) * stride];
                for (c, out) in cols.iter().zip(out_row.chunks_exact_mut(ch)) {
                    let (l, rt) = (c.lo * ch, c.hi * ch);
                    for (k, o) in out.iter_mut().enumerate() {
                        let upper = top[l + k] + c.frac * (top[rt + k] - top[l + k]);
                        let lower = bot[l + k] + c.frac * (bot[rt + k] - bot[l + k]);
                        *o += weight * (upper + r.frac * (lower - upper));
                    }
                }
            }
        }
        Some(jac) => {
            let row_len = out_size * ch;
            for (i, r) in rows.iter().enumerate() {
                let top = &data[r.lo * stride..(r.lo + 1) * stride];
                let bot = &data[r.hi * stride..(r.hi + 1) * stride];
                let span = i * row_len..(i + 1) * row_len;
                let out_row = &mut values[span.clone()];
                let dx = &mut jac.dx[span.clone()];
                let dy = &mut jac.dy[span.clone()];
                let ds = &mut jac.ds[span];
                for (j, c) in cols.iter().enumerate() {
                    let (l, rt) = (c.lo * ch, c.hi * ch);
                    for k in 0..ch {
                        let out = j * ch + k;
                        let v00 = top[l + k];
                        let v01 = top[rt + k];
                        let v10 = bot[l + k];
                        let v11 = bot[rt + k];
                        let upper = v00 + c.frac * (v01 - v00);
                        let lower = v10 + c.frac * (v11 - v10);
                        out_row[out] += weight * (upper + r.frac * (lower - upper));

                        let d_col = c.live * ((1.0 - r.frac) * (v01 - v00) + r.frac * (v11 - v10));
                        let d_row = r.live * (lower - upper);
                        dx[out] += weight * d_col * c.d_center;
                        dy[out] += weight * d_row * r.d_center;
                        ds[out] += weight * (d_col * c.d_scale + d_row * r.d_scale);
                    }
                }
            }
        }
    }
}

fn sample_impl(
    levels: &[&Image],
    theta: CropParams,
    out_size: usize,
    with_jacobian: bool,
) -> Result<(Image, Option<Jacobian>), SamplerError> {
    check(theta, out_size)?;
    let first = levels.first().ok_or(SamplerError::NoLevels)?;
    let ch = first.channels();
    let len = out_size * out_size * ch;
    let mut values = vec![0.0; len];
    let mut jac = with_jacobian.then(|| Jacobian { dx: vec![0.0; len], dy: vec![0.0; len], ds: vec![0.0; len] });
    let weight = 1.0 / levels.len() as f64;
    for level in levels {
        assert_eq!(level.channels(), ch, "pyramid levels disagree on channel count");
        accumulate(level, theta, out_size, weight, &mut values, jac.as_mut());
    }
    let image = Image::new(out_size, out_size, ch, values).map_err(|_| SamplerError::InvalidParams(theta))?;
    Ok((image, jac))
}

/// Bilinear crop of a single image with its exact jacobian.
pub fn bilinear_sample(img: &Image, theta: CropParams, out_size: usize) -> Result<CropResult, SamplerError> {
    let (image, jacobian) = sample_impl(&[img], theta, out_size, true)?;
    Ok(CropResult { image, jacobian: jacobian.expect("requested") })
}

/// Bilinear crop of a single image, values only.
pub fn bilinear_sample_values(img: &Image, theta: CropParams, out_size: usize) -> Result<Image, SamplerError> {
    Ok(sample_impl(&[img], theta, out_size, false)?.0)
}

/// Equal-weight average of bilinear crops over arbitrary levels.
pub fn sample_levels<'a>(
    levels: impl IntoIterator<Item = &'a Image>,
    theta: CropParams,
    out_size: usize,
) -> Result<CropResult, SamplerError> {
    let levels: Vec<&Image> = levels.into_iter().collect();
    let (image, jacobian) = sample_impl(&levels, theta, out_size, true)?;
    Ok(CropResult { image, jacobian: jacobian.expect("requested") })
}

/// Multi-scale crop: the mean over pyramid levels of the bilinear crop at the
/// same normalized `θ`, with the jacobian averaged the same way.
pub fn multiscale_crop(pyr: &Pyramid, theta: CropParams, out_size: usize) -> Result<CropResult, SamplerError> {
    sample_levels(pyr.images(), theta, out_size)
}

/// [`multiscale_crop`] without the jacobian.
pub fn multiscale_crop_values(pyr: &Pyramid, theta: CropParams, out_size: usize) -> Result<Image, SamplerError> {
    let levels: Vec<&Image> = pyr.images().collect();
    Ok(sample_impl(&levels, theta, out_size, false)?.0)
}
