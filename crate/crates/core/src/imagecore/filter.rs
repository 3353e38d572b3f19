use super::{Image, ImageError};

/// Bilinear resampling to `round(factor*H) x round(factor*W)`.
///
/// Corner pixels map onto corner pixels, the same convention the crop sampler
/// uses, so every pyramid level covers exactly the normalized square
/// `[-1, 1]²`.
pub fn resize(img: &Image, factor: f64) -> Result<Image, ImageError> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(ImageError::InvalidData(format!("resize factor {factor} not in (0, 1]")));
    }
    let out_h = (factor * img.height() as f64).round() as usize;
    let out_w = (factor * img.width() as f64).round() as usize;
    if out_h < 2 || out_w < 2 {
        return Err(ImageError::DegenerateSize { height: out_h, width: out_w });
    }
    if out_h == img.height() && out_w == img.width() {
        return Ok(img.clone());
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let ratio = (n_in - 1) as f64 / (n_out - 1) as f64;
        (0..n_out)
            .map(|k| {
                let p = (k as f64 * ratio).min((n_in - 1) as f64);
                let p0 = (p.floor() as usize).min(n_in - 1);
                let p1 = (p0 + 1).min(n_in - 1);
                (p0, p1, p - p0 as f64)
            })
            .collect()
    };
    let rows = axis(out_h, img.height());
    let cols = axis(out_w, img.width());
    Image::from_fn(out_h, out_w, img.channels(), |i, j, c| {
        let (y0, y1, fy) = rows[i];
        let (x0, x1, fx) = cols[j];
        let top = (1.0 - fx) * img.get(y0, x0, c) + fx * img.get(y0, x1, c);
        let bottom = (1.0 - fx) * img.get(y1, x0, c) + fx * img.get(y1, x1, c);
        (1.0 - fy) * top + fy * bottom
    })
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut horizontal = vec![0.0; h * w * ch];
    for i in 0..h {
        for j in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let jj = clamp(j as isize + k as isize - radius, w);
                    acc += t * img.get(i, jj, c);
                }
                horizontal[(i * w + j) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * ch];
    for i in 0..h {
        for j in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let ii = clamp(i as isize + k as isize - radius, h);
                    acc += t * horizontal[(ii * w + j) * ch + c];
                }
                out[(i * w + j) * ch + c] = acc;
            }
        }
    }
    Image::new(h, w, ch, out).expect("blur preserves shape")
}
