use super::filter::{gaussian_blur, resize};
use super::{Image, ImageError};

/// Per-level blur rule: `coarse_numerator / factor` pixels for downscaled
/// levels, `base_sigma` for the full-resolution level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlurPolicy {
    pub coarse_numerator: f64,
    pub base_sigma: f64,
}

impl Default for BlurPolicy {
    fn default() -> Self {
        Self { coarse_numerator: 0.5, base_sigma: 0.0 }
    }
}

impl BlurPolicy {
    pub fn none() -> Self {
        Self { coarse_numerator: 0.0, base_sigma: 0.0 }
    }

    pub fn sigma_for(&self, factor: f64) -> f64 {
        if factor < 1.0 {
            self.coarse_numerator / factor
        } else {
            self.base_sigma
        }
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub factor: f64,
    pub image: Image,
}

/// Blurred multi-resolution stack; factors strictly increasing, ending at 1.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// The full-resolution level.
    pub fn base(&self) -> &Image {
        &self.levels.last().expect("nonempty pyramid").image
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.levels.iter().map(|l| &l.image)
    }
}

/// Resizes then blurs the image once per scale factor.
pub fn build_pyramid(img: &Image, scales: &[f64], blur: BlurPolicy) -> Result<Pyramid, ImageError> {
    if scales.is_empty() {
        return Err(ImageError::InvalidData("scale set is empty".into()));
    }
    if let Some(bad) = scales.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
        return Err(ImageError::InvalidData(format!("scale {bad} not in (0, 1]")));
    }
    if !scales.contains(&1.0) {
        return Err(ImageError::InvalidData("scale set must contain 1".into()));
    }
    let mut sorted = scales.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let levels = sorted
        .into_iter()
        .map(|factor| {
            let resized = resize(img, factor)?;
            let image = gaussian_blur(&resized, blur.sigma_for(factor));
            Ok(PyramidLevel { factor, image })
        })
        .collect::<Result<Vec<_>, ImageError>>()?;
    Ok(Pyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_unblurred_level_is_input() {
        let img = Image::from_fn(5, 7, 3, |i, j, c| ((i + j + c) % 4) as f64 / 4.0).unwrap();
        let pyr = build_pyramid(&img, &[1.0], BlurPolicy::none()).unwrap();
        assert_eq!(pyr.len(), 1);
        assert_eq!(pyr.base(), &img);
    }

    #[test]
    fn default_scale_set_level_sizes() {
        let img = Image::filled(256, 256, 1, 0.5);
        let pyr = build_pyramid(&img, &[1.0, 0.5, 1.0 / 3.0, 0.25], BlurPolicy::default()).unwrap();
        let sizes: Vec<_> = pyr.images().map(|i| (i.height(), i.width())).collect();
        assert_eq!(sizes, vec![(64, 64), (85, 85), (128, 128), (256, 256)]);
        let factors: Vec<_> = pyr.levels().iter().map(|l| l.factor).collect();
        assert!(factors.windows(2).all(|w| w[0] < w[1]));
        for level in pyr.images() {
            assert!(level.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn rejects_scale_sets_without_one() {
        let img = Image::filled(8, 8, 1, 0.0);
        assert!(build_pyramid(&img, &[0.5], BlurPolicy::default()).is_err());
        assert!(build_pyramid(&img, &[], BlurPolicy::default()).is_err());
        assert!(build_pyramid(&img, &[1.0, 1.5], BlurPolicy::default()).is_err());
    }

    #[test]
    fn default_policy_blurs_only_coarse_levels() {
        let p = BlurPolicy::default();
        assert_eq!(p.sigma_for(1.0), 0.0);
        assert_eq!(p.sigma_for(0.5), 1.0);
        assert_eq!(p.sigma_for(0.25), 2.0);
    }
}
