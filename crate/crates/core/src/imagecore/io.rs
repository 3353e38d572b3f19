use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use super::{Image, ImageError};

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io { path: path.to_path_buf(), source }
}

/// Reads an 8- or 16-bit PNG, PPM (P6) or PGM (P5) file into `[0, 1]` floats.
///
/// Gray inputs give one channel, color inputs three; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .with_guessed_format()
        .map_err(|e| io_err(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(ImageError::Format(format!("{other:?} is not supported"))),
        None => return Err(ImageError::Format(format!("cannot identify {}", path.display()))),
    }
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(source) => io_err(path, source),
        other => ImageError::Format(other.to_string()),
    })?;
    from_dynamic(&decoded)
}

fn from_dynamic(img: &DynamicImage) -> Result<Image, ImageError> {
    let gray = !img.color().has_color();
    let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() > 1;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match (gray, sixteen) {
        (true, false) => (1, img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        (true, true) => (1, img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        (false, false) => (3, img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        (false, true) => (3, img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
    };
    Image::new(h, w, channels, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes 8-bit PNG, PPM or PGM depending on the extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    match ext.as_str() {
        "png" => {
            let dynamic = if img.channels() == 1 {
                DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized buffer"))
            } else {
                DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized buffer"))
            };
            dynamic.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
                image::ImageError::IoError(source) => io_err(path, source),
                other => ImageError::Format(other.to_string()),
            })
        }
        "pgm" | "ppm" => {
            let magic = match (ext.as_str(), img.channels()) {
                ("pgm", 1) => "P5",
                ("ppm", 3) => "P6",
                _ => {
                    return Err(ImageError::Format(format!(
                        ".{ext} cannot hold a {}-channel image",
                        img.channels()
                    )))
                }
            };
            let file = File::create(path).map_err(|e| io_err(path, e))?;
            let mut out = BufWriter::new(file);
            write!(out, "{magic}\n{w} {h}\n255\n").map_err(|e| io_err(path, e))?;
            out.write_all(&bytes).map_err(|e| io_err(path, e))?;
            out.flush().map_err(|e| io_err(path, e))
        }
        _ => Err(ImageError::Format(format!("unsupported output extension '.{ext}'"))),
    }
}
