//! PNG input/output and image datasets.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueDomain};

/// Reads a PNG into the requested value domain.
pub fn load_image(path: impl AsRef<Path>, domain: ValueDomain) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::Io(e)),
    };
    match image::guess_format(&bytes) {
        Ok(ImageFormat::Png) => {}
        Ok(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        Err(_) => {
            return Err(Error::UnsupportedFormat(format!(
                "unrecognised contents in {}",
                path.display()
            )))
        }
    }
    let reader = ImageReader::with_format(std::io::Cursor::new(bytes), ImageFormat::Png);
    let decoded = reader
        .decode()
        .map_err(|e| Error::CorruptData(format!("{}: {e}", path.display())))?;
    Ok(from_dynamic(&decoded)?.to_domain(domain))
}

pub(crate) fn from_dynamic(img: &DynamicImage) -> Result<ImageTensor> {
    let (channels, w, h, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.width(), g.height(), g.as_raw().clone()),
        other => {
            let rgb = other.to_rgb8();
            (3, rgb.width(), rgb.height(), rgb.into_raw())
        }
    };
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; channels * w * h];
    for (i, v) in raw.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        data[c * w * h + p] = *v as f64;
    }
    ImageTensor::new(channels, w, h, ValueDomain::U8, data)
}

pub(crate) fn to_dynamic(image: &ImageTensor) -> Result<DynamicImage> {
    let bytes = image.to_bytes();
    let (c, w, h) = image.shape();
    let n = w * h;
    let mut interleaved = vec![0u8; c * n];
    for ch in 0..c {
        for p in 0..n {
            interleaved[p * c + ch] = bytes[ch * n + p];
        }
    }
    let (w, h) = (w as u32, h as u32);
    match c {
        1 => Ok(DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, interleaved).expect("buffer size matches"),
        )),
        3 => Ok(DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w, h, interleaved).expect("buffer size matches"),
        )),
        _ => Err(Error::UnsupportedFormat(format!(
            "cannot store {c}-channel image as PNG"
        ))),
    }
}

/// Writes an 8-bit PNG (grey or RGB). Unit-float images are rounded to u8.
pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_dynamic(image)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::UnsupportedFormat(other.to_string()),
        })
}

/// Optional `manifest.json` in a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<String>,
}

/// Named images loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, images: Vec<ImageTensor>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(Error::ShapeMismatch("ids and images differ in length".into()));
        }
        Ok(Self { ids, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads a directory of PNGs. When `manifest.json` exists only the files it
    /// lists are read, in that order; otherwise every `*.png` in name order.
    pub fn load_dir(dir: impl AsRef<Path>, domain: ValueDomain) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.to_path_buf()));
        }
        let manifest = dir.join("manifest.json");
        let files: Vec<PathBuf> = if manifest.exists() {
            let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest)?)?;
            m.files.iter().map(|f| dir.join(f)).collect()
        } else {
            let mut v: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            v.sort();
            v
        };
        let mut ids = Vec::with_capacity(files.len());
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            ids.push(
                f.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
            images.push(load_image(&f, domain)?);
        }
        Ok(Self { ids, images })
    }

    /// Writes every image as `<id>.png` plus a manifest.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.len());
        for (id, img) in self.ids.iter().zip(&self.images) {
            let name = format!("{id}.png");
            save_image(img, dir.join(&name))?;
            files.push(name);
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&DatasetManifest { files })?,
        )?;
        Ok(())
    }

    /// Checks the dataset is non-empty with one common shape.
    pub fn ensure_trainable(images: &[ImageTensor]) -> Result<(usize, usize, usize)> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        for img in images {
            first.ensure_same_shape(img)?;
        }
        Ok(first.shape())
    }
}
