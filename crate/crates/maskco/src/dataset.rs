//! Image datasets on disk.
//!
//! A dataset directory either holds image files directly (unlabeled) or one
//! subdirectory per class (labeled, classes in sorted name order). Files are
//! visited in sorted path order so indices are stable.

use std::fs;
use std::path::{Path, PathBuf};

use maskco_core::sampling::{Image, ImageSource};

use crate::error::{Error, Result};

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "ppm"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
struct Rgb8 {
    width: u32,
    height: u32,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ImageFolder {
    root: PathBuf,
    paths: Vec<PathBuf>,
    labels: Vec<Option<usize>>,
    classes: Vec<String>,
    cache: Option<Vec<Rgb8>>,
}

fn decode(path: &Path) -> Result<Rgb8> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.into_rgb8();
    Ok(Rgb8 { width: img.width(), height: img.height(), bytes: img.into_raw() })
}

impl ImageFolder {
    /// Indexes `root` without decoding any image.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", root.display())));
        }
        let (mut paths, mut labels, mut classes) = (Vec::new(), Vec::new(), Vec::new());
        for entry in sorted_entries(root)? {
            if entry.is_dir() {
                let label = classes.len();
                classes.push(entry.file_name().unwrap_or_default().to_string_lossy().into_owned());
                for file in sorted_entries(&entry)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                    paths.push(file);
                    labels.push(Some(label));
                }
            } else if is_image(&entry) {
                paths.push(entry);
                labels.push(None);
            }
        }
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no images under {}", root.display())));
        }
        Ok(ImageFolder { root: root.into(), paths, labels, classes, cache: None })
    }

    /// Decodes every image into memory.
    pub fn preload(&mut self) -> Result<()> {
        if self.cache.is_none() {
            self.cache = Some(self.paths.iter().map(|p| decode(p)).collect::<Result<_>>()?);
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn path(&self, index: usize) -> &Path {
        &self.paths[index]
    }

    /// Every image has a class label.
    pub fn is_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    fn rgb(&self, index: usize) -> Result<Rgb8> {
        match &self.cache {
            Some(c) => Ok(c[index].clone()),
            None => decode(&self.paths[index]),
        }
    }
}

impl ImageSource for ImageFolder {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn image(&self, index: usize) -> maskco_core::Result<Image> {
        if index >= self.paths.len() {
            return Err(maskco_core::Error::Dataset(format!("index {index} out of range")));
        }
        let rgb = self.rgb(index).map_err(|e| maskco_core::Error::Dataset(e.to_string()))?;
        Image::from_rgb8(rgb.width as usize, rgb.height as usize, &rgb.bytes)
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.labels.get(index).copied().flatten()
    }
}

/// Reads one image file.
pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = decode(path)?;
    Ok(Image::from_rgb8(rgb.width as usize, rgb.height as usize, &rgb.bytes)?)
}

/// Writes an RGB image as PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes = img.to_rgb8();
    image::save_buffer(path, &bytes, img.width() as u32, img.height() as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image { path: path.into(), source })
}
