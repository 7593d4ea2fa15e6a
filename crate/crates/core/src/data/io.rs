use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit grayscale image (PNG or PGM) as `1×H×W` in `[0, 1]`.
/// Colour images are converted to luma.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[1, h as usize, w as usize], data)
}

/// Writes the first plane of a `C×H×W` (or `H×W`) tensor as 8-bit
/// grayscale; the format follows the file extension.
pub fn save_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *t.shape() {
        [h, w] => (h, w),
        [_, h, w] => (h, w),
        _ => return Err(Error::shape(format!("cannot save a tensor of shape {:?} as an image", t.shape()))),
    };
    let px: Vec<u8> = t.data()[..h * w]
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches size");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| image_err(path, e))
}

/// Loads an image and its mask; mask pixels ≥ 128 are foreground.
pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let gray = load_gray(image_path)?;
    let raw = load_gray(mask_path)?;
    if raw.shape() != gray.shape() {
        return Err(Error::Data(format!(
            "mask {} is {}×{} but image {} is {}×{}",
            mask_path.display(),
            raw.shape()[2],
            raw.shape()[1],
            image_path.display(),
            gray.shape()[2],
            gray.shape()[1]
        )));
    }
    let mask = raw.map(|v| if v >= 128.0 / 255.0 - 1e-6 { 1.0 } else { 0.0 });
    Sample::from_gray(&gray, mask)
}

pub fn save_sample(sample: &Sample, image_path: &Path, mask_path: &Path) -> Result<()> {
    save_gray(image_path, &sample.gray())?;
    save_gray(mask_path, &sample.mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// Tab-separated `image mask split` lines; `#` starts a comment line.
/// Relative paths are taken from the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected `image<TAB>mask<TAB>split`, got {} columns",
                path.display(),
                ln + 1,
                cols.len()
            )));
        }
        out.push(ManifestEntry {
            image: base.join(cols[0]),
            mask: base.join(cols[1]),
            split: cols[2].parse()?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no samples", path.display())));
    }
    Ok(out)
}

/// Writes entries with paths relative to the manifest's directory when
/// possible, after an optional header comment.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry], header: Option<&str>) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(&format!("# {h}\n"));
    }
    for e in entries {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        text.push_str(&format!("{}\t{}\t{}\n", rel(&e.image), rel(&e.mask), e.split));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
