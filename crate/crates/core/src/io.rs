//! `CTF1` array files and the on-disk dataset layout.
//!
//! A `CTF1` file is the ASCII magic `CTF1`, a little-endian `u32` rank, one
//! `u32` per extent, then the row-major payload as little-endian `f32`.
//!
//! A dataset directory holds `clean/`, `sino_clean/`, `sino_ldct/` and
//! `fbp_ldct/`, each with files `00000.ctf`, `00001.ctf`, …, plus a `meta`
//! text file echoing the configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::physics::{Image, Sinogram};

pub const CTF_MAGIC: &[u8; 4] = b"CTF1";

pub fn encode_ctf(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape(shape, &[data.len()]));
    }
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(CTF_MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    Ok(out)
}

pub fn decode_ctf(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let fail = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 8 || &bytes[..4] != CTF_MAGIC {
        return Err(fail("missing CTF1 magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let ndim = word(4);
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let shape: Vec<usize> = (0..ndim).map(|i| word(8 + 4 * i)).collect();
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail("extent overflow"))?;
    if bytes.len() - header != numel * 4 {
        return Err(fail("payload size does not match extents"));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((shape, data))
}

pub fn write_ctf(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_ctf(shape, data)?).map_err(|e| Error::io(path, e))
}

pub fn read_ctf(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ctf(&bytes, path)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_ctf(path, &[img.n(), img.n()], img.pixels())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (shape, data) = read_ctf(path)?;
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("expected a square image, got {shape:?}") });
    }
    Image::new(shape[0], data)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    write_ctf(path, &[sino.n_views(), sino.n_dets()], sino.samples())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let (shape, data) = read_ctf(path)?;
    if shape.len() != 2 {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("expected a 2-d sinogram, got {shape:?}") });
    }
    Sinogram::new(shape[0], shape[1], data)
}

/// File name of item `id` inside a dataset subdirectory.
pub fn item_name(id: usize) -> String {
    format!("{id:05}.ctf")
}

/// Sorted `.ctf` file stems in `dir`.
pub fn list_items(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ctf") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Paths of the standard dataset layout under one root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub const CLEAN: &'static str = "clean";
    pub const SINO_CLEAN: &'static str = "sino_clean";
    pub const SINO_LDCT: &'static str = "sino_ldct";
    pub const FBP_LDCT: &'static str = "fbp_ldct";
    pub const META: &'static str = "meta";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn dir(&self, kind: &str) -> PathBuf {
        self.root.join(kind)
    }

    pub fn item(&self, kind: &str, id: usize) -> PathBuf {
        self.dir(kind).join(item_name(id))
    }

    pub fn meta(&self) -> PathBuf {
        self.root.join(Self::META)
    }

    /// Number of clean images, which must be numbered contiguously from 0.
    pub fn count(&self) -> Result<usize> {
        let items = list_items(&self.dir(Self::CLEAN))?;
        for (i, stem) in items.iter().enumerate() {
            if *stem != format!("{i:05}") {
                return Err(Error::Format {
                    path: self.dir(Self::CLEAN),
                    reason: format!("expected item {i:05}, found {stem}"),
                });
            }
        }
        Ok(items.len())
    }

    pub fn write_meta(&self, text: &str) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let p = self.meta();
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ctf_round_trip_rounds_to_f32() {
        let data = vec![0.1, -2.5, 1e-3, 7.0, 0.0, 3.25];
        let bytes = encode_ctf(&[2, 3], &data).unwrap();
        assert_eq!(&bytes[..4], b"CTF1");
        assert_eq!(bytes.len(), 8 + 8 + 24);
        let (shape, back) = decode_ctf(&bytes, Path::new("mem")).unwrap();
        assert_eq!(shape, vec![2, 3]);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn ctf_rejects_corruption() {
        let bytes = encode_ctf(&[2, 2], &[1.0; 4]).unwrap();
        let p = Path::new("mem");
        assert!(decode_ctf(&bytes[..bytes.len() - 1], p).is_err());
        assert!(decode_ctf(b"CTF2\0\0\0\0", p).is_err());
        assert!(decode_ctf(&bytes[..6], p).is_err());
        assert!(encode_ctf(&[3], &[1.0; 4]).is_err());
    }

    #[test]
    fn files_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DatasetLayout::new(dir.path());
        let img = Image::new(2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        for id in 0..3 {
            write_image(&layout.item(DatasetLayout::CLEAN, id), &img).unwrap();
        }
        assert_eq!(layout.count().unwrap(), 3);
        assert_eq!(read_image(&layout.item(DatasetLayout::CLEAN, 1)).unwrap(), img);
        assert_eq!(list_items(&layout.dir(DatasetLayout::CLEAN)).unwrap(), vec!["00000", "00001", "00002"]);
        let sino = Sinogram::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = layout.item(DatasetLayout::SINO_LDCT, 0);
        write_sinogram(&p, &sino).unwrap();
        assert_eq!(read_sinogram(&p).unwrap(), sino);
        assert!(read_image(&p).is_err());
        fs::remove_file(layout.item(DatasetLayout::CLEAN, 1)).unwrap();
        assert!(layout.count().is_err());
    }
}
