// Dataset readers and writers: big-endian idx files and png directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Image};
use crate::error::{FateError, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Image file (magic 0x803) plus label file (magic 0x801).
    Idx { images: PathBuf, labels: PathBuf },
    /// Directory holding `images/*.png` and `labels.csv` (`filename,label`).
    PngDir { dir: PathBuf, channels: usize },
}

pub fn load_dataset(source: &DataSource, class_names: Vec<String>) -> Result<Dataset> {
    match source {
        DataSource::Idx { images, labels } => load_idx(images, labels, class_names),
        DataSource::PngDir { dir, channels } => load_png_dir(dir, *channels, class_names),
    }
}

/// One class name per line; blank lines are ignored, order defines the index.
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| FateError::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.len() < 2 {
        return Err(FateError::Invalid(format!(
            "{} lists {} classes, need at least 2",
            path.display(),
            names.len()
        )));
    }
    Ok(names)
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FateError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn load_idx(images_path: &Path, labels_path: &Path, class_names: Vec<String>) -> Result<Dataset> {
    let img = fs::read(images_path).map_err(|e| FateError::io(images_path, e))?;
    let magic = read_be_u32(&img, 0, images_path)?;
    // 0x803: three dims (N, H, W); 0x804 adds a channel dim
    let rank = match magic {
        IDX_IMAGES => 3,
        0x0000_0804 => 4,
        m => {
            return Err(FateError::MalformedHeader {
                path: images_path.to_path_buf(),
                reason: format!("unexpected magic {m:#010x}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        dims.push(read_be_u32(&img, 4 + 4 * k, images_path)? as usize);
    }
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let c = if rank == 4 { dims[3] } else { 1 };
    if h == 0 || w == 0 || c == 0 {
        return Err(FateError::MalformedHeader {
            path: images_path.to_path_buf(),
            reason: format!("zero dimension in {dims:?}"),
        });
    }
    let header = 4 + 4 * rank;
    let body = n * h * w * c;
    if img.len() < header + body {
        return Err(FateError::Truncated {
            path: images_path.to_path_buf(),
            expected: header + body,
            found: img.len(),
        });
    }

    let lab = fs::read(labels_path).map_err(|e| FateError::io(labels_path, e))?;
    let lmagic = read_be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABELS {
        return Err(FateError::MalformedHeader {
            path: labels_path.to_path_buf(),
            reason: format!("unexpected magic {lmagic:#010x}"),
        });
    }
    let ln = read_be_u32(&lab, 4, labels_path)? as usize;
    if ln != n {
        return Err(FateError::MalformedHeader {
            path: labels_path.to_path_buf(),
            reason: format!("{ln} labels for {n} images"),
        });
    }
    if lab.len() < 8 + n {
        return Err(FateError::Truncated {
            path: labels_path.to_path_buf(),
            expected: 8 + n,
            found: lab.len(),
        });
    }

    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let stride = h * w * c;
    for i in 0..n {
        let raw = &img[header + i * stride..header + (i + 1) * stride];
        let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Image::new(h, w, c, pixels)?);
        let l = lab[8 + i] as usize;
        if l >= class_names.len() {
            return Err(FateError::LabelOutOfRange {
                label: l as i64,
                classes: class_names.len(),
                index: i,
            });
        }
        labels.push(l);
    }
    Dataset::new(images, labels, class_names)
}

/// Writes images as 8-bit idx (0x803 for one channel, 0x804 otherwise).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let first = ds
        .images
        .first()
        .ok_or_else(|| FateError::Invalid("cannot write an empty dataset".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut img = Vec::new();
    if c == 1 {
        img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    } else {
        img.extend_from_slice(&0x0000_0804u32.to_be_bytes());
    }
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    if c != 1 {
        img.extend_from_slice(&(c as u32).to_be_bytes());
    }
    for im in &ds.images {
        if (im.height, im.width, im.channels) != (h, w, c) {
            return Err(FateError::Shape("images differ in size".into()));
        }
        img.extend(im.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        if l > 255 {
            return Err(FateError::Invalid(format!("label {l} does not fit in a byte")));
        }
        lab.push(l as u8);
    }
    for (path, bytes) in [(images_path, img), (labels_path, lab)] {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| FateError::io(dir, e))?;
            }
        }
        fs::write(path, bytes).map_err(|e| FateError::io(path, e))?;
    }
    Ok(())
}

pub fn load_png_dir(dir: &Path, channels: usize, class_names: Vec<String>) -> Result<Dataset> {
    let csv_path = dir.join("labels.csv");
    let text = fs::read_to_string(&csv_path).map_err(|e| FateError::io(&csv_path, e))?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("filename,label") => {}
        other => {
            return Err(FateError::MalformedHeader {
                path: csv_path,
                reason: format!("expected `filename,label`, found {other:?}"),
            })
        }
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let (file, label) = line.rsplit_once(',').ok_or_else(|| FateError::MalformedHeader {
            path: csv_path.clone(),
            reason: format!("row {} has no label column", i + 1),
        })?;
        let label: i64 = label.trim().parse().map_err(|_| FateError::MalformedHeader {
            path: csv_path.clone(),
            reason: format!("row {} label `{label}` is not an integer", i + 1),
        })?;
        if label < 0 || label as usize >= class_names.len() {
            return Err(FateError::LabelOutOfRange {
                label,
                classes: class_names.len(),
                index: i,
            });
        }
        let path = dir.join("images").join(file.trim());
        let decoded = image::open(&path)?;
        let im = match channels {
            1 => {
                let g = decoded.to_luma8();
                let (w, h) = g.dimensions();
                Image::new(h as usize, w as usize, 1, g.pixels().map(|p| p[0] as f32 / 255.0).collect())?
            }
            3 => {
                let g = decoded.to_rgb8();
                let (w, h) = g.dimensions();
                let px = g.pixels().flat_map(|p| p.0).map(|b| b as f32 / 255.0).collect();
                Image::new(h as usize, w as usize, 3, px)?
            }
            c => return Err(FateError::Invalid(format!("unsupported channel count {c}"))),
        };
        images.push(im);
        labels.push(label as usize);
    }
    Dataset::new(images, labels, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    fn write_raw_idx(dir: &Path, n: usize, h: usize, w: usize, label_of: impl Fn(usize) -> u8) -> (PathBuf, PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&0x803u32.to_be_bytes());
        for d in [n, h, w] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
        img.extend((0..n * h * w).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x801u32.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        lab.extend((0..n).map(label_of));
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_hundred_images() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_raw_idx(dir.path(), 100, 28, 28, |i| (i % 10) as u8);
        let ds = load_idx(&ip, &lp, names(10)).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!((ds.images[0].height, ds.images[0].width), (28, 28));
        assert_eq!(ds.images[0].pixels[1], 1.0 / 255.0);
        assert!(ds.images.iter().all(Image::in_unit_range));
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_raw_idx(dir.path(), 10, 4, 4, |i| (i % 10) as u8);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&ip, &lp, names(10)), Err(FateError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[3] = 0x07;
        fs::write(&ip, &bad).unwrap();
        assert!(matches!(load_idx(&ip, &lp, names(10)), Err(FateError::MalformedHeader { .. })));
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, names(5)),
            Err(FateError::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn idx_roundtrip_through_writer() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(
            vec![
                Image::new(2, 2, 1, vec![0.0, 1.0, 0.2, 0.4]).unwrap(),
                Image::filled(2, 2, 1, 0.6),
            ],
            vec![1, 0],
            names(2),
        )
        .unwrap();
        let (ip, lp) = (dir.path().join("a/i.idx"), dir.path().join("a/l.idx"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, names(2)).unwrap();
        assert_eq!(back.labels, vec![1, 0]);
        assert_eq!(back.images[0].pixels[1], 1.0);
        assert!((back.images[0].pixels[2] - 51.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn png_dir_order_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        for (name, v) in [("b.png", 10u8), ("a.png", 200u8), ("c.png", 0u8)] {
            let img = image::GrayImage::from_pixel(4, 4, image::Luma([v]));
            img.save(dir.path().join("images").join(name)).unwrap();
        }
        fs::write(dir.path().join("labels.csv"), "filename,label\nb.png,1\na.png,0\nc.png,2\n").unwrap();
        let ds = load_png_dir(dir.path(), 1, names(3)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, vec![1, 0, 2]);
        assert_eq!(ds.images[0].pixels[0], 10.0 / 255.0);

        fs::write(dir.path().join("labels.csv"), "filename,label\nb.png,12\n").unwrap();
        let err = load_png_dir(dir.path(), 1, names(10)).unwrap_err();
        assert!(matches!(err, FateError::LabelOutOfRange { label: 12, classes: 10, .. }));
    }
}
