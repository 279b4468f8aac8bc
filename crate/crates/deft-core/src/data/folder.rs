//! Folder ingestion and the matching writer. Convention: `images/` and
//! `masks/` with matching file stems, 8-bit PNG. A missing mask skips the
//! sample and shows up in the ingest report; a file that exists but cannot
//! be decoded is a hard error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestEntry {
    pub stem: String,
    pub status: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub entries: Vec<IngestEntry>,
}

impl IngestReport {
    /// One JSON object per line, in ingestion order.
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("ingest entries always serialize"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().filter(|e| e.status != "ok").count()
    }
}

/// Loads every `images_dir/*.png` with a matching `masks_dir/<stem>.png`.
/// Files are visited in lexicographic stem order so ingestion is
/// deterministic across platforms.
pub fn load_folder<T: Element>(
    images_dir: &Path,
    masks_dir: &Path,
) -> Result<(Vec<Sample<T>>, IngestReport)> {
    let mut stems: Vec<String> = Vec::new();
    for entry in fs::read_dir(images_dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();

    let mut samples = Vec::new();
    let mut report = IngestReport::default();
    for stem in stems {
        let image_path = images_dir.join(format!("{stem}.png"));
        let mask_path = masks_dir.join(format!("{stem}.png"));
        if !mask_path.exists() {
            report.entries.push(IngestEntry { stem, status: "missing_mask".into() });
            continue;
        }
        let image = decode_image(&image_path)?;
        let mask = decode_mask(&mask_path)?;
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(Error::shape(format!(
                "{stem}: image {:?} and mask {:?} disagree",
                image.shape(),
                mask.shape()
            )));
        }
        samples.push(Sample { image, mask, id: stem.clone() });
        report.entries.push(IngestEntry { stem, status: "ok".into() });
    }
    Ok((samples, report))
}

fn decode_image<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("unreadable image {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    // Interleaved RGB rows to planar [3,H,W].
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::from_f64(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn decode_mask<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::format(format!("unreadable mask {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<T> = img
        .into_raw()
        .into_iter()
        .map(|v| if v >= 128 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Writes `dir/images/<id>.png` and `dir/masks/<id>.png`, quantizing the
/// image to 8 bits and the mask to {0,255}. The PNG encoder is
/// deterministic, so equal samples produce byte-identical files.
pub fn save_dataset<T: Element>(samples: &[Sample<T>], dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;
    for s in samples {
        let (h, w) = s.hw()?;
        let plane = h * w;
        let mut rgb = vec![0u8; 3 * plane];
        let data = s.image.data();
        for i in 0..plane {
            for c in 0..3 {
                rgb[i * 3 + c] = quantize(data[c * plane + i]);
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("buffer length matches dimensions");
        img.save(images_dir.join(format!("{}.png", s.id)))
            .map_err(|e| Error::format(format!("cannot write image {}: {e}", s.id)))?;

        let gray: Vec<u8> = s
            .mask
            .data()
            .iter()
            .map(|&v| if v.as_f64() >= 0.5 { 255 } else { 0 })
            .collect();
        let msk = image::GrayImage::from_raw(w as u32, h as u32, gray)
            .expect("buffer length matches dimensions");
        msk.save(masks_dir.join(format!("{}.png", s.id)))
            .map_err(|e| Error::format(format!("cannot write mask {}: {e}", s.id)))?;
    }
    Ok(())
}

fn quantize<T: Element>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}
