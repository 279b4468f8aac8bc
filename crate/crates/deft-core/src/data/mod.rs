//! Data supply: seeded synthetic defect images, folder ingestion, and the
//! resize/crop pipeline. Images are [3,H,W] in [0,1]; masks are [1,H,W] and
//! strictly binary at every stage (nearest-neighbor resampling keeps them so).

mod folder;
mod synth;

pub use folder::{load_folder, save_dataset, IngestEntry, IngestReport};
pub use synth::{synth_generate, DefectKinds, SynthSpec};

use rand::Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels::interp::{bilinear_resize_forward, nearest_resize};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sample<T: Element> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub id: String,
}

impl<T: Element> Sample<T> {
    /// Spatial size, asserting image/mask agreement.
    pub fn hw(&self) -> Result<(usize, usize)> {
        let is = self.image.shape();
        let ms = self.mask.shape();
        if is.len() != 3 || is[0] != 3 {
            return Err(Error::shape(format!("image must be [3,H,W], got {is:?}")));
        }
        if ms.len() != 3 || ms[0] != 1 || ms[1] != is[1] || ms[2] != is[2] {
            return Err(Error::shape(format!(
                "mask {ms:?} does not align with image {is:?}"
            )));
        }
        Ok((is[1], is[2]))
    }

    pub fn cast<U: Element>(&self) -> Sample<U> {
        Sample {
            image: self.image.cast(),
            mask: self.mask.cast(),
            id: self.id.clone(),
        }
    }
}

fn resize_sample<T: Element>(s: &Sample<T>, size: usize) -> Result<Sample<T>> {
    let (h, w) = s.hw()?;
    if size == 0 {
        return Err(Error::usage("resize target must be positive"));
    }
    let image = if (h, w) == (size, size) {
        s.image.clone()
    } else {
        Tensor::new(
            &[3, size, size],
            bilinear_resize_forward(s.image.data(), 3, h, w, size, size),
        )?
    };
    let mask = if (h, w) == (size, size) {
        s.mask.clone()
    } else {
        Tensor::new(
            &[1, size, size],
            nearest_resize(s.mask.data(), 1, h, w, size, size),
        )?
    };
    Ok(Sample { image, mask, id: s.id.clone() })
}

/// Training-time transform: resize to `resize_to`, then take a random
/// `crop_to`-square crop at an rng-chosen offset, the same offset for image
/// and mask. Equal sizes force the offset to (0,0).
pub fn augment_train<T: Element, R: Rng>(
    s: &Sample<T>,
    rng: &mut R,
    resize_to: usize,
    crop_to: usize,
) -> Result<Sample<T>> {
    if crop_to > resize_to {
        return Err(Error::usage(format!(
            "crop size {crop_to} exceeds resize size {resize_to}"
        )));
    }
    let resized = resize_sample(s, resize_to)?;
    let span = resize_to - crop_to;
    let oy = if span == 0 { 0 } else { rng.random_range(0..=span) };
    let ox = if span == 0 { 0 } else { rng.random_range(0..=span) };
    let crop = |src: &Tensor<T>, planes: usize| -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(planes * crop_to * crop_to);
        for p in 0..planes {
            let plane = &src.data()[p * resize_to * resize_to..][..resize_to * resize_to];
            for y in 0..crop_to {
                let row = (oy + y) * resize_to + ox;
                out.extend_from_slice(&plane[row..row + crop_to]);
            }
        }
        Tensor::new(&[planes, crop_to, crop_to], out)
    };
    Ok(Sample {
        image: crop(&resized.image, 3)?,
        mask: crop(&resized.mask, 1)?,
        id: s.id.clone(),
    })
}

/// Inference-time transform: deterministic resize to `size`, no crop.
pub fn prepare_eval<T: Element>(s: &Sample<T>, size: usize) -> Result<Sample<T>> {
    resize_sample(s, size)
}

/// Stacks samples into [N,3,S,S] / [N,1,S,S] batch tensors. All samples must
/// share one spatial size.
pub fn stack_batch<T: Element>(samples: &[Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    if samples.is_empty() {
        return Err(Error::usage("cannot stack an empty batch"));
    }
    let (h, w) = samples[0].hw()?;
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    for s in samples {
        if s.hw()? != (h, w) {
            return Err(Error::shape(format!(
                "sample {} has size {:?}, batch expects {:?}",
                s.id,
                s.hw()?,
                (h, w)
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::new(&[n, 3, h, w], images)?,
        Tensor::new(&[n, 1, h, w], masks)?,
    ))
}
