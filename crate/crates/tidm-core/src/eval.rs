//! Automated evaluation metrics for generated batches: probe-based
//! identity agreement, background consistency across a batch, and codec
//! round-trip fidelity.

use crate::codec;
use crate::data::crop_patch;
use crate::error::{Result, TidmError};
use crate::image::ImageTensor;
use crate::numerics::ParamStore;
use crate::probe::{classify_identity, CROP};

/// Aggregate metrics over evaluated batches.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Probe agreement with the prompted identities on the instance batch.
    pub identity_accuracy: f64,
    /// Probe agreement with the prompted identities on the class batch.
    pub class_accuracy: f64,
    /// Mean pairwise L2 over background-mask pixels; lower = more consistent.
    pub background_consistency: f64,
    /// Mean codec round-trip PSNR over the instance batch, in dB.
    pub reconstruction_psnr: f64,
    /// Total number of images evaluated.
    pub samples: usize,
}

/// A batch of images with identity targets: each `(cx, cy, identity)`
/// names a crop center and the identity the probe should find there.
#[derive(Clone, Copy, Debug)]
pub struct LabeledBatch<'a> {
    pub images: &'a [ImageTensor],
    pub targets: &'a [(i32, i32, usize)],
}

/// Fraction of (image, target) crops the probe classifies as prompted.
pub fn identity_accuracy(probe: &ParamStore, batch: &LabeledBatch) -> Result<f64> {
    if batch.images.is_empty() || batch.targets.is_empty() {
        return Err(TidmError::invalid("identity_accuracy: empty batch"));
    }
    let mut correct = 0usize;
    for image in batch.images {
        for &(cx, cy, identity) in batch.targets {
            let crop = crop_patch(image, cx, cy, CROP);
            if classify_identity(probe, &crop)? == identity {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (batch.images.len() * batch.targets.len()) as f64)
}

/// Mean pairwise L2 distance over background-mask pixels across a batch.
/// Each pair contributes the root-mean-square channel difference over the
/// masked pixels; identical images give exactly zero.
pub fn background_consistency(images: &[ImageTensor], mask: &[bool]) -> Result<f64> {
    let first = images
        .first()
        .ok_or_else(|| TidmError::invalid("background_consistency: empty batch"))?;
    let (h, w) = (first.height(), first.width());
    if mask.len() != h * w {
        return Err(TidmError::shape(
            "background_consistency",
            format!("mask has {} entries for a {h}x{w} image", mask.len()),
        ));
    }
    let n_mask = mask.iter().filter(|&&m| m).count();
    if n_mask == 0 {
        return Err(TidmError::invalid(
            "background_consistency: mask selects no pixels",
        ));
    }
    if images.len() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let a = images[i].tensor().data();
            let b = images[j].tensor().data();
            let mut sq = 0.0f64;
            for (p, &keep) in mask.iter().enumerate() {
                if keep {
                    for c in 0..3 {
                        let d = (a[c * h * w + p] - b[c * h * w + p]) as f64;
                        sq += d * d;
                    }
                }
            }
            total += (sq / (3 * n_mask) as f64).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean PSNR between each image and its codec round trip.
pub fn reconstruction_psnr(codec_params: &ParamStore, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(TidmError::invalid("reconstruction_psnr: empty batch"));
    }
    let batch = codec::batch_from_images(images)?;
    let latents = codec::encode(codec_params, &batch)?;
    let decoded = codec::decode_to_images(codec_params, &latents)?;
    let mut total = 0.0f64;
    for (orig, rt) in images.iter().zip(&decoded) {
        total += orig.psnr(rt)?;
    }
    Ok(total / images.len() as f64)
}

/// Evaluate an instance batch and a class batch against a trained probe.
/// Background consistency and the round-trip PSNR are measured on the
/// instance batch; the class batch contributes only `class_accuracy`.
pub fn evaluate(
    probe: &ParamStore,
    codec_params: &ParamStore,
    instance: &LabeledBatch,
    class: &LabeledBatch,
    mask: &[bool],
) -> Result<EvalReport> {
    Ok(EvalReport {
        identity_accuracy: identity_accuracy(probe, instance)?,
        class_accuracy: identity_accuracy(probe, class)?,
        background_consistency: background_consistency(instance.images, mask)?,
        reconstruction_psnr: reconstruction_psnr(codec_params, instance.images)?,
        samples: instance.images.len() + class.images.len(),
    })
}
