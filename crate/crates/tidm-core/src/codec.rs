//! Convolutional autoencoder: encoder E and decoder D between 24x24 RGB
//! images and a 4-channel latent at 1/4 spatial resolution.
//!
//! Deterministic (no sampling head); trained with pixel MSE only. After
//! training, a single stored scaling constant (`codec/latent_scale`)
//! normalizes latent magnitudes so unit-variance diffusion noise is
//! commensurate with the signal.

use crate::error::{Result, TidmError};
use crate::image::ImageTensor;
use crate::nn;
use crate::numerics::tape::{BoundParams, NodeId, Tape};
use crate::numerics::{bind_params, Adam, ParamStore, Real, Rng, Tensor};

pub const LATENT_CHANNELS: usize = 4;
/// Spatial downsampling factor between image and latent.
pub const DOWN_FACTOR: usize = 4;
pub const LATENT_SCALE: &str = "codec/latent_scale";

const BASE: usize = 16;

/// Fresh codec parameters under the `codec/` prefix.
pub fn init_codec_params(rng: &mut Rng) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    let wide = BASE * 2;
    // encoder: conv in, res, two strided downs with res blocks, out conv
    nn::init_conv(&mut p, "codec/enc/in", BASE, 3, 3, rng)?;
    nn::init_res_block(&mut p, "codec/enc/res0", BASE, BASE, None, rng)?;
    nn::init_conv(&mut p, "codec/enc/down0", wide, BASE, 3, rng)?;
    nn::init_res_block(&mut p, "codec/enc/res1", wide, wide, None, rng)?;
    nn::init_conv(&mut p, "codec/enc/down1", wide, wide, 3, rng)?;
    nn::init_res_block(&mut p, "codec/enc/res2", wide, wide, None, rng)?;
    nn::init_group_norm(&mut p, "codec/enc/gn_out", wide)?;
    nn::init_conv(&mut p, "codec/enc/out", LATENT_CHANNELS, wide, 3, rng)?;
    // decoder mirrors with nearest-neighbor upsampling
    nn::init_conv(&mut p, "codec/dec/in", wide, LATENT_CHANNELS, 3, rng)?;
    nn::init_res_block(&mut p, "codec/dec/res0", wide, wide, None, rng)?;
    nn::init_conv(&mut p, "codec/dec/up0", wide, wide, 3, rng)?;
    nn::init_res_block(&mut p, "codec/dec/res1", wide, wide, None, rng)?;
    nn::init_conv(&mut p, "codec/dec/up1", BASE, wide, 3, rng)?;
    nn::init_res_block(&mut p, "codec/dec/res2", BASE, BASE, None, rng)?;
    nn::init_group_norm(&mut p, "codec/dec/gn_out", BASE)?;
    nn::init_conv(&mut p, "codec/dec/out", 3, BASE, 3, rng)?;
    p.insert(LATENT_SCALE.to_string(), Tensor::full(&[1], 1.0))?;
    Ok(p)
}

/// Encoder graph on raw (unscaled) latents: [n,3,h,w] -> [n,4,h/4,w/4].
pub fn encode_graph<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(TidmError::shape(
            "encode",
            format!("expected [n,3,h,w], got {shape:?}"),
        ));
    }
    if shape[2] % DOWN_FACTOR != 0 || shape[3] % DOWN_FACTOR != 0 {
        return Err(TidmError::shape(
            "encode",
            format!(
                "image dims {}x{} not divisible by {DOWN_FACTOR}",
                shape[2], shape[3]
            ),
        ));
    }
    let h = nn::conv(tape, bound, "codec/enc/in", x, 1, 1)?;
    let h = nn::res_block(tape, bound, "codec/enc/res0", h, None)?;
    let h = nn::conv(tape, bound, "codec/enc/down0", h, 2, 1)?;
    let h = nn::res_block(tape, bound, "codec/enc/res1", h, None)?;
    let h = nn::conv(tape, bound, "codec/enc/down1", h, 2, 1)?;
    let h = nn::res_block(tape, bound, "codec/enc/res2", h, None)?;
    nn::norm_act_conv(tape, bound, "codec/enc/gn_out", "codec/enc/out", h, 1, 1)
}

/// Decoder graph: [n,4,h,w] -> [n,3,4h,4w] (unclamped).
pub fn decode_graph<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, z: NodeId) -> Result<NodeId> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 4 || shape[1] != LATENT_CHANNELS {
        return Err(TidmError::shape(
            "decode",
            format!("expected [n,{LATENT_CHANNELS},h,w], got {shape:?}"),
        ));
    }
    let h = nn::conv(tape, bound, "codec/dec/in", z, 1, 1)?;
    let h = nn::res_block(tape, bound, "codec/dec/res0", h, None)?;
    let h = tape.upsample_nearest(h, 2)?;
    let h = nn::conv(tape, bound, "codec/dec/up0", h, 1, 1)?;
    let h = nn::res_block(tape, bound, "codec/dec/res1", h, None)?;
    let h = tape.upsample_nearest(h, 2)?;
    let h = nn::conv(tape, bound, "codec/dec/up1", h, 1, 1)?;
    let h = nn::res_block(tape, bound, "codec/dec/res2", h, None)?;
    nn::norm_act_conv(tape, bound, "codec/dec/gn_out", "codec/dec/out", h, 1, 1)
}

fn latent_scale(params: &ParamStore) -> Result<f32> {
    Ok(params.get(LATENT_SCALE)?.data()[0])
}

/// Batched encode with the stored latent scaling applied.
pub fn encode(params: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let s = latent_scale(params)?;
    let mut tape: Tape<f32> = Tape::inference();
    let bound = bind_params(&mut tape, params);
    let x = tape.leaf(images.clone());
    let z = encode_graph(&mut tape, &bound, x)?;
    Ok(tape.value(z).scale(s))
}

/// Encode a single image to its latent [4, h/4, w/4].
pub fn encode_image(params: &ParamStore, image: &ImageTensor) -> Result<Tensor> {
    let t = image.tensor();
    let batch = t.reshape(&[1, 3, image.height(), image.width()])?;
    let z = encode(params, &batch)?;
    let s = z.shape().to_vec();
    z.reshape(&[s[1], s[2], s[3]])
}

/// Batched decode (inverts the latent scaling); output clamped to [-1,1].
pub fn decode(params: &ParamStore, latents: &Tensor) -> Result<Tensor> {
    let s = latent_scale(params)?;
    if s == 0.0 {
        return Err(TidmError::invalid("latent scale is zero"));
    }
    let mut tape: Tape<f32> = Tape::inference();
    let bound = bind_params(&mut tape, params);
    let z = tape.leaf(latents.scale(1.0 / s));
    let x = decode_graph(&mut tape, &bound, z)?;
    Ok(tape.value(x).clamp_values(-1.0, 1.0))
}

/// Decode a batch of latents into images.
pub fn decode_to_images(params: &ParamStore, latents: &Tensor) -> Result<Vec<ImageTensor>> {
    let x = decode(params, latents)?;
    let s = x.shape().to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    let per = 3 * h * w;
    (0..n)
        .map(|i| {
            let data = x.data()[i * per..(i + 1) * per].to_vec();
            ImageTensor::new(Tensor::from_vec(vec![3, h, w], data)?)
        })
        .collect()
}

/// Stack images into a [n,3,h,w] batch tensor.
pub fn batch_from_images(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| TidmError::invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(TidmError::shape("batch", "mixed image sizes"));
        }
        data.extend_from_slice(img.tensor().data());
    }
    Tensor::from_vec(vec![images.len(), 3, h, w], data)
}

#[derive(Clone, Debug)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CodecMetrics {
    /// Mean reconstruction MSE per epoch.
    pub epoch_mse: Vec<f32>,
    pub final_mse: f32,
}

/// Train the autoencoder on pixel MSE and calibrate the latent scale.
pub fn train_codec(images: &[ImageTensor], config: &CodecTrainConfig) -> Result<(ParamStore, CodecMetrics)> {
    if images.is_empty() {
        return Err(TidmError::invalid("train_codec: empty dataset"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(TidmError::invalid("train_codec: epochs and batch_size must be >= 1"));
    }
    let mut rng = Rng::new(config.seed);
    let mut params = init_codec_params(&mut rng)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0u64;
    for _epoch in 0..config.epochs {
        // Fisher-Yates with the corpus rng keeps runs reproducible
        for i in (1..order.len()).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ImageTensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let x = batch_from_images(&batch)?;
            let mut tape: Tape<f32> = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let xn = tape.leaf(x);
            let z = encode_graph(&mut tape, &bound, xn)?;
            let xr = decode_graph(&mut tape, &bound, z)?;
            let loss = tape.mse_loss(xr, xn)?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(TidmError::Diverged { step });
            }
            let grads = crate::numerics::backpropagate(&mut tape, loss, &bound)?;
            adam.step(&mut params, &grads)?;
            epoch_loss += loss_val as f64;
            batches += 1;
            step += 1;
        }
        epoch_mse.push((epoch_loss / batches as f64) as f32);
    }
    calibrate_latent_scale(&mut params, images)?;
    let final_mse = *epoch_mse.last().unwrap();
    Ok((params, CodecMetrics { epoch_mse, final_mse }))
}

/// Set `codec/latent_scale` to the inverse mean per-channel std of raw
/// encoder outputs over the corpus, so scaled latents have std near 1.
pub fn calibrate_latent_scale(params: &mut ParamStore, images: &[ImageTensor]) -> Result<f32> {
    if images.is_empty() {
        return Err(TidmError::invalid("calibrate_latent_scale: empty corpus"));
    }
    params.set(LATENT_SCALE, Tensor::full(&[1], 1.0))?;
    let x = batch_from_images(images)?;
    let z = encode(params, &x)?;
    let s = z.shape().to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut mean_std = 0.0f64;
    for ch in 0..c {
        let mut vals = Vec::with_capacity(n * hw);
        for i in 0..n {
            let off = (i * c + ch) * hw;
            vals.extend_from_slice(&z.data()[off..off + hw]);
        }
        let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let var: f64 = vals
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / vals.len() as f64;
        mean_std += var.sqrt() / c as f64;
    }
    let scale = if mean_std > 1e-6 { 1.0 / mean_std } else { 1.0 };
    params.set(LATENT_SCALE, Tensor::full(&[1], scale as f32))?;
    Ok(scale as f32)
}

/// Fixed-codec oracle: stride-4 downsample then nearest upsample. Used as
/// the reconstruction baseline the trained codec must beat.
pub fn identity_baseline_mse(images: &[ImageTensor]) -> Result<f32> {
    let x = batch_from_images(images)?;
    let mut tape: Tape<f32> = Tape::inference();
    let xn = tape.leaf(x.clone());
    let down = tape.downsample_stride(xn, DOWN_FACTOR)?;
    let up = tape.upsample_nearest(down, DOWN_FACTOR)?;
    tape.value(up).mse(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, render_solo};

    fn small_corpus(n: usize) -> Vec<ImageTensor> {
        let d = make_dataset(n, 4, 2, 3).unwrap();
        d.scenes.into_iter().map(|s| s.image).collect()
    }

    #[test]
    fn encode_decode_shapes() {
        let mut rng = Rng::new(1);
        let params = init_codec_params(&mut rng).unwrap();
        let imgs = small_corpus(2);
        let x = batch_from_images(&imgs).unwrap();
        let z = encode(&params, &x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 6, 6]);
        let xr = decode(&params, &z).unwrap();
        assert_eq!(xr.shape(), x.shape());
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut rng = Rng::new(1);
        let params = init_codec_params(&mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 25, 25]);
        assert!(encode(&params, &x).is_err());
        let bad_latent = Tensor::zeros(&[1, 3, 6, 6]); // wrong channel count
        assert!(decode(&params, &bad_latent).is_err());
    }

    #[test]
    fn zero_latent_decodes_deterministically() {
        let mut rng = Rng::new(4);
        let params = init_codec_params(&mut rng).unwrap();
        let z = Tensor::zeros(&[1, 4, 6, 6]);
        let a = decode(&params, &z).unwrap();
        let b = decode(&params, &z).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn single_image_memorization() {
        let (img, _) = render_solo(0, 0, (0, 0)).unwrap();
        let config = CodecTrainConfig {
            epochs: 300,
            batch_size: 1,
            learning_rate: 3e-3,
            seed: 2,
        };
        let (_, metrics) = train_codec(&[img], &config).unwrap();
        assert!(
            metrics.final_mse < 0.01,
            "memorization failed: mse {}",
            metrics.final_mse
        );
    }

    #[test]
    fn zero_learning_rate_freezes_loss() {
        let imgs = small_corpus(4);
        let config = CodecTrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            seed: 5,
        };
        let (_, metrics) = train_codec(&imgs, &config).unwrap();
        for window in metrics.epoch_mse.windows(2) {
            assert!((window[0] - window[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let imgs = small_corpus(8);
        let config = CodecTrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 11,
        };
        let (pa, ma) = train_codec(&imgs, &config).unwrap();
        let (pb, mb) = train_codec(&imgs, &config).unwrap();
        assert_eq!(ma.final_mse, mb.final_mse);
        assert_eq!(pa.checksum(), pb.checksum());
    }

    #[test]
    fn latent_scale_normalizes_std() {
        let imgs = small_corpus(12);
        let config = CodecTrainConfig {
            epochs: 3,
            batch_size: 6,
            learning_rate: 1e-3,
            seed: 13,
        };
        let (params, _) = train_codec(&imgs, &config).unwrap();
        let x = batch_from_images(&imgs).unwrap();
        let z = encode(&params, &x).unwrap();
        let s = z.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        for ch in 0..c {
            let mut vals = Vec::new();
            for i in 0..n {
                let off = (i * c + ch) * hw;
                vals.extend_from_slice(&z.data()[off..off + hw]);
            }
            let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            let var: f32 =
                vals.iter().map(|&v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            let std = var.sqrt();
            assert!(
                (0.5..=2.0).contains(&std),
                "channel {ch} latent std {std} outside [0.5, 2.0]"
            );
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(train_codec(&[], &CodecTrainConfig::default()).is_err());
    }
}
