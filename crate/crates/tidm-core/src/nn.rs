//! Shared network building blocks: parameter initialization and generic
//! forward helpers used by the codec, the denoiser, and the probe
//! classifier.
//!
//! Parameters live in a flat `ParamStore` under `/`-separated prefixes;
//! forward helpers look them up by name on a bound tape, so the same code
//! runs at f32 (training/inference) and f64 (gradient checks).

use crate::error::{Result, TidmError};
use crate::numerics::tape::{BoundParams, NodeId, Tape};
use crate::numerics::{ParamStore, Real, Rng, Tensor};

/// Group-norm group count: groups of ~8 channels, falling back to fewer
/// groups for narrow layers.
pub fn norm_groups(channels: usize) -> usize {
    for size in [8usize, 4, 2] {
        if channels % size == 0 {
            return channels / size;
        }
    }
    1
}

fn fan_in_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let scale = (1.0 / fan_in as f64).sqrt() as f32;
    let t = rng
        .sample_standard_normal(shape)
        .expect("valid init shape");
    t.scale(scale)
}

pub fn init_conv(
    params: &mut ParamStore,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<()> {
    let w = fan_in_normal(rng, &[out_c, in_c, k, k], in_c * k * k);
    params.insert(format!("{name}/w"), w)?;
    params.insert(format!("{name}/b"), Tensor::zeros(&[out_c]))
}

/// Zero-initialized conv: the layer contributes nothing until trained.
pub fn init_conv_zero(
    params: &mut ParamStore,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> Result<()> {
    params.insert(format!("{name}/w"), Tensor::zeros(&[out_c, in_c, k, k]))?;
    params.insert(format!("{name}/b"), Tensor::zeros(&[out_c]))
}

pub fn init_linear(
    params: &mut ParamStore,
    name: &str,
    out_d: usize,
    in_d: usize,
    rng: &mut Rng,
) -> Result<()> {
    let w = fan_in_normal(rng, &[out_d, in_d], in_d);
    params.insert(format!("{name}/w"), w)?;
    params.insert(format!("{name}/b"), Tensor::zeros(&[out_d]))
}

pub fn init_linear_zero(params: &mut ParamStore, name: &str, out_d: usize, in_d: usize) -> Result<()> {
    params.insert(format!("{name}/w"), Tensor::zeros(&[out_d, in_d]))?;
    params.insert(format!("{name}/b"), Tensor::zeros(&[out_d]))
}

pub fn init_group_norm(params: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    params.insert(format!("{name}/g"), Tensor::full(&[channels], 1.0))?;
    params.insert(format!("{name}/be"), Tensor::zeros(&[channels]))
}

pub fn conv<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let w = bound.id(&format!("{name}/w"))?;
    let b = bound.id(&format!("{name}/b"))?;
    tape.conv2d(x, w, b, stride, pad)
}

pub fn linear<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = bound.id(&format!("{name}/w"))?;
    let b = bound.id(&format!("{name}/b"))?;
    tape.linear(x, w, b)
}

pub fn group_norm<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let g = bound.id(&format!("{name}/g"))?;
    let be = bound.id(&format!("{name}/be"))?;
    let channels = tape.value(x).shape()[1];
    tape.group_norm(x, g, be, norm_groups(channels))
}

/// gn -> silu -> conv, the standard pre-activation stack.
pub fn norm_act_conv<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    gn_name: &str,
    conv_name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let h = group_norm(tape, bound, gn_name, x)?;
    let h = tape.silu(h)?;
    conv(tape, bound, conv_name, h, stride, pad)
}

// ---------------------------------------------------------------------------
// residual block (optional time conditioning)
// ---------------------------------------------------------------------------

pub fn init_res_block(
    params: &mut ParamStore,
    name: &str,
    in_c: usize,
    out_c: usize,
    time_dim: Option<usize>,
    rng: &mut Rng,
) -> Result<()> {
    init_group_norm(params, &format!("{name}/gn0"), in_c)?;
    init_conv(params, &format!("{name}/conv0"), out_c, in_c, 3, rng)?;
    if let Some(td) = time_dim {
        init_linear(params, &format!("{name}/temb"), out_c, td, rng)?;
    }
    init_group_norm(params, &format!("{name}/gn1"), out_c)?;
    init_conv(params, &format!("{name}/conv1"), out_c, out_c, 3, rng)?;
    if in_c != out_c {
        init_conv(params, &format!("{name}/skip"), out_c, in_c, 1, rng)?;
    }
    Ok(())
}

/// x: [n,in_c,h,w]; temb: per-sample time features [n, time_dim].
pub fn res_block<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    temb: Option<NodeId>,
) -> Result<NodeId> {
    let mut h = norm_act_conv(tape, bound, &format!("{name}/gn0"), &format!("{name}/conv0"), x, 1, 1)?;
    if let Some(temb) = temb {
        let ta = tape.silu(temb)?;
        let proj = linear(tape, bound, &format!("{name}/temb"), ta)?;
        h = tape.add_spatial(h, proj)?;
    }
    let h = norm_act_conv(tape, bound, &format!("{name}/gn1"), &format!("{name}/conv1"), h, 1, 1)?;
    let skip = if bound.id(&format!("{name}/skip/w")).is_ok() {
        conv(tape, bound, &format!("{name}/skip"), x, 1, 0)?
    } else {
        x
    };
    tape.add(skip, h)
}

// ---------------------------------------------------------------------------
// cross-attention block
// ---------------------------------------------------------------------------

pub fn init_cross_attn(
    params: &mut ParamStore,
    name: &str,
    channels: usize,
    context_dim: usize,
    rng: &mut Rng,
) -> Result<()> {
    init_group_norm(params, &format!("{name}/gn"), channels)?;
    init_linear(params, &format!("{name}/q"), context_dim, channels, rng)?;
    init_linear(params, &format!("{name}/k"), context_dim, context_dim, rng)?;
    init_linear(params, &format!("{name}/v"), context_dim, context_dim, rng)?;
    // zero-init output projection: the block is an identity until trained
    init_linear_zero(params, &format!("{name}/out"), channels, context_dim)
}

/// Residual cross-attention: spatial queries attend over the text context
/// [n, l, context_dim].
pub fn cross_attn_block<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    context: NodeId,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let xn = group_norm(tape, bound, &format!("{name}/gn"), x)?;
    let tokens = tape.nchw_to_nlc(xn)?;
    let q = linear(tape, bound, &format!("{name}/q"), tokens)?;
    let k = linear(tape, bound, &format!("{name}/k"), context)?;
    let v = linear(tape, bound, &format!("{name}/v"), context)?;
    let att = tape.attention(q, k, v)?;
    let out = linear(tape, bound, &format!("{name}/out"), att)?;
    let spatial = tape.nlc_to_nchw(out, h, w)?;
    tape.add(x, spatial)
}

// ---------------------------------------------------------------------------
// sinusoidal time embedding
// ---------------------------------------------------------------------------

/// Raw sinusoidal features for a batch of timesteps: [n, dim], the first
/// dim/2 entries sine, the rest cosine. t = 0 gives all-zero sines and
/// all-one cosines.
pub fn sinusoidal_time_embedding(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(TidmError::invalid(format!(
            "time embedding dim must be even and >= 2, got {dim}"
        )));
    }
    if timesteps.is_empty() {
        return Err(TidmError::invalid("time embedding: empty timestep batch"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10000.0f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000.0f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).cos() as f32);
        }
    }
    Tensor::from_vec(vec![timesteps.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_at_zero() {
        let e = sinusoidal_time_embedding(&[0], 8).unwrap();
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
    }

    #[test]
    fn time_embedding_odd_dim_rejected() {
        assert!(sinusoidal_time_embedding(&[0], 3).is_err());
        assert!(sinusoidal_time_embedding(&[0], 0).is_err());
    }

    #[test]
    fn time_embedding_no_collisions_over_training_range() {
        let dim = 16;
        let mut seen = std::collections::HashSet::new();
        for t in 0..1000 {
            let e = sinusoidal_time_embedding(&[t], dim).unwrap();
            let key: Vec<u32> = e.data().iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "collision at t = {t}");
        }
    }

    #[test]
    fn norm_groups_divides_channels() {
        for c in [1usize, 2, 3, 4, 6, 8, 16, 32, 64, 128] {
            let g = norm_groups(c);
            assert_eq!(c % g, 0, "c = {c}, groups = {g}");
        }
    }

    #[test]
    fn zero_init_conv_outputs_zero() {
        let mut params = ParamStore::new();
        init_conv_zero(&mut params, "z", 2, 3, 1).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let bound = crate::numerics::bind_params(&mut tape, &params);
        let x = tape.leaf(Tensor::full(&[1, 3, 2, 2], 1.5));
        let out = conv(&mut tape, &bound, "z", x, 1, 0).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }
}
