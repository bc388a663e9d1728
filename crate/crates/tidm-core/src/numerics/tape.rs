//! Define-by-run gradient tape.
//!
//! A tape is rebuilt for every training step. Forward ops record a backward
//! closure; `backward` walks the nodes in reverse, accumulating gradients in
//! a fixed order. Tensors on the tape are never mutated in place.

use crate::error::{Result, TidmError};
use crate::numerics::kernels as k;
use crate::numerics::params::ParamStore;
use crate::numerics::real::Real;
use crate::numerics::tensor::GTensor;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

type BackwardFn<T> = Box<dyn Fn(&GTensor<T>) -> Vec<(NodeId, GTensor<T>)>>;

struct Node<T> {
    value: GTensor<T>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients<T> {
    grads: Vec<Option<GTensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a node; zeros if the node did not influence the loss.
    pub fn get(&self, id: NodeId, tape: &Tape<T>) -> GTensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => GTensor::zeros(tape.value(id).shape()),
        }
    }

    pub fn get_opt(&self, id: NodeId) -> Option<&GTensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only tape: values are computed but no backward closures are
    /// kept. Used by the sampler.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &GTensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: GTensor<T>) -> NodeId {
        self.push(value, None)
    }

    fn push(&mut self, value: GTensor<T>, backward: Option<BackwardFn<T>>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            backward: if self.recording { backward } else { None },
        });
        id
    }

    fn checked(
        &mut self,
        op: &'static str,
        value: GTensor<T>,
        backward: Option<BackwardFn<T>>,
    ) -> Result<NodeId> {
        value.check_finite(op)?;
        Ok(self.push(value, backward))
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.checked(
            "add",
            v,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.checked(
            "sub",
            v,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.scale(-T::one()))]
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let v = va.mul(&vb)?;
        self.checked(
            "mul",
            v,
            Some(Box::new(move |g| {
                vec![
                    (a, g.mul(&vb).expect("mul backward")),
                    (b, g.mul(&va).expect("mul backward")),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.checked("scale", v, Some(Box::new(move |g| vec![(a, g.scale(c))])))
    }

    /// a + c*b.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).add_scaled(self.value(b), c)?;
        self.checked(
            "add_scaled",
            v,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.scale(c))])),
        )
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a).clone();
        let v = va.map(|x| {
            let s = T::one() / (T::one() + (-x).exp());
            x * s
        });
        self.checked(
            "silu",
            v,
            Some(Box::new(move |g| {
                let dg = va.map(|x| {
                    let s = T::one() / (T::one() + (-x).exp());
                    s * (T::one() + x * (T::one() - s))
                });
                vec![(a, g.mul(&dg).expect("silu backward"))]
            })),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let orig = self.value(a).shape().to_vec();
        let v = self.value(a).reshape(shape)?;
        self.checked(
            "reshape",
            v,
            Some(Box::new(move |g| {
                vec![(a, g.reshape(&orig).expect("reshape backward"))]
            })),
        )
    }

    /// Per-sample scaling by fixed (non-differentiated) factors over the
    /// leading dimension. Used to drop the anchor injection for a subset of
    /// a batch.
    pub fn scale_per_sample(&mut self, a: NodeId, factors: &[T]) -> Result<NodeId> {
        let va = self.value(a);
        let n = va.shape()[0];
        if factors.len() != n {
            return Err(TidmError::shape(
                "scale_per_sample",
                format!("{} factors for leading dim {n}", factors.len()),
            ));
        }
        let per = va.numel() / n;
        let apply = {
            let factors = factors.to_vec();
            move |src: &GTensor<T>| {
                let mut out = src.data().to_vec();
                for (i, chunk) in out.chunks_mut(per).enumerate() {
                    for v in chunk.iter_mut() {
                        *v = *v * factors[i];
                    }
                }
                GTensor::from_vec_unchecked(src.shape().to_vec(), out)
            }
        };
        let v = apply(va);
        self.checked(
            "scale_per_sample",
            v,
            Some(Box::new(move |g| vec![(a, apply(g))])),
        )
    }

    // -- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let v = GTensor::scalar(self.value(a).sum());
        self.checked(
            "sum",
            v,
            Some(Box::new(move |g| {
                let gs = g.data()[0];
                vec![(a, GTensor::full(&shape, gs))]
            })),
        )
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let inv = T::from_f64(1.0 / self.value(a).numel() as f64);
        let v = GTensor::scalar(self.value(a).mean());
        self.checked(
            "mean",
            v,
            Some(Box::new(move |g| {
                let gs = g.data()[0] * inv;
                vec![(a, GTensor::full(&shape, gs))]
            })),
        )
    }

    /// Mean squared error between two same-shape nodes; scalar output.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let v = GTensor::scalar(va.mse(&vb)?);
        let inv = T::from_f64(2.0 / va.numel() as f64);
        self.checked(
            "mse",
            v,
            Some(Box::new(move |g| {
                let gs = g.data()[0] * inv;
                let diff = va.sub(&vb).expect("mse backward");
                vec![(a, diff.scale(gs)), (b, diff.scale(-gs))]
            })),
        )
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits).clone();
        if vl.shape().len() != 2 {
            return Err(TidmError::shape(
                "softmax_cross_entropy",
                format!("expected [n, k] logits, got {:?}", vl.shape()),
            ));
        }
        let (n, kk) = (vl.shape()[0], vl.shape()[1]);
        if labels.len() != n {
            return Err(TidmError::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= kk) {
            return Err(TidmError::invalid(format!(
                "softmax_cross_entropy: label {bad} out of range for {kk} classes"
            )));
        }
        let (loss, probs) = k::softmax_cross_entropy_forward(vl.data(), labels, n, kk);
        let labels = labels.to_vec();
        let shape = vl.shape().to_vec();
        self.checked(
            "softmax_cross_entropy",
            GTensor::scalar(loss),
            Some(Box::new(move |g| {
                let gl = k::softmax_cross_entropy_backward(g.data()[0], &probs, &labels, n, kk);
                vec![(logits, GTensor::from_vec_unchecked(shape.clone(), gl))]
            })),
        )
    }

    // -- structured ops ---------------------------------------------------

    fn dims4(&self, id: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 4 {
            return Err(TidmError::shape(op, format!("expected [n,c,h,w], got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// x: [n,c,h,w], weight: [o,c,kh,kw], bias: [o].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xd = self.dims4(x, "conv2d")?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 4 || ws[1] != xd.1 {
            return Err(TidmError::shape(
                "conv2d",
                format!("weight {ws:?} incompatible with input channels {}", xd.1),
            ));
        }
        let wd = (ws[0], ws[2], ws[3]);
        if self.value(bias).shape() != [ws[0]] {
            return Err(TidmError::shape(
                "conv2d",
                format!("bias {:?} vs {} output channels", self.value(bias).shape(), ws[0]),
            ));
        }
        if xd.2 + 2 * pad < ws[2] || xd.3 + 2 * pad < ws[3] {
            return Err(TidmError::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", ws[2], ws[3], xd.2, xd.3),
            ));
        }
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();
        let (ho, wo) = k::conv2d_out_dims(xd.2, xd.3, wd.1, wd.2, stride, pad);
        let out = k::conv2d_forward(vx.data(), xd, vw.data(), wd, vb.data(), stride, pad);
        let out = GTensor::from_vec_unchecked(vec![xd.0, wd.0, ho, wo], out);
        self.checked(
            "conv2d",
            out,
            Some(Box::new(move |g| {
                let gx = k::conv2d_backward_input(g.data(), xd, vw.data(), wd, stride, pad);
                let (gw, gb) = k::conv2d_backward_weight(g.data(), vx.data(), xd, wd, stride, pad);
                vec![
                    (x, GTensor::from_vec_unchecked(vec![xd.0, xd.1, xd.2, xd.3], gx)),
                    (weight, GTensor::from_vec_unchecked(vec![wd.0, xd.1, wd.1, wd.2], gw)),
                    (bias, GTensor::from_vec_unchecked(vec![wd.0], gb)),
                ]
            })),
        )
    }

    /// Affine map over the last dimension. x: [.., d_in], w: [d_out, d_in],
    /// b: [d_out].
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let d_in = *xs.last().expect("nonempty shape");
        if ws.len() != 2 || ws[1] != d_in {
            return Err(TidmError::shape(
                "linear",
                format!("weight {ws:?} incompatible with input {xs:?}"),
            ));
        }
        let d_out = ws[0];
        if self.value(bias).shape() != [d_out] {
            return Err(TidmError::shape(
                "linear",
                format!("bias {:?} vs {d_out} outputs", self.value(bias).shape()),
            ));
        }
        let rows = self.value(x).numel() / d_in;
        let vx = self.value(x).clone();
        let vw = self.value(weight).clone();
        let vb = self.value(bias).clone();
        let out = k::linear_forward(vx.data(), rows, d_in, vw.data(), d_out, vb.data());
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let out = GTensor::from_vec_unchecked(out_shape, out);
        self.checked(
            "linear",
            out,
            Some(Box::new(move |g| {
                let (gx, gw, gb) =
                    k::linear_backward(g.data(), vx.data(), rows, d_in, vw.data(), d_out);
                vec![
                    (x, GTensor::from_vec_unchecked(xs.clone(), gx)),
                    (weight, GTensor::from_vec_unchecked(vec![d_out, d_in], gw)),
                    (bias, GTensor::from_vec_unchecked(vec![d_out], gb)),
                ]
            })),
        )
    }

    /// x: [n,c,h,w]; gamma, beta: [c]. Zero-variance groups normalize to
    /// zero before the affine shift (epsilon keeps the division finite).
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let xd = self.dims4(x, "group_norm")?;
        if groups == 0 || xd.1 % groups != 0 {
            return Err(TidmError::shape(
                "group_norm",
                format!("{} channels not divisible into {groups} groups", xd.1),
            ));
        }
        if self.value(gamma).shape() != [xd.1] || self.value(beta).shape() != [xd.1] {
            return Err(TidmError::shape(
                "group_norm",
                format!("gamma/beta must be [{}]", xd.1),
            ));
        }
        let vx = self.value(x).clone();
        let vg = self.value(gamma).clone();
        let (out, inv_std, means) = k::group_norm_forward(vx.data(), xd, groups, vg.data(), self.value(beta).data());
        let out = GTensor::from_vec_unchecked(vx.shape().to_vec(), out);
        self.checked(
            "group_norm",
            out,
            Some(Box::new(move |g| {
                let (gx, ggamma, gbeta) = k::group_norm_backward(
                    g.data(),
                    vx.data(),
                    xd,
                    groups,
                    vg.data(),
                    &inv_std,
                    &means,
                );
                vec![
                    (x, GTensor::from_vec_unchecked(vx.shape().to_vec(), gx)),
                    (gamma, GTensor::from_vec_unchecked(vec![xd.1], ggamma)),
                    (beta, GTensor::from_vec_unchecked(vec![xd.1], gbeta)),
                ]
            })),
        )
    }

    /// Scaled-dot-product attention. q: [n,lq,d], k: [n,lk,d], v: [n,lk,dv].
    pub fn attention(&mut self, q: NodeId, key: NodeId, v: NodeId) -> Result<NodeId> {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(key).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(TidmError::shape(
                "attention",
                format!("expected rank-3 q/k/v, got {qs:?} {ks:?} {vs:?}"),
            ));
        }
        if qs[0] != ks[0] || qs[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
            return Err(TidmError::shape(
                "attention",
                format!("incompatible q {qs:?}, k {ks:?}, v {vs:?}"),
            ));
        }
        let dims = (qs[0], qs[1], ks[1], qs[2], vs[2]);
        let vq = self.value(q).clone();
        let vk = self.value(key).clone();
        let vv = self.value(v).clone();
        let (out, attn) = k::attention_forward(vq.data(), vk.data(), vv.data(), dims);
        let out = GTensor::from_vec_unchecked(vec![dims.0, dims.1, dims.4], out);
        self.checked(
            "attention",
            out,
            Some(Box::new(move |g| {
                let (gq, gk, gv) =
                    k::attention_backward(g.data(), vq.data(), vk.data(), vv.data(), &attn, dims);
                vec![
                    (q, GTensor::from_vec_unchecked(vec![dims.0, dims.1, dims.3], gq)),
                    (key, GTensor::from_vec_unchecked(vec![dims.0, dims.2, dims.3], gk)),
                    (v, GTensor::from_vec_unchecked(vec![dims.0, dims.2, dims.4], gv)),
                ]
            })),
        )
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xd = self.dims4(x, "upsample_nearest")?;
        if factor == 0 {
            return Err(TidmError::invalid("upsample_nearest: factor must be >= 1"));
        }
        let out = k::upsample_nearest_forward(self.value(x).data(), xd, factor);
        let out = GTensor::from_vec_unchecked(vec![xd.0, xd.1, xd.2 * factor, xd.3 * factor], out);
        self.checked(
            "upsample_nearest",
            out,
            Some(Box::new(move |g| {
                let gx = k::upsample_nearest_backward(g.data(), xd, factor);
                vec![(x, GTensor::from_vec_unchecked(vec![xd.0, xd.1, xd.2, xd.3], gx))]
            })),
        )
    }

    pub fn downsample_stride(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xd = self.dims4(x, "downsample_stride")?;
        if factor == 0 || xd.2 % factor != 0 || xd.3 % factor != 0 {
            return Err(TidmError::shape(
                "downsample_stride",
                format!("spatial dims {}x{} not divisible by {factor}", xd.2, xd.3),
            ));
        }
        let out = k::downsample_stride_forward(self.value(x).data(), xd, factor);
        let out = GTensor::from_vec_unchecked(vec![xd.0, xd.1, xd.2 / factor, xd.3 / factor], out);
        self.checked(
            "downsample_stride",
            out,
            Some(Box::new(move |g| {
                let gx = k::downsample_stride_backward(g.data(), xd, factor);
                vec![(x, GTensor::from_vec_unchecked(vec![xd.0, xd.1, xd.2, xd.3], gx))]
            })),
        )
    }

    /// Concatenate along the channel axis of [n,c,h,w] tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ad = self.dims4(a, "concat_channels")?;
        let bd = self.dims4(b, "concat_channels")?;
        if ad.0 != bd.0 || ad.2 != bd.2 || ad.3 != bd.3 {
            return Err(TidmError::shape(
                "concat_channels",
                format!("incompatible {ad:?} vs {bd:?}"),
            ));
        }
        let (n, ca, h, w) = ad;
        let cb = bd.1;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for ni in 0..n {
            out.extend_from_slice(&va[ni * ca * h * w..(ni + 1) * ca * h * w]);
            out.extend_from_slice(&vb[ni * cb * h * w..(ni + 1) * cb * h * w]);
        }
        let out = GTensor::from_vec_unchecked(vec![n, ca + cb, h, w], out);
        self.checked(
            "concat_channels",
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut ga = Vec::with_capacity(n * ca * h * w);
                let mut gb = Vec::with_capacity(n * cb * h * w);
                let stride = (ca + cb) * h * w;
                for ni in 0..n {
                    ga.extend_from_slice(&gd[ni * stride..ni * stride + ca * h * w]);
                    gb.extend_from_slice(&gd[ni * stride + ca * h * w..(ni + 1) * stride]);
                }
                vec![
                    (a, GTensor::from_vec_unchecked(vec![n, ca, h, w], ga)),
                    (b, GTensor::from_vec_unchecked(vec![n, cb, h, w], gb)),
                ]
            })),
        )
    }

    /// x: [n,c,h,w] plus a per-sample channel bias [n,c], broadcast over
    /// the spatial dims. Carries the (per-sample) time embedding into
    /// convolutional blocks.
    pub fn add_spatial(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xd = self.dims4(x, "add_spatial")?;
        let bs = self.value(bias).shape().to_vec();
        if bs != [xd.0, xd.1] {
            return Err(TidmError::shape(
                "add_spatial",
                format!("bias {bs:?} vs batch/channels [{}, {}]", xd.0, xd.1),
            ));
        }
        let (n, c, h, w) = xd;
        let vb = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = vb[ni * c + ci];
                for v in &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                    *v = *v + bv;
                }
            }
        }
        let out = GTensor::from_vec_unchecked(vec![n, c, h, w], out);
        self.checked(
            "add_spatial",
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gb = vec![T::zero(); n * c];
                for (i, slot) in gb.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &v in &gd[i * h * w..(i + 1) * h * w] {
                        acc = acc + v;
                    }
                    *slot = acc;
                }
                vec![
                    (x, g.clone()),
                    (bias, GTensor::from_vec_unchecked(vec![n, c], gb)),
                ]
            })),
        )
    }

    /// x: [n,l,d] plus a shared [l,d] table (positional embeddings),
    /// broadcast over the batch.
    pub fn add_rows(&mut self, x: NodeId, table: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ts = self.value(table).shape().to_vec();
        if xs.len() != 3 || ts.len() != 2 || xs[1] != ts[0] || xs[2] != ts[1] {
            return Err(TidmError::shape(
                "add_rows",
                format!("x {xs:?} vs table {ts:?}"),
            ));
        }
        let (n, l, d) = (xs[0], xs[1], xs[2]);
        let vt = self.value(table).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for ni in 0..n {
            for (j, v) in out[ni * l * d..(ni + 1) * l * d].iter_mut().enumerate() {
                *v = *v + vt[j];
            }
        }
        let out = GTensor::from_vec_unchecked(xs, out);
        self.checked(
            "add_rows",
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gt = vec![T::zero(); l * d];
                for ni in 0..n {
                    for (j, slot) in gt.iter_mut().enumerate() {
                        *slot = *slot + gd[ni * l * d + j];
                    }
                }
                vec![
                    (x, g.clone()),
                    (table, GTensor::from_vec_unchecked(vec![l, d], gt)),
                ]
            })),
        )
    }

    /// Row lookup into an embedding table [v,d] for a batch of id
    /// sequences (all the same length). Output: [n,l,d].
    pub fn embedding(&mut self, table: NodeId, ids: &[Vec<usize>]) -> Result<NodeId> {
        let ts = self.value(table).shape().to_vec();
        if ts.len() != 2 {
            return Err(TidmError::shape(
                "embedding",
                format!("expected [vocab, dim] table, got {ts:?}"),
            ));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let n = ids.len();
        if n == 0 {
            return Err(TidmError::invalid("embedding: empty id batch"));
        }
        let l = ids[0].len();
        for seq in ids {
            if seq.len() != l {
                return Err(TidmError::shape(
                    "embedding",
                    "ragged id sequences in one batch".to_string(),
                ));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i >= vocab) {
                return Err(TidmError::invalid(format!(
                    "embedding: id {bad} out of range for vocab {vocab}"
                )));
            }
        }
        let vt = self.value(table).data();
        let mut out = Vec::with_capacity(n * l * d);
        for seq in ids {
            for &id in seq {
                out.extend_from_slice(&vt[id * d..(id + 1) * d]);
            }
        }
        let out = GTensor::from_vec_unchecked(vec![n, l, d], out);
        let ids = ids.to_vec();
        self.checked(
            "embedding",
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gt = vec![T::zero(); vocab * d];
                for (row, id) in ids.iter().flatten().enumerate() {
                    let src = &gd[row * d..(row + 1) * d];
                    let dst = &mut gt[id * d..(id + 1) * d];
                    for i in 0..d {
                        dst[i] = dst[i] + src[i];
                    }
                }
                vec![(table, GTensor::from_vec_unchecked(vec![vocab, d], gt))]
            })),
        )
    }

    /// Permute [n,c,h,w] into token-major [n, h*w, c] for attention.
    pub fn nchw_to_nlc(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.dims4(x, "nchw_to_nlc")?;
        let l = h * w;
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); n * l * c];
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..l {
                    out[(ni * l + j) * c + ci] = vx[(ni * c + ci) * l + j];
                }
            }
        }
        let out = GTensor::from_vec_unchecked(vec![n, l, c], out);
        self.checked(
            "nchw_to_nlc",
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); n * c * l];
                for ni in 0..n {
                    for ci in 0..c {
                        for j in 0..l {
                            gx[(ni * c + ci) * l + j] = gd[(ni * l + j) * c + ci];
                        }
                    }
                }
                vec![(x, GTensor::from_vec_unchecked(vec![n, c, h, w], gx))]
            })),
        )
    }

    /// Inverse of `nchw_to_nlc`: [n, h*w, c] back to [n, c, h, w].
    pub fn nlc_to_nchw(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(TidmError::shape(
                "nlc_to_nchw",
                format!("expected [n, {}, c], got {xs:?}", h * w),
            ));
        }
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); n * c * l];
        for ni in 0..n {
            for j in 0..l {
                for ci in 0..c {
                    out[(ni * c + ci) * l + j] = vx[(ni * l + j) * c + ci];
                }
            }
        }
        let out = GTensor::from_vec_unchecked(vec![n, c, h, w], out);
        self.checked(
            "nlc_to_nchw",
            out,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); n * l * c];
                for ni in 0..n {
                    for j in 0..l {
                        for ci in 0..c {
                            gx[(ni * l + j) * c + ci] = gd[(ni * c + ci) * l + j];
                        }
                    }
                }
                vec![(x, GTensor::from_vec_unchecked(vec![n, l, c], gx))]
            })),
        )
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node; nodes that did not influence the loss get `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(TidmError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        if !self.recording {
            return Err(TidmError::invalid(
                "backward: tape was created in inference mode",
            ));
        }
        let mut grads: Vec<Option<GTensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(GTensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            if let Some(back) = &self.nodes[idx].backward {
                for (pid, pg) in back(&g) {
                    debug_assert!(pid.0 < idx, "tape must be topologically ordered");
                    match &grads[pid.0] {
                        Some(existing) => {
                            grads[pid.0] = Some(existing.add(&pg)?);
                        }
                        None => grads[pid.0] = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Parameter leaves registered on a tape, keyed by store name.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TidmError::invalid(format!("parameter {name:?} not bound on tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Register every parameter of a store as a leaf, in lexicographic order.
pub fn bind_params<T: Real>(tape: &mut Tape<T>, store: &ParamStore) -> BoundParams {
    let mut ids = BTreeMap::new();
    for (name, tensor) in store.iter() {
        let id = tape.leaf(tensor.cast::<T>());
        ids.insert(name.to_string(), id);
    }
    BoundParams { ids }
}

/// Same as `bind_params` for an already-typed parameter map (gradcheck).
pub fn bind_param_map<T: Real>(
    tape: &mut Tape<T>,
    map: &BTreeMap<String, GTensor<T>>,
) -> BoundParams {
    let mut ids = BTreeMap::new();
    for (name, tensor) in map {
        let id = tape.leaf(tensor.clone());
        ids.insert(name.clone(), id);
    }
    BoundParams { ids }
}

/// Gradient of a recorded scalar loss with respect to every bound
/// parameter. Parameters that never reached the loss get zero gradients.
pub fn backpropagate<T: Real>(
    tape: &Tape<T>,
    loss: NodeId,
    bound: &BoundParams,
) -> Result<BTreeMap<String, GTensor<T>>> {
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, id) in bound.iter() {
        out.insert(name.to_string(), grads.get(id, tape));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_gradient() {
        // loss = sum(p^2), p = [1, 2] -> grad [2, 4]
        let mut tape: Tape<f32> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p, &tape).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape: Tape<f32> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape: Tape<f32> = Tape::new();
        let mut store = ParamStore::new();
        store.insert("used", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        store.insert("unused", Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap()).unwrap();
        let bound = bind_params(&mut tape, &store);
        let used = bound.id("used").unwrap();
        let sq = tape.mul(used, used).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = backpropagate(&tape, loss, &bound).unwrap();
        assert_eq!(grads["used"].data(), &[2.0, 4.0]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_loss_zero_gradients() {
        let mut tape: Tape<f32> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.leaf(Tensor::scalar(5.0));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p, &tape).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backprop_is_linear_in_loss_combination() {
        let run = |a: f32, b: f32| -> Vec<f32> {
            let mut tape: Tape<f32> = Tape::new();
            let p = tape.leaf(Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
            let sq = tape.mul(p, p).unwrap();
            let l1 = tape.sum(sq).unwrap();
            let s = tape.silu(p).unwrap();
            let l2 = tape.sum(s).unwrap();
            let l1s = tape.scale(l1, a).unwrap();
            let combined = tape.add_scaled(l1s, l2, b).unwrap();
            let grads = tape.backward(combined).unwrap();
            grads.get(p, &tape).data().to_vec()
        };
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        let gc = run(2.0, 3.0);
        for i in 0..3 {
            assert!((gc[i] - (2.0 * g1[i] + 3.0 * g2[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn mse_gradient_matches_hand_derivation() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap());
        let loss = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 2.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a, &tape).data(), &[1.0, 2.0]);
        assert_eq!(grads.get(b, &tape).data(), &[-1.0, -2.0]);
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let mut tape: Tape<f32> = Tape::inference();
        let p = tape.leaf(Tensor::scalar(2.0));
        let loss = tape.sum(p).unwrap();
        assert!(tape.backward(loss).is_err());
    }
}
