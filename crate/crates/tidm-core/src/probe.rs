//! Probe classifiers used as measurement oracles: a sprite-identity
//! classifier over 12x12 crops and a background classifier over full
//! frames. Both are tiny conv nets trained on renderer output, where the
//! labels are exact by construction.

use crate::data::{self, crop_patch, Dataset, SceneSpec};
use crate::error::{Result, TidmError};
use crate::image::ImageTensor;
use crate::numerics::tape::{BoundParams, NodeId, Tape};
use crate::numerics::{backpropagate, bind_params, Adam, ParamStore, Real, Rng, Tensor};

/// Identity crops are windows of this size around a sprite center.
pub const CROP: usize = 12;

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeMetrics {
    pub identity_train_accuracy: f64,
    pub background_train_accuracy: f64,
}

fn init_head(
    params: &mut ParamStore,
    prefix: &str,
    in_side: usize,
    classes: usize,
    rng: &mut Rng,
) -> Result<()> {
    crate::nn::init_conv(params, &format!("{prefix}/conv0"), 8, 3, 3, rng)?;
    crate::nn::init_conv(params, &format!("{prefix}/conv1"), 16, 8, 3, rng)?;
    let side = in_side / 4; // two stride-2 convs
    crate::nn::init_linear(params, &format!("{prefix}/fc"), classes, 16 * side * side, rng)
}

fn head_logits<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = crate::nn::conv(tape, bound, &format!("{prefix}/conv0"), x, 2, 1)?;
    let h = tape.silu(h)?;
    let h = crate::nn::conv(tape, bound, &format!("{prefix}/conv1"), h, 2, 1)?;
    let h = tape.silu(h)?;
    let s = tape.value(h).shape().to_vec();
    let flat = tape.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
    crate::nn::linear(tape, bound, &format!("{prefix}/fc"), flat)
}

fn stack(samples: &[(Tensor, usize)], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let shape = samples[idx[0]].0.shape().to_vec();
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(samples[i].0.data());
        labels.push(samples[i].1);
    }
    let mut full = vec![idx.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::from_vec(full, data)?, labels))
}

fn train_head(
    params: &mut ParamStore,
    prefix: &str,
    samples: &[(Tensor, usize)],
    config: &ProbeConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = stack(samples, chunk)?;
            let mut tape: Tape<f32> = Tape::new();
            let bound = bind_params(&mut tape, params);
            let xn = tape.leaf(x);
            let logits = head_logits(&mut tape, &bound, prefix, xn)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            if !tape.value(loss).item()?.is_finite() {
                return Err(TidmError::Diverged { step: 0 });
            }
            let grads = backpropagate(&mut tape, loss, &bound)?;
            adam.step(params, &grads)?;
        }
    }
    // final train accuracy
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(64) {
        let (x, labels) = stack(samples, chunk)?;
        let preds = classify_batch(params, prefix, &x)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn classify_batch(params: &ParamStore, prefix: &str, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape: Tape<f32> = Tape::inference();
    let bound = bind_params(&mut tape, params);
    let xn = tape.leaf(x.clone());
    let logits = head_logits(&mut tape, &bound, prefix, xn)?;
    let v = tape.value(logits);
    let (n, k) = (v.shape()[0], v.shape()[1]);
    Ok((0..n)
        .map(|i| {
            let row = &v.data()[i * k..(i + 1) * k];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        })
        .collect())
}

/// Identity crops for a scene, labeled from its spec.
pub fn scene_identity_crops(scene_image: &ImageTensor, spec: &SceneSpec) -> Vec<(Tensor, usize)> {
    let ((ax, ay), (bx, by)) = spec.sprite_centers();
    vec![
        (crop_patch(scene_image, ax, ay, CROP), spec.identity_a),
        (crop_patch(scene_image, bx, by, CROP), spec.identity_b),
    ]
}

/// Build the probe's training corpus: scene crops plus balanced solo
/// renders of every identity (including the held-out one, which never
/// appears in scenes).
fn probe_corpus(dataset: &Dataset, rng: &mut Rng) -> Result<(Vec<(Tensor, usize)>, Vec<(Tensor, usize)>)> {
    let mut id_samples = Vec::new();
    let mut bg_samples = Vec::new();
    for scene in &dataset.scenes {
        id_samples.extend(scene_identity_crops(&scene.image, &scene.spec));
        // also crop at the jitter-free centers: evaluation of generated
        // images cannot know the jitter, so the probe must tolerate
        // off-center sprites
        let mut centered = scene.spec;
        centered.jitter_a = (0, 0);
        centered.jitter_b = (0, 0);
        id_samples.extend(scene_identity_crops(&scene.image, &centered));
        bg_samples.push((scene.image.tensor().clone(), scene.spec.background));
    }
    for identity in 0..dataset.n_identities {
        for background in 0..dataset.n_backgrounds {
            for _ in 0..6 {
                let jitter = (rng.next_below(5) as i32 - 2, rng.next_below(5) as i32 - 2);
                let (img, _) = data::render_solo(identity, background, jitter)?;
                let c = (data::IMAGE_SIZE / 2) as i32;
                id_samples.push((
                    crop_patch(&img, c + jitter.0, c + jitter.1, CROP),
                    identity,
                ));
                // jitter-free crop, same rationale as for scenes
                id_samples.push((crop_patch(&img, c, c, CROP), identity));
                bg_samples.push((img.tensor().clone(), background));
            }
        }
    }
    Ok((id_samples, bg_samples))
}

/// Train the identity and background heads on renderer output.
pub fn train_probe_classifier(
    dataset: &Dataset,
    config: &ProbeConfig,
) -> Result<(ParamStore, ProbeMetrics)> {
    if dataset.n_identities < 2 || dataset.n_backgrounds < 2 {
        return Err(TidmError::invalid(
            "probe: need at least two identity and two background classes",
        ));
    }
    let mut rng = Rng::new(config.seed);
    let mut params = ParamStore::new();
    init_head(&mut params, "probe/id", CROP, dataset.n_identities, &mut rng)?;
    init_head(&mut params, "probe/bg", data::IMAGE_SIZE, dataset.n_backgrounds, &mut rng)?;
    let (id_samples, bg_samples) = probe_corpus(dataset, &mut rng)?;
    let identity_train_accuracy = train_head(&mut params, "probe/id", &id_samples, config, &mut rng)?;
    let background_train_accuracy = train_head(&mut params, "probe/bg", &bg_samples, config, &mut rng)?;
    Ok((
        params,
        ProbeMetrics {
            identity_train_accuracy,
            background_train_accuracy,
        },
    ))
}

/// Predicted identity for a 12x12 crop [3, CROP, CROP].
pub fn classify_identity(probe: &ParamStore, crop: &Tensor) -> Result<usize> {
    let s = crop.shape().to_vec();
    if s != [3, CROP, CROP] {
        return Err(TidmError::shape(
            "probe",
            format!("expected [3,{CROP},{CROP}] crop, got {s:?}"),
        ));
    }
    let batch = crop.reshape(&[1, 3, CROP, CROP])?;
    Ok(classify_batch(probe, "probe/id", &batch)?[0])
}

/// Predicted background for a full frame.
pub fn classify_background(probe: &ParamStore, image: &ImageTensor) -> Result<usize> {
    let batch = image
        .tensor()
        .reshape(&[1, 3, image.height(), image.width()])?;
    Ok(classify_batch(probe, "probe/bg", &batch)?[0])
}
