//! Scratch measurement harness for calibrating the acceptance suite.

use std::path::Path;
use std::time::Instant;

use tidm_core::checkpoint::{load_checkpoint, save_checkpoint};
use tidm_core::codec::{self, CodecTrainConfig};
use tidm_core::conditioning::{Conditioning, Vocabulary};
use tidm_core::data::{self, make_dataset, Dataset, Relation, SceneSpec};
use tidm_core::denoiser::{predict_noise, DenoiserConfig};
use tidm_core::eval::{background_consistency, identity_accuracy, LabeledBatch};
use tidm_core::image::ImageTensor;
use tidm_core::numerics::{ParamStore, Rng};
use tidm_core::probe::{train_probe_classifier, ProbeConfig};
use tidm_core::sampler::{generate, SamplerConfig};
use tidm_core::schedule::NoiseSchedule;
use tidm_core::trainer::{self, DreamboothConfig, TrainConfig};

const CACHE: &str = "/tmp/tune-cache";

fn small_dcfg() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 16,
        channel_multipliers: vec![1, 2, 4],
        blocks_per_resolution: 1,
        attention_levels: 2,
        time_embed_dim: 32,
        ..DenoiserConfig::default()
    }
}

fn small_dataset() -> Dataset {
    make_dataset(240, 4, 3, 11).unwrap()
}

fn full_dataset() -> Dataset {
    make_dataset(2000, 6, 4, 1).unwrap()
}

fn scene_targets(spec: &SceneSpec) -> [(i32, i32, usize); 2] {
    let ((ax, ay), (bx, by)) = spec.sprite_centers();
    [(ax, ay, spec.identity_a), (bx, by, spec.identity_b)]
}

fn build(tag: &str, dataset: Dataset, dcfg: DenoiserConfig, codec_epochs: usize,
         codec_stride: usize, epochs: usize, anchor_drop: f32) {
    let dir = Path::new(CACHE).join(tag);
    std::fs::create_dir_all(&dir).unwrap();

    let mut images: Vec<ImageTensor> = dataset
        .scenes.iter().step_by(codec_stride).map(|s| s.image.clone()).collect();
    images.extend(dataset.train_solo.iter().step_by(codec_stride).map(|s| s.image.clone()));
    images.extend(dataset.heldout_solo.iter().map(|s| s.image.clone()));
    let codec = if dir.join("codec.tidm").exists() {
        eprintln!("[{tag}] codec: cached");
        load_checkpoint(&dir.join("codec.tidm")).unwrap()
    } else {
        let t0 = Instant::now();
        let (codec, cm) = codec::train_codec(
            &images,
            &CodecTrainConfig { epochs: codec_epochs, seed: 2, ..CodecTrainConfig::default() },
        ).unwrap();
        eprintln!("[{tag}] codec: {} imgs, {} epochs, {:.1}s, final mse {:.4}",
            images.len(), codec_epochs, t0.elapsed().as_secs_f64(), cm.final_mse);
        save_checkpoint(&dir.join("codec.tidm"), &codec).unwrap();
        codec
    };

    let vocab = Vocabulary::new(dataset.n_identities, dataset.n_backgrounds);
    let sched = NoiseSchedule::default_schedule();
    let t0 = Instant::now();
    let (base, bm) = trainer::train_base(
        &codec, &dataset, &vocab, &dcfg, &sched,
        &TrainConfig { epochs, seed: 2, anchor_drop_prob: anchor_drop,
            ..TrainConfig::default() },
    ).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    eprintln!("[{tag}] base: {} steps, {:.1}s ({:.2} s/step), loss {:.3} -> {:.3}, epochs {:?}",
        bm.step_loss.len(), secs, secs / bm.step_loss.len() as f64,
        bm.step_loss[0].1, bm.final_loss, bm.epoch_loss);
    save_checkpoint(&dir.join("base.tidm"), &base).unwrap();

    let t0 = Instant::now();
    let (probe, pm) = train_probe_classifier(
        &dataset, &ProbeConfig { seed: 5, ..ProbeConfig::default() }).unwrap();
    eprintln!("[{tag}] probe: {:.1}s, id acc {:.3}, bg acc {:.3}",
        t0.elapsed().as_secs_f64(), pm.identity_train_accuracy, pm.background_train_accuracy);
    save_checkpoint(&dir.join("probe.tidm"), &probe).unwrap();
    std::fs::write(
        dir.join("meta.txt"),
        format!("first_loss = {}\nfinal_loss = {}\ntrain_secs = {}\n",
            bm.step_loss[0].1, bm.final_loss, secs),
    ).unwrap();
}

struct Fix {
    dataset: Dataset,
    codec: ParamStore,
    base: ParamStore,
    probe: ParamStore,
    vocab: Vocabulary,
    dcfg: DenoiserConfig,
    sched: NoiseSchedule,
}

fn load(tag: &str) -> Fix {
    let dir = Path::new(CACHE).join(tag);
    let dataset = if tag == "small" { small_dataset() } else { full_dataset() };
    let dcfg = if tag == "small" { small_dcfg() } else { DenoiserConfig::default() };
    let vocab = Vocabulary::new(dataset.n_identities, dataset.n_backgrounds);
    Fix {
        codec: load_checkpoint(&dir.join("codec.tidm")).unwrap(),
        base: load_checkpoint(&dir.join("base.tidm")).unwrap(),
        probe: load_checkpoint(&dir.join("probe.tidm")).unwrap(),
        dataset, vocab, dcfg,
        sched: NoiseSchedule::default_schedule(),
    }
}

fn class_acc(f: &Fix, model: &ParamStore, vocab: &Vocabulary, spec: &SceneSpec,
             seed: u64, guidance: f32, steps: usize, batch: usize) -> f64 {
    let config = SamplerConfig { steps, batch, seed, guidance_scale: guidance,
        ..SamplerConfig::default() };
    let images = generate(&f.codec, model, &f.dcfg, &f.sched, vocab,
        &spec.caption(), None, &config).unwrap();
    let targets = scene_targets(spec);
    identity_accuracy(&f.probe, &LabeledBatch { images: &images, targets: &targets }).unwrap()
}

fn solo_acc(f: &Fix, model: &ParamStore, vocab: &Vocabulary, prompt: &str, identity: usize,
            seed: u64, guidance: f32, steps: usize, batch: usize) -> f64 {
    let config = SamplerConfig { steps, batch, seed, guidance_scale: guidance,
        ..SamplerConfig::default() };
    let images = generate(&f.codec, model, &f.dcfg, &f.sched, vocab,
        prompt, None, &config).unwrap();
    let c = (data::IMAGE_SIZE / 2) as i32;
    let targets = [(c, c, identity)];
    identity_accuracy(&f.probe, &LabeledBatch { images: &images, targets: &targets }).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args[0].as_str() {
        "steptime" => {
            // one optimizer step at each model size, one sampler eval each
            for (tag, dcfg, n_id, n_bg) in [
                ("small", small_dcfg(), 4usize, 3usize),
                ("fullsize", DenoiserConfig::default(), 6, 4),
            ] {
                let ds = make_dataset(32, n_id, n_bg, 3).unwrap();
                let imgs: Vec<ImageTensor> = ds.scenes.iter().map(|s| s.image.clone()).collect();
                let t0 = Instant::now();
                let (codec, _) = codec::train_codec(&imgs,
                    &CodecTrainConfig { epochs: 2, seed: 1, ..CodecTrainConfig::default() }).unwrap();
                let codec_step = t0.elapsed().as_secs_f64() / 4.0; // 2 steps/epoch x 2
                let vocab = Vocabulary::new(n_id, n_bg);
                let sched = NoiseSchedule::default_schedule();
                let t0 = Instant::now();
                let (base, m) = trainer::train_base(&codec, &ds, &vocab, &dcfg, &sched,
                    &TrainConfig { epochs: 2, seed: 1, ..TrainConfig::default() }).unwrap();
                let train_step = t0.elapsed().as_secs_f64() / m.step_loss.len() as f64;
                let ids = vocab.tokenize("ident0 meets ident1 in bg0").unwrap();
                let cond = Conditioning::new(ids, None).unwrap();
                let z = Rng::new(4).sample_standard_normal(&[4, 6, 6]).unwrap();
                let t0 = Instant::now();
                for _ in 0..20 { predict_noise(&base, &dcfg, &z, 500, &cond).unwrap(); }
                let eval = t0.elapsed().as_secs_f64() / 20.0;
                eprintln!("[{tag}] codec step {codec_step:.3}s, train step {train_step:.3}s, eval {eval:.4}s");
            }
        }
        "small" => {
            let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(25);
            let drop: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
            build("small", small_dataset(), small_dcfg(), 30, 1, epochs, drop);
        }
        "full" => {
            let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
            let drop: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
            build("full", full_dataset(), DenoiserConfig::default(), 20, 5, epochs, drop);
        }
        "dump" => {
            // dump <tag> <prompt> <guidance> [anchor_drop marker unused]
            let tag = args[1].as_str();
            let f = load(tag);
            let prompt = args[2].as_str();
            let guidance: f32 = args[3].parse().unwrap();
            let config = SamplerConfig { steps: 50, batch: 8, seed: 70,
                guidance_scale: guidance, ..SamplerConfig::default() };
            let images = generate(&f.codec, &f.base, &f.dcfg, &f.sched, &f.vocab,
                prompt, None, &config).unwrap();
            let dir = Path::new("/tmp/dump").join(tag);
            std::fs::create_dir_all(&dir).unwrap();
            for (i, img) in images.iter().enumerate() {
                tidm_core::image::write_ppm(&dir.join(format!("s{i}.ppm")), img).unwrap();
            }
            // reference: real scene + its codec round trip
            if let Ok(spec) = SceneSpec::from_caption(prompt) {
                let (img, _) = data::render_scene(&spec).unwrap();
                tidm_core::image::write_ppm(&dir.join("real.ppm"), &img).unwrap();
                let lat = codec::encode_image(&f.codec, &img).unwrap();
                let rt = codec::decode_to_images(&f.codec,
                    &lat.reshape(&[1, 4, 6, 6]).unwrap()).unwrap().remove(0);
                tidm_core::image::write_ppm(&dir.join("roundtrip.ppm"), &rt).unwrap();
            }
            eprintln!("dumped to {}", dir.display());
        }
        "quality" => {
            let tag = args.get(1).map(String::as_str).unwrap_or("small");
            let f = load(tag);
            let spec = SceneSpec::from_caption("ident0 meets ident1 in bg0").unwrap();
            for guidance in [1.0f32, 3.0, 5.0, 7.5] {
                let t0 = Instant::now();
                let acc = class_acc(&f, &f.base, &f.vocab, &spec, 70, guidance, 50, 12);
                let sacc = solo_acc(&f, &f.base, &f.vocab, "ident0", 0, 71, guidance, 50, 12);
                eprintln!("[{tag}] w={guidance}: class acc {acc:.3} solo acc {sacc:.3} ({:.1}s)",
                    t0.elapsed().as_secs_f64());
            }
        }
        "probeheld" => {
            let tag = args.get(1).map(String::as_str).unwrap_or("small");
            let f = load(tag);
            let heldout = f.dataset.heldout_identity();
            let c = (data::IMAGE_SIZE / 2) as i32;
            let raw: Vec<ImageTensor> =
                f.dataset.heldout_solo.iter().map(|s| s.image.clone()).collect();
            let targets = [(c, c, heldout)];
            let a_raw = identity_accuracy(&f.probe,
                &LabeledBatch { images: &raw, targets: &targets }).unwrap();
            let mut rts = Vec::new();
            for img in &raw {
                let lat = codec::encode_image(&f.codec, img).unwrap();
                rts.push(codec::decode_to_images(&f.codec,
                    &lat.reshape(&[1, 4, 6, 6]).unwrap()).unwrap().remove(0));
            }
            let a_rt = identity_accuracy(&f.probe,
                &LabeledBatch { images: &rts, targets: &targets }).unwrap();
            eprintln!("[{tag}] probe on heldout solos: raw {a_raw:.3}, codec round trip {a_rt:.3}");
        }
        "ft" => {
            // ft <lambda> <steps> <seed> [lr]
            let f = load("small");
            let lambda: f32 = args[1].parse().unwrap();
            let steps: usize = args[2].parse().unwrap();
            let seed: u64 = args[3].parse().unwrap();
            let lr: f32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5e-4);
            let heldout = f.dataset.heldout_identity();
            let baseline = solo_acc(&f, &f.base, &f.vocab, "ident0", 0, 920 + seed, 3.0, 50, 8);
            let instance: Vec<ImageTensor> =
                f.dataset.heldout_solo.iter().take(4).map(|s| s.image.clone()).collect();
            let mut vocab = f.vocab.clone();
            let db = DreamboothConfig {
                instance_images: instance,
                placeholder: "sks".to_string(),
                class_prompt: "ident0".to_string(),
                lambda_prior: lambda,
                prior_set_size: 32,
                steps,
                batch_size: 4,
                learning_rate: lr,
                seed: 300 + seed,
                allow_instance_count_override: false,
            };
            let t0 = Instant::now();
            let (model, fm) = trainer::finetune_dreambooth(
                &f.base, &f.codec, &mut vocab, &f.dcfg, &f.sched, &db).unwrap();
            let ft_secs = t0.elapsed().as_secs_f64();
            let losses: Vec<f32> = fm.step_loss.iter().map(|&(_, l)| l).collect();
            eprintln!("  ft loss: first {:?} last {:?}",
                &losses[..4.min(losses.len())],
                &losses[losses.len().saturating_sub(4)..]);
            let config = SamplerConfig { steps: 25, batch: 8, seed: 910 + seed,
                ..SamplerConfig::default() };
            let images = generate(&f.codec, &model, &f.dcfg, &f.sched, &vocab,
                "sks", None, &config).unwrap();
            let c = (data::IMAGE_SIZE / 2) as i32;
            let targets = [(c, c, heldout)];
            let pa = identity_accuracy(&f.probe,
                &LabeledBatch { images: &images, targets: &targets }).unwrap();
            for (w, st) in [(1.0f32, 50usize), (2.0, 50), (3.0, 50), (5.0, 50), (7.5, 50)] {
                let cfg2 = SamplerConfig { steps: st, batch: 8, seed: 910 + seed,
                    guidance_scale: w, ..SamplerConfig::default() };
                let imgs = generate(&f.codec, &model, &f.dcfg, &f.sched, &vocab,
                    "sks", None, &cfg2).unwrap();
                let a = identity_accuracy(&f.probe,
                    &LabeledBatch { images: &imgs, targets: &targets }).unwrap();
                eprintln!("  sks w={w} steps={st}: acc {a:.3}");
            }
            let ca = solo_acc(&f, &model, &vocab, "ident0", 0, 920 + seed, 3.0, 50, 8);
            let dir = Path::new("/tmp/dump").join(format!("ft_l{lambda}_s{steps}_lr{lr}"));
            std::fs::create_dir_all(&dir).unwrap();
            for (i, img) in images.iter().enumerate() {
                tidm_core::image::write_ppm(&dir.join(format!("sks{i}.ppm")), img).unwrap();
            }
            for (i, s) in f.dataset.heldout_solo.iter().take(2).enumerate() {
                tidm_core::image::write_ppm(&dir.join(format!("real{i}.ppm")), &s.image).unwrap();
                let lat = codec::encode_image(&f.codec, &s.image).unwrap();
                let rt = codec::decode_to_images(&f.codec,
                    &lat.reshape(&[1, 4, 6, 6]).unwrap()).unwrap().remove(0);
                tidm_core::image::write_ppm(&dir.join(format!("realrt{i}.ppm")), &rt).unwrap();
            }
            for w in [1.0f32, 3.0] {
                let imgs = generate(&f.codec, &model, &f.dcfg, &f.sched, &vocab,
                    "sks", None,
                    &SamplerConfig { steps: 25, batch: 2, seed: 930 + seed,
                        guidance_scale: w, ..SamplerConfig::default() }).unwrap();
                for (i, img) in imgs.iter().enumerate() {
                    tidm_core::image::write_ppm(
                        &dir.join(format!("sksw{w}_{i}.ppm")), img).unwrap();
                }
            }
            let class_images = generate(&f.codec, &model, &f.dcfg, &f.sched, &vocab,
                "ident0", None,
                &SamplerConfig { steps: 25, batch: 4, seed: 921 + seed, guidance_scale: 3.0,
                    ..SamplerConfig::default() }).unwrap();
            for (i, img) in class_images.iter().enumerate() {
                tidm_core::image::write_ppm(&dir.join(format!("class{i}.ppm")), img).unwrap();
            }
            eprintln!("[ft λ={lambda} steps={steps} lr={lr} seed={seed}] {ft_secs:.1}s, sks acc {pa:.3}, class {baseline:.3} -> {ca:.3}");
        }
        "anchor" => {
            let tag = args.get(1).map(String::as_str).unwrap_or("full");
            let f = load(tag);
            let n_id = f.dataset.n_identities - 1; // trained identities only
            let mut wins = 0;
            for k in 0..8usize {
                let spec = SceneSpec {
                    identity_a: k % n_id,
                    identity_b: (k + 1) % n_id,
                    relation: Relation::ALL[k % 3],
                    background: k % f.dataset.n_backgrounds,
                    jitter_a: (0, 0),
                    jitter_b: (0, 0),
                };
                let (anchor_img, mask) = data::render_scene(&spec).unwrap();
                let config = SamplerConfig { steps: 30, batch: 4, seed: 100 + k as u64,
                    ..SamplerConfig::default() };
                let with = generate(&f.codec, &f.base, &f.dcfg, &f.sched, &f.vocab,
                    &spec.caption(), Some(&anchor_img),
                    &SamplerConfig { strength: 0.75, ..config.clone() }).unwrap();
                let without = generate(&f.codec, &f.base, &f.dcfg, &f.sched, &f.vocab,
                    &spec.caption(), None, &config).unwrap();
                let ca = background_consistency(&with, &mask).unwrap();
                let cp = background_consistency(&without, &mask).unwrap();
                if ca < cp { wins += 1; }
                eprintln!("  pair {k}: anchor {ca:.4} vs plain {cp:.4} {}",
                    if ca < cp { "WIN" } else { "loss" });
            }
            eprintln!("[anchor {tag}] {wins}/8 wins");
        }
        "strength" => {
            let f = load("small");
            let spec = SceneSpec::from_caption("ident1 with ident2 in bg2").unwrap();
            let (anchor_img, _) = data::render_scene(&spec).unwrap();
            let lat = codec::encode_image(&f.codec, &anchor_img).unwrap();
            let rt = codec::decode_to_images(&f.codec,
                &lat.reshape(&[1, 4, 6, 6]).unwrap()).unwrap().remove(0);
            for s in [0.0f32, 0.25, 0.5, 0.75, 1.0] {
                let mut total = 0.0;
                for seed in 0..16u64 {
                    let config = SamplerConfig { steps: 20, strength: s, batch: 1,
                        seed: 1000 + seed, ..SamplerConfig::default() };
                    let images = generate(&f.codec, &f.base, &f.dcfg, &f.sched, &f.vocab,
                        &spec.caption(), Some(&anchor_img), &config).unwrap();
                    let d = images[0].tensor().sub(rt.tensor()).unwrap();
                    total += (d.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
                        / d.numel() as f64).sqrt();
                }
                eprintln!("  strength {s}: mean dist {:.4}", total / 16.0);
            }
        }
        other => panic!("unknown mode {other}"),
    }
}
