//! Finite-difference check of the full denoiser loss gradient on the
//! smallest two-stream configuration.

use tidm_core::denoiser::{denoiser_graph, init_denoiser_params, DenoiserBatch, DenoiserConfig};
use tidm_core::numerics::gradcheck::{
    finite_difference_check, param_map_from_store, GradCheckConfig, ParamMap,
};
use tidm_core::numerics::{GTensor, ParamStore, Rng};
use tidm_core::schedule::NoiseSchedule;
use tidm_core::trainer::{loss_prior_preservation_graph, TrainSample};

fn smallest_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 6,
        channel_multipliers: vec![1, 2],
        blocks_per_resolution: 1,
        attention_levels: 1,
        time_embed_dim: 8,
        context_dim: 6,
        latent_channels: 4,
    }
}

fn perturbed_param_map(params: &ParamStore, rng: &mut Rng) -> ParamMap {
    // move every parameter away from zero so zero-initialized layers
    // (output conv, injections) don't hide upstream gradients
    let mut map = param_map_from_store(params);
    for (name, t) in map.clone() {
        let noise = rng.sample_standard_normal(t.shape()).unwrap().cast::<f64>();
        map.insert(name, t.add(&noise.scale(0.05)).unwrap());
    }
    map
}

fn model_with_embeddings(config: &DenoiserConfig, rng: &mut Rng) -> ParamStore {
    let mut params = init_denoiser_params(config, rng).unwrap();
    params
        .insert(
            "cond/token_embed".to_string(),
            rng.sample_standard_normal(&[5, config.context_dim])
                .unwrap()
                .scale(0.3),
        )
        .unwrap();
    params
        .insert(
            "cond/pos_embed".to_string(),
            rng.sample_standard_normal(&[tidm_core::conditioning::SEQ_LEN, config.context_dim])
                .unwrap()
                .scale(0.3),
        )
        .unwrap();
    params
}

#[test]
fn denoiser_loss_gradients_match_finite_differences() {
    let config = smallest_config();
    let mut rng = Rng::new(101);
    let params = model_with_embeddings(&config, &mut rng);
    let map = perturbed_param_map(&params, &mut rng);

    let batch = DenoiserBatch {
        z_t: rng.sample_standard_normal(&[1, 4, 6, 6]).unwrap(),
        timesteps: vec![123],
        token_ids: vec![vec![1, 2, 3, 4, 0, 0, 0, 0]],
        anchor: rng.sample_standard_normal(&[1, 4, 6, 6]).unwrap(),
        anchor_mask: vec![1.0],
    };
    let eps: GTensor<f64> = rng.sample_standard_normal(&[1, 4, 6, 6]).unwrap().cast();

    let gc = GradCheckConfig {
        max_coords_per_param: 12,
        // smaller step than the default: the attention/group-norm stack
        // has enough curvature that truncation error dominates at 1e-3
        h: 1e-4,
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(&map, &gc, move |tape, bound| {
        let out = denoiser_graph(tape, bound, &config, &batch)?;
        let target = tape.leaf(eps.clone());
        tape.mse_loss(out, target)
    })
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-3,
        "rel err {} at {}",
        report.max_rel_err,
        report.worst_param
    );
    assert!(report.coords_checked > 200);
}

#[test]
fn prior_preservation_loss_gradients_match_finite_differences() {
    let config = smallest_config();
    let mut rng = Rng::new(202);
    let params = model_with_embeddings(&config, &mut rng);
    let map = perturbed_param_map(&params, &mut rng);
    let sched = NoiseSchedule::default_schedule();

    let sample = |rng: &mut Rng, first: usize| TrainSample {
        z0: rng.sample_standard_normal(&[4, 6, 6]).unwrap(),
        token_ids: vec![first, 2, 3, 4, 0, 0, 0, 0],
        anchor: None,
    };
    let instance = vec![sample(&mut rng, 1), sample(&mut rng, 2)];
    let prior = vec![sample(&mut rng, 3), sample(&mut rng, 4)];

    let gc = GradCheckConfig {
        max_coords_per_param: 8,
        h: 1e-4,
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(&map, &gc, move |tape, bound| {
        // fixed draws: the loss must be a pure function of the parameters
        // for finite differences to make sense
        let mut draws = Rng::new(55);
        loss_prior_preservation_graph(
            tape, bound, &config, &sched, &instance, &prior, 0.7, &mut draws,
        )
    })
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-3,
        "rel err {} at {}",
        report.max_rel_err,
        report.worst_param
    );
}
