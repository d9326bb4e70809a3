use edmsr::diffgraph::{grad_check, GradCheckOptions, Graph, ParameterStore, Tensor};
use edmsr::edm::{edm_loss, NoisyBatch, Preconditioner};
use edmsr::unet::{Denoiser, UNetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Moves every parameter away from its initial value so that biases,
/// near-zero projections and embedding paths all carry gradient.
fn jitter(store: &mut ParameterStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn check_unet(cfg: UNetConfig, spatial: &[usize]) {
    let (den, mut params) = Denoiser::build(&cfg, 11).unwrap();
    jitter(&mut params, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut shape = vec![2, 1];
    shape.extend_from_slice(spatial);
    let mut cshape = vec![2, cfg.in_channels - 1];
    cshape.extend_from_slice(spatial);
    let batch = NoisyBatch {
        target: Tensor::randn(&shape, 0.5, &mut rng),
        condition: Tensor::randn(&cshape, 0.5, &mut rng),
        sigmas: vec![0.3, 4.0],
        noise: Tensor::randn(&shape, 1.0, &mut rng),
    };
    let pc = Preconditioner::default();
    let opts = GradCheckOptions {
        coords: 120,
        floor: 1e-6,
        seed: 5,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        &params,
        |g: &mut Graph, p: &ParameterStore| edm_loss(g, &den, p, &pc, &batch),
        &opts,
    )
    .unwrap();
    assert!(report.checked.len() >= 100);
    assert!(
        report.passed(),
        "max rel err {:.3e} at {:?}",
        report.max_rel_err,
        report.worst()
    );
}

#[test]
fn desk_unet_3d_gradients() {
    check_unet(UNetConfig::desk_3d(), &[4, 8, 8]);
}

#[test]
fn desk_unet_2d_gradients() {
    check_unet(UNetConfig::desk_2d(), &[8, 8]);
}
