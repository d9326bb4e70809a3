use edmsr::diffgraph::{Graph, ParameterStore, Tensor};
use edmsr::unet::{param_count, Denoiser, UNetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(cin: usize, cout: usize, kvol: usize) -> usize {
    cout * cin * kvol + cout
}

fn linear(din: usize, dout: usize) -> usize {
    dout * din + dout
}

#[test]
fn single_layer_counts() {
    assert_eq!(conv(1, 1, 9), 10);
    assert_eq!(linear(4, 3), 15);
}

/// Desk 2D: channels (8, 8, 16), one res block per level, attention at the
/// bottleneck, embedding width 32, three input channels.
#[test]
fn desk_2d_matches_layer_by_layer_sum() {
    let e = 32;
    let k = 9;
    let res = |cin: usize, cout: usize| {
        let skip = if cin == cout { 0 } else { conv(cin, cout, 1) };
        linear(e, 2 * cin) + conv(cin, cout, k) + linear(e, 2 * cout) + conv(cout, cout, k) + skip
    };
    let embedding = 2 * linear(e, e);
    let conv_in = conv(3, 8, k);
    let encoder = res(8, 8) + conv(8, 8, k) + res(8, 8) + conv(8, 8, k) + res(8, 16);
    let bottleneck = conv(16, 48, 1) + conv(16, 16, 1) + res(16, 16);
    let decoder = res(32, 16) + conv(16, 8, k) + res(16, 8) + conv(8, 8, k) + res(16, 8);
    let conv_out = conv(8, 1, k);
    let want = embedding + conv_in + encoder + bottleneck + decoder + conv_out;

    let (_, params) = Denoiser::build(&UNetConfig::desk_2d(), 0).unwrap();
    assert_eq!(param_count(&params), want);
}

#[test]
fn full_3d_is_large() {
    let (_, params) = Denoiser::build(&UNetConfig::full_3d(), 0).unwrap();
    assert!(param_count(&params) > 1_000_000);
}

fn forward(den: &Denoiser, params: &ParameterStore, x: &Tensor, c: &Tensor, c_noise: f64) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let cv = g.input(c.clone()).unwrap();
    let out = den.forward(&mut g, params, xv, &[c_noise], cv).unwrap();
    g.value(out).clone()
}

fn jittered(cfg: &UNetConfig) -> (Denoiser, ParameterStore) {
    let (den, mut params) = Denoiser::build(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, t) in params.iter_mut() {
        let n = Tensor::randn(t.shape(), 0.1, &mut rng);
        t.data_mut().iter_mut().zip(n.data()).for_each(|(a, b)| *a += b);
    }
    (den, params)
}

#[test]
fn output_shape_and_skip_ablation() {
    for cfg in [UNetConfig::desk_2d(), UNetConfig::desk_3d()] {
        let (den, params) = jittered(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spatial: Vec<usize> = if cfg.in_channels == 3 {
            vec![8, 8]
        } else {
            vec![4, 8, 8]
        };
        let mut xs = vec![1, 1];
        xs.extend(&spatial);
        let mut cs = vec![1, cfg.in_channels - 1];
        cs.extend(&spatial);
        let x = Tensor::randn(&xs, 1.0, &mut rng);
        let c = Tensor::randn(&cs, 1.0, &mut rng);
        let base = forward(&den, &params, &x, &c, 0.1);
        assert_eq!(base.shape(), &xs[..]);
        for level in 0..cfg.channels.len() {
            let ablated = den.clone().with_skip_ablated(level);
            let out = forward(&ablated, &params, &x, &c, 0.1);
            let diff: f64 = out.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1e-6, "skip {level} has no effect");
        }
    }
}

#[test]
fn noise_level_changes_output() {
    let (den, params) = jittered(&UNetConfig::desk_2d());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng);
    let c = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng);
    assert_ne!(
        forward(&den, &params, &x, &c, -1.0),
        forward(&den, &params, &x, &c, 1.0)
    );
}

#[test]
fn rejects_mismatched_inputs() {
    let (den, params) = Denoiser::build(&UNetConfig::desk_2d(), 0).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 6, 6])).unwrap();
    let c = g.input(Tensor::zeros(&[1, 2, 6, 6])).unwrap();
    assert!(den.forward(&mut g, &params, x, &[0.0], c).is_err());
    let x = g.input(Tensor::zeros(&[1, 1, 8, 8])).unwrap();
    let c = g.input(Tensor::zeros(&[1, 1, 8, 8])).unwrap();
    assert!(den.forward(&mut g, &params, x, &[0.0], c).is_err());
}
