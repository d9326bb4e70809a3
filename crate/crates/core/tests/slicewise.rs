use edmsr::edm::Preconditioner;
use edmsr::sampler::karras_schedule;
use edmsr::sr25d::{build_slice_condition, neighbor_index, super_resolve_25d, super_resolve_slice};
use edmsr::unet::{Denoiser, UNetConfig};
use edmsr::volume::{Dims, Domain, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lr_volume(seed: u64, d: usize) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(d, 4, 4);
    Volume::new(
        dims,
        (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        Domain::Unit,
    )
    .unwrap()
}

fn replace_slice(vol: &Volume, z: usize, fill: f64) -> Volume {
    let dims = vol.dims();
    let plane = dims.h * dims.w;
    let mut v = vol.voxels().to_vec();
    v[z * plane..(z + 1) * plane].iter_mut().for_each(|x| *x = fill);
    Volume::new(dims, v, Domain::Unit).unwrap()
}

#[test]
fn neighbour_is_previous_slice() {
    assert_eq!(neighbor_index(0), 0);
    assert_eq!(neighbor_index(5), 4);
    let lr = lr_volume(1, 3);
    let c = build_slice_condition(&lr, 2, 2).unwrap();
    assert_eq!(c.slice_index, 2);
    assert_eq!(c.to_tensor().shape(), &[1, 2, 8, 8]);
    let c1 = build_slice_condition(&lr, 1, 2).unwrap();
    assert_eq!(c.neighbor_lr_up, c1.target_lr_up);
    assert!(build_slice_condition(&lr, 3, 2).is_err());
}

#[test]
fn only_target_and_previous_slice_reach_the_output() {
    let (den, params) = Denoiser::build(&UNetConfig::desk_2d(), 7).unwrap();
    let pc = Preconditioner::default();
    let sched = karras_schedule(80.0, 0.002, 7.0, 2).unwrap();
    let lr = lr_volume(2, 5);
    let i = 3;
    let base = super_resolve_slice(&den, &params, &pc, &sched, &lr, 2, i, 9).unwrap();
    // Poison every other slice; the output must not move.
    let mut poisoned = lr.clone();
    for z in [0, 1, 4] {
        poisoned = replace_slice(&poisoned, z, 0.9);
    }
    let same = super_resolve_slice(&den, &params, &pc, &sched, &poisoned, 2, i, 9).unwrap();
    assert_eq!(base, same);
    // Poisoning the neighbour does move it.
    let moved = super_resolve_slice(&den, &params, &pc, &sched, &replace_slice(&lr, i - 1, 0.9), 2, i, 9).unwrap();
    assert_ne!(base, moved);
}

#[test]
fn volume_output_is_per_slice_independent() {
    let (den, params) = Denoiser::build(&UNetConfig::desk_2d(), 8).unwrap();
    let pc = Preconditioner::default();
    let sched = karras_schedule(80.0, 0.002, 7.0, 1).unwrap();
    let lr = lr_volume(3, 4);
    let vol = super_resolve_25d(&den, &params, &pc, &sched, &lr, 2, 11).unwrap();
    assert_eq!(vol.dims(), Dims::new(4, 8, 8));
    for z in 0..4 {
        let one = super_resolve_slice(&den, &params, &pc, &sched, &lr, 2, z, 11).unwrap();
        assert_eq!(vol.slice(z), one);
        assert!(one.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    // A shorter stack reproduces the shared prefix.
    let prefix = Volume::new(Dims::new(2, 4, 4), lr.voxels()[..32].to_vec(), Domain::Unit).unwrap();
    let short = super_resolve_25d(&den, &params, &pc, &sched, &prefix, 2, 11).unwrap();
    assert_eq!(short.slice(1), vol.slice(1));
}

#[test]
fn raw_domain_input_is_rejected() {
    let (den, params) = Denoiser::build(&UNetConfig::desk_2d(), 8).unwrap();
    let lr = lr_volume(4, 2).with_domain(Domain::Raw).unwrap();
    let sched = karras_schedule(80.0, 0.002, 7.0, 1).unwrap();
    assert!(super_resolve_25d(&den, &params, &Preconditioner::default(), &sched, &lr, 2, 0).is_err());
}
