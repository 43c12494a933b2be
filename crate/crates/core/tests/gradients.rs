use qte_core::qmodel::{Bottleneck, HeadConfig, HeadModel, Params, QDepthModel, QNetConfig, TdTarget, HEADS};
use qte_core::voxelgrid::{voxelize, GridSpec, PointCloudObservation, VoxelIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn resample(p: &mut Params, rng: &mut ChaCha8Rng) {
    for v in p.as_mut_slice() {
        *v = rng.gen_range(-0.5..0.5);
    }
}

/// ||analytic - numeric|| / (||analytic|| + ||numeric||) with central differences.
fn check<F: FnMut(&Params) -> f64>(params: &Params, analytic: &[f64], mut loss: F) -> f64 {
    let mut p = params.clone();
    let mut num = vec![0.0; analytic.len()];
    for i in 0..analytic.len() {
        let orig = p.as_slice()[i];
        p.as_mut_slice()[i] = orig + H;
        let up = loss(&p);
        p.as_mut_slice()[i] = orig - H;
        let down = loss(&p);
        p.as_mut_slice()[i] = orig;
        num[i] = (up - down) / (2.0 * H);
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> PointCloudObservation {
    let points = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
    let feats = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    PointCloudObservation::new(points, feats, 1, vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).unwrap()
}

#[test]
fn td_loss_matches_finite_differences() {
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = QNetConfig {
            resolution: 4,
            feature_dim: 1,
            proprio_dim: 2,
            conv_width: 4,
            context_width: 3,
            hidden_width: 5,
        };
        let mut model = QDepthModel::new(0, cfg, &mut rng).unwrap();
        resample(model.params_mut(), &mut rng);
        let obs = random_obs(&mut rng, 40);
        let grid = voxelize(&obs, &GridSpec::new(4, [0.0; 3], 2.0).unwrap());
        let action = VoxelIndex::new(rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4));
        let target = TdTarget {
            reward: rng.gen_range(-1.0..1.0),
            discount: 0.9,
            terminal: seed % 2 == 0,
            next_value: rng.gen_range(-1.0..1.0),
        };
        let (_, g) = model.td_loss(&grid, obs.proprio(), action, &target).unwrap();
        let mut probe = model.clone();
        let err = check(model.params(), &g.0, |p| {
            probe.params_mut().as_mut_slice().copy_from_slice(p.as_slice());
            probe.td_loss(&grid, obs.proprio(), action, &target).unwrap().0
        });
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn head_loss_matches_finite_differences() {
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = HeadConfig {
            bottleneck_width: 5,
            hidden_width: 6,
            rotation_bin_deg: 60.0,
        };
        let mut model = HeadModel::new(cfg, &mut rng).unwrap();
        resample(model.params_mut(), &mut rng);
        let bn = Bottleneck((0..5).map(|_| rng.gen_range(0.0..1.0)).collect());
        let bins = [rng.gen_range(0..6), rng.gen_range(0..6), rng.gen_range(0..6), rng.gen_range(0..2)];
        let targets: [f64; HEADS] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let mask = [true, seed % 3 != 0, true, seed % 2 == 0];
        let (_, g) = model.head_loss(&bn, bins, targets, mask).unwrap();
        let mut probe = model.clone();
        let err = check(model.params(), &g.0, |p| {
            probe.params_mut().as_mut_slice().copy_from_slice(p.as_slice());
            probe.head_loss(&bn, bins, targets, mask).unwrap().0
        });
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}
