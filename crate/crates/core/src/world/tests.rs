use super::*;
use crate::codec::proj_full;
use crate::numerics::random_orthonormal;

fn small_config(kind: WorldKind) -> WorldConfig {
    WorldConfig {
        kind,
        seed: 7,
        channels: 2,
        height: 4,
        width: 4,
        patch_size: 2,
        feature_dim: 6,
        hidden: 24,
        n_prompts: 4,
        proj_dim: 4,
        ..WorldConfig::default()
    }
}

fn basis_for(cfg: &WorldConfig, k: usize) -> PatchBasis {
    let g = cfg.geometry().unwrap();
    let mut rng = RngState::new(99);
    let v = random_orthonormal(g.patch_dim(), &mut rng).unwrap();
    PatchBasis::from_orthonormal(g, v, k).unwrap()
}

fn coeff_reward(world: &World, w: &Tensor, c: usize) -> f64 {
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let r = world.reward_of_coeffs(&mut tape, wv, &[c]).unwrap();
    tape.value(r).data()[0]
}

#[test]
fn reward_at_target_is_sum_of_bounded_terms() {
    let world = World::build(&small_config(WorldKind::Generic), None).unwrap();
    let w = RewardWeights::default();
    for c in 0..4 {
        let x = world.target_features(c).unwrap();
        let r = world.reward_field().reward(x, c).unwrap();
        assert!((r - (w.cosine + w.bump)).abs() < 1e-10, "{r}");
        assert_eq!(world.optimum_reward(c).unwrap(), Some(r));
    }
}

#[test]
fn zero_weights_give_zero_reward() {
    let mut cfg = small_config(WorldKind::Generic);
    cfg.weights = RewardWeights {
        cosine: 0.0,
        quad_primary: 0.0,
        quad_secondary: 0.0,
        bump: 0.0,
    };
    let world = World::build(&cfg, None).unwrap();
    let mut rng = RngState::new(1);
    let x = Tensor::vector(rng.normals(6));
    assert_eq!(world.reward_field().reward(&x, 2).unwrap(), 0.0);
}

#[test]
fn reward_matches_hand_sum() {
    let world = World::build(&small_config(WorldKind::Generic), None).unwrap();
    let mut rng = RngState::new(2);
    for _ in 0..20 {
        let x = rng.normals(6);
        let c = rng.below(4);
        let mut expect = 0.0;
        for (lambda, comp) in world.reward_field().components() {
            let term = match comp {
                RewardComponent::QuadDistance { proj_t, targets } => -(0..proj_t.cols())
                    .map(|j| {
                        let px: f64 = (0..6).map(|i| x[i] * proj_t.get(i, j)).sum();
                        (px - targets.get(c, j)).powi(2)
                    })
                    .sum::<f64>(),
                RewardComponent::Bump {
                    proj_t,
                    targets,
                    width,
                } => {
                    let dist: f64 = (0..proj_t.cols())
                        .map(|j| {
                            let px: f64 = (0..6).map(|i| x[i] * proj_t.get(i, j)).sum();
                            (px - targets.get(c, j)).powi(2)
                        })
                        .sum();
                    (-dist / width).exp()
                }
                RewardComponent::Cosine { dirs } => {
                    let dot: f64 = (0..6).map(|i| x[i] * dirs.get(c, i)).sum();
                    let n: f64 = x.iter().map(|v| v * v).sum::<f64>();
                    dot / (n + COSINE_EPS).sqrt()
                }
                _ => unreachable!(),
            };
            expect += lambda * term;
        }
        let got = world.reward_field().reward(&Tensor::vector(x), c).unwrap();
        assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
    }
}

#[test]
fn unknown_prompt_is_rejected() {
    let world = World::build(&small_config(WorldKind::Generic), None).unwrap();
    assert!(world
        .reward_field()
        .reward(&Tensor::zeros(&[6]), 4)
        .is_err());
    assert!(world.target_features(9).is_err());
}

#[test]
fn reward_is_bounded_above() {
    let world = World::build(&small_config(WorldKind::Generic), None).unwrap();
    let bound = world.reward_field().upper_bound().unwrap();
    let mut rng = RngState::new(3);
    for i in 0..10_000 {
        let x: Vec<f64> = rng.normals(6).into_iter().map(|v| 3.0 * v).collect();
        assert!(
            world
                .reward_field()
                .reward(&Tensor::vector(x), i % 4)
                .unwrap()
                <= bound
        );
    }
}

#[test]
fn lowfreq_world_ignores_high_coefficients_bitwise() {
    let cfg = small_config(WorldKind::LowFreq { j: 3 });
    let basis = basis_for(&cfg, 4);
    let world = World::build(&cfg, Some(&basis)).unwrap();
    let mut rng = RngState::new(4);
    let z = Tensor::new(vec![2, 4, 4], rng.normals(32)).unwrap();
    let w = proj_full(&z, &basis).unwrap();
    let base = coeff_reward(&world, &w, 1);
    for p in 0..4 {
        for i in 3..8 {
            let mut moved = w.clone();
            moved.set(p, i, w.get(p, i) + rng.normal());
            assert_eq!(coeff_reward(&world, &moved, 1).to_bits(), base.to_bits());
        }
    }
    let mut moved = w.clone();
    moved.set(0, 0, w.get(0, 0) + 0.1);
    assert!((coeff_reward(&world, &moved, 1) - base).abs() > 0.0);
}

#[test]
fn lowfreq_j_out_of_range() {
    let cfg = small_config(WorldKind::LowFreq { j: 9 });
    let basis = basis_for(&cfg, 4);
    assert!(World::build(&cfg, Some(&basis)).is_err());
    let cfg = small_config(WorldKind::LowFreq { j: 0 });
    assert!(World::build(&cfg, Some(&basis)).is_err());
    assert!(World::build(&small_config(WorldKind::LowFreq { j: 2 }), None).is_err());
}

#[test]
fn epsilon_zero_for_lowfreq_and_large_for_highfreq() {
    let cfg = small_config(WorldKind::LowFreq { j: 2 });
    let basis = basis_for(&cfg, 4);
    let world = World::build(&cfg, Some(&basis)).unwrap();
    let mut rng = RngState::new(5);
    let rep = epsilon_estimate(&world, &basis, 0, 100, 100, &mut rng).unwrap();
    assert!(rep.estimate <= 1e-12, "{rep:?}");

    let cfg = small_config(WorldKind::HighFreq);
    let world = World::build(&cfg, Some(&basis)).unwrap();
    let rep = epsilon_estimate(&world, &basis, 0, 100, 100, &mut rng).unwrap();
    assert!(rep.reward_range > 0.0);
    assert!(rep.estimate >= rep.reward_range / 2.0, "{rep:?}");
    assert!(epsilon_estimate(&world, &basis, 0, 10, 100, &mut rng).is_err());
}

#[test]
fn manifest_rebuilds_identical_world() {
    let cfg = small_config(WorldKind::Generic);
    let world = World::build(&cfg, None).unwrap();
    let json = world.to_json().unwrap();
    let back: WorldConfig = serde_json::from_str(&json).unwrap();
    let again = World::build(&back, None).unwrap();
    let mut rng = RngState::new(6);
    let z = Tensor::new(vec![2, 4, 4], rng.normals(32)).unwrap();
    assert_eq!(
        world.reward_of_latent(&z, 3).unwrap().to_bits(),
        again.reward_of_latent(&z, 3).unwrap().to_bits()
    );
}

#[test]
fn latent_and_coefficient_paths_agree() {
    let cfg = small_config(WorldKind::Generic);
    let basis = basis_for(&cfg, 4);
    let world = World::build(&cfg, Some(&basis)).unwrap();
    let mut rng = RngState::new(8);
    let z = Tensor::new(vec![2, 4, 4], rng.normals(32)).unwrap();
    let w = proj_full(&z, &basis).unwrap();
    let a = world.reward_of_latent(&z, 0).unwrap();
    let b = coeff_reward(&world, &w, 0);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn default_generator_dwarfs_param_budget() {
    let world = World::build(&WorldConfig::default(), None).unwrap();
    assert_eq!(
        world.generator().param_count(),
        256 * 3072 + 3072 + 3072 * 32 + 32
    );
}
