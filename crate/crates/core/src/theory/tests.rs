use super::suite::*;
use super::*;
use crate::codec::PatchBasis;
use crate::net::{LensConfig, LensNet};
use crate::numerics::{random_orthonormal, RngState, Tensor};
use crate::world::{World, WorldConfig, WorldKind};

fn small_basis() -> PatchBasis {
    let cfg = WorldConfig {
        channels: 2,
        height: 4,
        width: 4,
        patch_size: 2,
        ..WorldConfig::default()
    };
    let g = cfg.geometry().unwrap();
    let v = random_orthonormal(g.patch_dim(), &mut RngState::new(17)).unwrap();
    PatchBasis::from_orthonormal(g, v, g.patch_dim()).unwrap()
}

fn small_world(kind: WorldKind, basis: Option<&PatchBasis>) -> World {
    let cfg = WorldConfig {
        kind,
        seed: 2,
        channels: 2,
        height: 4,
        width: 4,
        patch_size: 2,
        feature_dim: 6,
        hidden: 24,
        n_prompts: 4,
        proj_dim: 4,
        ..WorldConfig::default()
    };
    World::build(&cfg, basis).unwrap()
}

#[test]
fn grid_prior_integrates_to_one() {
    let axes = vec![uniform_axis(101, GRID_HALF_WIDTH); 2];
    let mut g = GridDensity::from_fn(axes, |w| {
        (-0.5 * (w[0] * w[0] + w[1] * w[1])).exp() / (2.0 * std::f64::consts::PI)
    })
    .unwrap();
    assert!((g.riemann_sum() - 1.0).abs() < 1e-8);
    g.normalize().unwrap();
    assert!(g.normalized);
    assert_eq!(g.kl_to(&g.clone()).unwrap(), 0.0);
    assert!(GridDensity::from_fn(vec![uniform_axis(3, 1.0)], |_| -1.0).is_err());
}

fn instance(dim: usize, k: usize, eps: f64, delta: Perturbation, points: usize) -> Prop1Instance {
    Prop1Instance {
        dim,
        k,
        epsilon: eps,
        points_per_axis: points,
        low: LowReward::NegQuadratic { scale: 1.0 },
        delta,
    }
}

#[test]
fn zero_perturbation_gives_zero_kl() {
    let r = verify_prop1(&instance(2, 1, 0.1, Perturbation::Zero, 400)).unwrap();
    assert_eq!(r.exact, 0.0);
    assert!(r.pass);
}

/// With δ depending on w_H only, q* = q̃_L · (q_H e^δ / Z_H), so the KL
/// reduces to a one-dimensional integral.
fn one_dim_kl(eps: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 200_001;
    let h = 16.0 / (n - 1) as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let xs: Vec<f64> = (0..n).map(|i| -8.0 + i as f64 * h).collect();
    let z: f64 = xs.iter().map(|&x| pdf(x) * (eps * f(x)).exp()).sum::<f64>() * h;
    xs.iter()
        .map(|&x| {
            let p = pdf(x) * (eps * f(x)).exp() / z;
            p * (p / pdf(x)).ln()
        })
        .sum::<f64>()
        * h
}

#[test]
fn sine_perturbation_matches_one_dimensional_oracle() {
    let r = verify_prop1(&instance(2, 1, 0.1, Perturbation::SinHigh, 400)).unwrap();
    let oracle = one_dim_kl(0.1, f64::sin);
    assert!((r.exact - oracle).abs() < 1e-8, "{} vs {oracle}", r.exact);
    assert!(r.exact > 0.0 && r.exact <= 0.2);
    assert!(r.pass);
}

#[test]
fn sign_like_perturbation_respects_bound() {
    for eps in [0.05, 0.5] {
        let r = verify_prop1(&instance(
            2,
            1,
            eps,
            Perturbation::SignLike { sharpness: 40.0 },
            400,
        ))
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.exact <= 2.0 * eps);
    }
}

#[test]
fn prop1_rejects_coarse_grids_and_high_dims() {
    assert!(verify_prop1(&instance(2, 1, 0.1, Perturbation::SinHigh, 5)).is_err());
    assert!(verify_prop1(&instance(5, 1, 0.1, Perturbation::SinHigh, 10)).is_err());
    assert!(verify_prop1(&instance(2, 2, 0.1, Perturbation::SinHigh, 10)).is_err());
}

#[test]
fn prop1_suite_covers_required_grid() {
    let inst = prop1_instances(1);
    assert!(inst.len() >= 10);
    for eps in PROP1_EPSILONS {
        assert!(inst.iter().any(|i| i.epsilon == eps));
    }
    assert!(inst.iter().all(|i| i.dim <= MAX_GRID_DIM));
}

#[test]
fn quadratic_kl_worked_example() {
    let r = verify_quadratic_kl(0.1, 4, None).unwrap();
    let exact = 2.0 * (1.1f64 * 1.1 - 1.0 - 2.0 * 1.1f64.ln());
    assert!((r.exact - exact).abs() < 1e-15);
    assert!((r.exact - 0.038759).abs() < 1e-6);
    assert!((r.approx.unwrap() - 0.02).abs() < 1e-15);
    assert!((r.bound - 4.0 * (-(0.9f64.ln()) - 0.1)).abs() < 1e-15);
    assert!((r.bound - 0.021442).abs() < 1e-6);
    assert!(r.pass);
    let zero = verify_quadratic_kl(0.0, 4, Some((100, &mut RngState::new(1)))).unwrap();
    assert_eq!((zero.exact, zero.approx), (0.0, Some(0.0)));
    assert!(zero.pass);
    assert!(verify_quadratic_kl(1.0, 4, None).is_err());
    assert!(verify_quadratic_kl(-0.1, 4, None).is_err());
}

#[test]
fn quadratic_kl_monte_carlo_agrees() {
    for eps in [0.05, 0.3, 0.9] {
        let r = verify_quadratic_kl(eps, 8, Some((50_000, &mut RngState::new(3)))).unwrap();
        let mc = r.monte_carlo.unwrap();
        assert!(mc.pass, "{eps}: {mc:?} vs {}", r.exact);
    }
}

#[test]
fn stein_linear_trace_is_exact() {
    let mut rng = RngState::new(5);
    let a_t = Tensor::matrix(5, 5, rng.normals(25)).unwrap();
    let tr: f64 = (0..5).map(|i| a_t.get(i, i)).sum();
    let case = SteinCase::Linear { a_t };
    let r = verify_stein(
        "linear",
        |t, x| case.apply(t, x),
        [1, 5],
        20_000,
        256,
        &mut rng,
    )
    .unwrap();
    assert!((r.rhs - tr).abs() < 1e-12);
    assert_eq!(r.rhs_se, 0.0);
    assert!(r.pass, "{r:?}");
    assert!((r.lhs - tr).abs() < 4.0 * r.lhs_se);
}

#[test]
fn stein_zero_init_lens_gives_zero_on_both_sides() {
    let cfg = LensConfig {
        n_tokens: 4,
        coeff_dim: 3,
        hidden: 8,
        n_layers: 1,
        n_heads: 2,
        embed_dim: 4,
        gate_init_logit: -2.0,
    };
    let net = std::sync::Arc::new(LensNet::init(&cfg, &mut RngState::new(1)).unwrap());
    let case = SteinCase::Lens {
        net,
        prompt: Tensor::matrix(2, 4, vec![0.1; 8]).unwrap(),
    };
    let r = verify_stein(
        "lens0",
        |t, x| case.apply(t, x),
        case.sample_shape(),
        200,
        8,
        &mut RngState::new(2),
    )
    .unwrap();
    assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
    assert!(r.pass);
}

#[test]
fn stein_hutchinson_path_and_growth_probe() {
    let mut rng = RngState::new(8);
    let n = 300;
    let a_t = Tensor::from_fn(n, n, |i, j| if i == j { 0.5 } else { 0.0 });
    let case = SteinCase::Linear { a_t };
    let r = verify_stein("big", |t, x| case.apply(t, x), [1, n], 200, 50, &mut rng).unwrap();
    assert_eq!(
        r.trace,
        TraceMethod::Hutchinson {
            probes: HUTCHINSON_PROBES
        }
    );
    assert!(r.pass, "{r:?}");
    assert!((r.rhs - 150.0).abs() < 4.0 * r.rhs_se.max(1e-9));

    let square = |t: &mut crate::autodiff::Tape, x| t.square(x);
    let r = verify_stein("square", square, [1, 3], 1000, 100, &mut rng).unwrap();
    assert!(r.growth_ratio > 50.0);
    assert!(!r.pass);
}

#[test]
fn stein_random_mlps_pass() {
    let cases = stein_cases(3).unwrap();
    assert_eq!(cases.len(), 25);
    for (i, case) in cases.iter().enumerate().skip(5).take(4) {
        let r = verify_stein(
            &case.name(),
            |t, x| case.apply(t, x),
            case.sample_shape(),
            20_000,
            512,
            &mut RngState::new(i as u64),
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.lhs.abs() > 0.0);
    }
}

#[test]
fn objective_is_offset_invariant() {
    let b = small_basis();
    let world = small_world(WorldKind::Generic, None);
    let cfg = LensConfig {
        n_tokens: 4,
        coeff_dim: 4,
        hidden: 8,
        n_layers: 1,
        n_heads: 2,
        embed_dim: 8,
        gate_init_logit: -2.0,
    };
    let mut rng = RngState::new(4);
    let mut offsets = vec![5.0, 0.0];
    offsets.extend((0..20).map(|_| 10.0 * rng.normal()));
    let r = verify_objective_identity(&world, &b, &cfg, &offsets, 3, &mut rng).unwrap();
    assert!(r.pass, "{r:?}");
    assert_eq!(r.probes[1].shift_error, 0.0);
    assert_eq!(r.probes[1].loss, r.probes[1].shifted_loss);
    assert!(r.probes.iter().all(|p| p.gradients_identical));
    assert!((r.probes[0].shifted_loss - r.probes[0].loss + 5.0).abs() < 1e-12);
}

#[test]
fn lowfreq_spectrum_is_exactly_truncated() {
    let b = small_basis();
    let s = run_spectrum_suite(&b, 3, 40, 1).unwrap();
    assert!(s.lowfreq_exact);
    assert_eq!(s.lowfreq.rho[2], 1.0);
    assert!(s.lowfreq.energy[..3].iter().all(|&e| e > 0.0));
    assert_eq!(*s.lowfreq.rho.last().unwrap(), 1.0);
}

#[test]
fn isotropic_spectrum_is_flat() {
    let b = small_basis();
    let world = World::build(&WorldConfig::for_basis(&b, WorldKind::Isotropic), Some(&b)).unwrap();
    let s = gradient_energy_spectrum(&world, &b, &[0], 2500, &mut RngState::new(6)).unwrap();
    assert_eq!(s.n_patches, 10_000);
    assert!(s.isotropy_deviation() < 0.03, "{:?}", s.rho);
    for e in &s.energy {
        assert!((e - 1.0).abs() < 0.1, "{e}");
    }
}

#[test]
fn generic_spectrum_is_monotone_and_paths_agree() {
    let b = small_basis();
    let with = small_world(WorldKind::Generic, Some(&b));
    let without = small_world(WorldKind::Generic, None);
    let a = gradient_energy_spectrum(&with, &b, &[0, 1], 64, &mut RngState::new(2)).unwrap();
    let c = gradient_energy_spectrum(&without, &b, &[0, 1], 64, &mut RngState::new(2)).unwrap();
    assert!(a.energy.iter().all(|&e| e >= 0.0));
    assert!(a.rho.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*a.rho.last().unwrap(), 1.0);
    for (x, y) in a.energy.iter().zip(&c.energy) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-12), "{x} vs {y}");
    }
    let csv = a.to_csv().unwrap();
    assert!(csv.starts_with("j,E_j,rho_j\n1,"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn complexity_fit_and_exact_scalings() {
    let r = complexity_bench(&LensConfig::default(), &default_grid(32), 4, 1).unwrap();
    assert_eq!(r.rows.len(), 9);
    assert!(r.counts_match_tape);
    assert!(r.attention_quadruples);
    assert!(r.ffn_quadruples);
    assert!(
        r.fit.max_relative_residual < FIT_RESIDUAL_MAX,
        "{:?}",
        r.fit
    );
    assert!(r.fit_with_io.max_relative_residual < r.fit.max_relative_residual);
    assert!(complexity_bench(&LensConfig::default(), &default_grid(32)[..2], 4, 1).is_err());
}
