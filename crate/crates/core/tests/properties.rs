//! Property tests over the public API.

use lens_core::autodiff::{record, Tape};
use lens_core::codec::{
    decode_basis, encode_basis, fold, proj, recon, unfold, PatchBasis, PatchGeometry,
};
use lens_core::net::{decode_checkpoint, encode_checkpoint, LensConfig, LensNet, PromptBatch};
use lens_core::numerics::{random_orthonormal, symmetric_eigen};
use lens_core::theory::{linear_pushforward_kl, quadratic_kl_bound, verify_quadratic_kl};
use lens_core::train::{clip_grad_norm, global_norm};
use lens_core::{RngState, Tensor};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = PatchGeometry> {
    (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=3).prop_map(|(c, s, nh, nw)| {
        PatchGeometry::new(c, s * nh, s * nw, s).expect("s divides H and W by construction")
    })
}

fn random_basis(g: PatchGeometry, k: usize, seed: u64) -> PatchBasis {
    let d = g.patch_dim();
    let mut rng = RngState::new(seed);
    let v = random_orthonormal(d, &mut rng).unwrap();
    let eig = (0..d).map(|j| (d - j) as f64).collect();
    PatchBasis::new(g, v, rng.normals(d), eig, k.clamp(1, d)).unwrap()
}

fn latent(g: PatchGeometry, rng: &mut RngState) -> Tensor {
    Tensor::new(g.latent_shape().to_vec(), rng.normals(g.latent_len())).unwrap()
}

fn small_lens(n_tokens: usize, k: usize) -> LensConfig {
    LensConfig {
        n_tokens,
        coeff_dim: k,
        hidden: 8,
        n_layers: 2,
        n_heads: 2,
        embed_dim: 3,
        gate_init_logit: -2.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_inverts_unfold(g in geometry(), seed in any::<u64>()) {
        let z = latent(g, &mut RngState::new(seed));
        prop_assert_eq!(fold(&unfold(&z, g).unwrap(), g).unwrap(), z);
    }

    #[test]
    fn recon_inverts_proj(g in geometry(), k in 1usize..=27, seed in any::<u64>()) {
        let basis = random_basis(g, k, seed);
        let z = latent(g, &mut RngState::new(seed ^ 1));
        let split = proj(&z, &basis).unwrap();
        prop_assert!(recon(&split, &basis).unwrap().max_abs_diff(&z) <= 1e-9);
    }

    #[test]
    fn residual_is_orthogonal_to_kept_directions(g in geometry(), k in 1usize..=27, seed in any::<u64>()) {
        let basis = random_basis(g, k, seed);
        let z = latent(g, &mut RngState::new(seed ^ 2));
        let split = proj(&z, &basis).unwrap();
        let overlap = split.residual.matmul(basis.low()).unwrap();
        prop_assert!(overlap.max_abs() <= 1e-10);
    }

    #[test]
    fn basis_file_round_trips_bitwise(g in geometry(), k in 1usize..=27, seed in any::<u64>()) {
        let basis = random_basis(g, k, seed);
        let bytes = encode_basis(&basis).unwrap();
        let back = decode_basis(&bytes).unwrap();
        prop_assert_eq!(&back, &basis);
        prop_assert_eq!(encode_basis(&back).unwrap(), bytes);
    }

    #[test]
    fn clipping_bounds_the_global_norm(seed in any::<u64>(), clip in 1e-3f64..10.0, scale in 1e-3f64..1e3) {
        let mut rng = RngState::new(seed);
        let mut grads: Vec<Tensor> = (1..4)
            .map(|n| Tensor::matrix(n, 2, rng.normals(2 * n).into_iter().map(|x| scale * x).collect()).unwrap())
            .collect();
        let before = global_norm(&grads);
        let reported = clip_grad_norm(&mut grads, clip).unwrap();
        prop_assert_eq!(reported, before);
        let after = global_norm(&grads);
        if before > clip {
            prop_assert!(after <= clip + 1e-12);
        } else {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn quadratic_kl_error_is_bounded(eps in 0.0f64..0.95, n in 1usize..=64) {
        let exact = linear_pushforward_kl(eps, n);
        let approx = 0.5 * n as f64 * eps * eps;
        prop_assert!((exact - approx).abs() <= quadratic_kl_bound(n, eps) + 1e-12);
        prop_assert!(verify_quadratic_kl(eps, n, None).unwrap().pass);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fresh_network_is_exactly_zero(n in 1usize..=5, k in 1usize..=6, seed in any::<u64>()) {
        let cfg = small_lens(n, k);
        let mut rng = RngState::new(seed);
        let net = LensNet::init(&cfg, &mut rng).unwrap();
        let w = Tensor::matrix(n, k, rng.normals(n * k)).unwrap();
        let emb = Tensor::matrix(2, 3, rng.normals(6)).unwrap();
        let out = net.forward(&w, &PromptBatch::from_embeddings(&[&emb]).unwrap()).unwrap();
        prop_assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bitwise(n in 1usize..=5, k in 1usize..=6, seed in any::<u64>()) {
        let cfg = small_lens(n, k);
        let mut rng = RngState::new(seed);
        let params = cfg
            .layout()
            .into_iter()
            .map(|(_, [r, c])| Tensor::matrix(r, c, rng.normals(r * c)).unwrap())
            .collect();
        let net = LensNet::from_params(cfg, params).unwrap();
        let bytes = encode_checkpoint(&net).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn tape_replay_is_bitwise(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = Tensor::matrix(3, 4, rng.normals(12)).unwrap();
        let w = Tensor::matrix(4, 2, rng.normals(8)).unwrap();
        let rec = record(&[x.clone(), w.clone()], |t: &mut Tape, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.tanh(y)?;
            let y = t.softmax_rows(y)?;
            t.sum(y)
        })
        .unwrap();
        let again = rec.tape.replay(&[(rec.inputs[0], x), (rec.inputs[1], w)]).unwrap();
        prop_assert_eq!(again.value(rec.output), rec.value());
    }

    #[test]
    fn jacobi_matches_nalgebra(seed in any::<u64>(), n in 2usize..=24) {
        let mut rng = RngState::new(seed);
        let g = rng.normals(n * n);
        let sym: Vec<f64> = (0..n * n).map(|i| 0.5 * (g[i] + g[(i % n) * n + i / n])).collect();
        let ours = symmetric_eigen(&Tensor::matrix(n, n, sym.clone()).unwrap()).unwrap();
        let mut oracle: Vec<f64> = nalgebra::DMatrix::from_row_slice(n, n, &sym)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.eigenvalues.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }
}
