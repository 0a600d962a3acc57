mod common;

use common::{dampened, direct_error, gaussian_matrix, random_layer, random_mask};
use mixprune::{
    compute_saliency, layer_recon_error, matmul, obs_downdate, prune_blocked, prune_iterative_obs, prune_only,
    reconstruct_closed_form, select_mask_unstructured, spd_inverse, Criterion, HessianState, Matrix, Scope,
    SparsityMask,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn iterative_obs_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let l = random_layer(&mut rng);
        let state = dampened(&l.x, 0.01);
        let mask = random_mask(l.w.rows(), l.w.cols(), &mut rng);
        let cf = reconstruct_closed_form(&l.w, &mask, &state).unwrap();
        let it = prune_iterative_obs(&l.w, &mask, &state).unwrap();
        let diff = cf.weights.sub(&it.weights).unwrap().max_abs();
        assert!(diff <= 1e-6 * l.w.max_abs().max(1.0), "weights differ by {diff}");
        assert!(rel_close(cf.recon_error, it.recon_error, 1e-6));
    }
}

#[test]
fn downdates_commute() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let b = gaussian_matrix(8, 4, &mut rng);
        let mut h = matmul(&b.transpose(), &b).unwrap();
        for i in 0..4 {
            h.set(i, i, h.get(i, i) + 0.1);
        }
        let inv = spd_inverse(&h).unwrap();
        let a = rng.random_range(0..4);
        let c = (a + rng.random_range(1..4)) % 4;
        let ab = obs_downdate(&obs_downdate(&inv, a).unwrap(), c).unwrap();
        let ba = obs_downdate(&obs_downdate(&inv, c).unwrap(), a).unwrap();
        assert!(ab.sub(&ba).unwrap().max_abs() <= 1e-10 * inv.max_abs());

        // the surviving block is the inverse of the kept Hessian block
        let kept: Vec<usize> = (0..4).filter(|&i| i != a && i != c).collect();
        let direct = spd_inverse(&h.principal_submatrix(&kept)).unwrap();
        for (i, &r) in kept.iter().enumerate() {
            for (j, &s) in kept.iter().enumerate() {
                assert!((ab.get(r, s) - direct.get(i, j)).abs() <= 1e-9 * direct.max_abs());
            }
        }
    }
}

#[test]
fn closed_form_error_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let l = random_layer(&mut rng);
        let state = dampened(&l.x, 0.01);
        let mask = random_mask(l.w.rows(), l.w.cols(), &mut rng);
        let out = reconstruct_closed_form(&l.w, &mask, &state).unwrap();
        let direct = direct_error(&l.w, &out.weights, &l.x);
        assert!(rel_close(out.recon_error, direct, 1e-8), "{} vs {direct}", out.recon_error);
        for r in 0..mask.shape().0 {
            for c in 0..mask.shape().1 {
                if !mask.keep(r, c) {
                    assert_eq!(out.weights.get(r, c).to_bits(), 0f64.to_bits());
                }
            }
        }
    }
}

#[test]
fn greedy_mask_against_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ratios = Vec::new();
    for _ in 0..30 {
        let w = gaussian_matrix(1, 6, &mut rng);
        let mix = gaussian_matrix(6, 6, &mut rng);
        let x = matmul(&gaussian_matrix(18, 6, &mut rng), &mix).unwrap();
        let state = dampened(&x, 0.01);
        let inv = state.invert().unwrap();
        let s = compute_saliency(&w, &state, &inv, Criterion::Obs).unwrap();
        let greedy = select_mask_unstructured(&s, 0.5, Scope::PerRow).unwrap();
        let greedy_err = reconstruct_closed_form(&w, &greedy, &state).unwrap().recon_error;

        let mut best = f64::INFINITY;
        for bits in 0u32..64 {
            if bits.count_ones() != 3 {
                continue;
            }
            let keep = (0..6).map(|c| bits & (1 << c) == 0).collect();
            let mask = SparsityMask::from_keep(1, 6, keep).unwrap();
            best = best.min(reconstruct_closed_form(&w, &mask, &state).unwrap().recon_error);
        }
        assert!(greedy_err >= best - 1e-12 * best.max(1.0));
        ratios.push(greedy_err / best.max(1e-300));
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    println!("greedy/exhaustive error ratio: median {median:.3}, worst {:.3}", ratios[ratios.len() - 1]);
    assert!(median.is_finite());
}

#[test]
fn blocked_beats_prune_only_in_the_median() {
    let mut ratios = Vec::new();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian_matrix(6, 16, &mut rng);
        let mix = gaussian_matrix(16, 16, &mut rng);
        let x = matmul(&gaussian_matrix(48, 16, &mut rng), &mix).unwrap();
        let state = dampened(&x, 0.01);
        let inv = state.invert().unwrap();
        let s = compute_saliency(&w, &state, &inv, Criterion::Obs).unwrap();
        let mask = select_mask_unstructured(&s, 0.5, Scope::PerRow).unwrap();
        let po = prune_only(&w, &mask, &state).unwrap().recon_error;
        let bl = prune_blocked(&w, 0.5, Criterion::Obs, &state, 4).unwrap();
        assert_eq!(bl.mask.pruned_count(), mask.pruned_count());
        ratios.push(bl.recon_error / po);
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    assert!(median <= 1.0, "median blocked/prune-only ratio {median}");
}

#[test]
fn blocked_block_sizes_keep_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = gaussian_matrix(5, 13, &mut rng);
    let x = gaussian_matrix(40, 13, &mut rng);
    let state = dampened(&x, 0.01);
    for block in [1, 2, 5, 13, 64] {
        let out = prune_blocked(&w, 0.4, Criterion::Obs, &state, block).unwrap();
        for r in 0..5 {
            assert_eq!(out.mask.row_pruned_count(r), 5, "block {block} row {r}");
        }
        let direct = layer_recon_error(&w, &out.weights, &state).unwrap();
        assert!(rel_close(direct, out.recon_error, 1e-9));
    }
}

#[test]
fn zero_sparsity_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let l = random_layer(&mut rng);
        let state = dampened(&l.x, 0.01);
        let mask = SparsityMask::all_kept(l.w.rows(), l.w.cols());
        for out in [
            reconstruct_closed_form(&l.w, &mask, &state).unwrap(),
            prune_iterative_obs(&l.w, &mask, &state).unwrap(),
            prune_only(&l.w, &mask, &state).unwrap(),
            prune_blocked(&l.w, 0.0, Criterion::Obs, &state, 4).unwrap(),
        ] {
            assert_eq!(out.weights, l.w);
            assert_eq!(out.recon_error, 0.0);
        }
    }
}

#[test]
fn identity_hessian_reduces_to_magnitude_pruning() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let d = rng.random_range(2..12);
        let w = gaussian_matrix(4, d, &mut rng);
        let state = HessianState::from_samples(&Matrix::identity(d)).unwrap().dampen(0.0).unwrap();
        let inv = state.invert().unwrap();
        let obs = compute_saliency(&w, &state, &inv, Criterion::Obs).unwrap();
        let mag = compute_saliency(&w, &state, &inv, Criterion::Magnitude).unwrap();
        let m_obs = select_mask_unstructured(&obs, 0.5, Scope::PerRow).unwrap();
        let m_mag = select_mask_unstructured(&mag, 0.5, Scope::PerRow).unwrap();
        assert_eq!(m_obs, m_mag);
        let cf = reconstruct_closed_form(&w, &m_obs, &state).unwrap();
        assert!(cf.weights.sub(&m_obs.apply(&w)).unwrap().max_abs() <= 1e-12);
    }
}
