//! Checks against independent oracles: value iteration, exact population
//! expectations over the full transition support, direct summation and
//! closed-form singular values.

mod common;

use common::*;
use nalgebra::Matrix2;
use opesel_core::data::{sample_dataset, SampleMode, Weights};
use opesel_core::lstdq::{
    empirical_moments, lstdq_param_loss, pairwise_td_correlation, signed_pair_correlation, sigma_min_diagnostic,
    smallest_singular_value, FeaturePair, LstdMoments, Normalizers, Variant,
};
use opesel_core::mdp::{exact_q_pi, occupancy, QTable, TabularMdp};
use opesel_core::oracle::{exact_cache, exact_support, expected_next_value_variance};
use opesel_core::qcache::QCache;
use opesel_core::selectors::*;

#[test]
fn exact_q_matches_value_iteration() {
    for seed in 0..20u64 {
        let ns = 2 + (seed as usize * 7) % 19;
        let na = 1 + (seed as usize) % 4;
        let model = random_mdp(seed, ns, na, 0.9, 0.3);
        let policy = random_policy(seed, ns, na);
        let q = exact_q_pi(&model, &policy).unwrap();
        let vi = value_iteration_q(&model, &policy, 1e-13);
        let err = q.values.iter().zip(&vi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-8, "seed {seed}: {err}");
    }
}

struct Instance {
    model: TabularMdp,
    candidates: Vec<TabularMdp>,
    policy: opesel_core::mdp::Policy,
    mu: Vec<f64>,
    tables: Vec<QTable>,
}

/// Groundtruth is candidate 0; the others have perturbed dynamics.
fn instance(seed: u64, ns: usize, na: usize, gamma: f64, m: usize) -> Instance {
    let model = random_mdp(seed, ns, na, gamma, 0.4);
    let mut candidates = vec![model.clone()];
    for k in 1..m {
        candidates.push(perturbed(&model, seed * 100 + k as u64, 0.2 + 0.1 * k as f64));
    }
    let policy = random_policy(seed, ns, na);
    let mu = random_dist(seed, ns * na);
    let tables = tables(&candidates, &policy);
    Instance { model, candidates, policy, mu, tables }
}

fn exact_population(inst: &Instance, with_backups: bool) -> (opesel_core::oracle::ExactSupport, QCache) {
    let sup = exact_support(&inst.model, &inst.mu).unwrap();
    let models = with_backups.then_some(inst.candidates.as_slice());
    let cache = exact_cache(&inst.tables, &inst.policy, &sup.data, inst.model.discount, models).unwrap();
    (sup, cache)
}

#[test]
fn sampled_moments_converge_to_population_moments() {
    let inst = instance(11, 5, 2, 0.8, 3);
    let (sup, exact) = exact_population(&inst, false);
    let norms = Normalizers::ones(3);
    let pair = FeaturePair::new(Variant::Vanilla, 0, 1, &norms).unwrap();
    let population = empirical_moments(&exact, &sup.data, &pair, &sup.weights).unwrap();

    // Direct population moments from the tables as a second oracle.
    let (q0, q1) = (&inst.tables[0], &inst.tables[1]);
    let na = inst.model.num_actions;
    let mut sigma = [[0.0; 2]; 2];
    let mut b = [0.0; 2];
    for (sa, &w) in inst.mu.iter().enumerate() {
        let (s, a) = (sa / na, sa % na);
        let phi = [q0.get(s, a), q1.get(s, a)];
        for r in 0..2 {
            for c in 0..2 {
                sigma[r][c] += w * phi[r] * phi[c];
            }
            b[r] += w * phi[r] * inst.model.r(s, a);
        }
    }
    for r in 0..2 {
        assert!(close(population.b_vec[r], b[r], 1e-12));
        for c in 0..2 {
            assert!(close(population.sigma[r][c], sigma[r][c], 1e-12));
        }
    }

    // 10^6 tuples drawn from μ.
    let data = sample_from(&inst.model, &inst.mu, 1_000_000, 5);
    let cache = exact_cache(&inst.tables, &inst.policy, &data, inst.model.discount, None).unwrap();
    let sampled = empirical_moments(&cache, &data, &pair, &Weights::uniform(data.n())).unwrap();
    let scale = sigma[0][0].abs().max(1.0);
    for r in 0..2 {
        assert!((sampled.b_vec[r] - population.b_vec[r]).abs() / scale < 5e-3);
        for c in 0..2 {
            assert!((sampled.sigma[r][c] - population.sigma[r][c]).abs() / scale < 5e-3);
            assert!((sampled.a_mat[r][c] - population.a_mat[r][c]).abs() / scale < 5e-3);
        }
    }
}

fn sample_from(model: &TabularMdp, mu: &[f64], n: usize, seed: u64) -> opesel_core::data::Dataset {
    use rand::distr::{weighted::WeightedIndex, Distribution};
    let mut r = rng(seed);
    let pairs = WeightedIndex::new(mu).unwrap();
    let na = model.num_actions;
    let transitions = (0..n)
        .map(|index| {
            let k = pairs.sample(&mut r);
            let (s, a) = (k / na, k % na);
            let s_next = WeightedIndex::new(model.p_row(s, a)).unwrap().sample(&mut r);
            opesel_core::data::Transition { s, a, r: model.r(s, a), s_next, index }
        })
        .collect();
    opesel_core::data::Dataset {
        transitions,
        behavior_id: "mu".into(),
        seed,
        mode: SampleMode::Iid,
        source_model_id: model.id.clone(),
        num_states: model.num_states,
        num_actions: na,
    }
}

#[test]
fn truth_has_zero_parameter_loss_under_exact_moments() {
    let inst = instance(3, 6, 3, 0.9, 4);
    let (sup, cache) = exact_population(&inst, false);
    let norms = Normalizers::estimate(&cache, &sup.weights, inst.model.v_max());
    for variant in Variant::ALL {
        for j in 1..4 {
            let pair = FeaturePair::new(variant, 0, j, &norms).unwrap();
            let mo = empirical_moments(&cache, &sup.data, &pair, &sup.weights).unwrap();
            assert!(lstdq_param_loss(&mo, pair.theta(true)) < 1e-10);
            assert_eq!(lstdq_param_loss(&mo, [0.0, 0.0]), mo.b_vec[0].abs().max(mo.b_vec[1].abs()));
            let flipped = FeaturePair::new(variant, j, 0, &norms).unwrap();
            let mo = empirical_moments(&cache, &sup.data, &flipped, &sup.weights).unwrap();
            assert!(lstdq_param_loss(&mo, flipped.theta(false)) < 1e-10);
            // θ* = A⁻¹b reproduces b exactly.
            let a = Matrix2::new(mo.a_mat[0][0], mo.a_mat[0][1], mo.a_mat[1][0], mo.a_mat[1][1]);
            if let Some(inv) = a.try_inverse() {
                let th = inv * nalgebra::Vector2::new(mo.b_vec[0], mo.b_vec[1]);
                assert!(lstdq_param_loss(&mo, [th[0], th[1]]) < 1e-9);
            }
        }
    }
}

#[test]
fn pairwise_correlation_matches_direct_summation() {
    let inst = instance(8, 4, 2, 0.7, 3);
    let data = sample_from(&inst.model, &inst.mu, 37, 2);
    let mut cache = exact_cache(&inst.tables, &inst.policy, &data, 0.7, None).unwrap();
    // Distinct halves so the cross-fitting is exercised.
    let mut r = rng(4);
    {
        use rand::Rng;
        let h = cache.halves.as_mut().unwrap();
        for v in [&mut h.q_sa_a, &mut h.q_sa_b, &mut h.q_next_a, &mut h.q_next_b] {
            for x in v.iter_mut() {
                *x += r.random::<f64>() - 0.5;
            }
        }
    }
    let w = Weights::from_indices(&[0, 3, 3, 5, 9, 9, 9, 20, 36, 1]);
    let norms = Normalizers::estimate(&cache, &w, 5.0);
    let h = cache.halves.as_ref().unwrap();
    let n = data.n();
    for variant in Variant::ALL {
        for (i, j) in [(0, 1), (2, 0), (1, 2)] {
            let pair = FeaturePair::new(variant, i, j, &norms).unwrap();
            let got = pairwise_td_correlation(&cache, &data, &pair, &w).unwrap();
            let feat = |qa: &[f64], t: usize| pair.features(qa[i * n + t], qa[j * n + t]);
            let mut want_i = [0.0; 2];
            for &(t, wt) in &w.entries {
                let rt = data.transitions[t].r;
                let td_a = h.q_sa_a[i * n + t] - rt - 0.7 * h.q_next_a[i * n + t];
                let td_b = h.q_sa_b[i * n + t] - rt - 0.7 * h.q_next_b[i * n + t];
                let (da, db) = (feat(&h.q_sa_a, t), feat(&h.q_sa_b, t));
                for k in 0..2 {
                    want_i[k] += wt * 0.5 * (da[k] * td_b + db[k] * td_a);
                }
            }
            for k in 0..2 {
                assert!(close(got.for_i[k], want_i[k].abs(), 1e-12), "{variant:?} {i} {j}");
            }
            // Identity with the LSTDQ residual of the basis vector.
            let mo = empirical_moments(&cache, &data, &pair, &w).unwrap();
            let res_i = mo.residual(pair.theta(true));
            let res_j = mo.residual(pair.theta(false));
            let scale = mo.b_vec[0].abs().max(mo.b_vec[1].abs()).max(1.0);
            for k in 0..2 {
                assert!((got.for_i[k] - res_i[k].abs()).abs() <= 1e-12 * scale);
                assert!((got.for_j[k] - res_j[k].abs()).abs() <= 1e-12 * scale);
            }
            let (si, _) = signed_pair_correlation(&cache, &data, &pair, &w).unwrap();
            assert_eq!(si.map(f64::abs), got.for_i);
        }
    }
}

#[test]
fn sigma_min_matches_characteristic_polynomial_and_svd() {
    let mut r = rng(21);
    for _ in 0..500 {
        use rand::Rng;
        let a = [[r.random::<f64>() * 4.0 - 2.0, r.random::<f64>() * 4.0 - 2.0], [
            r.random::<f64>() * 4.0 - 2.0,
            r.random::<f64>() * 4.0 - 2.0,
        ]];
        // Eigenvalues of AᵀA from its characteristic polynomial.
        let p = a[0][0] * a[0][0] + a[1][0] * a[1][0];
        let q = a[0][1] * a[0][1] + a[1][1] * a[1][1];
        let o = a[0][0] * a[0][1] + a[1][0] * a[1][1];
        let tr = p + q;
        let det = p * q - o * o;
        let lam_min = (tr - (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0;
        let s = smallest_singular_value(&a);
        assert!((s - lam_min.max(0.0).sqrt()).abs() < 1e-7);
        let svd = Matrix2::new(a[0][0], a[0][1], a[1][0], a[1][1]).singular_values();
        assert!((s - svd.min()).abs() < 1e-10);
        let mo = LstdMoments::from_parts(a, [[0.0; 2]; 2], [0.0; 2], 0.5);
        assert!((sigma_min_diagnostic(&mo) - svd.min()).abs() < 1e-10);
    }
    let id = LstdMoments::from_parts([[1.0, 0.0], [0.0, 1.0]], [[0.0; 2]; 2], [0.0; 2], 0.9);
    assert_eq!(sigma_min_diagnostic(&id), 1.0);
}

#[test]
fn duplicate_candidates_are_rank_deficient() {
    let inst = instance(5, 4, 2, 0.9, 2);
    let sup = exact_support(&inst.model, &inst.mu).unwrap();
    let dup = vec![inst.tables[0].clone(), QTable { model_id: "copy".into(), ..inst.tables[0].clone() }];
    let cache = exact_cache(&dup, &inst.policy, &sup.data, 0.9, None).unwrap();
    let pair = FeaturePair::new(Variant::Vanilla, 0, 1, &Normalizers::ones(2)).unwrap();
    let mo = empirical_moments(&cache, &sup.data, &pair, &sup.weights).unwrap();
    assert!(sigma_min_diagnostic(&mo) < 1e-10);
    let s = mo.sigma;
    assert_eq!(s[0][1], s[1][0]);
}

#[test]
fn zero_loss_suite_under_exact_expectations() {
    for seed in 0..5 {
        let inst = instance(40 + seed, 6, 3, 0.85, 4);
        let (sup, cache) = exact_population(&inst, true);
        let (d, w) = (&sup.data, &sup.weights);
        let v_max = inst.model.v_max();
        assert!(avg_bellman(&cache, d, w)[0] <= 1e-10);
        for v in Variant::ALL {
            assert!(lstd_tournament(&cache, d, w, v, v_max).unwrap()[0] <= 1e-10);
        }
        assert!(sign_flip(&cache, d, w).unwrap()[0].abs() <= 1e-10);
        let z = regression_zitovsky(&cache, d, w).unwrap();
        assert!(z.losses[0] <= 1e-10);
        assert!(regression_antos(&cache, d, w).unwrap().raw_losses[0].abs() <= 1e-10);
        let td = td_squared(&cache, d, w)[0];
        let gamma = inst.model.discount;
        let bias = gamma * gamma * expected_next_value_variance(&inst.model, &inst.policy, &inst.tables[0], &inst.mu);
        assert!(bias > 0.0);
        assert!((td - bias).abs() <= 1e-10, "{td} vs {bias}");
        // The other candidates are not consistent with the groundtruth data.
        assert!(lstd_tournament(&cache, d, w, Variant::NormalizedDiff, v_max).unwrap()[1..].iter().all(|&l| l > 1e-6));
    }
}

#[test]
fn shifted_truth_losses_follow_linearity() {
    let inst = instance(9, 5, 2, 0.8, 1);
    let sup = exact_support(&inst.model, &inst.mu).unwrap();
    let c = 0.37;
    let tables = vec![inst.tables[0].clone(), shifted(&inst.tables[0], c, "shifted")];
    let cache = exact_cache(&tables, &inst.policy, &sup.data, 0.8, None).unwrap();
    let (d, w) = (&sup.data, &sup.weights);
    let ab = avg_bellman(&cache, d, w);
    assert!(ab[0] < 1e-12);
    assert!((ab[1] - c * 0.2).abs() < 1e-12);
    // TD-squared: bias + c²(1-γ)² + 2c(1-γ)·E[TD of the truth] (= 0).
    let td = td_squared(&cache, d, w);
    assert!((td[1] - (td[0] + c * c * 0.04)).abs() < 1e-10);
    let lt = lstd_tournament(&cache, d, w, Variant::Vanilla, 1.0).unwrap();
    assert_eq!(argmin(&lt), 0);
    assert!(lt[1] > 0.0);
}

#[test]
fn sign_flip_attains_absolute_bellman_error() {
    // Candidates: the truth's Q-function under a wrong model, plus the truth.
    let inst = instance(14, 5, 2, 0.9, 3);
    let sup = exact_support(&inst.model, &inst.mu).unwrap();
    let order = [1usize, 0, 2];
    let tables: Vec<QTable> = order.iter().map(|&k| inst.tables[k].clone()).collect();
    let models: Vec<TabularMdp> = order.iter().map(|&k| inst.candidates[k].clone()).collect();
    let cache = exact_cache(&tables, &inst.policy, &sup.data, 0.9, Some(&models)).unwrap();
    let loss = sign_flip(&cache, &sup.data, &sup.weights).unwrap()[0];
    // E_μ|Q_1 - T^π Q_1| under the true model.
    let q = &tables[0];
    let na = inst.model.num_actions;
    let mut want = 0.0;
    for (sa, &w) in inst.mu.iter().enumerate() {
        let (s, a) = (sa / na, sa % na);
        let next: f64 = inst.model.p_row(s, a).iter().enumerate().map(|(s2, p)| p * q.state_value(s2, &inst.policy)).sum();
        want += w * (q.get(s, a) - inst.model.r(s, a) - 0.9 * next).abs();
    }
    assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
}

#[test]
fn regression_selectors_closed_forms() {
    // γ = 0: every backup is R, so step two scores E[(R - Q_i)²].
    let inst = instance(17, 4, 2, 0.0, 3);
    let sup = exact_support(&inst.model, &inst.mu).unwrap();
    let tables = vec![shifted(&inst.tables[0], 0.5, "a"), shifted(&inst.tables[0], -0.2, "b"), inst.tables[0].clone()];
    let cache = exact_cache(&tables, &inst.policy, &sup.data, 0.0, Some(&inst.candidates)).unwrap();
    let z = regression_zitovsky(&cache, &sup.data, &sup.weights).unwrap();
    assert!((z.losses[0] - 0.25).abs() < 1e-12);
    assert!((z.losses[1] - 0.04).abs() < 1e-12);
    assert!(z.losses[2] < 1e-12);

    // A single model: the loss is the exact Bellman error.
    let inst = instance(18, 5, 2, 0.9, 1);
    let sup = exact_support(&inst.model, &inst.mu).unwrap();
    let wrong = shifted(&inst.tables[0], 0.3, "wrong");
    let cache = exact_cache(std::slice::from_ref(&wrong), &inst.policy, &sup.data, 0.9, Some(&inst.candidates)).unwrap();
    let z = regression_zitovsky(&cache, &sup.data, &sup.weights).unwrap();
    assert!((z.losses[0] - 0.3f64.powi(2) * 0.01).abs() < 1e-12);
    assert_eq!(z.fitted, vec![0]);
}

#[test]
fn antos_without_the_true_backup_misses_by_the_fit_gap() {
    // Q_i is the truth's Q-function under a wrong model, and its backups are
    // taken only under wrong models: the correction removes the variance term
    // plus the best fit gap min_g E[(g - T^π Q_i)²], so the loss undershoots
    // the Bellman error by exactly that gap.
    let inst = instance(23, 5, 2, 0.9, 3);
    let sup = exact_support(&inst.model, &inst.mu).unwrap();
    let q = &inst.tables[1];
    let na = inst.model.num_actions;
    let truth_backup = |s: usize, a: usize| -> f64 {
        let next: f64 =
            inst.model.p_row(s, a).iter().enumerate().map(|(s2, p)| p * q.state_value(s2, &inst.policy)).sum();
        inst.model.r(s, a) + 0.9 * next
    };
    let mut bellman = 0.0;
    for (sa, &w) in inst.mu.iter().enumerate() {
        let (s, a) = (sa / na, sa % na);
        bellman += w * (q.get(s, a) - truth_backup(s, a)).powi(2);
    }

    let tables = vec![inst.tables[1].clone(), inst.tables[2].clone()];
    let models = vec![inst.candidates[1].clone(), inst.candidates[2].clone()];
    let cache = exact_cache(&tables, &inst.policy, &sup.data, 0.9, Some(&models)).unwrap();
    let antos = regression_antos(&cache, &sup.data, &sup.weights).unwrap();
    let b = cache.backup.as_ref().unwrap();
    let n = cache.n();
    let gap = (0..2)
        .map(|j| {
            sup.weights.mean(|t| {
                let tr = &sup.data.transitions[t];
                (QCache::backup_at(b, 2, n, 0, j, t) - truth_backup(tr.s, tr.a)).powi(2)
            })
        })
        .fold(f64::INFINITY, f64::min);
    assert!(gap > 1e-6);
    assert!((antos.raw_losses[0] - (bellman - gap)).abs() < 1e-10);
    assert!(antos.raw_losses[0] < bellman);

    // With the true model in the class the loss is the Bellman error.
    let tables = vec![inst.tables[1].clone(), inst.tables[0].clone()];
    let models = vec![inst.candidates[1].clone(), inst.candidates[0].clone()];
    let cache = exact_cache(&tables, &inst.policy, &sup.data, 0.9, Some(&models)).unwrap();
    let antos = regression_antos(&cache, &sup.data, &sup.weights).unwrap();
    assert!((antos.raw_losses[0] - bellman).abs() < 1e-10);
}

#[test]
fn avg_bellman_is_the_constant_discriminator_tournament() {
    let inst = instance(31, 6, 2, 0.9, 4);
    let data = sample_from(&inst.model, &inst.mu, 500, 3);
    let mut cache = exact_cache(&inst.tables, &inst.policy, &data, 0.9, None).unwrap();
    let mut r = rng(7);
    {
        use rand::Rng;
        let h = cache.halves.as_mut().unwrap();
        let n = data.n();
        for k in 0..h.q_sa_a.len() {
            let (da, db) = (r.random::<f64>() - 0.5, r.random::<f64>() - 0.5);
            h.q_sa_a[k] += da;
            h.q_sa_b[k] += db;
            cache.q_sa[k] = 0.5 * (h.q_sa_a[k] + h.q_sa_b[k]);
            let (ea, eb) = (r.random::<f64>() - 0.5, r.random::<f64>() - 0.5);
            h.q_next_a[k] += ea;
            h.q_next_b[k] += eb;
            cache.q_next[k] = 0.5 * (h.q_next_a[k] + h.q_next_b[k]);
        }
        assert_eq!(h.q_sa_a.len(), 4 * n);
    }
    for w in [Weights::uniform(data.n()), Weights::from_indices(&[1, 1, 4, 400, 499])] {
        let ab = avg_bellman(&cache, &data, &w);
        let ct = constant_discriminator_tournament(&cache, &data, &w).unwrap();
        for (a, b) in ab.iter().zip(&ct) {
            assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn bvft_degenerates_to_td_squared_and_single_cell_closed_form() {
    let inst = instance(12, 7, 3, 0.9, 3);
    let data = sample_from(&inst.model, &inst.mu, 300, 9);
    let mut cache = exact_cache(&inst.tables, &inst.policy, &data, 0.9, None).unwrap();
    // Distinct values at every point.
    let mut r = rng(1);
    {
        use rand::Rng;
        for x in cache.q_sa.iter_mut() {
            *x += 1e-3 * r.random::<f64>();
        }
    }
    for w in [Weights::uniform(data.n()), Weights::from_indices(&[0, 0, 5, 17, 17, 299])] {
        let fine = bvft(&cache, &data, &w, &[0.0], 1.0).unwrap();
        let td = td_squared(&cache, &data, &w);
        for (a, b) in fine.losses.iter().zip(&td) {
            assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
        // One cell holds everything: the loss is the squared average TD error.
        let coarse = bvft(&cache, &data, &w, &[1e6], 1.0).unwrap();
        let ab = avg_bellman(&cache, &data, &w);
        for (a, b) in coarse.losses.iter().zip(&ab) {
            assert!(close(*a, b * b, 1e-12), "{a} vs {}", b * b);
        }
    }
}

#[test]
fn identical_candidates_tie_to_the_lowest_index() {
    let inst = instance(2, 4, 2, 0.9, 1);
    let data = sample_from(&inst.model, &inst.mu, 100, 1);
    let twin = vec![shifted(&inst.tables[0], 0.1, "x"), shifted(&inst.tables[0], 0.1, "y")];
    let cache = exact_cache(&twin, &inst.policy, &data, 0.9, None).unwrap();
    let w = Weights::uniform(data.n());
    for v in Variant::ALL {
        let l = lstd_tournament(&cache, &data, &w, v, 1.0).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(argmin(&l), 0);
    }
    let b = bvft(&cache, &data, &w, &DEFAULT_RESOLUTIONS, 1.0).unwrap();
    assert_eq!(b.losses[0], b.losses[1]);
    assert_eq!(argmin(&b.losses), 0);
}

#[test]
fn fast_tournament_matches_pairwise_features() {
    let inst = instance(27, 6, 2, 0.9, 4);
    let data = sample_from(&inst.model, &inst.mu, 200, 4);
    let mut cache = exact_cache(&inst.tables, &inst.policy, &data, 0.9, None).unwrap();
    let mut r = rng(3);
    {
        use rand::Rng;
        let h = cache.halves.as_mut().unwrap();
        for v in [&mut h.q_sa_a, &mut h.q_sa_b, &mut h.q_next_a, &mut h.q_next_b] {
            for x in v.iter_mut() {
                *x += 0.3 * (r.random::<f64>() - 0.5);
            }
        }
    }
    let w = Weights::from_indices(&(0..200).map(|t| (t * 7) % 150).collect::<Vec<_>>());
    let v_max = inst.model.v_max();
    let norms = Normalizers::estimate(&cache, &w, v_max);
    for v in Variant::ALL {
        let fast = lstd_tournament(&cache, &data, &w, v, v_max).unwrap();
        for (i, &got) in fast.iter().enumerate() {
            let mut want: f64 = 0.0;
            for j in (0..4).filter(|&j| j != i) {
                let pair = FeaturePair::new(v, i, j, &norms).unwrap();
                let c = pairwise_td_correlation(&cache, &data, &pair, &w).unwrap();
                want = want.max(c.for_i[0]).max(c.for_i[1]);
            }
            assert!(close(got, want, 1e-10), "{v:?} {i}: {got} vs {want}");
        }
    }
}

#[test]
fn iid_dataset_frequencies_match_occupancy() {
    let inst = instance(6, 4, 2, 0.8, 1);
    let mu = occupancy(&inst.model, &inst.policy).unwrap();
    let data = sample_dataset(&inst.model, &inst.policy, 200_000, SampleMode::Iid, 3).unwrap();
    let emp = data.empirical_distribution();
    for (a, b) in emp.iter().zip(&mu) {
        assert!((a - b).abs() < 0.01);
    }
}
