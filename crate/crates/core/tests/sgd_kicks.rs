//! Single SGD steps from a fixed network, sampled many times, against the
//! moment engine's drift and kick covariance.

use medlab::ode::DriftEngine;
use medlab::sde::diffusion_covariance;
use medlab::sgd::{sgd_step, DataStream, StudentNetwork, TeacherModel};
use medlab::TaskParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Rows `c_j w⋆ + g_j` with Gaussian `g_j`: overlaps well away from the saddle.
fn correlated_student(teacher: &TeacherModel, coefs: &[f64], seed: u64) -> StudentNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = coefs
        .iter()
        .map(|c| {
            teacher
                .weights()
                .iter()
                .map(|t| c * t + 0.8 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();
    StudentNetwork::from_rows(rows, vec![1.0; coefs.len()]).unwrap()
}

/// Stacked `(ΔM_j, ΔQ_jl for all ordered pairs)` in units of `γ/(pd)`.
fn kick(before: &medlab::OverlapState, after: &medlab::OverlapState, dt: f64) -> Vec<f64> {
    let p = before.width();
    let mut v: Vec<f64> = (0..p).map(|j| (after.m[j] - before.m[j]) / dt).collect();
    for j in 0..p {
        for l in 0..p {
            v.push((after.q[(j, l)] - before.q[(j, l)]) / dt);
        }
    }
    v
}

#[test]
fn kick_moments_match_engine() {
    let (d, p, n) = (400, 2, 200_000);
    let params = TaskParams {
        spherical: false,
        ..TaskParams::spherical(d, p, 0.3, 0.5)
    };
    let teacher = TeacherModel::random(d, params.delta, 3);
    let net = correlated_student(&teacher, &[0.6, -0.3], 4);
    let state = net.measure_overlaps(&teacher);
    let dt = params.sgd_time_step();

    let kicks: Vec<Vec<f64>> = DataStream::new(&teacher, 5, 0)
        .take(n)
        .map(|s| kick(&state, &sgd_step(&net, &s, &params).measure_overlaps(&teacher), dt))
        .collect();
    let dim = kicks[0].len();
    let nf = n as f64;
    let mean: Vec<f64> = (0..dim).map(|i| kicks.iter().map(|k| k[i]).sum::<f64>() / nf).collect();

    let drift = DriftEngine::new(p).drift(&state, &params).unwrap();
    let mut expected = drift.psi.iter().copied().collect::<Vec<_>>();
    for j in 0..p {
        for l in 0..p {
            expected.push(drift.phi[(j, l)]);
        }
    }
    let cov = diffusion_covariance(&state, &params).unwrap().cov;
    for i in 0..dim {
        let se = (cov[(i, i)] / nf).sqrt();
        assert!(
            (mean[i] - expected[i]).abs() < 5.0 * se,
            "mean {i}: sampled {} vs engine {} (se {se})",
            mean[i],
            expected[i]
        );
    }
    for a in 0..dim {
        for b in a..dim {
            let prods: Vec<f64> = kicks.iter().map(|k| (k[a] - mean[a]) * (k[b] - mean[b])).collect();
            let c = prods.iter().sum::<f64>() / (nf - 1.0);
            let var = prods.iter().map(|v| (v - c).powi(2)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt();
            assert!(
                (c - cov[(a, b)]).abs() < 5.0 * se + 1e-9 * cov[(a, b)].abs(),
                "cov ({a},{b}): sampled {c} vs engine {} (se {se})",
                cov[(a, b)]
            );
        }
    }
}

#[test]
fn kick_is_linear_in_the_sample_for_tiny_steps() {
    // With γ → 0 the quadratic Q term vanishes and ΔQ/δt = 4 r λ².
    let d = 300;
    let params = TaskParams {
        spherical: false,
        ..TaskParams::spherical(d, 1, 1e-6, 0.0)
    };
    let teacher = TeacherModel::random(d, 0.0, 8);
    let net = correlated_student(&teacher, &[0.4], 9);
    let s0 = net.measure_overlaps(&teacher);
    for s in DataStream::new(&teacher, 10, 0).take(20) {
        let lambda = net.predict(&s.x).sqrt();
        let r = s.y - lambda * lambda;
        let k = kick(&s0, &sgd_step(&net, &s, &params).measure_overlaps(&teacher), params.sgd_time_step());
        let want = 4.0 * r * lambda * lambda;
        assert!((k[1] - want).abs() < 1e-4 * (1.0 + want.abs()), "{} vs {want}", k[1]);
    }
}
