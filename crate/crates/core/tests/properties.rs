//! Randomized invariants across the network, calculus, approximation,
//! metric, manifold and risk layers.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sobolev_forge::algebra::{assemble_resnet, compile_scalar, parallel_sum, scalar_to_cnn};
use sobolev_forge::calculus::{build_product2, build_trapezoid, bump_product, wiring, MonomialBump, ProductApprox};
use sobolev_forge::manifold::{
    build_atlas, build_indicator, build_sqdist_net, rho_weights, IndicatorParams, ManifoldSpec,
};
use sobolev_forge::metrics::{
    grid_norm, holder_quotient, interpolation_ratio, lipschitz_estimate, sample_pairs, EvalGrid,
};
use sobolev_forge::risk::{
    adversarial_risk_curve, empirical_residual_study, noisy_samples, risk_approximator, Loss, RiskConfig, SearchBudget,
};
use sobolev_forge::targets::{registry, Factor, TargetFunction};
use sobolev_forge::taylor::{build_euclidean, EuclideanParams};
use sobolev_forge::{
    audit_class, block_forward, conv_forward, resnet_forward, FilterTensor, Matrix, ResidualBlockSpec,
};

fn rng_of(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn convolution_is_linear(seed in any::<u64>(), rows in 1usize..7, cin in 1usize..4, cout in 1usize..4, width in 1usize..4) {
        let mut rng = rng_of(seed);
        let data: Vec<f64> = (0..cout * width * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = FilterTensor::from_dense(cout, width, cin, &data).unwrap();
        let (z1, z2) = (random_matrix(&mut rng, rows, cin), random_matrix(&mut rng, rows, cin));
        let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let lhs = conv_forward(&w, &z1.scale(a).add(&z2.scale(b)).unwrap()).unwrap();
        let rhs = conv_forward(&w, &z1).unwrap().scale(a).add(&conv_forward(&w, &z2).unwrap().scale(b)).unwrap();
        let scale = rhs.max_abs().max(1.0);
        for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((l - r).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn zero_block_is_identity(seed in any::<u64>(), rows in 1usize..6, channels in 1usize..5) {
        let z = random_matrix(&mut rng_of(seed), rows, channels);
        let block = ResidualBlockSpec::zero(rows, channels).unwrap();
        prop_assert_eq!(block_forward(&block, &z).unwrap(), z);
    }

    #[test]
    fn resnet_is_piecewise_linear(seed in any::<u64>()) {
        let mut rng = rng_of(seed);
        let net = compile_scalar(&build_product2(1e-2, 1.0).unwrap()).unwrap();
        let x0 = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let u = [angle.cos(), angle.sin()];
        let f = |t: f64| resnet_forward(&net, &[x0[0] + t * u[0], x0[1] + t * u[1]]).unwrap();
        // kinks of the depth-10 squares are about 1e-3 apart along the line
        let h = 2e-5;
        let ts: Vec<f64> = (0..=400).map(|i| -0.004 + i as f64 * h).collect();
        let vals: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
        let flat: Vec<bool> = (1..vals.len() - 1)
            .map(|i| (vals[i + 1] - 2.0 * vals[i] + vals[i - 1]).abs() <= 1e-9)
            .collect();
        prop_assert!(flat.iter().filter(|&&b| !b).count() * 2 < flat.len());
        for i in 1..flat.len() {
            if flat[i - 1] && flat[i] {
                let mid = f(0.5 * (ts[i] + ts[i + 1]));
                prop_assert!((mid - 0.5 * (vals[i] + vals[i + 1])).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn audit_is_monotone(seed in any::<u64>(), m in 0usize..5) {
        let mut net = compile_scalar(&build_trapezoid(m, 4).unwrap()).unwrap();
        let before = audit_class(&net);
        let mut bigger = net.clone();
        bigger.blocks.push(ResidualBlockSpec::zero(net.input_dim, net.channels).unwrap());
        prop_assert!(audit_class(&bigger).m >= before.m);
        let entries: Vec<(usize, usize, usize)> = net.blocks[0].filters[0].entries().map(|(j, k, l, _)| (j, k, l)).collect();
        let (j, k, l) = entries[(seed as usize) % entries.len()];
        net.blocks[0].filters[0].set(j, k, l, 0.0);
        prop_assert!(audit_class(&net).kappa1 <= before.kappa1);
    }

    #[test]
    fn grouped_assembly_is_plain_sum(seed in any::<u64>(), count in 1usize..7, per_group in 1usize..4) {
        let mut rng = rng_of(seed);
        let n = 6;
        let ms: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=n)).collect();
        let cnns: Vec<_> = ms.iter().map(|&m| scalar_to_cnn(&build_trapezoid(m, n).unwrap()).unwrap()).collect();
        let groups = parallel_sum(&cnns, per_group * cnns[0].width()).unwrap();
        prop_assert!(groups.iter().all(|g| g.first_row_only));
        let net = assemble_resnet(&groups).unwrap();
        prop_assert!(audit_class(&net).first_row_only);
        for _ in 0..50 {
            let x = rng.gen_range(0.0..1.0);
            let want: f64 = cnns.iter().map(|c| c.forward(&[x, 0.0]).unwrap()).sum();
            prop_assert!((resnet_forward(&net, &[x, 0.0]).unwrap() - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn cascade_annihilates_off_support(seed in any::<u64>(), n in 2usize..9) {
        let mut rng = rng_of(seed);
        let m = [rng.gen_range(0..=n), rng.gen_range(0..=n)];
        let v = [rng.gen_range(0..3usize), rng.gen_range(0..2usize)];
        let bump = MonomialBump::new(&m, &v, n, 1e-3, 5.0).unwrap();
        let net = compile_scalar(&bump.to_scalar_net().unwrap()).unwrap();
        let mut hits = 0;
        for _ in 0..400 {
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            if bump_product(&m, n, &x) == 0.0 {
                hits += 1;
                prop_assert_eq!(bump.eval(&x), 0.0);
                prop_assert_eq!(resnet_forward(&net, &x).unwrap(), 0.0);
            }
        }
        prop_assert!(hits > 0);
    }

    #[test]
    fn psi_slope_is_bounded(m in 0usize..9, n in 1usize..9) {
        let m = m.min(n);
        let net = build_trapezoid(m, n).unwrap();
        let h = 1e-6;
        for i in 0..2000 {
            let x = -0.3 + 1.6 * (i as f64 + 0.5) / 2000.0 + std::f64::consts::SQRT_2 * 1e-7;
            let slope = (net.forward(&[x + h]).unwrap() - net.forward(&[x - h]).unwrap()) / (2.0 * h);
            prop_assert!(slope.abs() <= 3.0 * n as f64 + 1e-6, "x={} slope={}", x, slope);
        }
    }

    #[test]
    fn halving_eta_never_hurts(log_eta in -10.0f64..-1.0, b in 1.0f64..6.0) {
        let eta = log_eta.exp();
        let sup = |eta: f64| {
            let p = ProductApprox::new(eta, b).unwrap();
            let mut worst = 0.0f64;
            for i in 0..=60 {
                for j in 0..=60 {
                    let (x, y) = (-b + 2.0 * b * i as f64 / 60.0, -b + 2.0 * b * j as f64 / 60.0);
                    worst = worst.max((p.eval(x, y) - x * y).abs());
                }
            }
            worst
        };
        prop_assert!(sup(eta / 2.0) <= sup(eta));
    }

    #[test]
    fn cascade_error_grows_linearly(seed in any::<u64>(), eps_exp in 2i32..6) {
        let mut rng = rng_of(seed);
        let eps = 10f64.powi(-eps_exp);
        let p = ProductApprox::new(eps, 1.0).unwrap();
        let mut worst = [0.0f64; 6];
        for _ in 0..200 {
            let xs: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (mut approx, mut exact) = (xs[0], xs[0]);
            for k in 1..7 {
                approx = p.eval(approx, xs[k]);
                exact *= xs[k];
                worst[k - 1] = worst[k - 1].max((approx - exact).abs());
            }
        }
        for (k, w) in worst.iter().enumerate() {
            prop_assert!(*w <= (k + 1) as f64 * p.value_bound() * (1.0 + 1e-9), "n={} err={}", k + 1, w);
        }
    }

    #[test]
    fn partition_of_unity(seed in any::<u64>(), dim in 1usize..4, n_exp in 0u32..4) {
        let n = 1usize << n_exp;
        let mut rng = rng_of(seed);
        for _ in 0..200 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = (0..(n + 1).pow(dim as u32))
                .map(|mut idx| {
                    let m: Vec<usize> = (0..dim).map(|_| { let k = idx % (n + 1); idx /= n + 1; k }).collect();
                    bump_product(&m, n, &x)
                })
                .sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn interpolation_inequality_per_pair(seed in any::<u64>(), s in 0.05f64..0.95) {
        let f = registry("sinprod", 2, 2).unwrap();
        let a = build_euclidean(&f, &EuclideanParams { compile: false, ..EuclideanParams::new(4, 4) }).unwrap();
        let pairs = sample_pairs(2, 500, seed);
        prop_assert!(interpolation_ratio(&|x: &[f64]| a.functional(x), s, &pairs) <= 1.0 + 1e-12);
    }

    #[test]
    fn holder_limit_is_lipschitz(seed in any::<u64>()) {
        let g = |x: &[f64]| (3.0 * x[0]).sin() * x[1];
        let pairs = sample_pairs(2, 300, seed);
        let lip = lipschitz_estimate(&g, &pairs, &[], 1e-6);
        prop_assert!((holder_quotient(&g, 1.0, &pairs).unwrap() - lip).abs() <= 1e-12 * lip.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn low_degree_polynomials_are_reproduced(p0 in 0u32..3, p1 in 0u32..3, n in 2usize..6) {
        prop_assume!(p0 + p1 <= 2);
        let f = TargetFunction::new("poly", 3, vec![Factor::Power { power: p0 }, Factor::Power { power: p1 }], 1.0).unwrap();
        let a = build_euclidean(&f, &EuclideanParams { compile: false, ..EuclideanParams::new(n, n) }).unwrap();
        for i in 0..=40 {
            for j in 0..=40 {
                let x = [i as f64 / 40.0, j as f64 / 40.0];
                prop_assert!((a.surrogate(&x) - f.eval(&x)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn norms_grow_with_order_and_nested_grids(n in 2usize..6, res in 6usize..20) {
        let f = registry("sin2", 2, 2).unwrap();
        let a = build_euclidean(&f, &EuclideanParams { compile: false, ..EuclideanParams::new(n, n) }).unwrap();
        let err = |x: &[f64]| a.functional(x) - f.eval(x);
        let coarse = EvalGrid::new(2, res);
        prop_assert!(grid_norm(&err, 1, None, &coarse).unwrap() >= grid_norm(&err, 0, None, &coarse).unwrap());
        // Midpoint grids nest under tripling: (i + 1/2)/r = (3i + 3/2)/(3r).
        let fine = EvalGrid::new(2, 3 * res);
        let net = |x: &[f64]| a.functional(x);
        prop_assert!(grid_norm(&net, 0, None, &fine).unwrap() >= grid_norm(&net, 0, None, &coarse).unwrap() - 1e-9);
    }

    #[test]
    fn indicator_composition_and_slope(seed in any::<u64>(), delta_frac in 0.05f64..0.9) {
        let spec = ManifoldSpec::Circle { ambient: 3 };
        let r = 0.2;
        let delta = delta_frac * r * r;
        let p = IndicatorParams::new(r, delta, 1.0, 3).unwrap();
        let mut rng = rng_of(seed);
        let center = spec.point(&[rng.gen_range(0.0..std::f64::consts::TAU)]);
        let dist = build_sqdist_net(&center, p.theta, 1.0).unwrap();
        let ind = build_indicator(&p).unwrap();
        let composed = wiring::then(&dist.mlp, &ind.mlp, &[1.0]).unwrap();
        for _ in 0..500 {
            let x = spec.sample_near(&center, 1.5 * r, &mut rng);
            let d2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
            let v = composed.forward(&x).unwrap()[0];
            if d2 <= r * r - delta {
                prop_assert_eq!(v, 1.0);
            } else if d2 >= r * r {
                prop_assert_eq!(v, 0.0);
            }
        }
        let h = 1e-9;
        for i in 0..400 {
            let a = 1.2 * r * r * (i as f64 + 0.5) / 400.0;
            let slope = (ind.forward(&[a + h]).unwrap() - ind.forward(&[a - h]).unwrap()) / (2.0 * h);
            if a + h < p.plateau() || a - h > p.threshold() {
                prop_assert_eq!(slope, 0.0);
            } else {
                prop_assert!(slope.abs() * delta <= 4.0 + 1e-6, "slope {} delta {}", slope, delta);
            }
        }
    }

    #[test]
    fn chart_weights_sum_to_one(seed in any::<u64>()) {
        let spec = ManifoldSpec::Circle { ambient: 3 };
        let atlas = build_atlas(&spec, 0.2, 3).unwrap();
        let mut rng = rng_of(seed);
        for _ in 0..200 {
            let w = rho_weights(&atlas, &spec.sample(&mut rng)).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn risk_is_sound_and_reproducible(seed in any::<u64>()) {
        let f = registry("sin2", 2, 2).unwrap();
        let a = risk_approximator(&f, 0.1).unwrap();
        let g = |x: &[f64]| a.functional(x);
        let data = noisy_samples(&f, 100, 0.2, &mut rng_of(seed));
        let budget = SearchBudget { directions: 8, ascent_steps: 4 };
        let curve = adversarial_risk_curve(&g, &data, &[0.0, 0.01, 0.05], &Loss::Absolute, &budget, seed);
        prop_assert!(curve[1] >= curve[0] && curve[2] >= curve[1]);
        prop_assert_eq!(
            curve.clone(),
            adversarial_risk_curve(&g, &data, &[0.0, 0.01, 0.05], &Loss::Absolute, &budget, seed)
        );
        let mut cfg = RiskConfig::new(200, 0.2, 0.1);
        cfg.repetitions = 5;
        cfg.seed = seed;
        prop_assert_eq!(
            empirical_residual_study(&cfg, &f, &g).unwrap(),
            empirical_residual_study(&cfg, &f, &g).unwrap()
        );
        let floor = cfg.theoretical_floor();
        cfg.n *= 2;
        prop_assert!(cfg.theoretical_floor() >= floor);
    }
}
