use proptest::prelude::*;

use fedavg_sde::bounds::{self, BoundInputs};
use fedavg_sde::discrete::{run_fedavg, sample_a};
use fedavg_sde::experiment::{ClientSpec, ExperimentConfig, ExperimentKind, FedAvgSpec, LossSpec, ProblemSpec};
use fedavg_sde::{FedAvgConfig, Problem, Schedule, WeightVector};

fn schedule() -> impl Strategy<Value = Schedule> {
    prop_oneof![
        (0.01f64..2.0).prop_map(|v| Schedule::constant(v).unwrap()),
        (0.05f64..=1.0).prop_map(|b| Schedule::power_decay(b).unwrap()),
        Just(Schedule::InverseSqrt),
    ]
}

fn inputs() -> impl Strategy<Value = BoundInputs> {
    (0.1f64..5.0, 0.1f64..5.0, 1usize..6, 0.01f64..2.0, 0.0f64..1.0, 0.0f64..10.0, 0.0f64..5.0, 0.1f64..3.0, 0.1f64..2.0, 1usize..6, proptest::collection::vec(0.0f64..0.5, 1..5))
        .prop_map(|(l, mu, e, h, v, gap, dist, tau, eta0, dim, traces)| {
            let q = traces.len();
            BoundInputs {
                lipschitz: l,
                smoothness: mu,
                weights: vec![1.0 / q as f64; q],
                noise_traces: traces,
                local_steps: e,
                lift: h,
                v_star: v,
                loss_gap: gap,
                distance: dist,
                tau,
                server_rate: eta0,
                dim,
            }
        })
}

/// Diagonal SPD problem with sine ripple, built from raw draws.
fn problem(d: usize, raw: &[f64], amplitude: f64) -> Problem {
    let q = raw.len() / (2 * d);
    let clients = (0..q)
        .map(|k| {
            let block = &raw[2 * d * k..2 * d * (k + 1)];
            let hessian = (0..d).map(|i| (0..d).map(|j| if i == j { 0.2 + block[i].abs() } else { 0.0 }).collect()).collect();
            ClientSpec {
                weight: 1.0 / q as f64,
                loss: LossSpec::SyntheticSmooth { hessian, center: block[d..].to_vec(), amplitude },
                noise_covariance: (0..d).map(|i| (0..d).map(|j| if i == j { 0.01 } else { 0.0 }).collect()).collect(),
            }
        })
        .collect();
    ProblemSpec { clients }.build().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn schedule_integrals_match_quadrature(s in schedule(), t in 0.01f64..1000.0) {
        let phi = bounds::integrate(|x| s.value(x), 0.0, t, 1e-12);
        let sq = bounds::integrate(|x| s.value(x).powi(2), 0.0, t, 1e-12);
        prop_assert!((s.integral(t) - phi).abs() <= 1e-9 * phi);
        prop_assert!((s.integral_of_square(t) - sq).abs() <= 1e-9 * sq);
    }

    #[test]
    fn time_sampler_inverts_its_cdf(s in schedule(), t in 0.1f64..100.0, u in 0.0f64..1.0) {
        let x = s.inverse_integral_fraction(t, u);
        prop_assert!((s.integral(x) / s.integral(t) - u).abs() < 1e-9);
    }

    #[test]
    fn theorem1_closed_form_matches_quadrature(b in inputs(), s in schedule(), t in 0.5f64..500.0) {
        let e = b.local_steps as f64;
        let phi = bounds::integrate(|x| s.value(x), 0.0, t, 1e-12);
        let noise = b.c1() + b.lift * b.v_star * b.lipschitz / 2.0;
        let oracle = b.loss_gap / (e * phi) + bounds::integrate(|x| noise * s.value(x).powi(2), 0.0, t, 1e-12) / (e * phi);
        let r = bounds::theorem1_rhs(&b, &s, t).unwrap();
        prop_assert!((r - oracle).abs() <= 1e-9 * oracle);
    }

    #[test]
    fn theorem1_non_increasing_after_three(b in inputs(), t in 3.0f64..1e4, dt in 0.0f64..100.0) {
        let s = Schedule::harmonic();
        prop_assert!(bounds::theorem1_rhs(&b, &s, t + dt).unwrap() <= bounds::theorem1_rhs(&b, &s, t).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn corollary4_matches_theorem2(b in inputs(), t in 0.5f64..1e4) {
        let q = bounds::theorem2_rhs(&b, &Schedule::harmonic(), t).unwrap();
        let c = bounds::corollary4_rhs(&b, t).unwrap();
        prop_assert!((c.exact - q).abs() <= 1e-9 * q);
        prop_assert!(c.displayed >= c.exact * (1.0 - 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences(
        d in 1usize..5,
        raw in proptest::collection::vec(-2.0f64..2.0, 40),
        amplitude in 0.0f64..0.5,
        w in proptest::collection::vec(-3.0f64..3.0, 4),
    ) {
        let p = problem(d, &raw[..2 * d * (raw.len() / (2 * d)).min(4)], amplitude);
        let w = &w[..d];
        let (_, g) = p.loss_and_gradient(&WeightVector::new(w.to_vec()).unwrap()).unwrap();
        let h = 1e-5;
        for j in 0..d {
            let (mut a, mut b) = (w.to_vec(), w.to_vec());
            a[j] += h;
            b[j] -= h;
            let fd = (p.loss(&a) - p.loss(&b)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-5 * g.as_vector().norm().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn draw_value_is_sum_of_client_terms(d in 1usize..4, raw in proptest::collection::vec(-2.0f64..2.0, 24), seed: u64, e in 1usize..5) {
        let p = problem(d, &raw[..2 * d * 3], 0.1);
        let config = FedAvgConfig {
            local_steps: e,
            lift: 1.0,
            client_schedule: Schedule::constant(0.1).unwrap(),
            server_schedule: Schedule::constant(1.0).unwrap(),
            rounds: 1,
            seed,
            clip_norm: None,
        };
        for draw in sample_a(&WeightVector::zeros(d), &p, &config, 0.0, 16).unwrap() {
            for j in 0..d {
                let sum: f64 = draw.client_terms.iter().map(|t| t[j]).sum();
                prop_assert!((sum - draw.value[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn trajectories_are_reproducible(seed: u64, rounds in 1usize..20) {
        let p = problem(2, &[1.0, 0.5, 0.3, -0.2, 0.4, 1.2, -1.0, 0.7], 0.1);
        let config = FedAvgConfig {
            local_steps: 3,
            lift: 1.0,
            client_schedule: Schedule::harmonic(),
            server_schedule: Schedule::constant(1.0).unwrap(),
            rounds,
            seed,
            clip_norm: None,
        };
        let w = WeightVector::new(vec![1.0, -1.0]).unwrap();
        prop_assert_eq!(run_fedavg(&p, &config, &w).unwrap().to_csv(), run_fedavg(&p, &config, &w).unwrap().to_csv());
    }

    #[test]
    fn config_round_trips(seed: u64, e in 0usize..10, lift in 0.001f64..10.0, s in schedule(), rounds in 0usize..1000, clip in proptest::option::of(0.1f64..10.0)) {
        let cfg = ExperimentConfig {
            kind: ExperimentKind::SimulateDiscrete,
            seed,
            problem: None,
            w_init: Some(vec![lift, -lift]),
            fedavg: Some(FedAvgSpec { local_steps: e, lift, client_schedule: s, server_schedule: s, rounds, clip_norm: clip }),
            sde: None,
            quadratic: None,
            normality: None,
            bounds: None,
            output_dir: Some("out".into()),
        };
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
