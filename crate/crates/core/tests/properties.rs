use nalgebra::DVector;
use proptest::prelude::*;

use zakai_core::model::example1;
use zakai_core::oracle::ParticleCloud;
use zakai_core::zakai::conditional_stats;
use zakai_core::{
    build_space, coarsen_path, derive_coefficients, run_filter, simulate_path, DensityState, FilterOptions, MuRule,
    SeedRecord, SpectralSpace, SplittingScheme,
};

fn space(n: usize) -> SpectralSpace {
    let m = example1().with_initial(5.0, 0.5);
    build_space(&derive_coefficients(&m).unwrap(), n, None).unwrap()
}

fn coeffs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sub_steps_commute_with_power_of_two_scaling(
        c in coeffs(24),
        k in -30i32..30,
        dy in -0.2f64..0.2,
        dz in 0u32..3,
        kappa_exp in 6u32..14,
    ) {
        let sp = space(24);
        let scheme = SplittingScheme::new(&sp, 0.5 / (1u64 << kappa_exp) as f64, 19.75).unwrap();
        let c = DVector::from_vec(c);
        let s = 2f64.powi(k);
        let sc = &c * s;
        prop_assert_eq!(scheme.observation(&sc, dy), scheme.observation(&c, dy) * s);
        prop_assert_eq!(scheme.implicit_pde(&sc), scheme.implicit_pde(&c) * s);
        prop_assert_eq!(scheme.jump(&sc, dz), scheme.jump(&c, dz) * s);
        prop_assert_eq!(scheme.split_step(&sc, dy, dz), scheme.split_step(&c, dy, dz) * s);
    }

    #[test]
    fn sub_steps_are_linear_for_any_scale(c in coeffs(16), s in -50.0f64..50.0, dy in -0.2f64..0.2) {
        let sp = space(16);
        let scheme = SplittingScheme::new(&sp, 1.0 / 1024.0, 19.75).unwrap();
        let c = DVector::from_vec(c);
        let lhs = scheme.split_step(&(&c * s), dy, 1);
        let rhs = scheme.split_step(&c, dy, 1) * s;
        let tol = 1e-12 * (1.0 + rhs.amax());
        prop_assert!((lhs - rhs).amax() <= tol);
    }

    #[test]
    fn statistics_ignore_normalization(mean in 3.0f64..7.0, var in 0.3f64..1.5, s in 1e-6f64..1e6) {
        let sp = space(48);
        let (state, _) = DensityState::gaussian(&sp, mean, var).unwrap();
        let (m1, s1) = conditional_stats(&state.c, &sp, 0.0).unwrap();
        let (m2, s2) = conditional_stats(&(&state.c * s), &sp, 0.0).unwrap();
        prop_assert!((m1 - m2).abs() <= 1e-12 * m1.abs());
        prop_assert!((s1 - s2).abs() <= 1e-10 * s1);
    }

    #[test]
    fn coarsening_nests(seed in 0u64..1000, f1_exp in 0u32..4, f2_exp in 0u32..4) {
        let p = simulate_path(&example1(), 256, SeedRecord::new(seed, 0)).unwrap();
        let (f1, f2) = (1usize << f1_exp, 1usize << f2_exp);
        let two = coarsen_path(&coarsen_path(&p, f1).unwrap(), f2).unwrap();
        let one = coarsen_path(&p, f1 * f2).unwrap();
        prop_assert_eq!(&two, &one);
        let total: u32 = p.dz.iter().sum();
        prop_assert_eq!(one.dz.iter().sum::<u32>(), total);
        prop_assert_eq!(total as usize, p.jump_times.len());
    }

    #[test]
    fn particle_estimates_ignore_order_and_weight_shift(
        pts in prop::collection::vec((-10.0f64..10.0, -5.0f64..5.0), 2..64),
        shift in -500.0f64..500.0,
        rot in 0usize..64,
    ) {
        let cloud = |p: &[(f64, f64)], sh: f64| ParticleCloud {
            states: p.iter().map(|q| q.0).collect(),
            log_weights: p.iter().map(|q| q.1 + sh).collect(),
            seed: SeedRecord::new(0, 0),
        };
        let (m, s, se) = cloud(&pts, 0.0).estimates();
        let mut perm = pts.clone();
        perm.rotate_left(rot % pts.len());
        perm.reverse();
        for (m2, s2, se2) in [cloud(&perm, 0.0).estimates(), cloud(&pts, shift).estimates()] {
            prop_assert!((m - m2).abs() <= 1e-12 * (1.0 + m.abs()));
            prop_assert!((s - s2).abs() <= 1e-10 * (1.0 + s));
            prop_assert!((se - se2).abs() <= 1e-10 * (1.0 + se));
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let m = example1().with_initial(5.0, 0.5).with_horizon(0.25);
    let derived = derive_coefficients(&m).unwrap();
    let sp = build_space(&derived, 32, None).unwrap();
    let mu = MuRule::Coercive.resolve(&derived).unwrap();
    let run = || {
        let path = simulate_path(&m, 512, SeedRecord::new(11, 3)).unwrap();
        let scheme = SplittingScheme::new(&sp, path.kappa, mu).unwrap();
        let (p0, _) = DensityState::gaussian(&sp, m.x0_mean, m.x0_var).unwrap();
        (
            path.clone(),
            run_filter(&scheme, &path, &p0, FilterOptions::default()).unwrap(),
        )
    };
    let (pa, ta) = run();
    let (pb, tb) = run();
    assert_eq!(pa, pb);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ta.means), bits(&tb.means));
    assert_eq!(bits(&ta.stds), bits(&tb.stds));
    assert_eq!(bits(&ta.masses), bits(&tb.masses));
}

#[test]
fn path_j_does_not_depend_on_other_paths() {
    let m = example1();
    let alone = simulate_path(&m, 128, SeedRecord::new(5, 9)).unwrap();
    let batch: Vec<_> = (0..12)
        .map(|j| simulate_path(&m, 128, SeedRecord::new(5, j)).unwrap())
        .collect();
    assert_eq!(batch[9], alone);
    assert_ne!(batch[8], alone);
}
