use std::f64::consts::PI;

use proptest::prelude::*;
use wave_plate_core::dynamics::{simulate, Integrator, IntegratorConfig, Scheme, SimulateOptions, State};
use wave_plate_core::mesh::norm_v;
use wave_plate_core::potentialwell::{functional_j, nehari_scaling, nehari_value, region_of, Region};
use wave_plate_core::{assemble, DiscreteOperators, GridFunction, GridSpec, SourceSpec};

fn ops(n: usize) -> DiscreteOperators {
    let (c, p) = GridSpec::uniform(2, n).build().unwrap();
    assemble(&c, &p).unwrap()
}

/// Smooth data compatible with the clamped edge and the rigid walls.
fn state(o: &DiscreteOperators, a: f64, b: f64, k: f64) -> State {
    State {
        u: o.chamber().sample(|x| a * (k * PI * x[0]).sin() * x[1] * x[1]),
        w: o.plate().sample(|x| b * (PI * x[0]).sin().powi(2) * (k * x[0]).cos()),
        u_t: o.chamber().sample(|x| b * (PI * x[0]).sin() * x[1]),
        w_t: o.plate().sample(|x| a * (PI * x[0]).sin().powi(2)),
        t: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn discrete_gradient_conserves_total_energy(a in -1.0f64..1.0, b in -0.5f64..0.5, k in 1.0f64..4.0) {
        let o = ops(12);
        let x0 = state(&o, a, b, k);
        let cfg = IntegratorConfig::new(Scheme::DiscreteGradient, 0.01);
        let tr = simulate(&o, SourceSpec::power(3.0).unwrap(), &x0, &cfg, 0.3, &SimulateOptions::default()).unwrap();
        let scale = 1.0 + tr.records[0].energy.e;
        prop_assert!(tr.max_abs_cal_e_drift() <= 1e-9 * scale, "drift {}", tr.max_abs_cal_e_drift());
        prop_assert!(tr.max_abs_scheme_residual() <= 1e-9 * scale);
    }

    #[test]
    fn linear_midpoint_conserves_quadratic_energy(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1.0f64..4.0) {
        let o = ops(12);
        let x0 = state(&o, a, b, k);
        let cfg = IntegratorConfig::new(Scheme::ImplicitMidpoint, 0.02);
        let tr = simulate(&o, SourceSpec::zero(), &x0, &cfg, 0.5, &SimulateOptions::default()).unwrap();
        let e0 = tr.records[0].energy.e;
        for r in &tr.records {
            prop_assert!((r.energy.e - e0).abs() <= 1e-11 * (1.0 + e0));
        }
    }

    #[test]
    fn midpoint_step_is_reversible(a in -1.0f64..1.0, b in -1.0f64..1.0, k in 1.0f64..4.0) {
        let o = ops(10);
        let x0 = state(&o, a, b, k);
        let cfg = IntegratorConfig::new(Scheme::ImplicitMidpoint, 0.01);
        let it = Integrator::new(&o, SourceSpec::power(3.0).unwrap(), &cfg).unwrap();
        let back = it.step_back(&it.step(&x0).unwrap()).unwrap();
        let diff = |p: &GridFunction, q: &GridFunction| {
            p.values.iter().zip(&q.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        prop_assert!(diff(&back.w, &x0.w) <= 1e-10);
        prop_assert!(diff(&back.u_t, &x0.u_t) <= 1e-10);
    }

    #[test]
    fn the_ray_meets_the_nehari_manifold_once(b in 0.1f64..3.0, k in 1.0f64..4.0) {
        let o = ops(12);
        let s = SourceSpec::power(3.0).unwrap();
        let x = state(&o, 0.5, b, k);
        let lam = nehari_scaling(&o, &s, &x.u, &x.w).unwrap();
        let at = |l: f64| nehari_value(&o, &s, &x.u.scaled(l), &x.w.scaled(l)).unwrap();
        let n = at(lam);
        let scale = norm_v(&o, &x.u.scaled(lam), &x.w.scaled(lam)).unwrap().powi(2);
        prop_assert!(n.abs() <= 1e-8 * scale, "N(λ*) = {n}");
        prop_assert!(at(0.5 * lam) > 0.0);
        prop_assert!(at(2.0 * lam) < 0.0);
        // J is maximal along the ray at λ*
        let j = |l: f64| functional_j(&o, &s, &x.u.scaled(l), &x.w.scaled(l)).unwrap();
        prop_assert!(j(lam) >= j(0.9 * lam) && j(lam) >= j(1.1 * lam));
    }

    #[test]
    fn region_rule_is_consistent(j in -10.0f64..10.0, nehari in -10.0f64..10.0, norm_sq in 0.0f64..10.0, d in 0.1f64..10.0) {
        let r = region_of(j, nehari, norm_sq, d);
        if norm_sq == 0.0 {
            prop_assert_eq!(r, Region::W1);
        } else if j >= d {
            prop_assert_eq!(r, Region::OutsideW);
        } else if nehari.abs() > 1e-8 * norm_sq {
            prop_assert_eq!(r, if nehari > 0.0 { Region::W1 } else { Region::W2 });
        }
        // raising the depth never moves a state out of the well
        if r != Region::OutsideW {
            prop_assert_eq!(region_of(j, nehari, norm_sq, 2.0 * d), r);
        }
    }
}
