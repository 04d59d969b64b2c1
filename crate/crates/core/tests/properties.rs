//! Randomized properties of the special functions and the two solvers.

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sparsevi::model::{energy, GammaHyperprior, LinearProblem, NoiseCovariance, Point};
use sparsevi::special::{gig_inv_mean, gig_mean, log_bessel_k, GigParams};
use sparsevi::stop::StopRule;
use sparsevi::{ias, vias};

fn problem_strategy() -> impl Strategy<Value = LinearProblem> {
    (1usize..6, 1usize..9).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * d),
            prop::collection::vec(-3.0f64..3.0, n),
            0.01f64..1.0,
        )
            .prop_map(move |(a, y, var)| {
                LinearProblem::new(
                    DMatrix::from_vec(n, d, a),
                    DVector::from_vec(y),
                    NoiseCovariance::Scalar(var),
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bessel_three_term_recurrence(s in -0.499f64..5.0, x in 1e-3f64..50.0) {
        let k = |v: f64| log_bessel_k(v, x).unwrap();
        // K_{s+1} = K_{s-1} + (2s/x) K_s, divided through by K_{s+1}.
        let lhs = (k(s - 1.0) - k(s + 1.0)).exp() + 2.0 * s / x * (k(s) - k(s + 1.0)).exp();
        prop_assert!((lhs - 1.0).abs() < 1e-10, "residual {}", lhs - 1.0);
    }

    #[test]
    fn gig_reciprocal_symmetry(b in 1e-2f64..1e3, r in 1e-6f64..1e2, s in -0.5f64..1.0) {
        // θ ~ GIG(b, r, s) implies 1/θ ~ GIG(r, b, −s).
        let direct = gig_inv_mean(&GigParams::new(b, r, s).unwrap());
        let mirrored = gig_mean(&GigParams::new(r, b, -s).unwrap());
        prop_assert!((direct / mirrored - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ias_energy_never_increases(p in problem_strategy(), alpha in 0.1f64..3.0, beta in 1.6f64..4.0) {
        let prior = GammaHyperprior::uniform(p.d(), alpha, beta).unwrap();
        let res = ias::solve(&p, &prior, &ias::default_theta0(p.d()), &StopRule::fixed(40), ias::Method::Auto).unwrap();
        for w in res.energy_trace.windows(2) {
            prop_assert!(w[1].total <= w[0].total + 1e-10 * w[0].total.abs().max(1.0));
        }
        let z = Point::new(res.point.u.clone(), res.point.theta.clone()).unwrap();
        let last = res.energy_trace.last().unwrap().total;
        assert_relative_eq!(energy(&p, &prior, &z).unwrap().total, last, max_relative = 1e-12);
    }

    #[test]
    fn vias_elbo_never_decreases_and_paths_agree(p in problem_strategy(), alpha in 1e-3f64..1.0, beta in 1e-2f64..10.0) {
        let prior = GammaHyperprior::uniform(p.d(), alpha, beta).unwrap();
        let (m0, c0) = vias::default_init(p.d(), 1.0);
        let stop = StopRule::fixed(30);
        let direct = vias::solve(&p, &prior, &m0, &c0, &stop, vias::Method::Direct).unwrap();
        let woodbury = vias::solve(&p, &prior, &m0, &c0, &stop, vias::Method::Woodbury).unwrap();
        for w in direct.elbo_trace.windows(2) {
            prop_assert!(w[1].elbo >= w[0].elbo - 1e-9 * w[0].elbo.abs().max(1.0));
        }
        let scale = direct.state.m.amax().max(1.0);
        prop_assert!((&direct.state.m - &woodbury.state.m).amax() < 1e-6 * scale);
        assert_relative_eq!(
            direct.final_elbo().unwrap(),
            woodbury.final_elbo().unwrap(),
            max_relative = 1e-6,
            epsilon = 1e-8
        );
    }
}

#[test]
fn first_sweep_has_no_parameter_change() {
    let p = LinearProblem::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, -1.0]), NoiseCovariance::Scalar(0.1)).unwrap();
    let prior = GammaHyperprior::uniform(2, 0.1, 1.0).unwrap();
    let (m0, c0) = vias::default_init(2, 1.0);
    let res = vias::solve(&p, &prior, &m0, &c0, &StopRule::fixed(3), vias::Method::Auto).unwrap();
    assert_eq!(res.elbo_trace[0].param_change, None);
    assert!(res.elbo_trace[1..].iter().all(|r| r.param_change.is_some_and(f64::is_finite)));
    // Every record must survive a JSON round trip.
    let text = serde_json::to_string(&res.elbo_trace).unwrap();
    let back: Vec<vias::ElboRecord> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, res.elbo_trace);
}
