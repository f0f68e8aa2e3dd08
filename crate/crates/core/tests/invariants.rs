use std::sync::Arc;

use proptest::prelude::*;

use rough_burgers::grid::{
    delta, holder_seminorm_with, n_operator, two_point_norm_with, Field, PairSampling, SpatialGrid,
};
use rough_burgers::heat::semigroup_apply;
use rough_burgers::noise::{mollify_field, rho_variation};
use rough_burgers::roughcore::{
    chen_residual, lift_piecewise_linear, make_controlled, modify_levy_area, rough_integral_total, ControlledPath,
};

fn field(values: &[f64]) -> Field {
    let grid = SpatialGrid::new(values.len()).unwrap();
    Field::from_periodic(grid, 1, values.to_vec()).unwrap()
}

fn values(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, m)
}

fn controlled(y: &[f64], yp: &[f64], x: &Field) -> ControlledPath {
    let lift = Arc::new(lift_piecewise_linear(x));
    make_controlled(field(y), field(yp), lift).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn n_of_delta_vanishes(v in values(16)) {
        prop_assert!(n_operator(&delta(&field(&v))).sup() < 1e-12);
    }

    #[test]
    fn seminorm_is_homogeneous(v in values(32), c in -5.0f64..5.0, alpha in 0.05f64..1.0) {
        let f = field(&v);
        let a = holder_seminorm_with(&f.scaled(c), alpha, PairSampling::All).unwrap();
        let b = holder_seminorm_with(&f, alpha, PairSampling::All).unwrap();
        prop_assert!(close(a, c.abs() * b, 1e-12));
    }

    #[test]
    fn two_point_norm_of_increments_is_the_seminorm(v in values(32), alpha in 0.05f64..1.0) {
        let f = field(&v);
        for s in [PairSampling::All, PairSampling::Dyadic] {
            let a = two_point_norm_with(&delta(&f), alpha, s).unwrap();
            let b = holder_seminorm_with(&f, alpha, s).unwrap();
            prop_assert!(close(a, b, 1e-12));
        }
    }

    #[test]
    fn lifts_satisfy_chen(v in values(32), a in -3.0f64..3.0) {
        let x = field(&v);
        let lift = lift_piecewise_linear(&x);
        let size = 1.0 + x.sup_norm().powi(2);
        prop_assert!(chen_residual(&lift) <= 1e-12 * size);
        let modified = modify_levy_area(&lift, &[a]).unwrap();
        prop_assert!(chen_residual(&modified) <= 1e-12 * size * (1.0 + a.abs()));
    }

    #[test]
    fn rough_integral_is_bilinear(
        x in values(32), y1 in values(32), p1 in values(32), y2 in values(32), p2 in values(32),
        a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        let xf = field(&x);
        let z = controlled(&x, &vec![1.0; 32], &xf);
        let comb = |u: &[f64], w: &[f64]| -> Vec<f64> { u.iter().zip(w).map(|(u, w)| a * u + b * w).collect() };
        let lhs = rough_integral_total(&controlled(&comb(&y1, &y2), &comb(&p1, &p2), &xf), &z).unwrap()[0];
        let i1 = rough_integral_total(&controlled(&y1, &p1, &xf), &z).unwrap()[0];
        let i2 = rough_integral_total(&controlled(&y2, &p2, &xf), &z).unwrap()[0];
        prop_assert!(close(lhs, a * i1 + b * i2, 1e-10));
    }

    #[test]
    fn rho_variation_adds_over_a_split(v in prop::collection::vec(-1.0f64..1.0, 9 * 5), cut in 1usize..8) {
        let (nx, ny) = (8usize, 4usize);
        let whole = rho_variation(&v, nx, ny, 1.0).unwrap().value;
        let left = rho_variation(&v[..(cut + 1) * (ny + 1)], cut, ny, 1.0).unwrap().value;
        let right = rho_variation(&v[cut * (ny + 1)..], nx - cut, ny, 1.0).unwrap().value;
        prop_assert!(close(whole, left + right, 1e-12));
    }

    #[test]
    fn mollification_is_linear(u in values(64), w in values(64), a in -2.0f64..2.0, eps in 0.01f64..0.3) {
        let (f, g) = (field(&u), field(&w));
        let lhs = mollify_field(&f.scaled(a).add(&g).unwrap(), eps).unwrap();
        let rhs = mollify_field(&f, eps).unwrap().scaled(a).add(&mollify_field(&g, eps).unwrap()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().sup_norm() < 1e-12);
    }

    #[test]
    fn semigroup_preserves_mass(v in values(64), t in 1e-4f64..1.0) {
        let f = field(&v);
        let mass = |g: &Field| g.values()[..64].iter().sum::<f64>() / 64.0;
        let s = semigroup_apply(t, &f).unwrap();
        prop_assert!((mass(&s) - mass(&f)).abs() < 1e-12);
        prop_assert!(s.sup_norm() <= f.sup_norm() + 1e-12);
    }
}
