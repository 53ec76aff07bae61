mod common;

use nalgebra::{DMatrix, DVector};
use polymfvi::gram::{build_gram, estimate_upsilon, from_matrices, geodesic, q_dist};
use polymfvi::maps1d::ElementShape;
use polymfvi::{ConeParams, Error, FamilyKind, MapFamily1D};
use rand::Rng;

use common::*;

fn shape_name(s: ElementShape) -> &'static str {
    match s {
        ElementShape::Step => "step",
        ElementShape::QuadPlus => "quad+",
        ElementShape::QuadMinus => "quad-",
        ElementShape::CubPlus => "cub+",
        ElementShape::CubMinus => "cub-",
        ElementShape::Linear => "linear",
    }
}

/// Element `j` of `fam`, rebuilt from the definitions without centering.
fn raw_element(fam: &MapFamily1D, j: usize) -> impl Fn(f64) -> f64 {
    let e = fam.elements()[j];
    let delta = fam.delta();
    let a = e.interval.map(|m| -fam.radius() + m as f64 * delta).unwrap_or(0.0);
    let name = shape_name(e.shape);
    move |x| if name == "linear" { x } else { element(name, a, delta, x) }
}

fn random_params(rng: &mut impl Rng, d: usize, j: usize, alpha: f64) -> ConeParams {
    let lambda = DMatrix::from_fn(d, j, |_, _| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() * 0.3 });
    let v = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    ConeParams::new(alpha, lambda, v).unwrap()
}

#[test]
fn element_counts_and_mesh_validation() {
    let fam = MapFamily1D::build(FamilyKind::PwLinear, 1.0, 1.0).unwrap();
    assert_eq!(fam.len(), 2);
    assert_eq!(fam.interval_start(0), -1.0);
    assert_eq!(fam.interval_start(1), 0.0);
    assert_eq!(MapFamily1D::build(FamilyKind::HigherOrder, 1.0, 1.0).unwrap().len(), 9);
    assert_eq!(MapFamily1D::build(FamilyKind::PwLinear, 3.5, 0.25).unwrap().len(), 28);
    assert!(matches!(MapFamily1D::build(FamilyKind::PwLinear, 1.0, 0.3), Err(Error::Config(_))));
}

#[test]
fn elements_match_their_definitions() {
    for kind in [FamilyKind::PwLinear, FamilyKind::HigherOrder] {
        let fam = MapFamily1D::build(kind, 1.5, 0.5).unwrap();
        for j in 0..fam.len() {
            let f = raw_element(&fam, j);
            for k in 0..61 {
                let x = -3.0 + 0.1 * k as f64 + 0.013;
                assert!((fam.eval(j, x, 0) - f(x)).abs() < 1e-13, "{kind:?} j={j} x={x}");
                let h = 1e-6;
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                assert!((fam.eval(j, x, 1) - fd).abs() < 1e-5 * (1.0 + fd.abs()), "{kind:?} j={j} x={x}");
            }
        }
    }
}

#[test]
fn centering_offsets_match_quadrature() {
    for kind in [FamilyKind::PwLinear, FamilyKind::HigherOrder] {
        let raw = MapFamily1D::build(kind, 2.0, 0.5).unwrap();
        let fam = raw.centered();
        let knots = raw.knots();
        for j in 0..fam.len() {
            let f = raw_element(&raw, j);
            let expect = gauss_expect(&f, &knots);
            assert!((fam.offsets().unwrap()[j] - expect).abs() < 1e-10);
            let centered = |x: f64| fam.eval(j, x, 0);
            assert!(gauss_expect(&centered, &knots).abs() < 1e-10);
        }
    }
}

#[test]
fn cone_map_is_direct_summation_and_slope_bounded() {
    let fam = MapFamily1D::build_centered(FamilyKind::PwLinear, 2.0, 0.5).unwrap();
    let mut r = rng(1);
    for _ in 0..10 {
        let p = random_params(&mut r, 3, fam.len(), 0.7);
        let x = normals(&mut r, 3);
        let y = p.eval_map(&fam, &x).unwrap();
        let dy = p.jacobian_diag(&fam, &x).unwrap();
        for i in 0..3 {
            let direct: f64 = p.alpha * x[i] + (0..fam.len()).map(|j| p.lambda[(i, j)] * fam.eval(j, x[i], 0)).sum::<f64>() + p.v[i];
            assert!((y[i] - direct).abs() < 1e-12);
        }
        for k in 0..400 {
            let z = -4.0 + 0.02 * k as f64;
            let dz = p.jacobian_diag(&fam, &[z, z, z]).unwrap();
            assert!(dz.iter().all(|s| *s >= p.alpha));
        }
        assert!(dy.iter().all(|s| *s >= p.alpha));
        let xi = p.invert_coordinate(&fam, 1, y[1], 1e-13).unwrap();
        assert!((xi - x[1]).abs() < 1e-10);
    }
}

#[test]
fn gram_matches_quadrature_and_monte_carlo() {
    let fam = MapFamily1D::build_centered(FamilyKind::HigherOrder, 1.0, 0.5).unwrap();
    let gd = build_gram(&fam).unwrap();
    let knots = fam.knots();
    for a in 0..fam.len() {
        for b in 0..fam.len() {
            let f = |x: f64| fam.eval(a, x, 0) * fam.eval(b, x, 0);
            let g = |x: f64| fam.eval(a, x, 1) * fam.eval(b, x, 1);
            assert!((gd.q1[(a, b)] - gauss_expect(&f, &knots)).abs() < 1e-10);
            assert!((gd.q1jac[(a, b)] - gauss_expect(&g, &knots)).abs() < 1e-10);
        }
    }

    let fam = MapFamily1D::build_centered(FamilyKind::PwLinear, 1.0, 1.0).unwrap();
    let gd = build_gram(&fam).unwrap();
    let xs = normals(&mut rng(2), 1_000_000);
    for a in 0..2 {
        for b in 0..2 {
            let prods: Vec<f64> = xs.iter().map(|&x| fam.eval(a, x, 0) * fam.eval(b, x, 0)).collect();
            let (m, se) = mean_se(&prods);
            assert!((gd.q1[(a, b)] - m).abs() <= 3.0 * se, "Q1[{a},{b}]");
        }
    }
    let eig = gd.q1.clone().symmetric_eigenvalues();
    assert!(eig.iter().all(|e| *e >= -1e-12));
}

#[test]
fn linear_element_alone_has_unit_gram() {
    let fam = MapFamily1D::build_centered(FamilyKind::HigherOrder, 1.0, 1.0)
        .unwrap()
        .subfamily(|s| s == ElementShape::Linear);
    let gd = build_gram(&fam).unwrap();
    assert!((gd.q1[(0, 0)] - 1.0).abs() < 1e-14);
    assert!((gd.upsilon - 1.0).abs() < 1e-12);
}

#[test]
fn upsilon_is_a_maximal_rayleigh_quotient() {
    let fam = MapFamily1D::build_centered(FamilyKind::PwLinear, 2.0, 0.25).unwrap();
    let gd = build_gram(&fam).unwrap();
    let mut r = rng(3);
    for _ in 0..200 {
        let z = DVector::from_vec(normals(&mut r, fam.len()));
        let num = (z.transpose() * &gd.q1jac * &z)[(0, 0)];
        let den = (z.transpose() * &gd.q1 * &z)[(0, 0)];
        assert!(num / den <= gd.upsilon * (1.0 + 1e-10));
    }
    let cert = &gd.q1 * gd.upsilon - &gd.q1jac;
    let min = cert.symmetric_eigenvalues().min();
    assert!(min >= -1e-10 * gd.upsilon, "{min}");
}

#[test]
fn duplicated_elements_get_jitter() {
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let gd = from_matrices(q.clone(), q).unwrap();
    assert!(gd.jitter > 0.0);
    assert!(estimate_upsilon(&gd).is_finite());
}

#[test]
fn q_dist_is_isometric_to_w2() {
    let fam = MapFamily1D::build_centered(FamilyKind::PwLinear, 2.0, 0.5).unwrap();
    let gd = build_gram(&fam).unwrap();
    let mut r = rng(4);
    let xs = normals(&mut r, 200_000);
    let xs2 = normals(&mut r, 200_000);
    for _ in 0..3 {
        let p1 = random_params(&mut r, 1, fam.len(), 0.8);
        let p2 = random_params(&mut r, 1, fam.len(), 0.8);
        let a: Vec<f64> = xs.iter().map(|&x| p1.coordinate(&fam, 0, x)).collect();
        let b: Vec<f64> = xs2.iter().map(|&x| p2.coordinate(&fam, 0, x)).collect();
        let (w, _) = w2_sorted(&a, &b);
        let q = q_dist(&p1, &p2, &gd).unwrap();
        assert!((q - w).abs() < 0.02 * (1.0 + q), "q={q} w={w}");
    }
}

#[test]
fn q_dist_basic_properties() {
    let fam = MapFamily1D::build_centered(FamilyKind::PwLinear, 1.0, 0.5).unwrap();
    let gd = build_gram(&fam).unwrap();
    let j = fam.len();
    let p = ConeParams::new(1.0, DMatrix::from_element(3, j, 0.2), DVector::zeros(3)).unwrap();
    let mut p2 = p.clone();
    p2.v = DVector::from_vec(vec![3.0, 4.0, 0.0]);
    assert_eq!(q_dist(&p, &p, &gd).unwrap(), 0.0);
    assert!((q_dist(&p, &p2, &gd).unwrap() - 5.0).abs() < 1e-14);
    let other = ConeParams::identity(3, j, 2.0);
    assert!(matches!(q_dist(&p, &other, &gd), Err(Error::Contract(_))));

    let mut r = rng(5);
    for _ in 0..50 {
        let a = random_params(&mut r, 3, j, 1.0);
        let b = random_params(&mut r, 3, j, 1.0);
        let c = random_params(&mut r, 3, j, 1.0);
        let ab = q_dist(&a, &b, &gd).unwrap();
        let bc = q_dist(&b, &c, &gd).unwrap();
        let ac = q_dist(&a, &c, &gd).unwrap();
        assert!(ac <= ab + bc + 1e-12);

        // Explicit Kronecker assembly.
        let big = DMatrix::<f64>::identity(3, 3).kronecker(&gd.q1);
        let dl = DVector::from_iterator(3 * j, (0..3).flat_map(|i| (0..j).map(move |k| (i, k))).map(|(i, k)| a.lambda[(i, k)] - b.lambda[(i, k)]));
        let dv = &a.v - &b.v;
        let explicit = ((dl.transpose() * big * &dl)[(0, 0)] + dv.norm_squared()).sqrt();
        assert!((explicit - ab).abs() < 1e-12 * (1.0 + ab));
    }
}

#[test]
fn geodesic_is_constant_speed_and_matches_quantile_interpolation() {
    let fam = MapFamily1D::build_centered(FamilyKind::PwLinear, 2.0, 0.5).unwrap();
    let gd = build_gram(&fam).unwrap();
    let mut r = rng(6);
    let p0 = random_params(&mut r, 1, fam.len(), 1.0);
    let p1 = random_params(&mut r, 1, fam.len(), 1.0);
    assert_eq!(geodesic(&p0, &p1, 0.0).unwrap(), p0);
    assert_eq!(geodesic(&p0, &p1, 1.0).unwrap(), p1);
    assert!(matches!(geodesic(&p0, &p1, 1.5), Err(Error::Contract(_))));
    let full = q_dist(&p0, &p1, &gd).unwrap();
    for t in [0.25, 0.5, 0.8] {
        let pt = geodesic(&p0, &p1, t).unwrap();
        assert!((q_dist(&p0, &pt, &gd).unwrap() - t * full).abs() < 1e-12);
    }

    // Quantile interpolation of independent samples of the endpoints.
    let mid = geodesic(&p0, &p1, 0.5).unwrap();
    let n = 100_000;
    let mut a: Vec<f64> = normals(&mut r, n).iter().map(|&x| p0.coordinate(&fam, 0, x)).collect();
    let mut b: Vec<f64> = normals(&mut r, n).iter().map(|&x| p1.coordinate(&fam, 0, x)).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let interp: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let m: Vec<f64> = normals(&mut r, n).iter().map(|&x| mid.coordinate(&fam, 0, x)).collect();
    let (w, se) = w2_sorted(&interp, &m);
    assert!(w < 0.02 + 3.0 * se, "w={w}");
}

#[test]
fn upsilon_grows_quadratically_at_most() {
    let ups: Vec<(usize, f64)> = [4usize, 8, 16, 28]
        .iter()
        .map(|&j| {
            let delta = 7.0 / j as f64;
            let fam = MapFamily1D::build_centered(FamilyKind::PwLinear, 3.5, delta).unwrap();
            (j, build_gram(&fam).unwrap().upsilon)
        })
        .collect();
    let c = ups[0].1 / 16.0;
    for (j, u) in ups {
        assert!(u <= c * (j * j) as f64 * (1.0 + 1e-9), "J={j}: {u}");
    }
}
