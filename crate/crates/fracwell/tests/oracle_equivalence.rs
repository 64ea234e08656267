//! Cross-validation of the assembled bilinear forms against slow reference
//! quadratures built on a different decomposition (polar difference-body
//! integration with exact polygon clipping for triangle pairs, graded
//! quadtrees for segment pairs). Agreement here certifies the
//! singularity-removing transforms end to end.

use fracwell::assembly::{
    apply_interior, apply_theta, assemble_interior, assemble_theta, QuadratureSpec,
};
use fracwell::coefficients::{exponents, Coefficient, Constants, ExponentInputs};
use fracwell::geometry::{extract_boundary, Mesh};
use fracwell::oracle::{boundary_form_reference, interior_form_reference, ReferenceTol};
use nalgebra::{DVector, Point2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pack() -> (f64, f64, f64) {
    let pack = exponents(&ExponentInputs::default_square()).unwrap();
    let constants = Constants::for_pack(&pack).unwrap();
    (pack.s, pack.alpha, constants.c_ns)
}

fn hat_at(mesh: &Mesh, target: Point2<f64>) -> DVector<f64> {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, p) in mesh.vertices.iter().enumerate() {
        let d = (p - target).norm();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    let mut u = DVector::zeros(mesh.n_vertices());
    u[best] = 1.0;
    u
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-30)
}

#[test]
fn interior_form_matches_reference_quadrature() {
    let (s, _, c_ns) = pack();
    let mesh = Mesh::unit_square(0.5).unwrap();
    let spec = QuadratureSpec::default();
    let tol = ReferenceTol::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hat = hat_at(&mesh, Point2::new(0.5, 0.5));
    let rough = DVector::from_fn(mesh.n_vertices(), |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    let smooth = DVector::from_fn(mesh.n_vertices(), |i, _| {
        let p = mesh.vertices[i];
        (std::f64::consts::PI * p.x).sin() * (std::f64::consts::PI * p.y).cos() + p.x * p.x
    });

    let kernels: [(&str, Coefficient); 2] = [
        ("unit", Coefficient::constant(1.0)),
        (
            "curved",
            Coefficient::parse("1 + 0.5 * x1 * y2 + 0.25 * x2").unwrap(),
        ),
    ];
    for (name, k) in &kernels {
        let mat = assemble_interior(&mesh, k, 0.0, s, c_ns, &spec).unwrap();
        let kern = |x: Point2<f64>, y: Point2<f64>| k.eval(0.0, x, y);
        for (field_name, u) in [("hat", &hat), ("rough", &rough), ("smooth", &smooth)] {
            let oracle = interior_form_reference(&mesh, &kern, s, c_ns, u, u, &tol).unwrap();
            let matrix_form = u.dot(&(&mat * u));
            let applied = apply_interior(&mesh, k, 0.0, s, c_ns, &spec, u)
                .unwrap()
                .dot(u);
            let dm = rel_diff(matrix_form, oracle);
            let da = rel_diff(applied, oracle);
            assert!(
                dm < 1e-2,
                "{name}/{field_name}: matrix {matrix_form} vs oracle {oracle} (rel {dm:.2e})"
            );
            assert!(
                da < 1e-2,
                "{name}/{field_name}: applied {applied} vs oracle {oracle} (rel {da:.2e})"
            );
            // the two assembled routes share transforms: they agree much tighter
            assert!(rel_diff(matrix_form, applied) < 1e-12);
        }
        // bilinear cross-terms exercise the off-diagonal scatter
        let oracle = interior_form_reference(&mesh, &kern, s, c_ns, &hat, &rough, &tol).unwrap();
        let bilinear = hat.dot(&(&mat * &rough));
        assert!(
            rel_diff(bilinear, oracle) < 1e-2,
            "{name}/bilinear: {bilinear} vs {oracle}"
        );
    }
}

#[test]
fn boundary_form_matches_reference_quadrature() {
    let (_, alpha, _) = pack();
    let mesh = Mesh::unit_square(0.25).unwrap();
    let boundary = extract_boundary(&mesh, 1.0).unwrap();
    let spec = QuadratureSpec::default();
    let nb = boundary.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rough = DVector::from_fn(nb, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    let smooth = DVector::from_fn(nb, |i, _| {
        let p = boundary.points[i];
        p.x * p.x - p.y + 0.5 * p.x * p.y
    });

    let kernels: [(&str, Coefficient); 2] = [
        ("unit", Coefficient::constant(1.0)),
        (
            "curved",
            Coefficient::parse("1 + 0.25 * x1 + 0.25 * y1").unwrap(),
        ),
    ];
    for (name, zeta) in &kernels {
        let mat = assemble_theta(&boundary, zeta, 0.0, alpha, &spec).unwrap();
        let kern = |x: Point2<f64>, y: Point2<f64>| zeta.eval(0.0, x, y);
        for (field_name, u) in [("rough", &rough), ("smooth", &smooth)] {
            let oracle = boundary_form_reference(&boundary, &kern, alpha, u, u, 14).unwrap();
            let matrix_form = u.dot(&(&mat * u));
            let applied = apply_theta(&boundary, zeta, 0.0, alpha, &spec, u)
                .unwrap()
                .dot(u);
            let dm = rel_diff(matrix_form, oracle);
            let da = rel_diff(applied, oracle);
            assert!(
                dm < 1e-2,
                "{name}/{field_name}: matrix {matrix_form} vs oracle {oracle} (rel {dm:.2e})"
            );
            assert!(
                da < 1e-2,
                "{name}/{field_name}: applied {applied} vs oracle {oracle} (rel {da:.2e})"
            );
            assert!(rel_diff(matrix_form, applied) < 1e-12);
        }
    }
}
