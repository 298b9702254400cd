mod common;

use atlasseg::registration::{
    cost_and_gradient, groupwise_cost, sample_cost, AffineTransform, AtlasTransform, BSplineTransform, GroupTransform,
};
use atlasseg::{Grid, Volume};
use proptest::prelude::*;
use rand::Rng;

fn blob(g: &Grid, shift: f64) -> Volume {
    let c = g.center();
    let lab = common::ball(g, [c[0] + shift, c[1] - shift, c[2]], 5.0);
    common::scaled(&lab, 100.0, 10.0).gaussian_smooth(1.5)
}

fn random_transform(r: &mut impl Rng, g: &Grid, with_bspline: bool) -> AtlasTransform {
    let mut m = [[0.0; 3]; 3];
    for (a, row) in m.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = (a == b) as u8 as f64 + r.random_range(-0.05..0.05);
        }
    }
    let t = [0; 3].map(|_| r.random_range(-0.8..0.8));
    let affine = AffineTransform::new(m, t, g.center()).unwrap();
    let bspline = with_bspline.then(|| {
        let mut b = BSplineTransform::zero_covering(g, 6.0).unwrap();
        for c in b.coefficients_mut() {
            *c = [0; 3].map(|_| r.random_range(-0.6..0.6));
        }
        b
    });
    AtlasTransform { affine, bspline }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let g = Grid::new([18, 16, 14], [1.0, 1.2, 0.9], [0.0; 3]).unwrap();
    let target = blob(&g, 0.0);
    let atlases = vec![blob(&g, 1.0), blob(&g, -0.7)];
    let mut r = common::rng(11);
    let gt = GroupTransform::new(vec![
        random_transform(&mut r, &g, true),
        random_transform(&mut r, &g, true),
    ]);
    let samples: Vec<usize> = (0..g.len()).collect();
    let (cost, grads) = cost_and_gradient(&target, &atlases, &gt, &samples, true);
    assert!((cost - sample_cost(&target, &atlases, &gt, &samples)).abs() < 1e-9 * cost);
    assert!((cost - groupwise_cost(&target, &atlases, &gt)).abs() < 1e-9 * cost);

    let h = 1e-5;
    for (i, grad) in grads.iter().enumerate() {
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut probe = |edit: &dyn Fn(&mut AtlasTransform, f64)| {
            let (mut p, mut m) = (gt.clone(), gt.clone());
            edit(&mut p.atlases_mut()[i], h);
            edit(&mut m.atlases_mut()[i], -h);
            numeric.push(
                (sample_cost(&target, &atlases, &p, &samples) - sample_cost(&target, &atlases, &m, &samples))
                    / (2.0 * h),
            );
        };
        for a in 0..3 {
            for b in 0..3 {
                probe(&|t, d| t.affine.matrix[a][b] += d);
                analytic.push(grad.matrix[a][b]);
            }
        }
        for a in 0..3 {
            probe(&|t, d| t.affine.translation[a] += d);
            analytic.push(grad.translation[a]);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-3, "atlas {i} affine relative error {e}");

        let gb = grad.bspline.as_ref().unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        // Every fourth control point keeps the test fast.
        for k in (0..gb.len()).step_by(4) {
            for (a, &g) in gb[k].iter().enumerate() {
                let (mut p, mut m) = (gt.clone(), gt.clone());
                p.atlases_mut()[i].bspline.as_mut().unwrap().coefficients_mut()[k][a] += h;
                m.atlases_mut()[i].bspline.as_mut().unwrap().coefficients_mut()[k][a] -= h;
                numeric.push(
                    (sample_cost(&target, &atlases, &p, &samples) - sample_cost(&target, &atlases, &m, &samples))
                        / (2.0 * h),
                );
                analytic.push(g);
            }
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-3, "atlas {i} b-spline relative error {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transform_text_round_trip_is_exact(seed in any::<u64>(), n in 1usize..4, with_bspline in any::<bool>()) {
        let mut r = common::rng(seed);
        let g = common::random_grid(&mut r, 12);
        let gt = GroupTransform::new((0..n).map(|_| random_transform(&mut r, &g, with_bspline)).collect());
        let back = GroupTransform::parse(&gt.to_text()).unwrap();
        prop_assert_eq!(back, gt);
    }

    #[test]
    fn group_cost_is_nonnegative_and_order_free(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let g = Grid::with_dims([10, 9, 8]).unwrap();
        let target = blob(&g, 0.0);
        let atlases = vec![blob(&g, 0.8), blob(&g, -1.1)];
        let (t0, t1) = (random_transform(&mut r, &g, false), random_transform(&mut r, &g, true));
        let fwd = groupwise_cost(&target, &atlases, &GroupTransform::new(vec![t0.clone(), t1.clone()]));
        let rev = groupwise_cost(&target, &[atlases[1].clone(), atlases[0].clone()], &GroupTransform::new(vec![t1, t0]));
        prop_assert!(fwd >= 0.0);
        prop_assert!((fwd - rev).abs() <= 1e-12 * fwd.max(1.0));
    }
}
