mod common;

use atlasseg::clic::{clic_fit, probability_map, ClicParams};
use atlasseg::levelset::{dirac, heaviside, init_sdf_from_mask, reinitialize_sdf, LevelSetField};
use atlasseg::mhd::{self, ElementType};
use atlasseg::{Grid, Volume};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn heaviside_is_a_smooth_step_with_dirac_derivative(t in -50.0f64..50.0, eps in 0.05f64..5.0) {
        let h = heaviside(t, eps);
        prop_assert!(h > 0.0 && h < 1.0);
        prop_assert!((h + heaviside(-t, eps) - 1.0).abs() < 1e-12);
        prop_assert!(heaviside(t + 0.1, eps) > h);
        let d = 1e-5 * eps;
        let fd = (heaviside(t + d, eps) - heaviside(t - d, eps)) / (2.0 * d);
        prop_assert!((fd - dirac(t, eps)).abs() <= 1e-5 * dirac(t, eps).max(1e-3));
        prop_assert_eq!(dirac(t, eps), dirac(-t, eps));
    }

    #[test]
    fn sdf_reproduces_the_mask_and_survives_reinitialization(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let g = common::random_grid(&mut r, 12);
        let mask = common::random_mask(&mut r, &g);
        prop_assume!(mask.count() < g.len());
        let field = init_sdf_from_mask(&mask).unwrap();
        prop_assert_eq!(field.mask(), mask.clone());
        let again = reinitialize_sdf(&field).unwrap();
        prop_assert_eq!(again.mask(), mask);
        // Distance to the interface is bounded by the grid diagonal.
        let diag = (0..3).map(|a| (g.dims()[a] as f64 * g.spacing()[a]).powi(2)).sum::<f64>().sqrt();
        prop_assert!(field.phi().data().iter().all(|p| p.abs() <= diag / g.min_spacing()));
    }

    #[test]
    fn sdf_flips_sign_with_the_complement(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let g = common::random_grid(&mut r, 10);
        let mask = common::random_mask(&mut r, &g);
        prop_assume!(mask.count() < g.len());
        let inv = atlasseg::LabelVolume::from_fn(g, |[i, j, k]| mask.get(i, j, k) == 0);
        let (a, b) = (init_sdf_from_mask(&mask).unwrap(), init_sdf_from_mask(&inv).unwrap());
        for (x, y) in a.phi().data().iter().zip(b.phi().data()) {
            prop_assert!((x + y).abs() < 1e-9);
        }
    }

    #[test]
    fn clic_memberships_and_map_are_well_formed(seed in any::<u64>(), k in 2usize..4) {
        let mut r = common::rng(seed);
        let g = Grid::with_dims([9, 8, 7]).unwrap();
        let mask = common::random_mask(&mut r, &g);
        let img = Volume::from_fn(g, |[i, j, k]| {
            let base = if mask.get(i, j, k) == 1 { 80.0 } else { 20.0 };
            base + 3.0 * ((i * 7 + j * 3 + k) % 5) as f64
        }).unwrap();
        let res = clic_fit(&img, &ClicParams { n_classes: k, max_iters: 15, ..ClicParams::default() }).unwrap();
        for v in 0..g.len() {
            let s: f64 = res.memberships.iter().map(|m| m.data()[v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(res.memberships.iter().all(|m| (0.0..=1.0).contains(&m.data()[v])));
            prop_assert!(res.bias.data()[v] > 0.0);
        }
        let mean_bias = res.bias.data().iter().sum::<f64>() / g.len() as f64;
        prop_assert!((mean_bias - 1.0).abs() < 1e-9);
        prop_assert!(res.centers.windows(2).all(|w| w[0] < w[1]));
        let tol = 1e-9 * res.objective[0].abs();
        prop_assert!(res.objective.windows(2).all(|w| w[1] <= w[0] + tol), "{:?}", res.objective);
        let map = probability_map(&res);
        prop_assert!(map.data().iter().all(|v| (0.0..=100.0).contains(v)));
    }

    #[test]
    fn mhd_round_trip_is_byte_exact(seed in any::<u64>(), which in 0usize..4) {
        let mut r = common::rng(seed);
        let g = common::random_grid(&mut r, 9);
        let et = [ElementType::UInt8, ElementType::Int16, ElementType::UInt16, ElementType::Float32][which];
        let data: Vec<f64> = (0..g.len())
            .map(|_| match et {
                ElementType::UInt8 => r.random_range(0..=255) as f64,
                ElementType::Int16 => r.random_range(-32768..=32767) as f64,
                ElementType::UInt16 => r.random_range(0..=65535) as f64,
                ElementType::Float32 => r.random_range(-1e6f32..1e6) as f64,
            })
            .collect();
        let vol = Volume::new(g, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.mhd"), dir.path().join("b.mhd"));
        mhd::write_mhd(&vol, &p1, et).unwrap();
        let (header, back) = mhd::read_mhd(&p1).unwrap();
        prop_assert_eq!(header.element_type, et);
        prop_assert_eq!(&back, &vol);
        mhd::write_mhd(&back, &p2, et).unwrap();
        let raw = |p: &std::path::Path| std::fs::read(p.with_extension("raw")).unwrap();
        prop_assert_eq!(raw(&p1), raw(&p2));
    }
}

#[test]
fn level_set_field_mask_is_positive_phi() {
    let g = Grid::with_dims([3, 1, 1]).unwrap();
    let f = LevelSetField::new(Volume::new(g, vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(f.mask().data(), &[0, 0, 1]);
}
