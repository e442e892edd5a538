use std::f64::consts::PI;

use proptest::prelude::*;

use lumen::dataset::Split;
use lumen::envmap::{read_pfm_bytes, rotate_envmap, solid_angle_weights, weighted_energy, write_pfm_bytes, EnvMap, HdrImage};
use lumen::linalg::Mat3;
use lumen::metrics::{mae, mre, rmse, si_rmse};
use lumen::render::{build_transport, render_with_transport, sphere_normal_map, Brdf, DEFAULT_TRANSPORT_BUDGET};
use lumen::sphharm::{num_coeffs, project_image, reconstruct, ShCoeffs};

fn image(h: usize, w: usize, max: f64) -> impl Strategy<Value = HdrImage> {
    prop::collection::vec(0.0..max, h * w * 3).prop_map(move |d| HdrImage::new(h, w, d).unwrap())
}

fn image_pair() -> impl Strategy<Value = (HdrImage, HdrImage)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (image(h, w, 20.0), image(h, w, 20.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solid_angles_cover_the_sphere(h in 1usize..300, w in 1usize..300) {
        let total = solid_angle_weights(h, w).unwrap().total();
        prop_assert!((total - 4.0 * PI).abs() < 1e-9 * 4.0 * PI);
    }

    #[test]
    fn coefficient_count_is_square(l in 0i64..40) {
        prop_assert_eq!(num_coeffs(l).unwrap(), ((l + 1) * (l + 1)) as usize);
    }

    #[test]
    fn metrics_are_nonnegative_and_si_is_bounded((p, g) in image_pair()) {
        let w = solid_angle_weights(p.height(), p.width()).unwrap().to_vec();
        let r = rmse(&p, &g, &w).unwrap();
        let (si, alpha) = si_rmse(&p, &g, &w).unwrap();
        prop_assert!(si >= 0.0 && alpha >= 0.0);
        prop_assert!(si <= r + 1e-12);
        prop_assert!(mae(&p, &g, &w).unwrap() >= 0.0);
        prop_assert!(mre(&p, &g, &w).unwrap() >= 0.0);
        prop_assert_eq!(rmse(&g, &g, &w).unwrap(), 0.0);
    }

    #[test]
    fn si_rmse_ignores_prediction_scale((p, g) in image_pair(), k in 0.01f64..100.0) {
        let w = solid_angle_weights(p.height(), p.width()).unwrap().to_vec();
        let scaled = p.map(|v| k * v);
        let (a, _) = si_rmse(&p, &g, &w).unwrap();
        let (b, _) = si_rmse(&scaled, &g, &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn pfm_round_trip_is_exact(img in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| image(h, w, 1e4))) {
        // PFM stores f32, so compare against the f32-rounded values.
        let back = read_pfm_bytes(&write_pfm_bytes(&img)).unwrap();
        let want: Vec<f64> = img.data().iter().map(|&v| v as f32 as f64).collect();
        prop_assert_eq!(back.data(), &want[..]);
    }

    #[test]
    fn sh_projection_inverts_reconstruction(
        data in prop::collection::vec(prop_oneof![-1.5f64..-0.5, 0.5f64..1.5], 3 * 16)
    ) {
        let c = ShCoeffs::from_data(3, data).unwrap();
        let back = project_image(&reconstruct(&c, 48, 96).unwrap(), 3);
        for (a, b) in back.data().iter().zip(c.data()) {
            prop_assert!((a - b).abs() <= 0.01 * b.abs());
        }
    }

    #[test]
    fn azimuth_steps_permute_columns(shift in 0usize..16, env in image(8, 16, 50.0)) {
        let env = EnvMap::from_image(env).unwrap();
        let turn = Mat3::rotation_z(2.0 * PI * shift as f64 / 16.0);
        let rotated = rotate_envmap(&env, &turn).unwrap();
        let (a, b) = (weighted_energy(&env), weighted_energy(&rotated));
        for ch in 0..3 {
            prop_assert!((a[ch] - b[ch]).abs() <= 1e-9 * (1.0 + a[ch]));
        }
        let back = rotate_envmap(&rotated, &turn.transpose()).unwrap();
        for (x, y) in back.data().iter().zip(env.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y));
        }
    }

    #[test]
    fn rendering_is_linear_in_light(
        a in image(4, 8, 10.0),
        b in image(4, 8, 10.0),
        k in 0.0f64..5.0,
        diffuse in 0.0f64..0.5,
        exponent in 1.0f64..100.0,
    ) {
        let brdf = Brdf::new(diffuse, 0.5, exponent).unwrap();
        let t = build_transport(&sphere_normal_map(8).unwrap(), &brdf, 4, 8, DEFAULT_TRANSPORT_BUDGET).unwrap();
        let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| k * x + y).collect();
        let render = |img: HdrImage| render_with_transport(&t, &EnvMap::from_image(img).unwrap()).unwrap();
        let lhs = render(HdrImage::new(4, 8, mix).unwrap());
        let (ra, rb) = (render(a), render(b));
        for ((l, x), y) in lhs.data().iter().zip(ra.data()).zip(rb.data()) {
            prop_assert!((l - (k * x + y)).abs() <= 1e-9 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn splits_are_contiguous_blocks(count in 1usize..3000) {
        let splits: Vec<Split> = (0..count).map(|i| Split::of(i, count)).collect();
        prop_assert!(splits.windows(2).all(|w| w[0] as u8 <= w[1] as u8));
        let train = splits.iter().filter(|s| **s == Split::Train).count() as f64;
        prop_assert!((train / count as f64 - 1044.0 / 1303.0).abs() <= 1.0 / count as f64 + 1e-12);
    }
}
