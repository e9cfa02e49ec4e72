use mpa_core::patchgrid::{
    grid_offsets, rescale_shorter_edge, select_test_patches, Geometry, ImageBuffer, PatchKind,
    PatchPlan, SelectionStrategy,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn textured(w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |x, y| {
        [
            (x % 17) as f32 / 16.0,
            (y % 13) as f32 / 12.0,
            ((x * 7 + y * 3) % 11) as f32 / 10.0,
        ]
    })
    .unwrap()
}

fn sized() -> impl Strategy<Value = (usize, usize)> {
    (24usize..160, 0.4f64..=2.5).prop_map(|(w, aspect)| {
        let h = ((w as f64 * aspect).round() as usize).max(1);
        (w, h)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rescale_fixes_shorter_edge_and_keeps_aspect((w, h) in sized(), s in 16usize..96) {
        let img = textured(w, h);
        let out = rescale_shorter_edge(&img, s).unwrap();
        prop_assert_eq!(out.width().min(out.height()), s);
        let long_in = w.max(h) as f64 / w.min(h) as f64 * s as f64;
        prop_assert!((out.width().max(out.height()) as f64 - long_in).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn grid_offsets_span_the_axis(dim in 16usize..400, p in 1usize..16, m in 2usize..6) {
        let offs = grid_offsets(dim, p, m);
        prop_assert_eq!(offs.len(), m);
        prop_assert_eq!(offs[0], 0);
        prop_assert_eq!(*offs.last().unwrap(), dim - p);
        prop_assert!(offs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn plans_yield_expected_patches((w, h) in sized(), m in 1usize..4, seed in 0u64..1000) {
        let geometry = Geometry { s: 32, p: 24, g: 20 };
        let img = textured(w, h);
        let rescaled = rescale_shorter_edge(&img, geometry.s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for strategy in [SelectionStrategy::Random, SelectionStrategy::Local, SelectionStrategy::GlobalLocal] {
            let plan = PatchPlan { strategy, count: m, geometry };
            let patches = select_test_patches(&img, &plan, &mut rng).unwrap();
            prop_assert_eq!(patches.len(), plan.patches_per_image());
            for patch in &patches {
                match patch.kind {
                    PatchKind::Local => {
                        prop_assert_eq!(patch.side(), geometry.p);
                        let (x, y) = patch.source_offset;
                        let source = rescaled.crop(x, y, geometry.p, geometry.p).unwrap();
                        prop_assert_eq!(patch.pixels.pixels(), source.pixels());
                    }
                    PatchKind::Global => {
                        prop_assert_eq!(strategy, SelectionStrategy::GlobalLocal);
                        prop_assert_eq!(patch.side(), geometry.g);
                    }
                }
            }
        }
    }
}

#[test]
fn single_patch_grid_is_centered() {
    assert_eq!(grid_offsets(100, 40, 1), vec![30]);
    assert_eq!(grid_offsets(40, 40, 3), vec![0, 0, 0]);
}

#[test]
fn oversized_patch_is_rejected() {
    let img = textured(30, 30);
    let plan = PatchPlan::local(
        2,
        Geometry {
            s: 32,
            p: 40,
            g: 32,
        },
    );
    assert!(select_test_patches(&img, &plan, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
