mod common;

use common::{check_conservation, grid_state};
use proptest::prelude::*;
use tome_forge::lgtm::{partition_windows, unpartition_windows};
use tome_forge::merge::{apply_merge, bipartite_soft_match};
use tome_forge::metrics::layer_cossim;
use tome_forge::{RngStream, Tensor, TokenState};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_removes_min_of_r_and_a(seed in any::<u64>(), n in 1usize..80, r in 0usize..60, cls in any::<bool>()) {
        let mut rng = RngStream::new(seed);
        let mut state = TokenState::from_patches(rng.gaussian_tensor([n, 5], 1.0), None);
        if cls {
            state.members[0].clear();
            state.sizes[0] = 1.0;
            state.class_index = Some(0);
        }
        let metric = rng.gaussian_tensor([n, 3], 1.0);
        let m = bipartite_soft_match(&metric, r, &state.protected_mask()).unwrap();
        let mask = state.protected_mask();
        let a = (0..n).filter(|i| i % 2 == 0 && !mask[*i]).count();
        let b = (0..n).filter(|i| i % 2 == 1 && !mask[*i]).count();
        let expect = if b == 0 { 0 } else { r.min(a) };
        let merged = apply_merge(&state, &m).unwrap();
        prop_assert_eq!(merged.len(), n - expect);
        let size_sum: f32 = merged.sizes.iter().sum();
        prop_assert_eq!(size_sum, n as f32);
        if cls {
            let c = merged.class_index.unwrap();
            prop_assert_eq!(merged.tokens.row(c), state.tokens.row(0));
        }
    }

    #[test]
    fn repeated_merging_conserves_patches(seed in any::<u64>(), n in 2usize..120, steps in 1usize..6) {
        let mut rng = RngStream::new(seed);
        let mut state = grid_state(&mut rng, 1, n, 4, true);
        state.grid = None;
        for _ in 0..steps {
            let r = rng.range_inclusive(0, state.len());
            let metric = rng.gaussian_tensor([state.len(), 4], 1.0);
            let m = bipartite_soft_match(&metric, r, &state.protected_mask()).unwrap();
            state = apply_merge(&state, &m).unwrap();
            prop_assert!(check_conservation(&state).is_ok(), "{:?}", check_conservation(&state));
        }
    }

    #[test]
    fn window_round_trip_is_identity(seed in any::<u64>(), rows in 1usize..16, cols in 1usize..16, w in 1usize..9, cls in any::<bool>()) {
        let mut rng = RngStream::new(seed);
        let state = grid_state(&mut rng, rows, cols, 3, cls);
        let (stack, layout) = partition_windows(&state, None, w).unwrap();
        prop_assert_eq!(stack.live_tokens(), rows * cols);
        prop_assert_eq!(unpartition_windows(&stack, &layout).unwrap(), state);
    }

    #[test]
    fn cossim_is_rotation_invariant(seed in any::<u64>(), n in 2usize..30, c in 2usize..10, angle in -3.0f32..3.0) {
        let mut rng = RngStream::new(seed);
        let t = rng.gaussian_tensor([n, c], 1.0);
        let (i, j) = (rng.below(c), rng.below(c));
        prop_assume!(i != j);
        let (s, co) = angle.sin_cos();
        let mut rot = t.clone();
        for row in 0..n {
            let (x, y) = (t.row(row)[i], t.row(row)[j]);
            rot.row_mut(row)[i] = co * x - s * y;
            rot.row_mut(row)[j] = s * x + co * y;
        }
        let (a, b) = (layer_cossim(&t).unwrap(), layer_cossim(&rot).unwrap());
        prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
    }

    #[test]
    fn identical_tokens_merge_to_themselves(seed in any::<u64>(), n in 2usize..40) {
        let row = RngStream::new(seed).gaussian_vec(6, 1.0);
        let tokens = Tensor::new([n, 6], row.iter().copied().cycle().take(n * 6).collect()).unwrap();
        let state = TokenState::from_patches(tokens, None);
        let m = bipartite_soft_match(&state.tokens, n, &state.protected_mask()).unwrap();
        let merged = apply_merge(&state, &m).unwrap();
        for k in 0..merged.len() {
            for (x, y) in merged.tokens.row(k).iter().zip(&row) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
            }
        }
    }
}
