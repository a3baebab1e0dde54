use promptseg::{Click, PromptSet};
use promptseg_server::scale::{scale_coord, Scaler};
use proptest::prelude::*;

proptest! {
    #[test]
    fn scaled_coords_stay_in_bounds_and_ordered(from in 1usize..600, to in 1usize..600, a in 0i64..600, b in 0i64..600) {
        let (a, b) = (a % from as i64, b % from as i64);
        let (sa, sb) = (scale_coord(a, from, to), scale_coord(b, from, to));
        prop_assert!((0..to as i64).contains(&sa));
        if a <= b {
            prop_assert!(sa <= sb);
        }
    }

    #[test]
    fn same_size_is_identity(n in 1usize..512, v in 0i64..512) {
        let v = v % n as i64;
        prop_assert_eq!(scale_coord(v, n, n), v);
    }

    #[test]
    fn in_bounds_clicks_always_map(h in 1usize..300, w in 1usize..300, r in 0i64..300, c in 0i64..300) {
        let s = Scaler { original: (h, w), model: (128, 128) };
        let click = Click::positive(r % h as i64, c % w as i64);
        let out = s.to_model(&PromptSet::from_clicks([click])).unwrap();
        prop_assert!(out.clicks[0].row < 128 && out.clicks[0].col < 128);
        let outside = Click::negative(h as i64, c % w as i64);
        prop_assert!(s.to_model(&PromptSet::from_clicks([outside])).is_err());
    }
}
