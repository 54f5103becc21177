use dmaseg::dataset::{Protocol, SplitStrategy};
use dmaseg::metrics::{frame_f, frame_iou};
use dmaseg::synth::SyntheticConfig;
use proptest::prelude::*;

const H: usize = 12;
const W: usize = 10;

fn mask() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, H * W)
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in mask(), b in mask()) {
        let j = frame_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, frame_iou(&b, &a));
        prop_assert_eq!(frame_iou(&a, &a), 1.0);
    }

    #[test]
    fn boundary_f_is_bounded_and_reflexive(a in mask(), b in mask(), radius in 0.0f64..3.0) {
        let f = frame_f(&a, &b, H, W, radius);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(frame_f(&a, &a, H, W, radius), 1.0);
    }

    #[test]
    fn synthetic_config_round_trips(
        motions in 1usize..20, objects in 1usize..20, clips in 1usize..9, frames in 1usize..16,
        seed in any::<u64>(), distractors in 0usize..4,
        holdout in prop::collection::vec((0usize..20, 0usize..20), 0..5),
    ) {
        let cfg = SyntheticConfig {
            motion_classes: motions,
            object_classes: objects,
            clips_per_cell: clips,
            frames,
            seed,
            distractors,
            holdout,
            ..SyntheticConfig::default()
        };
        let back: SyntheticConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn protocol_round_trips(ns in any::<bool>(), fold in 0usize..4, seed in any::<u64>(),
                            cells in prop::collection::vec((0usize..9, 0usize..9), 1..6), holdout in any::<bool>()) {
        let p = if holdout {
            Protocol::Holdout { cells }
        } else {
            let strategy = if ns { SplitStrategy::NonOverlapping } else { SplitStrategy::Overlapping };
            Protocol::Folds { strategy, test_fold: fold, seed }
        };
        let back: Protocol = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }
}
