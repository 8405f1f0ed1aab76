mod common;

use mms_core::layout::fit;
use mms_core::scheduler::{build_plan, control, tick, Input, Mode, PlayerState};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn active_set_matches_tick_simulator(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let tree = common::valid_tree(&mut rng);
        let fitted = fit(&tree, &common::device(&mut rng));
        let r = common::check_tick_oracle(&fitted);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn plans_are_deterministic(seed in any::<u64>()) {
        let tree = common::valid_tree(&mut common::rng(seed));
        prop_assert_eq!(build_plan(&tree).unwrap().to_json_trace(), build_plan(&tree.clone()).unwrap().to_json_trace());
    }

    #[test]
    fn control_algebra(seed in any::<u64>(), steps in prop::collection::vec((0usize..5, 0u64..4000), 1..40)) {
        let tree = common::valid_tree(&mut common::rng(seed));
        let plan = build_plan(&tree).unwrap();
        let inputs = [Input::Play, Input::Pause, Input::Stop, Input::Rewind, Input::Next];
        let mut state = PlayerState::default();
        for (i, elapsed) in steps {
            let input = inputs[i];
            let before = tick(state, &plan, elapsed);
            let after = control(state, &plan, input, elapsed);
            prop_assert!(after.position_ms <= plan.total_ms);
            prop_assert_eq!(after.current_par, plan.par_at(after.position_ms));
            match input {
                Input::Rewind => prop_assert!(after.position_ms <= before.position_ms),
                Input::Next => prop_assert!(after.position_ms >= before.position_ms),
                Input::Stop => prop_assert_eq!((after.mode, after.position_ms), (Mode::Stopped, 0)),
                Input::Pause if before.mode == Mode::Playing => {
                    let resumed = control(after, &plan, Input::Play, 0);
                    prop_assert_eq!(resumed.position_ms, after.position_ms);
                    prop_assert_eq!(resumed.mode, Mode::Playing);
                    // paused time does not move the position
                    prop_assert_eq!(tick(after, &plan, 1000).position_ms, after.position_ms);
                }
                _ => {}
            }
            state = after;
        }
        let restarted = control(control(state, &plan, Input::Stop, 0), &plan, Input::Play, 0);
        prop_assert_eq!((restarted.mode, restarted.position_ms), (Mode::Playing, 0));
    }
}
