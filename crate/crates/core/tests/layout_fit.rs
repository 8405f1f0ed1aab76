mod common;

use mms_core::layout::{fit, DeviceProfile};
use mms_core::smil::{Dimension, Layout, Region, SmilTree};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fit_contains_and_is_idempotent(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let tree = common::valid_tree(&mut rng);
        let r = common::check_fit(&tree, &common::device(&mut rng));
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn downscale_keeps_aspect(w in 1u32..=640, h in 1u32..=480, k in prop::sample::select(vec![2u32, 4, 5, 8])) {
        let (root_w, root_h) = (640, 480);
        let region = Region {
            id: "r".into(),
            left: Dimension::px(0),
            top: Dimension::px(0),
            width: Dimension::px(w),
            height: Dimension::px(h),
            z_index: 0,
        };
        let tree = SmilTree {
            layout: Layout { root_width: Some(root_w), root_height: Some(root_h), regions: vec![region] },
            pars: vec![],
        };
        let device = DeviceProfile::new("d", root_w / k, root_h / k).unwrap();
        let out = &fit(&tree, &device).layout.regions[0];
        // each side is the exact quotient rounded half-up, floored at 1
        let want = |v: u32| ((2 * v + k) / (2 * k)).max(1);
        prop_assert_eq!((out.width.value, out.height.value), (want(w), want(h)));
    }
}

fn one_region(root: (u32, u32), rect: (u32, u32, u32, u32)) -> SmilTree {
    SmilTree {
        layout: Layout {
            root_width: Some(root.0),
            root_height: Some(root.1),
            regions: vec![Region {
                id: "Image".into(),
                left: Dimension::px(rect.0),
                top: Dimension::px(rect.1),
                width: Dimension::px(rect.2),
                height: Dimension::px(rect.3),
                z_index: 0,
            }],
        },
        pars: vec![],
    }
}

fn px(r: &Region) -> (u32, u32, u32, u32) {
    (r.left.value, r.top.value, r.width.value, r.height.value)
}

#[test]
fn halving_worked_example() {
    let out = fit(&one_region((320, 240), (0, 0, 320, 120)), &DeviceProfile::new("d", 160, 120).unwrap());
    assert_eq!(px(&out.layout.regions[0]), (0, 0, 160, 60));
}

#[test]
fn identity_when_it_fits() {
    let tree = one_region((160, 120), (0, 0, 160, 60));
    let out = fit(&tree, &DeviceProfile::new("d", 160, 120).unwrap());
    assert_eq!(out, tree);
}

#[test]
fn default_layout_when_absent() {
    let out = fit(&SmilTree::default(), &DeviceProfile::new("d", 176, 208).unwrap());
    let got: Vec<_> = out.layout.regions.iter().map(|r| (r.id.as_str(), px(r))).collect();
    assert_eq!(got, [("Image", (0, 0, 176, 104)), ("Text", (0, 104, 176, 104))]);
}
