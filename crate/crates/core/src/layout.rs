//! Layout fitting: adapts a message's root layout and regions to the screen
//! of the device it is played on.
//!
//! Rules, applied per region:
//! 1. percentages resolve against the message's own root layout (the device
//!    screen stands in for a missing root axis);
//! 2. if the root exceeds the screen on either axis, everything scales by
//!    `min(screen_w / root_w, screen_h / root_h)`, rounding half-up;
//! 3. the result is clamped into the screen with a one pixel floor.
//!
//! Smaller roots are never scaled up. A tree without regions gets the default
//! two-region screen before fitting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smil::{Dimension, Layout, Region, SmilTree, Unit};

pub const MIN_SCREEN: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub screen_width: u32,
    pub screen_height: u32,
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("screen {0}x{1} is below the {MIN_SCREEN}x{MIN_SCREEN} minimum")]
    TooSmall(u32, u32),
    #[error("unknown device profile {0:?}")]
    Unknown(String),
    #[error("reading device profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("device profile JSON: {0}")]
    Json(#[from] serde_json::Error),
}

const BUILTIN: &[(&str, u32, u32)] = &[
    ("default", 176, 208),
    ("qcif", 176, 144),
    ("qqvga", 160, 120),
    ("qvga", 240, 320),
    ("vga", 480, 640),
];

impl DeviceProfile {
    pub fn new(name: impl Into<String>, screen_width: u32, screen_height: u32) -> Result<Self, DeviceError> {
        let p = DeviceProfile { name: name.into(), screen_width, screen_height };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), DeviceError> {
        if self.screen_width < MIN_SCREEN || self.screen_height < MIN_SCREEN {
            return Err(DeviceError::TooSmall(self.screen_width, self.screen_height));
        }
        Ok(())
    }

    /// 176x208, a common handset screen.
    pub fn default_profile() -> Self {
        Self::builtin("default").expect("table contains default")
    }

    /// Looks up one of the named profiles shipped with the library
    /// (`default`, `qcif`, `qqvga`, `qvga`, `vga`).
    pub fn builtin(name: &str) -> Result<Self, DeviceError> {
        BUILTIN
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|&(n, w, h)| DeviceProfile { name: n.into(), screen_width: w, screen_height: h })
            .ok_or_else(|| DeviceError::Unknown(name.into()))
    }

    pub fn from_json(text: &str) -> Result<Self, DeviceError> {
        let p: DeviceProfile = serde_json::from_str(text)?;
        p.check()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, DeviceError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A resolved pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

/// `round(value * num / den)`, halves rounding up.
fn scale_half_up(value: u32, num: u64, den: u64) -> u32 {
    let scaled = (2 * u64::from(value) * num + den) / (2 * den);
    u32::try_from(scaled).unwrap_or(u32::MAX)
}

fn resolve(dim: Dimension, axis: u32) -> u32 {
    match dim.unit {
        Unit::Pixels => dim.value,
        Unit::Percent => scale_half_up(dim.value, u64::from(axis), 100),
    }
}

/// Pixel rectangle of `region` on `device`, per the module rules.
pub fn fit_rect(region: &Region, root: (u32, u32), device: &DeviceProfile) -> Rect {
    let (root_w, root_h) = root;
    let (dev_w, dev_h) = (device.screen_width, device.screen_height);
    let mut left = resolve(region.left, root_w);
    let mut top = resolve(region.top, root_h);
    let mut width = resolve(region.width, root_w);
    let mut height = resolve(region.height, root_h);

    if root_w > dev_w || root_h > dev_h {
        // s = min(dev_w/root_w, dev_h/root_h), kept as an exact fraction
        let (num, den) = if u64::from(dev_w) * u64::from(root_h) <= u64::from(dev_h) * u64::from(root_w) {
            (u64::from(dev_w), u64::from(root_w))
        } else {
            (u64::from(dev_h), u64::from(root_h))
        };
        left = scale_half_up(left, num, den);
        top = scale_half_up(top, num, den);
        width = scale_half_up(width, num, den);
        height = scale_half_up(height, num, den);
    }

    left = left.min(dev_w - 1);
    top = top.min(dev_h - 1);
    width = width.clamp(1, dev_w - left);
    height = height.clamp(1, dev_h - top);
    Rect { left, top, width, height }
}

/// Adapts `tree` to `device`. The returned tree has pixel-only dimensions, a
/// root layout equal to the screen, and every region inside the screen.
pub fn fit(tree: &SmilTree, device: &DeviceProfile) -> SmilTree {
    let mut layout = tree.layout.clone();
    if layout.regions.is_empty() {
        layout.regions = Layout::default_screen().regions;
    }
    let root = (
        layout.root_width.unwrap_or(device.screen_width),
        layout.root_height.unwrap_or(device.screen_height),
    );
    let regions = layout
        .regions
        .iter()
        .map(|r| {
            let rect = fit_rect(r, root, device);
            Region {
                id: r.id.clone(),
                left: Dimension::px(rect.left),
                top: Dimension::px(rect.top),
                width: Dimension::px(rect.width),
                height: Dimension::px(rect.height),
                z_index: r.z_index,
            }
        })
        .collect();
    SmilTree {
        layout: Layout {
            root_width: Some(device.screen_width),
            root_height: Some(device.screen_height),
            regions,
        },
        pars: tree.pars.clone(),
    }
}
