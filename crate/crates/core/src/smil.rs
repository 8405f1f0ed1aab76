//! In-memory SMIL tree shared by the player and the composer, plus the
//! conformance checks run over it.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Pixels,
    Percent,
}

/// A length in a layout: either absolute pixels or a percentage of the
/// root-layout axis it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dimension {
    pub value: u32,
    pub unit: Unit,
}

impl Dimension {
    pub const ZERO: Dimension = Dimension::px(0);
    pub const FULL: Dimension = Dimension::percent(100);

    pub const fn px(value: u32) -> Self {
        Dimension { value, unit: Unit::Pixels }
    }

    pub const fn percent(value: u32) -> Self {
        Dimension { value, unit: Unit::Percent }
    }

    pub fn is_pixels(&self) -> bool {
        self.unit == Unit::Pixels
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.unit {
            Unit::Pixels => write!(f, "{}", self.value),
            Unit::Percent => write!(f, "{}%", self.value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub left: Dimension,
    pub top: Dimension,
    pub width: Dimension,
    pub height: Dimension,
    pub z_index: i32,
}

impl Region {
    /// Region covering the whole root layout.
    pub fn full(id: impl Into<String>) -> Self {
        Region {
            id: id.into(),
            left: Dimension::ZERO,
            top: Dimension::ZERO,
            width: Dimension::FULL,
            height: Dimension::FULL,
            z_index: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub root_width: Option<u32>,
    pub root_height: Option<u32>,
    pub regions: Vec<Region>,
}

impl Layout {
    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.root_width.is_none() && self.root_height.is_none() && self.regions.is_empty()
    }

    /// The two-region screen used when a message carries no layout: "Image"
    /// on the top half and "Text" on the bottom half.
    pub fn default_screen() -> Self {
        Layout {
            root_width: None,
            root_height: None,
            regions: vec![
                Region {
                    id: "Image".into(),
                    left: Dimension::ZERO,
                    top: Dimension::ZERO,
                    width: Dimension::FULL,
                    height: Dimension::percent(50),
                    z_index: 0,
                },
                Region {
                    id: "Text".into(),
                    left: Dimension::ZERO,
                    top: Dimension::percent(50),
                    width: Dimension::FULL,
                    height: Dimension::percent(50),
                    z_index: 1,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MediaKind {
    Text,
    Image,
    Audio,
    Video,
    Ref,
}

impl MediaKind {
    pub const ALL: [MediaKind; 5] = [
        MediaKind::Text,
        MediaKind::Image,
        MediaKind::Audio,
        MediaKind::Video,
        MediaKind::Ref,
    ];

    /// SMIL element name.
    pub fn element(self) -> &'static str {
        match self {
            MediaKind::Text => "text",
            MediaKind::Image => "img",
            MediaKind::Audio => "audio",
            MediaKind::Video => "video",
            MediaKind::Ref => "ref",
        }
    }

    pub fn from_element(name: &str) -> Option<Self> {
        Some(match name {
            "text" => MediaKind::Text,
            "img" => MediaKind::Image,
            "audio" => MediaKind::Audio,
            "video" => MediaKind::Video,
            "ref" => MediaKind::Ref,
            _ => return None,
        })
    }

    /// Whether the item is painted into a region. Audio and ref items are not,
    /// so their region attribute is carried but never checked.
    pub fn is_visual(self) -> bool {
        matches!(self, MediaKind::Text | MediaKind::Image | MediaKind::Video)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaItem {
    pub kind: MediaKind,
    pub src: String,
    pub region_id: Option<String>,
    pub begin_ms: u64,
    pub dur_ms: Option<u64>,
    pub alt: Option<String>,
}

impl MediaItem {
    pub fn new(kind: MediaKind, src: impl Into<String>) -> Self {
        MediaItem {
            kind,
            src: src.into(),
            region_id: None,
            begin_ms: 0,
            dur_ms: None,
            alt: None,
        }
    }

    pub fn in_region(mut self, region: impl Into<String>) -> Self {
        self.region_id = Some(region.into());
        self
    }

    /// Region this item paints into, if it is visual and names one.
    pub fn visual_region(&self) -> Option<&str> {
        if self.kind.is_visual() {
            self.region_id.as_deref()
        } else {
            None
        }
    }
}

/// One slide: media presented in parallel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Par {
    pub dur_ms: Option<u64>,
    pub media: Vec<MediaItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmilTree {
    pub layout: Layout,
    pub pars: Vec<Par>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    DuplicateKindInPar,
    UnresolvedRegion,
    DuplicateRegionId,
    EmptyRegionId,
    ZeroExtent,
    PercentOutOfRange,
    NonPositiveRoot,
    EmptySrc,
    NonPositiveDuration,
    /// A media `src` that matches no part of the enclosing MIME envelope.
    UnboundSrc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Path to the offending node, e.g. `pars[0].media[1]`.
    pub path: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.code, self.path, self.detail)
    }
}

/// Checks every structural and conformance rule on `tree`. Problems are
/// accumulated in document order rather than stopping at the first one.
pub fn validate(tree: &SmilTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code, path: String, detail: String| out.push(Violation { code, path, detail });

    let layout = &tree.layout;
    for (axis, value) in [("root_width", layout.root_width), ("root_height", layout.root_height)] {
        if value == Some(0) {
            push(ViolationCode::NonPositiveRoot, format!("layout.{axis}"), "root dimension is zero".into());
        }
    }

    let mut seen = HashSet::new();
    for (i, region) in layout.regions.iter().enumerate() {
        let path = format!("layout.regions[{i}]");
        if region.id.is_empty() {
            push(ViolationCode::EmptyRegionId, path.clone(), "region id is empty".into());
        } else if !seen.insert(region.id.as_str()) {
            push(ViolationCode::DuplicateRegionId, path.clone(), format!("region id {:?} repeats", region.id));
        }
        for (name, dim) in [
            ("left", region.left),
            ("top", region.top),
            ("width", region.width),
            ("height", region.height),
        ] {
            if dim.unit == Unit::Percent && dim.value > 100 {
                push(ViolationCode::PercentOutOfRange, format!("{path}.{name}"), format!("{dim} exceeds 100%"));
            }
        }
        for (name, dim) in [("width", region.width), ("height", region.height)] {
            if dim.value == 0 {
                push(ViolationCode::ZeroExtent, format!("{path}.{name}"), "extent must be positive".into());
            }
        }
    }

    for (p, par) in tree.pars.iter().enumerate() {
        let par_path = format!("pars[{p}]");
        if par.dur_ms == Some(0) {
            push(ViolationCode::NonPositiveDuration, format!("{par_path}.dur"), "par duration is zero".into());
        }
        for kind in MediaKind::ALL {
            let count = par.media.iter().filter(|m| m.kind == kind).count();
            if count > 1 {
                push(
                    ViolationCode::DuplicateKindInPar,
                    par_path.clone(),
                    format!("{count} {} items in one par", kind.element()),
                );
            }
        }
        for (m, item) in par.media.iter().enumerate() {
            let path = format!("{par_path}.media[{m}]");
            if item.src.is_empty() {
                push(ViolationCode::EmptySrc, path.clone(), "src is empty".into());
            }
            if item.dur_ms == Some(0) {
                push(ViolationCode::NonPositiveDuration, format!("{path}.dur"), "media duration is zero".into());
            }
            if let Some(region) = item.visual_region() {
                if layout.region(region).is_none() {
                    push(ViolationCode::UnresolvedRegion, path, format!("region {region:?} is not in the layout"));
                }
            }
        }
    }
    out
}

/// Empty message on the default two-region screen.
pub fn default_tree() -> SmilTree {
    SmilTree {
        layout: Layout::default_screen(),
        pars: Vec::new(),
    }
}
