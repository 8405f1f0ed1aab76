//! Authoring: slide manifest to SMIL tree, `.mms` export and per-slide
//! preview through the timing engine.
//!
//! A manifest looks like
//!
//! ```json
//! {
//!   "from": "alice", "to": "bob", "subject": "hi", "device": "qcif",
//!   "slides": [ { "text": "hello", "image": "cat.jpg", "dur_ms": 3000 } ]
//! }
//! ```
//!
//! File references are resolved by a [`MediaSource`]; [`FsSource`] reads
//! them relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{fit, DeviceProfile};
use crate::mime::{encapsulate_with, EncapsulateError, EncapsulateOptions, MimePart, MmsEnvelope, SMIL_CONTENT_TYPE};
use crate::scheduler::{build_plan, PlanError, RenderPlan, DEFAULT_PAR_MS};
use crate::smil::{default_tree, MediaItem, MediaKind, Par, SmilTree};
use crate::syntax::{serialize, SerializeError};

/// Content-ID of the SMIL part in exported messages.
pub const SMIL_PART_ID: &str = "presentation.smil";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dur_ms: Option<u64>,
}

impl SlideSpec {
    pub fn text(text: impl Into<String>) -> Self {
        SlideSpec { text: Some(text.into()), ..Default::default() }
    }

    fn is_empty(&self) -> bool {
        self.text.is_none() && self.image.is_none() && self.audio.is_none() && self.video.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    /// Name of a built-in device profile used for previews.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    pub slides: Vec<SlideSpec>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, ComposeError> {
        serde_json::from_str(text).map_err(|e| ComposeError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ComposeError> {
        let text = std::fs::read_to_string(path).map_err(|e| ComposeError::Manifest(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest has no slides")]
    NoSlides,
    #[error("manifest {0} address is empty")]
    MissingAddress(&'static str),
    #[error("slide {0} has no text, image, audio or video")]
    EmptySlide(usize),
    #[error("slide {slide} has a zero duration")]
    ZeroDuration { slide: usize },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("slide index {index} out of range for {count} slide(s)")]
    SlideIndex { index: usize, count: usize },
    #[error("unknown device profile {0:?}")]
    UnknownDevice(String),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error(transparent)]
    Encapsulate(#[from] EncapsulateError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Where file references in a manifest come from.
pub trait MediaSource {
    fn exists(&self, path: &Path) -> bool;
    fn read(&self, path: &Path) -> std::io::Result<Vec<u8>>;
}

/// Reads files relative to a base directory.
#[derive(Debug, Clone, Default)]
pub struct FsSource {
    pub base: PathBuf,
}

impl FsSource {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        FsSource { base: base.into() }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }
}

impl MediaSource for FsSource {
    fn exists(&self, path: &Path) -> bool {
        self.resolve(path).is_file()
    }

    fn read(&self, path: &Path) -> std::io::Result<Vec<u8>> {
        std::fs::read(self.resolve(path))
    }
}

/// In-memory files, keyed by the path string used in the manifest.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    files: HashMap<PathBuf, Vec<u8>>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, path: impl Into<PathBuf>, body: impl Into<Vec<u8>>) -> Self {
        self.files.insert(path.into(), body.into());
        self
    }
}

impl MediaSource for MemorySource {
    fn exists(&self, path: &Path) -> bool {
        self.files.contains_key(path)
    }

    fn read(&self, path: &Path) -> std::io::Result<Vec<u8>> {
        self.files
            .get(path)
            .cloned()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, path.display().to_string()))
    }
}

/// Guesses a content type from a file extension.
pub fn content_type_for(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "png" => "image/png",
        "gif" => "image/gif",
        "wbmp" => "image/vnd.wap.wbmp",
        "bmp" => "image/bmp",
        "amr" => "audio/amr",
        "mp3" => "audio/mpeg",
        "wav" => "audio/wav",
        "mid" | "midi" => "audio/midi",
        "3gp" => "video/3gpp",
        "mp4" => "video/mp4",
        "txt" => "text/plain",
        "smil" => SMIL_CONTENT_TYPE,
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PartSource {
    Inline(String),
    File(PathBuf),
}

#[derive(Debug)]
struct PartPlan {
    content_id: String,
    source: PartSource,
}

/// Hands out Content-IDs: file basenames, with `-2`, `-3`, ... inserted
/// before the extension on collision. The same file path always maps to the
/// same id.
#[derive(Default)]
struct IdAllocator {
    used: HashSet<String>,
    by_path: HashMap<PathBuf, String>,
}

impl IdAllocator {
    fn reserve(&mut self, id: &str) {
        self.used.insert(id.to_string());
    }

    fn fresh(&mut self, name: &str) -> String {
        if self.used.insert(name.to_string()) {
            return name.to_string();
        }
        let (stem, ext) = match name.rfind('.') {
            Some(i) if i > 0 => (&name[..i], &name[i..]),
            _ => (name, ""),
        };
        (2..)
            .map(|n| format!("{stem}-{n}{ext}"))
            .find(|candidate| self.used.insert(candidate.clone()))
            .expect("unbounded suffix space")
    }

    /// Returns the id and whether it was newly allocated.
    fn for_path(&mut self, path: &Path) -> (String, bool) {
        if let Some(id) = self.by_path.get(path) {
            return (id.clone(), false);
        }
        let base = path.file_name().and_then(|n| n.to_str()).filter(|n| !n.is_empty()).unwrap_or("part");
        let id = self.fresh(base);
        self.by_path.insert(path.to_path_buf(), id.clone());
        (id, true)
    }
}

#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub date: DateTime<Utc>,
    pub message_id: String,
    pub boundary_seed: u64,
}

static MESSAGE_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ExportOptions {
    /// Current time and a process-unique Message-ID.
    pub fn now() -> Self {
        let date = Utc::now();
        let n = MESSAGE_COUNTER.fetch_add(1, Ordering::Relaxed);
        let nanos = date.timestamp_nanos_opt().unwrap_or_default();
        ExportOptions {
            date,
            message_id: format!("{nanos:x}.{n}@mms.local"),
            boundary_seed: EncapsulateOptions::default().seed,
        }
    }
}

pub struct Composer<S> {
    source: S,
}

impl Composer<FsSource> {
    /// Composer reading media relative to `manifest_path`'s directory.
    pub fn for_manifest_file(manifest_path: &Path) -> Self {
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Composer::new(FsSource::new(base))
    }
}

impl<S: MediaSource> Composer<S> {
    pub fn new(source: S) -> Self {
        Composer { source }
    }

    fn plan(&self, manifest: &Manifest) -> Result<(SmilTree, Vec<PartPlan>), ComposeError> {
        if manifest.from.trim().is_empty() {
            return Err(ComposeError::MissingAddress("from"));
        }
        if manifest.to.trim().is_empty() {
            return Err(ComposeError::MissingAddress("to"));
        }
        if manifest.slides.is_empty() {
            return Err(ComposeError::NoSlides);
        }
        let mut ids = IdAllocator::default();
        ids.reserve(SMIL_PART_ID);
        let mut parts = Vec::new();
        let mut tree = default_tree();

        for (index, slide) in manifest.slides.iter().enumerate() {
            if slide.is_empty() {
                return Err(ComposeError::EmptySlide(index));
            }
            if slide.dur_ms == Some(0) {
                return Err(ComposeError::ZeroDuration { slide: index });
            }
            let mut par = Par { dur_ms: Some(slide.dur_ms.unwrap_or(DEFAULT_PAR_MS)), media: Vec::new() };
            let files = [(MediaKind::Image, &slide.image), (MediaKind::Text, &None), (MediaKind::Audio, &slide.audio), (MediaKind::Video, &slide.video)];
            for (kind, file) in files {
                let src = if kind == MediaKind::Text {
                    let Some(text) = &slide.text else { continue };
                    let id = ids.fresh(&format!("text{}.txt", index + 1));
                    parts.push(PartPlan { content_id: id.clone(), source: PartSource::Inline(text.clone()) });
                    id
                } else {
                    let Some(path) = file else { continue };
                    if !self.source.exists(path) {
                        return Err(ComposeError::MissingFile(path.clone()));
                    }
                    let (id, new) = ids.for_path(path);
                    if new {
                        parts.push(PartPlan { content_id: id.clone(), source: PartSource::File(path.clone()) });
                    }
                    id
                };
                let item = MediaItem::new(kind, src);
                par.media.push(match kind {
                    MediaKind::Text => item.in_region("Text"),
                    MediaKind::Image | MediaKind::Video => item.in_region("Image"),
                    _ => item,
                });
            }
            tree.pars.push(par);
        }
        Ok((tree, parts))
    }

    /// One par per slide on the default two-region layout. Images and video
    /// go to "Image", text to "Text"; every item begins at 0.
    pub fn compose(&self, manifest: &Manifest) -> Result<SmilTree, ComposeError> {
        self.plan(manifest).map(|(tree, _)| tree)
    }

    /// Composed tree plus media, wrapped in an envelope with From/To/Subject/
    /// Date/Message-ID transport headers.
    pub fn envelope(&self, manifest: &Manifest, options: &ExportOptions) -> Result<MmsEnvelope, ComposeError> {
        let (tree, plans) = self.plan(manifest)?;
        let smil = serialize(&tree)?;
        let mut parts = vec![MimePart::new(SMIL_CONTENT_TYPE, SMIL_PART_ID, smil.into_bytes())];
        for plan in plans {
            let part = match plan.source {
                PartSource::Inline(text) => MimePart::new("text/plain", plan.content_id, text.into_bytes()),
                PartSource::File(path) => {
                    let body = self.source.read(&path).map_err(|_| ComposeError::MissingFile(path.clone()))?;
                    MimePart::new(content_type_for(&path), plan.content_id, body)
                }
            };
            parts.push(part);
        }
        let mut headers = vec![("From".to_string(), manifest.from.clone()), ("To".to_string(), manifest.to.clone())];
        if let Some(subject) = &manifest.subject {
            headers.push(("Subject".into(), subject.clone()));
        }
        headers.push(("Date".into(), options.date.to_rfc3339_opts(SecondsFormat::Secs, true)));
        headers.push(("Message-ID".into(), options.message_id.clone()));
        Ok(MmsEnvelope { transport_headers: headers, start_id: SMIL_PART_ID.into(), parts, boundary: String::new() })
    }

    pub fn export(&self, manifest: &Manifest) -> Result<Vec<u8>, ComposeError> {
        self.export_with(manifest, &ExportOptions::now())
    }

    pub fn export_with(&self, manifest: &Manifest, options: &ExportOptions) -> Result<Vec<u8>, ComposeError> {
        let env = self.envelope(manifest, options)?;
        let opts = EncapsulateOptions { seed: options.boundary_seed, regenerate_on_collision: true };
        Ok(encapsulate_with(&env, opts)?)
    }

    /// Plan of slide `index` alone, fitted to the manifest's device.
    pub fn preview(&self, manifest: &Manifest, index: usize) -> Result<RenderPlan, ComposeError> {
        let tree = self.compose(manifest)?;
        let count = tree.pars.len();
        let par = tree.pars.get(index).cloned().ok_or(ComposeError::SlideIndex { index, count })?;
        let device = device_for(manifest)?;
        let single = SmilTree { layout: tree.layout, pars: vec![par] };
        Ok(build_plan(&fit(&single, &device))?)
    }
}

/// The manifest's named device, or the default profile.
pub fn device_for(manifest: &Manifest) -> Result<DeviceProfile, ComposeError> {
    match &manifest.device {
        None => Ok(DeviceProfile::default_profile()),
        Some(name) => DeviceProfile::builtin(name).map_err(|_| ComposeError::UnknownDevice(name.clone())),
    }
}

/// Part counts by content type; handy for CLI summaries.
pub fn part_summary(env: &MmsEnvelope) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in &env.parts {
        *out.entry(p.content_type.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mime::decapsulate;
    use crate::scheduler::Action;
    use crate::smil::validate;
    use crate::syntax::parse_str;

    fn manifest(slides: Vec<SlideSpec>) -> Manifest {
        Manifest { from: "alice".into(), to: "bob".into(), subject: None, device: None, slides }
    }

    fn fixed() -> ExportOptions {
        ExportOptions {
            date: DateTime::parse_from_rfc3339("2024-01-02T03:04:05Z").unwrap().with_timezone(&Utc),
            message_id: "m1@test".into(),
            boundary_seed: 1,
        }
    }

    fn files() -> MemorySource {
        MemorySource::new()
            .with("pics/cat.jpg", vec![0xff, 0xd8, 0xff, 0xe0])
            .with("other/cat.jpg", vec![1, 2, 3])
            .with("song.amr", b"#!AMR\n".to_vec())
    }

    #[test]
    fn single_text_slide() {
        let m = manifest(vec![SlideSpec { dur_ms: Some(3000), ..SlideSpec::text("hi") }]);
        let tree = Composer::new(files()).compose(&m).unwrap();
        assert_eq!(tree.pars.len(), 1);
        let par = &tree.pars[0];
        assert_eq!(par.dur_ms, Some(3000));
        assert_eq!(par.media.len(), 1);
        assert_eq!(par.media[0].kind, MediaKind::Text);
        assert_eq!(par.media[0].region_id.as_deref(), Some("Text"));
        assert!(validate(&tree).is_empty());
    }

    #[test]
    fn empty_slide_rejected() {
        let m = manifest(vec![SlideSpec::text("a"), SlideSpec::default()]);
        assert!(matches!(Composer::new(files()).compose(&m), Err(ComposeError::EmptySlide(1))));
    }

    #[test]
    fn slide_order_preserved() {
        let m = manifest(vec![SlideSpec::text("one"), SlideSpec::text("two"), SlideSpec::text("three")]);
        let c = Composer::new(files());
        let tree = c.compose(&m).unwrap();
        let srcs: Vec<_> = tree.pars.iter().map(|p| p.media[0].src.as_str()).collect();
        assert_eq!(srcs, ["text1.txt", "text2.txt", "text3.txt"]);
        assert!(tree.pars.iter().all(|p| p.dur_ms == Some(DEFAULT_PAR_MS)));
    }

    #[test]
    fn missing_file() {
        let m = manifest(vec![SlideSpec { image: Some("nope.png".into()), ..Default::default() }]);
        assert!(matches!(Composer::new(files()).compose(&m), Err(ComposeError::MissingFile(p)) if p == Path::new("nope.png")));
    }

    #[test]
    fn text_only_export_has_two_parts() {
        let m = manifest(vec![SlideSpec::text("hello")]);
        let bytes = Composer::new(files()).export_with(&m, &fixed()).unwrap();
        let env = decapsulate(&bytes).unwrap();
        assert_eq!(env.parts.len(), 2);
        assert_eq!(env.header("Message-ID"), Some("m1@test"));
        assert_eq!(env.header("Date"), Some("2024-01-02T03:04:05Z"));
        assert_eq!(env.part("text1.txt").unwrap().body, b"hello");
    }

    #[test]
    fn exported_smil_reparses_to_composed_tree() {
        let m = manifest(vec![
            SlideSpec { image: Some("pics/cat.jpg".into()), audio: Some("song.amr".into()), ..SlideSpec::text("a") },
            SlideSpec { image: Some("other/cat.jpg".into()), dur_ms: Some(1200), ..Default::default() },
        ]);
        let c = Composer::new(files());
        let env = decapsulate(&c.export_with(&m, &fixed()).unwrap()).unwrap();
        let reparsed = parse_str(env.smil_text().unwrap()).unwrap();
        assert_eq!(reparsed, c.compose(&m).unwrap());
        // same basename from different directories gets a suffix
        let ids: Vec<_> = env.parts.iter().map(|p| p.content_id.as_str()).collect();
        assert_eq!(ids, [SMIL_PART_ID, "cat.jpg", "text1.txt", "song.amr", "cat-2.jpg"]);
        assert_eq!(env.part("cat-2.jpg").unwrap().content_type, "image/jpeg");
        assert!(crate::mime::resolve_media(&env, &reparsed).unbound.is_empty());
    }

    #[test]
    fn shared_file_is_one_part() {
        let slide = SlideSpec { image: Some("pics/cat.jpg".into()), ..Default::default() };
        let m = manifest(vec![slide.clone(), slide]);
        let c = Composer::new(files());
        let env = c.envelope(&m, &fixed()).unwrap();
        assert_eq!(env.parts.iter().filter(|p| p.content_type == "image/jpeg").count(), 1);
        let tree = c.compose(&m).unwrap();
        assert!(tree.pars.iter().all(|p| p.media[0].src == "cat.jpg"));
    }

    #[test]
    fn preview_single_slide() {
        let m = manifest(vec![SlideSpec { dur_ms: Some(2500), ..SlideSpec::text("x") }]);
        let plan = Composer::new(files()).preview(&m, 0).unwrap();
        assert_eq!(plan.events[0].action, Action::ParBegin);
        assert_eq!(plan.events[0].at_ms, 0);
        assert_eq!(plan.events.last().unwrap().at_ms, 2500);
        assert_eq!(plan.total_ms, 2500);
    }

    #[test]
    fn preview_index_out_of_range() {
        let m = manifest(vec![SlideSpec::text("a"), SlideSpec::text("b"), SlideSpec::text("c")]);
        assert!(matches!(
            Composer::new(files()).preview(&m, 5),
            Err(ComposeError::SlideIndex { index: 5, count: 3 })
        ));
    }

    #[test]
    fn manifest_validation() {
        let c = Composer::new(files());
        assert!(matches!(c.compose(&manifest(vec![])), Err(ComposeError::NoSlides)));
        let mut m = manifest(vec![SlideSpec::text("a")]);
        m.to = " ".into();
        assert!(matches!(c.compose(&m), Err(ComposeError::MissingAddress("to"))));
        m.to = "bob".into();
        m.device = Some("watch".into());
        assert!(matches!(c.preview(&m, 0), Err(ComposeError::UnknownDevice(_))));
    }

    #[test]
    fn manifest_json() {
        let m = Manifest::from_json(r#"{"from":"a","to":"b","slides":[{"text":"hi","image":"x.png","dur_ms":100}]}"#).unwrap();
        assert_eq!(m.slides[0].image.as_deref(), Some(Path::new("x.png")));
        assert!(Manifest::from_json(r#"{"from":"a","to":"b","slides":[{"txt":"hi"}]}"#).is_err());
    }
}
