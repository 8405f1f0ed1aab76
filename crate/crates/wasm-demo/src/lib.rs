//! wasm-bindgen surface for `www/index.html`. The plain functions return
//! `Result<_, String>` so they can be tested natively; the exported
//! wrappers turn errors into JS exceptions.

use chrono::DateTime;
use mms_core::composer::{Composer, ExportOptions, Manifest, MemorySource};
use mms_core::layout::{fit, DeviceProfile};
use mms_core::scheduler::{build_plan, RenderPlan};
use mms_core::smil::SmilTree;
use mms_core::syntax::{parse_str, serialize};
use wasm_bindgen::prelude::*;

fn fitted(smil: &str, width: u32, height: u32) -> Result<SmilTree, String> {
    let tree = parse_str(smil).map_err(|e| e.to_string())?;
    let device = DeviceProfile::new("browser", width, height).map_err(|e| e.to_string())?;
    Ok(fit(&tree, &device))
}

fn plan(smil: &str, width: u32, height: u32) -> Result<(SmilTree, RenderPlan), String> {
    let tree = fitted(smil, width, height)?;
    let plan = build_plan(&tree).map_err(|e| e.to_string())?;
    Ok((tree, plan))
}

/// The SMIL document with its layout fitted to a `width` x `height` screen.
pub fn adapt(smil: &str, width: u32, height: u32) -> Result<String, String> {
    serialize(&fitted(smil, width, height)?).map_err(|e| e.to_string())
}

/// What is on screen at `t_ms`: total length, par bounds and one entry per
/// visible or audible item with its pixel rectangle.
pub fn frame_at(smil: &str, width: u32, height: u32, t_ms: u64) -> Result<String, String> {
    let (tree, plan) = plan(smil, width, height)?;
    let t = t_ms.min(plan.total_ms.saturating_sub(1));
    let active = plan.active_set(t).map_err(|e| e.to_string())?;
    let items: Vec<serde_json::Value> = active
        .iter()
        .map(|a| {
            let item = &tree.pars[a.par_index].media[a.media_index];
            let rect = a.region_id.as_deref().and_then(|r| tree.layout.region(r)).map(|r| {
                [r.left.value, r.top.value, r.width.value, r.height.value]
            });
            serde_json::json!({
                "kind": item.kind.element(),
                "src": item.src,
                "region": a.region_id,
                "z": a.z,
                "rect": rect,
            })
        })
        .collect();
    Ok(serde_json::json!({
        "total_ms": plan.total_ms,
        "t_ms": t,
        "par": plan.par_at(t),
        "pars": plan.par_bounds(),
        "items": items,
    })
    .to_string())
}

/// Composes a text-only message from a manifest and returns the `.mms`
/// bytes. Media files are not available in the browser, so slides may only
/// carry text.
pub fn compose(manifest_json: &str, now_ms: i64) -> Result<Vec<u8>, String> {
    let manifest = Manifest::from_json(manifest_json).map_err(|e| e.to_string())?;
    let date = DateTime::from_timestamp_millis(now_ms).ok_or("date out of range")?;
    let options = ExportOptions { date, message_id: format!("{now_ms:x}@mms.demo"), boundary_seed: now_ms as u64 };
    Composer::new(MemorySource::new()).export_with(&manifest, &options).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = adaptSmil)]
pub fn adapt_smil(smil: &str, width: u32, height: u32) -> Result<String, JsError> {
    adapt(smil, width, height).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = frameAt)]
pub fn frame_at_js(smil: &str, width: u32, height: u32, t_ms: f64) -> Result<String, JsError> {
    frame_at(smil, width, height, t_ms.max(0.0) as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = composeMms)]
pub fn compose_mms(manifest_json: &str, now_ms: f64) -> Result<Vec<u8>, JsError> {
    compose(manifest_json, now_ms as i64).map_err(|e| JsError::new(&e))
}
