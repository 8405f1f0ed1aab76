//! Timing engine. A [`SmilTree`] becomes a sorted list of start/stop events
//! (one pair per par and per media item, nothing per tick), and a small
//! control state machine walks a virtual position over it.
//!
//! The engine owns no timers: callers report elapsed wall time and the
//! engine moves the position accordingly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smil::{MediaKind, Par, SmilTree};

/// Par duration used when neither the par nor all of its media say otherwise.
pub const DEFAULT_PAR_MS: u64 = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Stop,
    ParEnd,
    ParBegin,
    Start,
    MessageEnd,
}

impl Action {
    /// Tie-break at equal timestamps: everything that ends goes before
    /// anything that begins.
    fn rank(self) -> u8 {
        match self {
            Action::Stop => 0,
            Action::ParEnd => 1,
            Action::ParBegin => 2,
            Action::Start => 3,
            Action::MessageEnd => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub at_ms: u64,
    pub action: Action,
    pub par_index: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub media_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kind: Option<MediaKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub region_id: Option<String>,
    pub z: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderPlan {
    pub events: Vec<TimelineEvent>,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("par {0} has no duration and defaulting is disabled")]
    UnresolvedDuration(usize),
    #[error("message duration overflows at par {0}")]
    Overflow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("time {t_ms} ms is outside [0, {total_ms})")]
pub struct RangeError {
    pub t_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanOptions {
    /// Fallback par duration; `None` makes a missing duration an error.
    pub default_par_ms: Option<u64>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { default_par_ms: Some(DEFAULT_PAR_MS) }
    }
}

/// Effective duration of a par: its own `dur`, else the latest media end when
/// every media item has an explicit duration, else `fallback`.
pub fn par_duration(par: &Par, fallback: Option<u64>) -> Option<u64> {
    if let Some(d) = par.dur_ms {
        return Some(d);
    }
    if !par.media.is_empty() && par.media.iter().all(|m| m.dur_ms.is_some()) {
        return par.media.iter().map(|m| m.begin_ms.saturating_add(m.dur_ms.unwrap_or(0))).max();
    }
    fallback
}

/// Paint order of each media item in `par`: ranked by the z-index of its
/// region, then by document order. Higher values draw on top.
pub fn z_order(tree: &SmilTree, par: &Par) -> Vec<i32> {
    let mut keyed: Vec<(i32, usize)> = par
        .media
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let z = m.visual_region().and_then(|r| tree.layout.region(r)).map_or(0, |r| r.z_index);
            (z, i)
        })
        .collect();
    keyed.sort();
    let mut out = vec![0; par.media.len()];
    for (rank, &(_, i)) in keyed.iter().enumerate() {
        out[i] = i32::try_from(rank).unwrap_or(i32::MAX);
    }
    out
}

pub fn build_plan(tree: &SmilTree) -> Result<RenderPlan, PlanError> {
    build_plan_with(tree, PlanOptions::default())
}

pub fn build_plan_with(tree: &SmilTree, options: PlanOptions) -> Result<RenderPlan, PlanError> {
    let mut events = Vec::new();
    let mut offset: u64 = 0;
    for (p, par) in tree.pars.iter().enumerate() {
        let dur = par_duration(par, options.default_par_ms).ok_or(PlanError::UnresolvedDuration(p))?;
        let end = offset.checked_add(dur).ok_or(PlanError::Overflow(p))?;
        let par_event = |at_ms, action| TimelineEvent {
            at_ms,
            action,
            par_index: p,
            media_index: None,
            kind: None,
            region_id: None,
            z: 0,
        };
        events.push(par_event(offset, Action::ParBegin));
        let zs = z_order(tree, par);
        for (m, item) in par.media.iter().enumerate() {
            let begin = item.begin_ms.min(dur);
            let own = item.dur_ms.unwrap_or_else(|| dur.saturating_sub(item.begin_ms));
            let stop = item.begin_ms.saturating_add(own).min(dur);
            if begin >= stop {
                continue;
            }
            let media_event = |at_ms, action| TimelineEvent {
                at_ms,
                action,
                par_index: p,
                media_index: Some(m),
                kind: Some(item.kind),
                region_id: item.visual_region().map(str::to_string),
                z: zs[m],
            };
            events.push(media_event(offset + begin, Action::Start));
            events.push(media_event(offset + stop, Action::Stop));
        }
        events.push(par_event(end, Action::ParEnd));
        offset = end;
    }
    events.push(TimelineEvent {
        at_ms: offset,
        action: Action::MessageEnd,
        par_index: tree.pars.len().saturating_sub(1),
        media_index: None,
        kind: None,
        region_id: None,
        z: 0,
    });
    events.sort_by_key(|e| (e.at_ms, e.action.rank(), e.par_index, e.media_index));
    Ok(RenderPlan { events, total_ms: offset })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActiveMedia {
    pub par_index: usize,
    pub media_index: usize,
    pub region_id: Option<String>,
    pub z: i32,
}

impl RenderPlan {
    /// `(begin, end)` of every par, in order.
    pub fn par_bounds(&self) -> Vec<(u64, u64)> {
        let mut bounds: Vec<(u64, u64)> = Vec::new();
        for e in &self.events {
            match e.action {
                Action::ParBegin => bounds.push((e.at_ms, e.at_ms)),
                Action::ParEnd => {
                    if let Some(b) = bounds.get_mut(e.par_index) {
                        b.1 = e.at_ms;
                    }
                }
                _ => {}
            }
        }
        bounds
    }

    /// Index of the par playing at `position_ms`. The message end maps to
    /// the last par.
    pub fn par_at(&self, position_ms: u64) -> usize {
        let bounds = self.par_bounds();
        bounds
            .iter()
            .position(|&(b, e)| b <= position_ms && position_ms < e)
            .unwrap_or(bounds.len().saturating_sub(1))
    }

    /// Media whose `[start, stop)` interval contains `t_ms`, in paint order.
    pub fn active_set(&self, t_ms: u64) -> Result<Vec<ActiveMedia>, RangeError> {
        if t_ms >= self.total_ms {
            return Err(RangeError { t_ms, total_ms: self.total_ms });
        }
        let mut live: Vec<ActiveMedia> = Vec::new();
        for e in self.events.iter().take_while(|e| e.at_ms <= t_ms) {
            let Some(media_index) = e.media_index else { continue };
            match e.action {
                Action::Start => live.push(ActiveMedia {
                    par_index: e.par_index,
                    media_index,
                    region_id: e.region_id.clone(),
                    z: e.z,
                }),
                Action::Stop => live.retain(|a| !(a.par_index == e.par_index && a.media_index == media_index)),
                _ => {}
            }
        }
        live.sort_by_key(|a| (a.z, a.par_index, a.media_index));
        Ok(live)
    }

    pub fn to_json_trace(&self) -> String {
        serde_json::to_string_pretty(&self.events).expect("events always serialize")
    }

    pub fn from_json_trace(text: &str) -> Result<Self, serde_json::Error> {
        let events: Vec<TimelineEvent> = serde_json::from_str(text)?;
        let total_ms = events.last().map_or(0, |e| e.at_ms);
        Ok(RenderPlan { events, total_ms })
    }
}

pub fn active_set(plan: &RenderPlan, t_ms: u64) -> Result<Vec<ActiveMedia>, RangeError> {
    plan.active_set(t_ms)
}

// ---------------------------------------------------------------------------
// Player control

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Stopped,
    Playing,
    Paused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Input {
    Play,
    Pause,
    Stop,
    Rewind,
    Next,
}

impl std::str::FromStr for Input {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "play" => Input::Play,
            "pause" => Input::Pause,
            "stop" => Input::Stop,
            "rewind" => Input::Rewind,
            "next" => Input::Next,
            other => return Err(format!("unknown player input {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerState {
    pub mode: Mode,
    pub position_ms: u64,
    pub current_par: usize,
}

impl Default for PlayerState {
    fn default() -> Self {
        PlayerState { mode: Mode::Stopped, position_ms: 0, current_par: 0 }
    }
}

impl PlayerState {
    fn at(mode: Mode, position_ms: u64, plan: &RenderPlan) -> Self {
        PlayerState { mode, position_ms, current_par: plan.par_at(position_ms) }
    }
}

/// Advances a playing state by `elapsed_ms` of wall time. Reaching the end
/// of the message stops playback at `total_ms`.
pub fn tick(state: PlayerState, plan: &RenderPlan, elapsed_ms: u64) -> PlayerState {
    if state.mode != Mode::Playing {
        return state;
    }
    let pos = state.position_ms.saturating_add(elapsed_ms);
    if pos >= plan.total_ms {
        PlayerState::at(Mode::Stopped, plan.total_ms, plan)
    } else {
        PlayerState::at(Mode::Playing, pos, plan)
    }
}

/// Applies a user input after first accounting for `wall_elapsed_ms` since
/// the previous call. Every input is legal in every mode.
pub fn control(state: PlayerState, plan: &RenderPlan, input: Input, wall_elapsed_ms: u64) -> PlayerState {
    let state = tick(state, plan, wall_elapsed_ms);
    let bounds = plan.par_bounds();
    match input {
        Input::Play => match state.mode {
            Mode::Stopped => PlayerState::at(Mode::Playing, 0, plan),
            Mode::Paused => PlayerState { mode: Mode::Playing, ..state },
            Mode::Playing => state,
        },
        Input::Pause => match state.mode {
            Mode::Playing => PlayerState { mode: Mode::Paused, ..state },
            _ => state,
        },
        Input::Stop => PlayerState::at(Mode::Stopped, 0, plan),
        Input::Rewind => {
            let Some(&(begin, _)) = bounds.get(state.current_par) else {
                return state;
            };
            let target = if state.position_ms == begin && state.current_par > 0 {
                bounds[state.current_par - 1].0
            } else {
                begin
            };
            PlayerState::at(state.mode, target, plan)
        }
        Input::Next => match bounds.get(state.current_par + 1) {
            Some(&(begin, _)) if state.position_ms < plan.total_ms => PlayerState::at(state.mode, begin, plan),
            _ => PlayerState::at(Mode::Stopped, plan.total_ms, plan),
        },
    }
}
