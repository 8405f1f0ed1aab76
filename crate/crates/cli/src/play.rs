//! Text-mode player: feeds inputs through the scheduler's control algebra
//! and prints the position and visible media after each one.

use std::io::Write;

use mms_core::scheduler::{control, tick, Input, PlayerState, RenderPlan};
use mms_core::smil::SmilTree;

fn describe(tree: &SmilTree, plan: &RenderPlan, state: &PlayerState) -> String {
    let media = match plan.active_set(state.position_ms) {
        Ok(active) => active
            .iter()
            .map(|a| {
                let item = &tree.pars[a.par_index].media[a.media_index];
                match &a.region_id {
                    Some(r) => format!("{}:{}@{} z{}", item.kind.element(), item.src, r, a.z),
                    None => format!("{}:{}", item.kind.element(), item.src),
                }
            })
            .collect::<Vec<_>>()
            .join(", "),
        Err(_) => "end".into(),
    };
    format!(
        "{:>7} ms  {:<8} par {}/{}  [{}]",
        state.position_ms,
        format!("{:?}", state.mode),
        (state.current_par + 1).min(plan.par_bounds().len()),
        plan.par_bounds().len(),
        media
    )
}

/// Inputs: `play`, `pause`, `stop`, `rewind`, `next`, `+MS` (time passes),
/// `quit`. Blank lines are ignored.
pub fn run(tree: &SmilTree, plan: &RenderPlan, inputs: impl Iterator<Item = String>, out: &mut impl Write) -> Result<(), String> {
    let mut state = PlayerState::default();
    let io = |e: std::io::Error| e.to_string();
    writeln!(out, "{} par(s), {} ms", plan.par_bounds().len(), plan.total_ms).map_err(io)?;
    for raw in inputs {
        let word = raw.trim();
        if word.is_empty() {
            continue;
        }
        if word == "quit" || word == "q" {
            break;
        }
        state = match word.strip_prefix('+') {
            Some(ms) => {
                let ms: u64 = ms.parse().map_err(|_| format!("bad time step {word:?}"))?;
                tick(state, plan, ms)
            }
            None => control(state, plan, word.parse::<Input>()?, 0),
        };
        writeln!(out, "{word:<8} {}", describe(tree, plan, &state)).map_err(io)?;
    }
    Ok(())
}
