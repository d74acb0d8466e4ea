use super::corpus::{Corpus, Utterance};
use super::data::PreparedUtterance;
use super::eval::{evaluate, EvalOptions, EvalReport};
use super::train::{train_step, LossBreakdown, TrainState};
use crate::error::Result;

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub losses: Vec<LossBreakdown>,
    pub reports: Vec<EvalReport>,
}

/// Trains until `state.step` reaches `until` (capped at `config.steps`),
/// evaluating every `config.eval_every` steps and at the final step when an
/// eval set is given.
/// `on_step` sees every loss breakdown and every report as they appear.
pub fn train_run(
    state: &mut TrainState,
    data: &[PreparedUtterance],
    eval: Option<(&Corpus, &[Utterance], &EvalOptions)>,
    label: &str,
    until: u64,
    mut on_step: impl FnMut(&LossBreakdown, Option<&EvalReport>),
) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    let every = state.config.eval_every;
    let until = until.min(state.config.steps);
    while state.step < until {
        let losses = train_step(state, data)?;
        let done = state.step;
        let report = match eval {
            Some((corpus, set, opts)) if (every > 0 && done % every == 0) || done == state.config.steps => {
                let mut r = evaluate(&state.model, corpus, set, opts, label, done)?;
                r.losses = Some(losses);
                Some(r)
            }
            _ => None,
        };
        on_step(&losses, report.as_ref());
        out.losses.push(losses);
        out.reports.extend(report);
    }
    Ok(out)
}
