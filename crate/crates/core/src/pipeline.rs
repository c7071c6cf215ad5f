//! Stage drivers shared by the command line and the test suites.

use crate::checkpoint::Checkpoint;
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::params::Group;
use crate::pretzel::{ForwardOpts, Pretzel, VisualPath};
use crate::training::{evaluate_understanding, run_stage, trainable_groups, MetricRow};

pub type Progress<'a> = Option<&'a mut dyn FnMut(&MetricRow)>;

/// Stage 0: trains the stub on the native visual pathway and records its
/// held-out understanding score.
pub fn pretrain_stub(model: &Pretzel, ck: &mut Checkpoint, corpus: &Corpus, progress: Progress<'_>) -> Result<Vec<MetricRow>> {
    let rows = train_stage(model, ck, 0, corpus, progress)?;
    let score = evaluate_understanding(model, &ck.store, &corpus.heldout, VisualPath::Native, ck.config.eval.seed)?;
    ck.stub_score = Some(score);
    Ok(rows)
}

/// Runs `stage` in place, verifying that every frozen group is untouched.
pub fn train_stage(
    model: &Pretzel,
    ck: &mut Checkpoint,
    stage: u8,
    corpus: &Corpus,
    progress: Progress<'_>,
) -> Result<Vec<MetricRow>> {
    ck.require_for_stage(stage)?;
    let trainable = trainable_groups(stage);
    let frozen: Vec<(Group, String)> = Group::ALL
        .into_iter()
        .filter(|g| !trainable.contains(g))
        .map(|g| (g, ck.store.checksum(g)))
        .collect();
    let cfg = ck.config.stage(stage).clone();
    let rows = run_stage(model, &mut ck.store, &cfg, &corpus.train, progress)?;
    for (g, sum) in frozen {
        if ck.store.checksum(g) != sum {
            return Err(Error::State(format!("frozen group {g} changed during stage {stage}")));
        }
    }
    ck.mark_stage(stage);
    Ok(rows)
}

/// Forward options for image generation from this checkpoint.
pub fn generation_opts(ck: &Checkpoint) -> Result<ForwardOpts> {
    if ck.has_stage(3) {
        Ok(ForwardOpts::FUSED)
    } else if ck.has_stage(1) {
        Ok(ForwardOpts::DECOUPLED)
    } else {
        Err(Error::MissingPrerequisite("image generation needs a stage-1 or stage-3 checkpoint".into()))
    }
}

/// Default visual pathway for understanding queries.
pub fn understanding_path(ck: &Checkpoint) -> VisualPath {
    if ck.has_stage(2) {
        VisualPath::Adapter
    } else {
        VisualPath::Native
    }
}
