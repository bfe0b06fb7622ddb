//! Pairing preprocessed brain trials with bank rows.

use std::collections::BTreeMap;

use super::checkpoint::SignalLayout;
use crate::databank::{preprocess, BrainRecording, EmbeddingBank, Partition, PreprocSpec};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Brain trials and the bank rows they were recorded for.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSet {
    /// Bank indices of the stimuli, ascending.
    pub stimuli: Vec<usize>,
    /// Per branch, rows aligned with `stimuli`.
    pub embeddings: Vec<Tensor>,
    /// Flattened trials `[n_trials × C'·T']`.
    pub signals: Tensor,
    /// For each trial, its row in `stimuli`.
    pub trial_stimulus: Vec<usize>,
    pub trial_subject: Vec<String>,
    pub layout: SignalLayout,
}

impl PairedSet {
    /// Trials of stimuli in `partition` from subjects accepted by `keep_subject`.
    pub fn build(
        bank: &EmbeddingBank,
        recordings: &[BrainRecording],
        spec: &PreprocSpec,
        partition: Partition,
        keep_subject: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        let selected: Vec<BrainRecording> = recordings
            .iter()
            .filter(|r| {
                r.stimulus < bank.num_stimuli
                    && bank.partitions[r.stimulus] == partition
                    && keep_subject(&r.subject_id)
            })
            .cloned()
            .collect();
        if selected.is_empty() {
            return Err(Error::EmptyGroup(format!(
                "no brain recordings for the {partition:?} partition and selected subjects"
            )));
        }
        let pre = preprocess(&selected, spec)?;
        let mut stimuli: Vec<usize> = pre.trials.iter().map(|t| t.stimulus).collect();
        stimuli.sort_unstable();
        stimuli.dedup();
        let row_of: BTreeMap<usize, usize> =
            stimuli.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let len = pre.signal_len();
        let mut data = Vec::with_capacity(pre.trials.len() * len);
        for t in &pre.trials {
            data.extend_from_slice(t.signal.data());
        }
        let num_samples = pre.trials[0].signal.cols();
        Ok(PairedSet {
            embeddings: bank.embeddings(&stimuli),
            signals: Tensor::matrix(pre.trials.len(), len, data)?,
            trial_stimulus: pre.trials.iter().map(|t| row_of[&t.stimulus]).collect(),
            trial_subject: pre.trials.iter().map(|t| t.subject_id.clone()).collect(),
            stimuli,
            layout: SignalLayout {
                channels: pre.channels,
                sample_rate_hz: pre.sample_rate_hz,
                window_ms: pre.window_ms,
                num_samples,
            },
        })
    }

    pub fn num_trials(&self) -> usize {
        self.trial_stimulus.len()
    }

    pub fn input_len(&self) -> usize {
        self.signals.cols()
    }

    /// Distinct subjects in trial order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.trial_subject {
            if out.last() != Some(s) && !out.contains(s) {
                out.push(s.clone());
            }
        }
        out
    }

    /// Keeps only the trials of `subject`; the gallery is unchanged.
    pub fn for_subject(&self, subject: &str) -> PairedSet {
        let idx: Vec<usize> = (0..self.num_trials())
            .filter(|&i| self.trial_subject[i] == subject)
            .collect();
        PairedSet {
            signals: self.signals.select_rows(&idx),
            trial_stimulus: idx.iter().map(|&i| self.trial_stimulus[i]).collect(),
            trial_subject: idx.iter().map(|&i| self.trial_subject[i].clone()).collect(),
            ..self.clone()
        }
    }
}
