//! Brain recordings and their on-disk layout (`brain_<subject>.f32`, one row per record).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::bank::{read_f32, write_f32};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// One trial: `C × T` samples for a single presentation of a stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainRecording {
    pub subject_id: String,
    pub stimulus: usize,
    pub repetition: u32,
    pub channels: Arc<[String]>,
    pub sample_rate_hz: f64,
    /// `[start, end]` in milliseconds relative to stimulus onset.
    pub window_ms: [f64; 2],
    pub samples: Tensor,
}

/// Sample count for a window: `round(rate · length)`.
pub fn samples_for_window(sample_rate_hz: f64, window_ms: [f64; 2]) -> usize {
    (sample_rate_hz * (window_ms[1] - window_ms[0]) / 1000.0).round() as usize
}

impl BrainRecording {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.cols()
    }

    pub fn validate(&self) -> Result<()> {
        validate_layout(
            &self.channels,
            self.sample_rate_hz,
            self.window_ms,
            self.num_samples(),
        )?;
        if self.samples.shape().len() != 2 || self.samples.rows() != self.channels.len() {
            return Err(Error::Shape(format!(
                "recording {}/{}: samples {:?} do not match {} channels",
                self.subject_id,
                self.stimulus,
                self.samples.shape(),
                self.channels.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn validate_layout(
    channels: &[String],
    sample_rate_hz: f64,
    window_ms: [f64; 2],
    num_samples: usize,
) -> Result<()> {
    let mut seen = HashSet::new();
    for c in channels {
        if !seen.insert(c.as_str()) {
            return Err(Error::Shape(format!("duplicate channel name `{c}`")));
        }
    }
    if !(sample_rate_hz > 0.0) || !(window_ms[0] < window_ms[1]) {
        return Err(Error::Shape(format!(
            "invalid recording layout: rate {sample_rate_hz} Hz, window {window_ms:?} ms"
        )));
    }
    let expect = samples_for_window(sample_rate_hz, window_ms);
    if expect != num_samples {
        return Err(Error::Shape(format!(
            "{num_samples} samples for a {window_ms:?} ms window at {sample_rate_hz} Hz, expected {expect}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub stimulus: usize,
    pub repetition: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecords {
    pub subject_id: String,
    pub records: Vec<RecordRef>,
}

impl SubjectRecords {
    pub fn file_name(&self) -> String {
        format!("brain_{}.f32", self.subject_id)
    }
}

/// Brain section of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainManifest {
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
    pub window_ms: [f64; 2],
    pub num_samples: usize,
    pub subjects: Vec<SubjectRecords>,
}

fn check_subject_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::Config(format!(
            "subject id `{id}` must be non-empty ASCII alphanumerics, `-` or `_`"
        )));
    }
    Ok(())
}

/// Groups recordings by subject (sorted) and writes one payload per subject.
///
/// All recordings must share the channel list, rate and window.
pub(crate) fn write_recordings(
    dir: &Path,
    recordings: &[BrainRecording],
    num_stimuli: usize,
) -> Result<Option<BrainManifest>> {
    let Some(first) = recordings.first() else {
        return Ok(None);
    };
    let mut by_subject: BTreeMap<&str, Vec<&BrainRecording>> = BTreeMap::new();
    for r in recordings {
        r.validate()?;
        if r.channels != first.channels
            || r.sample_rate_hz != first.sample_rate_hz
            || r.window_ms != first.window_ms
        {
            return Err(Error::Shape(format!(
                "recording {}/{} has a different layout from the first recording",
                r.subject_id, r.stimulus
            )));
        }
        if r.stimulus >= num_stimuli {
            return Err(Error::Shape(format!(
                "recording references stimulus {} of {num_stimuli}",
                r.stimulus
            )));
        }
        by_subject.entry(r.subject_id.as_str()).or_default().push(r);
    }
    let mut subjects = Vec::new();
    for (id, recs) in by_subject {
        check_subject_id(id)?;
        let entry = SubjectRecords {
            subject_id: id.to_string(),
            records: recs
                .iter()
                .map(|r| RecordRef {
                    stimulus: r.stimulus,
                    repetition: r.repetition,
                })
                .collect(),
        };
        let payload: Vec<f32> = recs
            .iter()
            .flat_map(|r| r.samples.data().iter().map(|&v| v as f32))
            .collect();
        write_f32(&dir.join(entry.file_name()), &payload)?;
        subjects.push(entry);
    }
    Ok(Some(BrainManifest {
        channels: first.channels.to_vec(),
        sample_rate_hz: first.sample_rate_hz,
        window_ms: first.window_ms,
        num_samples: first.num_samples(),
        subjects,
    }))
}

pub(crate) fn read_recordings(
    dir: &Path,
    m: &BrainManifest,
    num_stimuli: usize,
) -> Result<Vec<BrainRecording>> {
    validate_layout(&m.channels, m.sample_rate_hz, m.window_ms, m.num_samples)?;
    let channels: Arc<[String]> = m.channels.clone().into();
    let (c, t) = (m.channels.len(), m.num_samples);
    let row = c * t;
    let mut out = Vec::new();
    for s in &m.subjects {
        check_subject_id(&s.subject_id)?;
        let path = dir.join(s.file_name());
        let values = read_f32(&path)?;
        if values.len() != s.records.len() * row {
            return Err(Error::Format {
                path,
                reason: format!(
                    "{} values for {} records of {c}×{t}",
                    values.len(),
                    s.records.len()
                ),
            });
        }
        for (r, chunk) in s.records.iter().zip(values.chunks_exact(row)) {
            if r.stimulus >= num_stimuli {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("record references stimulus {} of {num_stimuli}", r.stimulus),
                });
            }
            let data = chunk.iter().map(|&v| f64::from(v)).collect();
            out.push(BrainRecording {
                subject_id: s.subject_id.clone(),
                stimulus: r.stimulus,
                repetition: r.repetition,
                channels: channels.clone(),
                sample_rate_hz: m.sample_rate_hz,
                window_ms: m.window_ms,
                samples: Tensor::new(vec![c, t], data).map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?,
            });
        }
    }
    Ok(out)
}
