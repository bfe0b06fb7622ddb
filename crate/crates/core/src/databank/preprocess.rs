//! Channel selection, time cropping and repetition averaging.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::brain::BrainRecording;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// The 17 occipito-parietal channels, in output order.
pub const O_PLUS_P: [&str; 17] = [
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "PO7", "PO3", "POz", "PO4", "PO8", "O1",
    "Oz", "O2",
];

/// Default occipital-only split: the `PO*` and `O*` sites.
pub const OCCIPITAL: [&str; 8] = ["PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2"];

/// Default parietal-only split: the `P*` sites.
pub const PARIETAL: [&str; 9] = ["P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ChannelSubset {
    Occipital,
    Parietal,
    OPlusP,
    /// Every channel outside the O+P set, in recording order.
    Others,
    /// Every channel, in recording order.
    All,
    Explicit(Vec<String>),
}

impl ChannelSubset {
    /// Resolves the subset against a recording's channel list into row indices.
    pub fn resolve(&self, channels: &[String]) -> Result<Vec<usize>> {
        let lookup = |names: &[&str]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    channels
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| Error::MissingChannel((*n).to_string()))
                })
                .collect()
        };
        match self {
            ChannelSubset::Occipital => lookup(&OCCIPITAL),
            ChannelSubset::Parietal => lookup(&PARIETAL),
            ChannelSubset::OPlusP => lookup(&O_PLUS_P),
            ChannelSubset::Others => {
                let rows: Vec<usize> = (0..channels.len())
                    .filter(|&i| !O_PLUS_P.contains(&channels[i].as_str()))
                    .collect();
                if rows.is_empty() {
                    return Err(Error::MissingChannel("<any non O+P channel>".into()));
                }
                Ok(rows)
            }
            ChannelSubset::All => Ok((0..channels.len()).collect()),
            ChannelSubset::Explicit(names) => {
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                lookup(&refs)
            }
        }
    }
}

impl fmt::Display for ChannelSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelSubset::Occipital => f.write_str("occipital"),
            ChannelSubset::Parietal => f.write_str("parietal"),
            ChannelSubset::OPlusP => f.write_str("o_plus_p"),
            ChannelSubset::Others => f.write_str("others"),
            ChannelSubset::All => f.write_str("all"),
            ChannelSubset::Explicit(names) => f.write_str(&names.join(",")),
        }
    }
}

impl FromStr for ChannelSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "occipital" => ChannelSubset::Occipital,
            "parietal" => ChannelSubset::Parietal,
            "o_plus_p" | "o+p" => ChannelSubset::OPlusP,
            "others" => ChannelSubset::Others,
            "all" => ChannelSubset::All,
            list => {
                let names: Vec<String> = list
                    .split(',')
                    .map(|n| n.trim().to_string())
                    .filter(|n| !n.is_empty())
                    .collect();
                if names.is_empty() {
                    return Err(Error::Config("empty channel list".into()));
                }
                ChannelSubset::Explicit(names)
            }
        })
    }
}

impl TryFrom<String> for ChannelSubset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ChannelSubset> for String {
    fn from(c: ChannelSubset) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocSpec {
    pub channels: ChannelSubset,
    /// Crop window in ms relative to stimulus onset; `None` keeps the recorded window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_ms: Option<[f64; 2]>,
    pub average_repetitions: bool,
}

impl Default for PreprocSpec {
    fn default() -> Self {
        PreprocSpec {
            channels: ChannelSubset::OPlusP,
            window_ms: None,
            average_repetitions: true,
        }
    }
}

impl PreprocSpec {
    /// `[start, end)` sample indices for the crop: floor at both ends.
    pub fn sample_range(
        &self,
        sample_rate_hz: f64,
        recorded: [f64; 2],
        len: usize,
    ) -> Result<(usize, usize)> {
        let Some([t0, t1]) = self.window_ms else {
            return Ok((0, len));
        };
        if !(t0 < t1) || t0 < recorded[0] || t1 > recorded[1] {
            return Err(Error::Config(format!(
                "window [{t0}, {t1}] ms is not inside the recorded window {recorded:?}"
            )));
        }
        // The tiny offset absorbs binary rounding of exact products such as 0.3·250.
        let idx = |t: f64| ((t - recorded[0]) * sample_rate_hz / 1000.0 + 1e-9).floor() as usize;
        let (a, b) = (idx(t0), idx(t1).min(len));
        if a >= b {
            return Err(Error::Config(format!(
                "window [{t0}, {t1}] ms selects no samples at {sample_rate_hz} Hz"
            )));
        }
        Ok((a, b))
    }
}

/// One preprocessed sample: `C' × T'` for a (subject, stimulus) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub subject_id: String,
    pub stimulus: usize,
    /// `None` when repetitions were averaged.
    pub repetition: Option<u32>,
    pub signal: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
    pub window_ms: [f64; 2],
    /// Sorted by subject, stimulus, repetition.
    pub trials: Vec<Trial>,
}

impl Preprocessed {
    pub fn signal_len(&self) -> usize {
        self.trials.first().map_or(0, |t| t.signal.numel())
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.trials.iter().map(|t| t.subject_id.clone()).collect();
        ids.dedup();
        ids
    }
}

fn crop(rec: &BrainRecording, rows: &[usize], (a, b): (usize, usize)) -> Tensor {
    let t = rec.num_samples();
    let mut data = Vec::with_capacity(rows.len() * (b - a));
    for &r in rows {
        data.extend_from_slice(&rec.samples.data()[r * t + a..r * t + b]);
    }
    Tensor::matrix(rows.len(), b - a, data).expect("cropped recording")
}

/// Elementwise mean of same-shape matrices, summed in input order.
pub fn average(group: &[Tensor]) -> Result<Tensor> {
    let Some(first) = group.first() else {
        return Err(Error::EmptyGroup("no repetitions to average".into()));
    };
    let mut acc = first.data().to_vec();
    for g in &group[1..] {
        if g.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "repetitions differ in shape: {:?} vs {:?}",
                g.shape(),
                first.shape()
            )));
        }
        acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
    }
    let n = group.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape().to_vec(), acc)
}

/// Selects channels (in subset order), crops the window, then averages repetitions within
/// each (subject, stimulus) when enabled.
pub fn preprocess(recordings: &[BrainRecording], spec: &PreprocSpec) -> Result<Preprocessed> {
    let Some(first) = recordings.first() else {
        return Err(Error::EmptyGroup("no recordings".into()));
    };
    let rows = spec.channels.resolve(&first.channels)?;
    let range = spec.sample_range(first.sample_rate_hz, first.window_ms, first.num_samples())?;
    let mut groups: BTreeMap<(&str, usize), Vec<(u32, Tensor)>> = BTreeMap::new();
    for rec in recordings {
        if rec.channels != first.channels
            || rec.sample_rate_hz != first.sample_rate_hz
            || rec.window_ms != first.window_ms
            || rec.samples.shape() != first.samples.shape()
        {
            return Err(Error::Shape(format!(
                "recording {}/{} does not share the layout of the first recording",
                rec.subject_id, rec.stimulus
            )));
        }
        groups
            .entry((rec.subject_id.as_str(), rec.stimulus))
            .or_default()
            .push((rec.repetition, crop(rec, &rows, range)));
    }
    let mut trials = Vec::new();
    for ((subject, stimulus), mut reps) in groups {
        reps.sort_by_key(|(r, _)| *r);
        if spec.average_repetitions {
            let mats: Vec<Tensor> = reps.into_iter().map(|(_, t)| t).collect();
            trials.push(Trial {
                subject_id: subject.to_string(),
                stimulus,
                repetition: None,
                signal: average(&mats)?,
            });
        } else {
            trials.extend(reps.into_iter().map(|(r, signal)| Trial {
                subject_id: subject.to_string(),
                stimulus,
                repetition: Some(r),
                signal,
            }));
        }
    }
    let ms = |i: usize| first.window_ms[0] + i as f64 * 1000.0 / first.sample_rate_hz;
    Ok(Preprocessed {
        channels: rows.iter().map(|&r| first.channels[r].clone()).collect(),
        sample_rate_hz: first.sample_rate_hz,
        window_ms: spec.window_ms.unwrap_or([ms(range.0), ms(range.1)]),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn names(extra: &[&str]) -> Arc<[String]> {
        extra
            .iter()
            .chain(O_PLUS_P.iter())
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .into()
    }

    fn rec(
        subject: &str,
        stimulus: usize,
        rep: u32,
        c: usize,
        t: usize,
        f: impl Fn(usize) -> f64,
    ) -> BrainRecording {
        let chans = names(&["Fp1", "Cz"]);
        assert_eq!(chans.len(), c);
        BrainRecording {
            subject_id: subject.into(),
            stimulus,
            repetition: rep,
            channels: chans,
            sample_rate_hz: 250.0,
            window_ms: [0.0, t as f64 * 4.0],
            samples: Tensor::matrix(c, t, (0..c * t).map(f).collect()).unwrap(),
        }
    }

    #[test]
    fn identical_repetitions_average_to_themselves() {
        let recs: Vec<_> = (0..4)
            .map(|r| rec("s1", 0, r, 19, 10, |i| (i as f64).sin()))
            .collect();
        let out = preprocess(&recs, &PreprocSpec::default()).unwrap();
        assert_eq!(out.trials.len(), 1);
        let single = preprocess(&recs[..1], &PreprocSpec::default()).unwrap();
        assert_eq!(out.trials[0].signal, single.trials[0].signal);
    }

    #[test]
    fn one_second_at_250hz_is_4250_long() {
        let r = rec("s1", 0, 0, 19, 250, |i| i as f64);
        let out = preprocess(&[r.clone()], &PreprocSpec::default()).unwrap();
        assert_eq!(out.trials[0].signal.shape(), &[17, 250]);
        assert_eq!(out.signal_len(), 4250);
        let spec = PreprocSpec {
            window_ms: Some([0.0, 300.0]),
            ..Default::default()
        };
        assert_eq!(
            preprocess(&[r], &spec).unwrap().trials[0].signal.shape(),
            &[17, 75]
        );
    }

    #[test]
    fn o_plus_p_rows_follow_list_order() {
        let mut r = rec("s1", 0, 0, 19, 3, |i| (i / 3) as f64);
        // reverse the O+P block in the recording so order must come from the list
        let mut chans = r.channels.to_vec();
        chans[2..].reverse();
        r.channels = chans.into();
        let out = preprocess(&[r.clone()], &PreprocSpec::default()).unwrap();
        assert_eq!(out.channels, O_PLUS_P.map(String::from).to_vec());
        for (i, name) in O_PLUS_P.iter().enumerate() {
            let src = r.channels.iter().position(|c| c == name).unwrap();
            assert_eq!(out.trials[0].signal.row(i)[0], src as f64);
        }
    }

    #[test]
    fn missing_channel_is_named() {
        let r = rec("s1", 0, 0, 19, 3, |i| i as f64);
        let spec = PreprocSpec {
            channels: "O1,Iz".parse().unwrap(),
            ..Default::default()
        };
        match preprocess(&[r], &spec) {
            Err(Error::MissingChannel(c)) => assert_eq!(c, "Iz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_input_is_empty_group() {
        assert!(matches!(
            preprocess(&[], &PreprocSpec::default()),
            Err(Error::EmptyGroup(_))
        ));
        assert!(matches!(average(&[]), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn full_selection_without_averaging_is_identity() {
        let recs: Vec<_> = (0..3)
            .map(|r| {
                rec("s2", r as usize % 2, r, 19, 5, move |i| {
                    i as f64 * 0.5 + r as f64
                })
            })
            .collect();
        let spec = PreprocSpec {
            channels: ChannelSubset::All,
            window_ms: None,
            average_repetitions: false,
        };
        let out = preprocess(&recs, &spec).unwrap();
        assert_eq!(out.trials.len(), 3);
        for t in &out.trials {
            let src = recs
                .iter()
                .find(|r| r.stimulus == t.stimulus && Some(r.repetition) == t.repetition)
                .unwrap();
            assert_eq!(t.signal, src.samples);
        }
        assert_eq!(out.window_ms, recs[0].window_ms);
    }

    #[test]
    fn others_excludes_o_plus_p() {
        let r = rec("s1", 0, 0, 19, 2, |i| i as f64);
        let spec = PreprocSpec {
            channels: ChannelSubset::Others,
            ..Default::default()
        };
        assert_eq!(preprocess(&[r], &spec).unwrap().channels, vec!["Fp1", "Cz"]);
    }

    #[test]
    fn window_outside_recording_rejected() {
        let r = rec("s1", 0, 0, 19, 10, |i| i as f64);
        let spec = PreprocSpec {
            window_ms: Some([0.0, 1000.0]),
            ..Default::default()
        };
        assert!(matches!(preprocess(&[r], &spec), Err(Error::Config(_))));
    }

    #[test]
    fn subset_names_round_trip() {
        for s in [
            "occipital",
            "parietal",
            "o_plus_p",
            "others",
            "all",
            "O1,Oz,O2",
        ] {
            assert_eq!(s.parse::<ChannelSubset>().unwrap().to_string(), s);
        }
    }
}
