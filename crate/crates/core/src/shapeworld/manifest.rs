//! JSON-lines image-text manifests: threshold filtering and edit-chain counts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub watermark_score: f64,
    pub clip_score: f64,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_chain_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_step: Option<u32>,
}

impl ManifestRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("record `{}` has a zero dimension", self.id));
        }
        for (name, v) in [
            ("watermark_score", self.watermark_score),
            ("clip_score", self.clip_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("record `{}`: {name} {v} outside [0, 1]", self.id));
            }
        }
        if self.edit_step == Some(0) {
            return Err(format!("record `{}`: edit_step must be positive", self.id));
        }
        Ok(())
    }

    /// `max(w/h, h/w)`.
    pub fn aspect_ratio(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        (w / h).max(h / w)
    }
}

/// Parses one manifest line. Unknown fields are ignored; missing scores fail.
pub fn parse_record(line: &str, line_no: usize) -> Result<ManifestRecord> {
    let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    rec.validate().map_err(|msg| Error::Parse { line: line_no, msg })?;
    Ok(rec)
}

/// One entry per non-blank input line, keeping line numbers (1-based).
pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<(usize, String)>> {
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

/// Parses lines (in parallel when enabled), keeping input order.
pub fn parse_manifest(lines: &[(usize, String)], exec: Exec) -> Vec<Result<ManifestRecord>> {
    exec.map(lines, |(n, l)| parse_record(l, *n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub max_aspect: f64,
    pub max_watermark: f64,
    pub min_clip: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            max_aspect: 2.5,
            max_watermark: 0.5,
            min_clip: 0.45,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "predicate", rename_all = "snake_case")]
pub enum RejectReason {
    Aspect { value: f64, max: f64 },
    Watermark { value: f64, max: f64 },
    Clip { value: f64, min: f64 },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Aspect { value, max } => write!(f, "aspect {value} > {max}"),
            RejectReason::Watermark { value, max } => write!(f, "watermark {value} > {max}"),
            RejectReason::Clip { value, min } => write!(f, "clip {value} < {min}"),
        }
    }
}

/// Every violated predicate; empty means the record is kept.
pub fn check_record(r: &ManifestRecord, t: &FilterThresholds) -> Vec<RejectReason> {
    let mut reasons = Vec::new();
    let aspect = r.aspect_ratio();
    if aspect > t.max_aspect {
        reasons.push(RejectReason::Aspect {
            value: aspect,
            max: t.max_aspect,
        });
    }
    if r.watermark_score > t.max_watermark {
        reasons.push(RejectReason::Watermark {
            value: r.watermark_score,
            max: t.max_watermark,
        });
    }
    if r.clip_score < t.min_clip {
        reasons.push(RejectReason::Clip {
            value: r.clip_score,
            min: t.min_clip,
        });
    }
    reasons
}

#[derive(Debug, Default)]
pub struct FilterOutcome {
    pub kept: Vec<ManifestRecord>,
    pub rejected: Vec<(ManifestRecord, Vec<RejectReason>)>,
    pub errors: Vec<Error>,
}

/// Splits parsed entries into kept, rejected (with reasons), and parse errors,
/// each in input order. A bad record never aborts the stream.
pub fn filter_manifest(
    entries: Vec<Result<ManifestRecord>>,
    thresholds: &FilterThresholds,
) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for e in entries {
        match e {
            Ok(rec) => {
                let reasons = check_record(&rec, thresholds);
                if reasons.is_empty() {
                    out.kept.push(rec);
                } else {
                    out.rejected.push((rec, reasons));
                }
            }
            Err(err) => out.errors.push(err),
        }
    }
    out
}

/// Chain counts bucketed by length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditChainHistogram {
    pub two_step: u64,
    pub three_step: u64,
    pub four_step: u64,
    pub five_plus: u64,
}

impl EditChainHistogram {
    pub fn as_array(&self) -> [u64; 4] {
        [self.two_step, self.three_step, self.four_step, self.five_plus]
    }
}

/// Groups records by chain id and counts chains by length. Records without a
/// chain id are ignored; single-step chains are not counted.
pub fn edit_chain_stats(records: &[ManifestRecord]) -> Result<EditChainHistogram> {
    let mut chains: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for r in records {
        if let Some(id) = &r.edit_chain_id {
            let step = r.edit_step.ok_or_else(|| {
                Error::Integrity(format!("chain `{id}`: record `{}` has no edit_step", r.id))
            })?;
            chains.entry(id).or_default().push(step);
        }
    }
    let mut h = EditChainHistogram::default();
    for (id, mut steps) in chains {
        steps.sort_unstable();
        let consecutive = steps.iter().enumerate().all(|(i, &s)| s as usize == i + 1);
        if !consecutive {
            return Err(Error::Integrity(format!(
                "chain `{id}` steps {steps:?} are not consecutive from 1"
            )));
        }
        match steps.len() {
            0 | 1 => {}
            2 => h.two_step += 1,
            3 => h.three_step += 1,
            4 => h.four_step += 1,
            _ => h.five_plus += 1,
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, w: u32, h: u32, wm: f64, clip: f64) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            width: w,
            height: h,
            watermark_score: wm,
            clip_score: clip,
            caption: "one red circle".into(),
            edit_chain_id: None,
            edit_step: None,
        }
    }

    fn chained(chain: &str, step: u32) -> ManifestRecord {
        ManifestRecord {
            edit_chain_id: Some(chain.into()),
            edit_step: Some(step),
            ..rec(&format!("{chain}-{step}"), 10, 10, 0.0, 1.0)
        }
    }

    #[test]
    fn boundaries_are_inclusive() {
        let t = FilterThresholds::default();
        assert!(check_record(&rec("a", 1000, 400, 0.5, 0.45), &t).is_empty());
        let r = check_record(&rec("b", 1000, 100, 0.0, 0.9), &t);
        assert_eq!(r, vec![RejectReason::Aspect { value: 10.0, max: 2.5 }]);
        let r = check_record(&rec("c", 64, 64, 0.51, 0.44), &t);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].to_string(), "watermark 0.51 > 0.5");
    }

    #[test]
    fn parse_errors_are_collected() {
        let lines = vec![
            (1, r#"{"id":"a","width":4,"height":4,"watermark_score":0.1,"clip_score":0.9,"caption":"x","extra":1}"#.to_string()),
            (2, r#"{"id":"b","width":4,"height":4,"clip_score":0.9,"caption":"x"}"#.to_string()),
            (3, "not json".to_string()),
            (4, r#"{"id":"d","width":0,"height":4,"watermark_score":0.1,"clip_score":0.9,"caption":"x"}"#.to_string()),
        ];
        let out = filter_manifest(parse_manifest(&lines, Exec::Sequential), &FilterThresholds::default());
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.errors.len(), 3);
        assert!(matches!(out.errors[0], Error::Parse { line: 2, .. }));
    }

    #[test]
    fn chain_stats() {
        assert_eq!(edit_chain_stats(&[]).unwrap(), EditChainHistogram::default());
        let mut rs = vec![chained("x", 2), chained("x", 1), chained("y", 1)];
        rs.extend((1..=6).map(|s| chained("z", s)));
        rs.push(rec("loose", 5, 5, 0.0, 1.0));
        let h = edit_chain_stats(&rs).unwrap();
        assert_eq!(h.as_array(), [1, 0, 0, 1]);
        let gap = vec![chained("g", 1), chained("g", 3)];
        let err = edit_chain_stats(&gap).unwrap_err();
        assert!(err.to_string().contains("`g`"));
    }

    fn arb_record() -> impl Strategy<Value = ManifestRecord> {
        (1u32..3000, 1u32..3000, 0.0f64..=1.0, 0.0f64..=1.0)
            .prop_map(|(w, h, wm, c)| rec("r", w, h, wm, c))
    }

    proptest! {
        #[test]
        fn filter_partitions_and_is_idempotent(rs in proptest::collection::vec(arb_record(), 0..40)) {
            let t = FilterThresholds::default();
            let n = rs.len();
            let out = filter_manifest(rs.into_iter().map(Ok).collect(), &t);
            prop_assert_eq!(out.kept.len() + out.rejected.len() + out.errors.len(), n);
            let again = filter_manifest(out.kept.iter().cloned().map(Ok).collect(), &t);
            prop_assert_eq!(again.kept, out.kept);
            prop_assert!(again.rejected.is_empty());
        }
    }
}
