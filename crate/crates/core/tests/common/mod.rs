//! Manifest fixtures shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use msq_core::numcore::SeededRng;
use msq_core::shapeworld::ManifestRecord;

fn record(id: &str, width: u32, height: u32, watermark_score: f64, clip_score: f64) -> ManifestRecord {
    ManifestRecord {
        id: id.to_string(),
        width,
        height,
        watermark_score,
        clip_score,
        caption: "one red circle".to_string(),
        edit_chain_id: None,
        edit_step: None,
    }
}

/// Twelve records around the default thresholds (aspect 2.5, watermark 0.5,
/// clip 0.45), each with the predicates it must be rejected for. Values on a
/// threshold are kept; 1000x399 has aspect 2.506.
pub fn filter_fixture() -> Vec<(ManifestRecord, Vec<&'static str>)> {
    vec![
        (record("all-on-boundary", 1000, 400, 0.5, 0.45), vec![]),
        (record("aspect", 1000, 399, 0.5, 0.45), vec!["aspect"]),
        (record("watermark", 1000, 400, 0.51, 0.45), vec!["watermark"]),
        (record("clip", 1000, 400, 0.5, 0.44), vec!["clip"]),
        (record("aspect+watermark", 1000, 399, 0.51, 0.45), vec!["aspect", "watermark"]),
        (record("aspect+clip", 1000, 399, 0.5, 0.44), vec!["aspect", "clip"]),
        (record("watermark+clip", 1000, 400, 0.51, 0.44), vec!["watermark", "clip"]),
        (record("all-three", 1000, 399, 0.51, 0.44), vec!["aspect", "watermark", "clip"]),
        (record("portrait-boundary", 400, 1000, 0.5, 0.45), vec![]),
        (record("portrait-tall", 399, 1000, 0.0, 1.0), vec!["aspect"]),
        (record("square-clean", 100, 100, 0.0, 1.0), vec![]),
        (record("banner", 1000, 100, 0.0, 0.9), vec!["aspect"]),
    ]
}

pub fn filter_fixture_lines() -> Vec<(usize, String)> {
    filter_fixture()
        .iter()
        .enumerate()
        .map(|(i, (r, _))| (i + 1, serde_json::to_string(r).unwrap()))
        .collect()
}

/// Multi-round edit counts by chain length (2, 3, 4, 5+).
pub const MAGICBRUSH: [u64; 4] = [1151, 1572, 0, 0];
pub const SYNCD: [u64; 4] = [25438, 0, 0, 0];
pub const SEED_PART3: [u64; 4] = [472, 7453, 8783, 4669];

/// JSON lines encoding chains with the given counts per length bucket
/// (5+ chains cycle through lengths 5..=7), plus single edits and plain
/// records that must not be counted. Lines are shuffled deterministically.
pub fn edit_chain_fixture(name: &str, counts: [u64; 4]) -> Vec<(usize, String)> {
    let mut records = Vec::new();
    let mut chain = 0u64;
    for (bucket, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let len = if bucket == 3 { 5 + (i % 3) as u32 } else { bucket as u32 + 2 };
            chain += 1;
            for step in 1..=len {
                let mut r = record(&format!("{name}-{chain}-{step}"), 512, 512, 0.1, 0.8);
                r.edit_chain_id = Some(format!("{name}-chain-{chain}"));
                r.edit_step = Some(step);
                records.push(r);
            }
        }
    }
    for i in 0..25 {
        let mut r = record(&format!("{name}-single-{i}"), 512, 512, 0.1, 0.8);
        r.edit_chain_id = Some(format!("{name}-single-chain-{i}"));
        r.edit_step = Some(1);
        records.push(r);
        records.push(record(&format!("{name}-plain-{i}"), 640, 480, 0.2, 0.7));
    }
    let mut rng = SeededRng::new(chain);
    for i in (1..records.len()).rev() {
        records.swap(i, rng.below(i + 1));
    }
    records.iter().enumerate().map(|(i, r)| (i + 1, serde_json::to_string(r).unwrap())).collect()
}
