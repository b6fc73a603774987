//! File-based protocol with an external segmenter.
//!
//! The command writes `requests.jsonl` (one [`SegmenterRequest`] per line)
//! into the adapter directory. The segmenter answers each request by writing
//! `masks/{id}.pgm`, ideally through a temporary name and a rename. Masks are
//! collected until every id is answered or the timeout expires.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use saliency_core::interface::ExpressionKind;
use saliency_core::raster::{load_binary_mask, BinaryMask};

use crate::responses::{build_requests, read_lines};
use crate::toy::load_config;
use crate::{write_atomic, write_json, Common};

pub const REQUESTS_FILE: &str = "requests.jsonl";
pub const MASKS_DIR: &str = "masks";
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterRequest {
    pub id: String,
    /// Id of the response the expression came from.
    pub response: String,
    /// Image reference, `world:{seed}/{episode}/{k}` for the synthetic world.
    pub image: String,
    pub text: String,
    pub kind: ExpressionKind,
    pub width: usize,
    pub height: usize,
}

pub fn write_requests(dir: &Path, requests: &[SegmenterRequest]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in requests {
        if !seen.insert(r.id.as_str()) {
            bail!("duplicate request id {}", r.id);
        }
    }
    let masks = dir.join(MASKS_DIR);
    fs::create_dir_all(&masks).with_context(|| format!("creating {}", masks.display()))?;
    for r in requests {
        // stale answers from an earlier batch must not satisfy this one
        let stale = masks.join(format!("{}.pgm", r.id));
        if stale.exists() {
            fs::remove_file(&stale).with_context(|| format!("removing {}", stale.display()))?;
        }
    }
    let mut text = String::new();
    for r in requests {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    write_atomic(&dir.join(REQUESTS_FILE), text.as_bytes())
}

pub fn read_requests(dir: &Path) -> Result<Vec<SegmenterRequest>> {
    let path = dir.join(REQUESTS_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Waits for a mask per request, validating each against the requested size.
pub fn collect(dir: &Path, requests: &[SegmenterRequest], timeout: Duration) -> Result<BTreeMap<String, BinaryMask>> {
    let masks_dir = dir.join(MASKS_DIR);
    let start = Instant::now();
    let mut pending: Vec<&SegmenterRequest> = requests.iter().collect();
    let mut got = BTreeMap::new();
    let mut errors: Vec<String> = Vec::new();
    loop {
        pending.retain(|r| {
            let path = masks_dir.join(format!("{}.pgm", r.id));
            if !path.is_file() {
                return true;
            }
            match load_binary_mask(&path) {
                Ok(m) if m.dims() == (r.width, r.height) => {
                    got.insert(r.id.clone(), m);
                }
                Ok(m) => errors.push(format!(
                    "{}: mask is {}x{}, expected {}x{}",
                    r.id,
                    m.width(),
                    m.height(),
                    r.width,
                    r.height
                )),
                Err(e) => errors.push(format!("{}: {e}", r.id)),
            }
            false
        });
        if pending.is_empty() || start.elapsed() >= timeout {
            break;
        }
        thread::sleep(POLL);
    }
    if !pending.is_empty() {
        let ids: Vec<&str> = pending.iter().map(|r| r.id.as_str()).collect();
        errors.insert(
            0,
            format!("timed out after {} ms; unanswered ids: {}", timeout.as_millis(), ids.join(", ")),
        );
    }
    if !errors.is_empty() {
        bail!("segmenter adapter failed:\n  {}", errors.join("\n  "));
    }
    Ok(got)
}

pub fn roundtrip(dir: &Path, requests: &[SegmenterRequest], timeout: Duration) -> Result<BTreeMap<String, BinaryMask>> {
    write_requests(dir, requests)?;
    collect(dir, requests, timeout)
}

#[derive(Debug, Serialize)]
struct AdapterSummary {
    requests: usize,
    /// Foreground pixel count per answered id.
    masks: BTreeMap<String, usize>,
}

pub fn run(responses: &Path, dir: &Path, config: Option<&Path>, timeout_ms: u64, common: &Common) -> Result<()> {
    let world = load_config(config, common.seed)?.world()?;
    let lines = read_lines(responses)?;
    let requests = build_requests(&world, &lines);
    let masks = roundtrip(dir, &requests, Duration::from_millis(timeout_ms))?;
    let summary = AdapterSummary {
        requests: requests.len(),
        masks: masks.iter().map(|(id, m)| (id.clone(), m.count())).collect(),
    };
    write_json(&common.out.join("adapter.json"), &summary)?;
    println!("{} requests answered", summary.requests);
    Ok(())
}
