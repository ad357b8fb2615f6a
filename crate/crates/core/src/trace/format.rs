//! Binary trace file codec (little-endian).
//!
//! ```text
//! magic          8 bytes  "HCTRACE1"
//! manifest_len   u32
//! manifest       manifest_len bytes of UTF-8 JSON
//! body           for step in 0..=T, layer, head: trace_topk x (u32 index, f32 score)
//! ```

use std::io::{self, Read, Write};

use super::{AttentionTrace, Entry, StepAttention, TraceError, TraceManifest};

pub const MAGIC: &[u8; 8] = b"HCTRACE1";
const MAGIC_STEM: &[u8; 7] = b"HCTRACE";

/// Writes `trace` to `sink`, returning the number of bytes emitted.
///
/// The trace is validated before anything is written.
pub fn write_trace<W: Write>(trace: &AttentionTrace, mut sink: W) -> Result<u64, TraceError> {
    trace.validate()?;
    let manifest =
        serde_json::to_vec(&trace.manifest).map_err(|e| TraceError::Manifest(e.to_string()))?;
    let manifest_len = u32::try_from(manifest.len())
        .map_err(|_| TraceError::Manifest("manifest longer than 4 GiB".into()))?;

    sink.write_all(MAGIC)?;
    sink.write_all(&manifest_len.to_le_bytes())?;
    sink.write_all(&manifest)?;
    let mut written = (MAGIC.len() + 4 + manifest.len()) as u64;

    let mut buf = Vec::with_capacity(trace.manifest.entries_per_step() * 8);
    for step in &trace.steps {
        buf.clear();
        for e in &step.entries {
            buf.extend_from_slice(&e.index.to_le_bytes());
            buf.extend_from_slice(&e.score.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), TraceError> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(TraceError::Truncated {
                        offset: self.offset + filled as u64,
                        what: what.to_string(),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }
}

/// Reads and validates a trace from `source`.
pub fn read_trace<R: Read>(source: R) -> Result<AttentionTrace, TraceError> {
    let mut r = OffsetReader {
        inner: source,
        offset: 0,
    };

    let mut magic = [0u8; 8];
    r.fill(&mut magic, "magic")?;
    if &magic != MAGIC {
        if &magic[..7] == MAGIC_STEM && magic[7].is_ascii_digit() {
            return Err(TraceError::UnsupportedVersion {
                version: magic[7] as char,
            });
        }
        return Err(TraceError::BadMagic {
            found: magic.to_vec(),
        });
    }

    let mut len = [0u8; 4];
    r.fill(&mut len, "manifest length")?;
    let mut manifest = vec![0u8; u32::from_le_bytes(len) as usize];
    r.fill(&mut manifest, "manifest")?;
    let manifest: TraceManifest =
        serde_json::from_slice(&manifest).map_err(|e| TraceError::Manifest(e.to_string()))?;
    manifest.validate()?;

    let per_step = manifest.entries_per_step();
    let mut raw = vec![0u8; per_step * 8];
    let mut steps = Vec::with_capacity(manifest.decode_steps as usize + 1);
    for s in 0..=manifest.decode_steps {
        r.fill(&mut raw, &format!("step {} body", s))?;
        let entries = raw
            .chunks_exact(8)
            .map(|c| Entry {
                index: u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                score: f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            })
            .collect();
        steps.push(StepAttention {
            step_index: s,
            entries,
        });
    }

    let trace = AttentionTrace { manifest, steps };
    trace.validate()?;
    Ok(trace)
}
