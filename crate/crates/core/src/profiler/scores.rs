use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ProfileConfig, ProfileError};
use crate::metrics::{similarity_score, stability_score, trace_top_sets, IndexSet};
use crate::scalar::Scalar;
use crate::trace::{AttentionTrace, HeadId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScores<T = f64> {
    pub head: HeadId,
    pub s_stable: T,
    pub s_sim: T,
}

pub(crate) fn check_dimensions(traces: &[AttentionTrace]) -> Result<(), ProfileError> {
    let first = traces.first().ok_or(ProfileError::NoTraces)?;
    for t in traces {
        if t.manifest.num_layers != first.manifest.num_layers
            || t.manifest.heads_per_layer != first.manifest.heads_per_layer
        {
            return Err(ProfileError::Dimension(format!(
                "trace '{}' is {}x{}, expected {}x{}",
                t.manifest.model_name,
                t.manifest.num_layers,
                t.manifest.heads_per_layer,
                first.manifest.num_layers,
                first.manifest.heads_per_layer
            )));
        }
        if t.manifest.decode_steps == 0 {
            return Err(ProfileError::NoDecodeSteps);
        }
    }
    Ok(())
}

fn trace_scores<T: Scalar>(
    trace: &AttentionTrace,
    k: usize,
) -> Result<Vec<HeadScores<T>>, ProfileError> {
    let sets = trace_top_sets(trace, k)?;
    let per_layer = trace.manifest.heads_per_layer as usize;
    // series[slot] = that head's decode-step sets
    let series: Vec<Vec<IndexSet>> = (0..trace.manifest.num_heads())
        .map(|slot| sets[1..].iter().map(|step| step[slot].clone()).collect())
        .collect();

    trace
        .manifest
        .heads()
        .enumerate()
        .map(|(slot, head)| {
            let s_stable = stability_score(&series[slot], &sets[0][slot])?;
            let layer_start = head.layer as usize * per_layer;
            let peers: Vec<&[IndexSet]> = (layer_start..layer_start + per_layer)
                .filter(|&p| p != slot)
                .map(|p| series[p].as_slice())
                .collect();
            let s_sim = if peers.is_empty() {
                T::zero()
            } else {
                similarity_score(&series[slot], &peers)?
            };
            Ok(HeadScores {
                head,
                s_stable,
                s_sim,
            })
        })
        .collect()
}

/// Per-head stability and similarity, averaged over calibration traces.
///
/// Single-head layers get `s_sim = 0`.
pub fn profile<T: Scalar>(
    traces: &[AttentionTrace],
    config: &ProfileConfig<T>,
) -> Result<Vec<HeadScores<T>>, ProfileError> {
    config.validate()?;
    check_dimensions(traces)?;
    let per_trace: Vec<Vec<HeadScores<T>>> = traces
        .par_iter()
        .map(|t| trace_scores(t, config.topk_for(t.manifest.prefill_len as usize)))
        .collect::<Result<_, _>>()?;

    let n = T::from_count(traces.len());
    let mut out = per_trace[0].clone();
    for (i, acc) in out.iter_mut().enumerate() {
        acc.s_stable = per_trace.iter().map(|s| s[i].s_stable).sum::<T>() / n;
        acc.s_sim = per_trace.iter().map(|s| s[i].s_sim).sum::<T>() / n;
    }
    Ok(out)
}
