//! Scene-parallel evaluation.

use anyhow::Result;
use ctxagg_core::toy::eval::{evaluate_scene, SceneStats};
use ctxagg_core::toy::{EvalMetrics, ProposalMode, ToyConfig, ToyDetector};
use ctxagg_core::ParamStore;

/// Worker count from `CTXAGG_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("CTXAGG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Same result as [`ctxagg_core::toy::evaluate`], with scenes spread over
/// `threads` workers. Per-scene stats are combined in scene order.
pub fn evaluate_parallel(
    model: &ToyDetector,
    store: &ParamStore,
    cfg: &ToyConfig,
    mode: ProposalMode,
    threads: usize,
) -> Result<EvalMetrics> {
    let n = cfg.eval.scenes;
    let threads = threads.clamp(1, n.max(1));
    let mut slots: Vec<Option<ctxagg_core::Result<SceneStats>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(n.div_ceil(threads).max(1)).enumerate() {
            let start = w * n.div_ceil(threads).max(1);
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(evaluate_scene(model, store, cfg, start + i, mode));
                }
            });
        }
    });
    let stats = slots
        .into_iter()
        .map(|s| s.expect("every scene evaluated"))
        .collect::<ctxagg_core::Result<Vec<_>>>()?;
    Ok(EvalMetrics::from_stats(&stats))
}
