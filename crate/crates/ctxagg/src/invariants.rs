//! Structural properties of the context modules, each checked on one random
//! instance drawn from a seed.

use anyhow::{ensure, Result};
use ctxagg_core::densefpn::{normalize_weights, DenseBlock, DenseFpnConfig};
use ctxagg_core::hroie::{Hroie, HroieConfig, Task};
use ctxagg_core::ops::{roi_align_tensor, softmax_tensor, RoiAlignParams, RoiBox};
use ctxagg_core::optim::Sgd;
use ctxagg_core::pyramid::make_synthetic_pyramid;
use ctxagg_core::scp::CaBlock;
use ctxagg_core::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: impl Into<ctxagg_core::Shape>, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

/// `Q - P` is the outer product of the context vector and the gate, and the
/// gate and pooling weights each sum to one.
pub fn scp_rank_one(seed: u64) -> Result<()> {
    let mut r = rng(seed, 1);
    let c = r.random_range(1..=6);
    let (n, h, w) = (
        r.random_range(1..=2),
        r.random_range(1..=5),
        r.random_range(1..=5),
    );
    let mut store = ParamStore::new(seed);
    let block = CaBlock::new(&mut store, "ca", c, 1)?;
    store.fill_with("ca", |_, _| r.random_range(-1.0..1.0));
    let p = random_tensor(&mut r, [n, c, h, w], 2.0);
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let t = block.forward_traced(&mut tape, &store, pv)?;
    let (q, gate, att, ctx) = (
        tape.value(t.output),
        tape.value(t.gate),
        tape.value(t.attention),
        tape.value(t.context),
    );
    let hw = h * w;
    for b in 0..n {
        let g = &gate.data()[b * hw..(b + 1) * hw];
        let a = &att.data()[b * hw..(b + 1) * hw];
        ensure!(
            (g.iter().sum::<f64>() - 1.0).abs() <= 1e-12,
            "gate sums to {}",
            g.iter().sum::<f64>()
        );
        ensure!(
            (a.iter().sum::<f64>() - 1.0).abs() <= 1e-12,
            "attention sums to {}",
            a.iter().sum::<f64>()
        );
        for ch in 0..c {
            let k = ctx.data()[b * c + ch];
            for j in (0..hw).filter(|&j| g[j] > 1e-30) {
                let idx = (b * c + ch) * hw + j;
                let ratio = (q.data()[idx] - p.data()[idx]) / g[j];
                ensure!(
                    (ratio - k).abs() <= 1e-9 * k.abs().max(1.0),
                    "sample {b} channel {ch} pixel {j}: residual/gate {ratio} vs context {k}"
                );
            }
        }
    }
    Ok(())
}

/// Gates pinned near 0 give `F = 0`; pinned near 1 give `F = sum of crops`.
pub fn hroie_saturation(seed: u64) -> Result<()> {
    let mut r = rng(seed, 2);
    let c = r.random_range(1..=4);
    let cfg = HroieConfig {
        channels: c,
        levels: [2, 4],
        det_size: r.random_range(1..=4),
        mask_size: r.random_range(2..=5),
        sampling_ratio: 2,
    };
    let pyr = make_synthetic_pyramid(seed, 2, c, 32, 32, 2, 4)?;
    let rois: Vec<RoiBox> = (0..3)
        .map(|_| {
            let x1 = r.random_range(0.0..24.0);
            let y1 = r.random_range(0.0..24.0);
            RoiBox::new(
                r.random_range(0..2),
                x1,
                y1,
                x1 + r.random_range(2.0..8.0),
                y1 + r.random_range(2.0..8.0),
            )
        })
        .collect();
    for task in [Task::Detection, Task::Mask] {
        for bias in [-30.0, 30.0] {
            let mut store = ParamStore::new(seed);
            let h = Hroie::new(&mut store, "h", cfg.clone())?;
            store.fill_with(
                "h",
                |name, _| if name.ends_with("bias") { bias } else { 0.0 },
            );
            let mut tape = Tape::new();
            let pv = pyr.to_tape(&mut tape, false);
            let crops = h.crops(&mut tape, &pv, &rois, task)?;
            let f = h.extract(&mut tape, &store, &pv, &rois, task)?;
            let out = tape.value(f.output).data();
            for i in 0..out.len() {
                let abs: f64 = crops
                    .iter()
                    .map(|(_, v)| tape.value(*v).data()[i].abs())
                    .sum();
                let sum: f64 = crops.iter().map(|(_, v)| tape.value(*v).data()[i]).sum();
                let expect = if bias > 0.0 { sum } else { 0.0 };
                ensure!(
                    (out[i] - expect).abs() <= 1e-12 * abs.max(1.0),
                    "{task:?} bias {bias}: F[{i}] = {} expected {expect}",
                    out[i]
                );
            }
        }
    }
    Ok(())
}

/// Re-weight vectors normalize to one for large raw values and keep doing so
/// after an optimizer step; plain softmax rows sum to one at magnitudes up to 1e3.
pub fn softmax_sums(seed: u64) -> Result<()> {
    let mut r = rng(seed, 3);
    let len = r.random_range(1..=6);
    let x = random_tensor(&mut r, [3, len], 1e3);
    let s = softmax_tensor(&x, 1)?;
    for row in s.data().chunks(len) {
        ensure!(row.iter().all(|&v| v >= 0.0), "negative softmax entry");
        ensure!(
            (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12,
            "row sums to {}",
            row.iter().sum::<f64>()
        );
    }

    let cfg = DenseFpnConfig {
        depth: 1,
        channels: 2,
        mid_channels: 2,
        levels: [2, 4],
    };
    let mut store = ParamStore::new(seed);
    let block = DenseBlock::new(&mut store, "d", &cfg)?;
    let scale = [1.0, 30.0, 1e3][r.random_range(0..3)];
    store.fill_with("d", |name, _| {
        if name.ends_with("reweight") {
            r.random_range(-scale..scale)
        } else {
            r.random_range(-0.5..0.5)
        }
    });
    let check = |store: &ParamStore| -> Result<()> {
        for rw in block.reweights() {
            let mut tape = Tape::new();
            let w = normalize_weights(&mut tape, store, rw.raw)?;
            let sum: f64 = tape.value(w).data().iter().sum();
            ensure!((sum - 1.0).abs() <= 1e-12, "re-weights sum to {sum}");
        }
        Ok(())
    };
    check(&store)?;
    let pyr = make_synthetic_pyramid(seed, 1, 2, 16, 16, 2, 4)?;
    let mut tape = Tape::new();
    let pv = pyr.to_tape(&mut tape, false);
    let out = block.forward(&mut tape, &store, &pv)?;
    let mut loss = tape.sum(out.levels()[0]);
    for &v in &out.levels()[1..] {
        let s = tape.sum(v);
        loss = tape.add(loss, s)?;
    }
    let grads = tape.backward(loss)?;
    store.zero_grad();
    store.accumulate_grads(&tape, &grads);
    Sgd::new(0.5, 0.9, 1e-4).step(&mut store);
    check(&store)
}

/// A constant map crops to that constant for any box inside the image.
pub fn roi_align_constancy(seed: u64) -> Result<()> {
    let mut r = rng(seed, 4);
    let (h, w) = (r.random_range(2..=9), r.random_range(2..=9));
    let value = r.random_range(-10.0..10.0);
    let x = Tensor::full([2, 3, h, w], value);
    let scale = [1.0, 0.5, 0.25][r.random_range(0..3)];
    let (ih, iw) = (h as f64 / scale, w as f64 / scale);
    let x1 = r.random_range(0.0..iw - 1.0);
    let y1 = r.random_range(0.0..ih - 1.0);
    let roi = RoiBox::new(
        1,
        x1,
        y1,
        r.random_range(x1 + 0.1..=iw),
        r.random_range(y1 + 0.1..=ih),
    );
    let params = RoiAlignParams {
        out_size: r.random_range(1..=7),
        sampling_ratio: r.random_range(1..=3),
        spatial_scale: scale,
    };
    let y = roi_align_tensor(&x, &[roi], params)?;
    for &v in y.data() {
        ensure!(
            (v - value).abs() <= 1e-12,
            "roi {roi:?} at {params:?}: {v} vs {value}"
        );
    }
    Ok(())
}

pub type Invariant = (&'static str, fn(u64) -> Result<()>);

pub const INVARIANTS: [Invariant; 4] = [
    ("scp rank-1 residual and gate normalization", scp_rank_one),
    ("hroie saturation limits", hroie_saturation),
    ("softmax re-weight sums", softmax_sums),
    ("roi_align constancy", roi_align_constancy),
];

/// Runs `check` on `seeds` consecutive seeds, reporting the first failure.
pub fn run_seeds(check: fn(u64) -> Result<()>, first: u64, seeds: u64) -> Result<()> {
    for s in first..first + seeds {
        check(s).map_err(|e| e.context(format!("seed {s}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_hold_on_a_few_seeds() {
        for (name, f) in INVARIANTS {
            run_seeds(f, 0, 5).unwrap_or_else(|e| panic!("{name}: {e:#}"));
        }
    }
}
