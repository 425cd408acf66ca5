//! Finite-difference gradient checks over every differentiable op and the
//! module composites, on tiny double-precision instances.

use anyhow::Result;
use ctxagg_core::densefpn::{DenseBlock, DenseFpnConfig};
use ctxagg_core::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use ctxagg_core::hroie::{Hroie, HroieConfig, Task};
use ctxagg_core::ops::{RoiAlignParams, RoiBox};
use ctxagg_core::param::{InitSpec, ParamKind, ParamRegistry};
use ctxagg_core::pyramid::{FeaturePyramid, LateralReducer};
use ctxagg_core::scp::{CaBlock, Scp, ScpConfig};
use ctxagg_core::{ParamId, ParamStore, Result as CoreResult, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub module: &'static str,
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

/// Fixed, sign-varying projection weights so that the checked scalar depends on
/// every output entry differently.
fn probe(tape: &mut Tape, y: Var) -> CoreResult<Var> {
    let shape = tape.shape(y).clone();
    let w = Tensor::from_fn(shape, |i| (1.3 * i as f64 + 0.7).sin() + 0.25);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn probe_all(tape: &mut Tape, ys: &[Var]) -> CoreResult<Var> {
    let mut acc = probe(tape, ys[0])?;
    for &y in &ys[1..] {
        let p = probe(tape, y)?;
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

struct Case {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Case {
            store: ParamStore::new(seed),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        }
    }

    /// Registers a trainable input filled with `U(-1, 1)`, nudged away from zero so
    /// kinks (ReLU, max ties, smooth-L1 knee) are not straddled by the step.
    fn input(&mut self, name: &str, shape: impl Into<Shape>) -> ParamId {
        let shape = shape.into();
        let id = self
            .store
            .register(
                name.to_string(),
                shape.clone(),
                ParamKind::Weight,
                InitSpec::Zeros,
            )
            .expect("unique case input name");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let u: f64 = rng.random_range(-1.0..1.0);
            u + 0.05 * u.signum()
        });
        self.store.set(id, t).expect("shape matches");
        id
    }

    /// Overwrites every registered parameter under `prefix` with random values of scale `s`.
    fn randomize(&mut self, prefix: &str, s: f64) {
        let rng = &mut self.rng;
        self.store.fill_with(prefix, |_, _| rng.random_range(-s..s));
    }

    fn check(
        mut self,
        f: impl Fn(&mut Tape, &ParamStore) -> CoreResult<Var>,
    ) -> Result<GradCheckReport> {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        Ok(grad_check(&mut self.store, &ids, DEFAULT_EPS, f)?)
    }
}

fn conv_case(
    seed: u64,
    x: [usize; 4],
    k: [usize; 4],
    stride: usize,
    pad: usize,
    relu: bool,
) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let xi = c.input("x", x);
    let ki = c.input("k", k);
    let bi = c.input("b", [k[0]]);
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let (xv, kv, bv) = (
            tape.param(store, xi),
            tape.param(store, ki),
            tape.param(store, bi),
        );
        let mut y = tape.conv2d(xv, kv, Some(bv), stride, pad)?;
        if relu {
            y = tape.relu(y);
        }
        probe(tape, y)
    })
}

fn unary_case(
    seed: u64,
    shape: [usize; 4],
    f: fn(&mut Tape, Var) -> CoreResult<Var>,
) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let xi = c.input("x", shape);
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let x = tape.param(store, xi);
        let y = f(tape, x)?;
        probe(tape, y)
    })
}

fn binary_case(seed: u64, a: [usize; 4], b: [usize; 4], mul: bool) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let ai = c.input("a", a);
    let bi = c.input("b", b);
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let (x, y) = (tape.param(store, ai), tape.param(store, bi));
        let z = if mul {
            tape.mul(x, y)?
        } else {
            tape.add(x, y)?
        };
        probe(tape, z)
    })
}

fn roi_case(seed: u64) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let xi = c.input("x", [2, 2, 6, 7]);
    let rois = [
        RoiBox::new(0, 1.5, 2.0, 6.5, 7.0),
        RoiBox::new(1, -0.7, 0.3, 3.2, 10.9),
        RoiBox::new(1, 4.1, 1.2, 6.9, 5.8),
    ];
    let p = RoiAlignParams {
        out_size: 3,
        sampling_ratio: 2,
        spatial_scale: 0.9,
    };
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let x = tape.param(store, xi);
        let y = tape.roi_align(x, &rois, p)?;
        probe(tape, y)
    })
}

fn loss_case(seed: u64, kind: usize) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let xi = c.input("x", [5, 4]);
    let x0 = c.store.value(xi).data().to_vec();
    let targets: Vec<f64> = match kind {
        // residuals of 0.4, 0.6, 2.1 and 1.5 stay clear of the smooth-L1 knee at 1
        1 => x0
            .iter()
            .enumerate()
            .map(|(i, x)| x - [0.4, -0.6, 2.1, -1.5][i % 4])
            .collect(),
        _ => (0..20).map(|i| ((i * 7) % 5) as f64 / 4.0).collect(),
    };
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let x = tape.param(store, xi);
        Ok(match kind {
            0 => tape.cross_entropy(x, &[0, 3, 1, 2, 3])?,
            1 => tape.smooth_l1(x, &targets, 1.0, 3.0)?,
            _ => tape.bce_with_logits(x, &targets, 7.0)?,
        })
    })
}

fn shape_case(seed: u64, kind: usize) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let ai = c.input("a", [2, 3, 2, 3]);
    let bi = c.input("b", [2, 2, 2, 3]);
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let (a, b) = (tape.param(store, ai), tape.param(store, bi));
        match kind {
            0 => {
                let y = tape.concat_channels(&[a, b, a])?;
                probe(tape, y)
            }
            1 => {
                let y = tape.sum_trailing(a, 2)?;
                probe(tape, y)
            }
            2 => {
                let y = tape.reshape(b, [4, 6])?;
                let y = tape.gather_rows(y, &[3, 0, 3, 2])?;
                probe(tape, y)
            }
            3 => {
                let y = tape.mul(a, a)?;
                Ok(tape.mean(y))
            }
            _ => {
                let y = tape.concat(&[a, b], 1)?;
                let y = tape.scale(y, -1.7);
                probe(tape, y)
            }
        }
    })
}

fn densefpn_case(seed: u64) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let cfg = DenseFpnConfig {
        depth: 1,
        channels: 8,
        mid_channels: 4,
        levels: [2, 4],
    };
    let block = DenseBlock::new(&mut c.store, "dense", &cfg)?;
    c.randomize("dense", 0.5);
    let ins: Vec<ParamId> = (2..=4)
        .map(|l| c.input(&format!("in/l{l}"), [1, 8, 16 >> l, 16 >> l]))
        .collect();
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let levels: Vec<Var> = ins.iter().map(|&id| tape.param(store, id)).collect();
        let pyr = FeaturePyramid::new(2, levels, (16, 16))?;
        let out = block.forward(tape, store, &pyr)?;
        probe_all(tape, out.levels())
    })
}

fn cablock_case(seed: u64, reduction: usize) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let block = CaBlock::new(&mut c.store, "ca", 8, reduction)?;
    c.randomize("ca", 0.5);
    let xi = c.input("p", [1, 8, 3, 3]);
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let p = tape.param(store, xi);
        let q = block.forward(tape, store, p)?;
        probe(tape, q)
    })
}

fn scp_case(seed: u64) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let scp = Scp::new(
        &mut c.store,
        "scp",
        ScpConfig {
            channels: 4,
            levels: vec![2, 3],
            reduction: 2,
        },
    )?;
    c.randomize("scp", 0.5);
    let ins: Vec<ParamId> = (2..=4)
        .map(|l| c.input(&format!("in/l{l}"), [2, 4, 16 >> l, 16 >> l]))
        .collect();
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let levels: Vec<Var> = ins.iter().map(|&id| tape.param(store, id)).collect();
        let pyr = FeaturePyramid::new(2, levels, (16, 16))?;
        let out = scp.forward(tape, store, &pyr)?;
        probe_all(tape, out.levels())
    })
}

fn hroie_case(seed: u64, task: Task) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let cfg = HroieConfig {
        channels: 3,
        levels: [2, 4],
        det_size: 2,
        mask_size: 3,
        sampling_ratio: 2,
    };
    let h = Hroie::new(&mut c.store, "hroie", cfg)?;
    c.randomize("hroie", 0.6);
    let ins: Vec<ParamId> = (2..=4)
        .map(|l| c.input(&format!("in/l{l}"), [2, 3, 32 >> l, 32 >> l]))
        .collect();
    let rois = [
        RoiBox::new(0, 3.3, 5.1, 20.2, 17.9),
        RoiBox::new(1, 10.5, 0.0, 31.0, 12.4),
    ];
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let levels: Vec<Var> = ins.iter().map(|&id| tape.param(store, id)).collect();
        let pyr = FeaturePyramid::new(2, levels, (32, 32))?;
        let f = h.extract(tape, store, &pyr, &rois, task)?;
        probe(tape, f.output)
    })
}

fn reducer_case(seed: u64) -> Result<GradCheckReport> {
    let mut c = Case::new(seed);
    let red = LateralReducer::new(&mut c.store, "red", 2, &[3, 5], 4, 1)?;
    c.randomize("red", 0.5);
    let a = c.input("c2", [1, 3, 8, 8]);
    let b = c.input("c3", [1, 5, 4, 4]);
    c.check(move |tape: &mut Tape, store: &ParamStore| {
        let levels = vec![tape.param(store, a), tape.param(store, b)];
        let pyr = FeaturePyramid::new(2, levels, (32, 32))?;
        let out = red.reduce_laterals(tape, store, &pyr)?;
        probe_all(tape, out.levels())
    })
}

/// Runs every case; errors only on construction failures, not on tolerance misses.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut push =
        |module: &'static str, name: &'static str, r: Result<GradCheckReport>| -> Result<()> {
            let report = r.map_err(|e| e.context(format!("{module}/{name}")))?;
            out.push(GradCase {
                module,
                name,
                report,
            });
            Ok(())
        };
    let s = seed;
    push(
        "ops",
        "conv2d 3x3 s1 p1 + relu",
        conv_case(s, [2, 3, 5, 4], [4, 3, 3, 3], 1, 1, true),
    )?;
    push(
        "ops",
        "conv2d 3x3 s2 p1",
        conv_case(s + 1, [1, 2, 7, 6], [3, 2, 3, 3], 2, 1, false),
    )?;
    push(
        "ops",
        "conv2d 1x1",
        conv_case(s + 2, [2, 4, 3, 3], [5, 4, 1, 1], 1, 0, false),
    )?;
    push(
        "ops",
        "conv2d 1x1 on 1x1 maps",
        conv_case(s + 3, [3, 6, 1, 1], [4, 6, 1, 1], 1, 0, false),
    )?;
    push(
        "ops",
        "relu",
        unary_case(s + 4, [2, 3, 3, 3], |t, x| Ok(t.relu(x))),
    )?;
    push(
        "ops",
        "sigmoid",
        unary_case(s + 5, [2, 3, 3, 3], |t, x| Ok(t.sigmoid(x))),
    )?;
    push(
        "ops",
        "maxpool 2/2",
        unary_case(s + 6, [2, 2, 4, 6], |t, x| t.maxpool2d(x, 2, 2)),
    )?;
    push(
        "ops",
        "maxpool 3/2",
        unary_case(s + 7, [1, 2, 7, 5], |t, x| t.maxpool2d(x, 3, 2)),
    )?;
    push(
        "ops",
        "bilinear up",
        unary_case(s + 8, [1, 2, 3, 3], |t, x| t.bilinear_resize(x, 6, 5)),
    )?;
    push(
        "ops",
        "bilinear down",
        unary_case(s + 9, [2, 1, 5, 6], |t, x| t.bilinear_resize(x, 3, 2)),
    )?;
    push(
        "ops",
        "softmax axis 1",
        unary_case(s + 10, [2, 4, 2, 3], |t, x| t.softmax(x, 1)),
    )?;
    push(
        "ops",
        "softmax axis 3",
        unary_case(s + 11, [2, 2, 2, 5], |t, x| t.softmax(x, 3)),
    )?;
    push(
        "ops",
        "add broadcast",
        binary_case(s + 12, [2, 3, 4, 4], [1, 3, 1, 1], false),
    )?;
    push(
        "ops",
        "mul broadcast",
        binary_case(s + 13, [2, 3, 4, 4], [2, 1, 4, 4], true),
    )?;
    push("ops", "roi_align", roi_case(s + 14))?;
    push("ops", "cross_entropy", loss_case(s + 15, 0))?;
    push("ops", "smooth_l1", loss_case(s + 16, 1))?;
    push("ops", "bce_with_logits", loss_case(s + 17, 2))?;
    push("ops", "concat_channels", shape_case(s + 18, 0))?;
    push("ops", "sum_trailing", shape_case(s + 19, 1))?;
    push("ops", "reshape + gather_rows", shape_case(s + 20, 2))?;
    push("ops", "mean", shape_case(s + 21, 3))?;
    push("ops", "concat + scale", shape_case(s + 22, 4))?;
    push(
        "feature-pyramid",
        "lateral reducer + extra level",
        reducer_case(s + 23),
    )?;
    push(
        "densefpn",
        "D=1 block, 8 channels, 3 levels",
        densefpn_case(s + 24),
    )?;
    push("scp", "cablock 1x8x3x3, r=1", cablock_case(s + 25, 1))?;
    push("scp", "cablock 1x8x3x3, r=2", cablock_case(s + 26, 2))?;
    push("scp", "scp over 2 of 3 levels", scp_case(s + 27))?;
    push(
        "hroie",
        "roi_align + bottom-up fuse",
        hroie_case(s + 28, Task::Detection),
    )?;
    push(
        "hroie",
        "roi_align + top-down fuse",
        hroie_case(s + 29, Task::Mask),
    )?;
    Ok(out)
}

/// Worst relative error per module, in first-seen order.
pub fn per_module(cases: &[GradCase]) -> Vec<(&'static str, f64, usize)> {
    let mut rows: Vec<(&'static str, f64, usize)> = Vec::new();
    for c in cases {
        match rows.iter_mut().find(|r| r.0 == c.module) {
            Some(r) => {
                r.1 = r.1.max(c.report.max_rel_error);
                r.2 += c.report.coordinates;
            }
            None => rows.push((c.module, c.report.max_rel_error, c.report.coordinates)),
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_weights_are_nonzero() {
        let mut t = Tape::new();
        let y = t.constant(Tensor::full([50], 1.0));
        let s = probe(&mut t, y).unwrap();
        assert!(t.value(s).data()[0].abs() > 1.0);
    }

    #[test]
    fn conv_case_passes() {
        let r = conv_case(9, [1, 2, 4, 4], [2, 2, 3, 3], 1, 1, true).unwrap();
        assert!(r.max_rel_error < TOLERANCE, "{r:?}");
        assert_eq!(r.coordinates, 32 + 36 + 2);
    }
}
