//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any gating criterion fails.

use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use ctxagg::gradsuite::{gradient_suite, per_module, TOLERANCE};
use ctxagg::invariants::{run_seeds, INVARIANTS};
use ctxagg::oracle;
use ctxagg_core::accounting::{
    count_macs, count_params, densefpn_block_delta, ModuleSpec, RoiBudget,
};
use ctxagg_core::densefpn::DenseFpnConfig;
use ctxagg_core::hroie::HroieConfig;
use ctxagg_core::ops::{
    bilinear_resize_tensor, maxpool2d_tensor, roi_align_tensor, RoiAlignParams, RoiBox,
};
use ctxagg_core::scp::{CaBlock, ScpConfig};
use ctxagg_core::toy::boxes::Bbox;
use ctxagg_core::toy::{
    evaluate, soft_nms, train, ModuleToggles, NmsMode, ProposalMode, SoftNmsConfig, ToyConfig,
};
use ctxagg_core::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HROIE_REFERENCE: f64 = 1.05e6;
const SCP_REFERENCE: f64 = 0.66e6;
const DENSEFPN_REFERENCE: f64 = 4.28e6;
const SCP_MACS_REFERENCE: f64 = 1.45e9;
const INVARIANT_SEEDS: u64 = 100;
const ORACLE_TOLERANCE: f64 = 1e-12;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];

struct Gate {
    failures: usize,
}

impl Gate {
    fn record(&mut self, id: &str, limit: Duration, f: impl FnOnce() -> Result<String>) {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let verdict = match result {
            Ok(detail) if took <= limit => format!("PASS  {id}  {detail}  [{:.2?}]", took),
            Ok(detail) => format!("FAIL  {id}  {detail}  [{:.2?} exceeds {:?}]", took, limit),
            Err(e) => format!("FAIL  {id}  {e:#}  [{:.2?}]", took),
        };
        if verdict.starts_with("FAIL") {
            self.failures += 1;
        }
        println!("{verdict}");
    }

    fn info(&self, id: &str, f: impl FnOnce() -> Result<String>) {
        match f() {
            Ok(detail) => println!("INFO  {id}  {detail}"),
            Err(e) => println!("INFO  {id}  error: {e:#}"),
        }
    }
}

fn rel(measured: f64, reference: f64) -> f64 {
    (measured - reference).abs() / reference
}

fn hroie_params() -> Result<String> {
    let p = count_params(&ModuleSpec::Hroie(HroieConfig::default()))?;
    ensure!(
        p.weights == 1_048_576,
        "gate weights {} != 1048576",
        p.weights
    );
    let e = rel(p.total as f64, HROIE_REFERENCE);
    ensure!(
        e <= 0.01,
        "total {} is {:.3}% from 1.05M",
        p.total,
        e * 100.0
    );
    Ok(format!(
        "weights {} total {} ({:.3}% from 1.05M, tol 1%)",
        p.weights,
        p.total,
        e * 100.0
    ))
}

fn scp_params() -> Result<String> {
    let p = count_params(&ModuleSpec::Scp(ScpConfig::default()))?;
    ensure!(p.weights == 657_920, "weights {} != 657920", p.weights);
    let e = rel(p.total as f64, SCP_REFERENCE);
    ensure!(
        e <= 0.02,
        "total {} is {:.3}% from 0.66M",
        p.total,
        e * 100.0
    );
    Ok(format!(
        "weights {} total {} ({:.3}% from 0.66M, tol 2%)",
        p.weights,
        p.total,
        e * 100.0
    ))
}

fn densefpn_growth() -> Result<String> {
    let base = DenseFpnConfig::default();
    let totals = (0..=7)
        .map(|d| {
            Ok(if d == 0 {
                0
            } else {
                count_params(&ModuleSpec::DenseFpn(DenseFpnConfig {
                    depth: d,
                    ..base.clone()
                }))?
                .total
            })
        })
        .collect::<Result<Vec<u64>>>()?;
    let steps: Vec<u64> = totals.windows(2).map(|w| w[1] - w[0]).collect();
    ensure!(
        steps.iter().all(|&s| s == steps[0]),
        "per-block steps differ: {steps:?}"
    );
    let delta = densefpn_block_delta(&base)?;
    ensure!(
        delta == steps[0],
        "block delta {delta} vs step {}",
        steps[0]
    );
    let e = rel(delta as f64, DENSEFPN_REFERENCE);
    ensure!(
        e <= 0.05,
        "per-block delta {delta} is {:.2}% from 4.28M",
        e * 100.0
    );
    Ok(format!(
        "step {} for D=1..7, mid 192 ({:.2}% from 4.28M, tol 5%)",
        steps[0],
        e * 100.0
    ))
}

fn gradients() -> Result<String> {
    let cases = gradient_suite(0)?;
    let worst = cases
        .iter()
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    let failing: Vec<String> = cases
        .iter()
        .filter(|c| !c.passes())
        .map(|c| format!("{}/{}", c.module, c.name))
        .collect();
    ensure!(
        failing.is_empty(),
        "over {TOLERANCE:e}: {}",
        failing.join(", ")
    );
    let modules: Vec<String> = per_module(&cases)
        .iter()
        .map(|(m, e, _)| format!("{m} {e:.1e}"))
        .collect();
    Ok(format!(
        "{} cases, max rel err {worst:.2e} < {TOLERANCE:e} ({})",
        cases.len(),
        modules.join(", ")
    ))
}

fn invariants() -> Result<String> {
    for (name, check) in INVARIANTS {
        run_seeds(check, 0, INVARIANT_SEEDS).map_err(|e| e.context(name))?;
    }
    Ok(format!(
        "{} invariants x {INVARIANT_SEEDS} seeds",
        INVARIANTS.len()
    ))
}

fn random(r: &mut ChaCha8Rng, shape: impl Into<ctxagg_core::Shape>) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn within(what: &str, a: &[f64], b: &[f64], worst: &mut f64) -> Result<()> {
    ensure!(
        a.len() == b.len(),
        "{what}: {} vs {} values",
        a.len(),
        b.len()
    );
    let d = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    *worst = worst.max(d);
    ensure!(d <= ORACLE_TOLERANCE, "{what}: max abs diff {d:e}");
    Ok(())
}

fn oracles() -> Result<String> {
    let mut worst = 0.0;
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let (cin, cout, k) = (
            r.random_range(1..=3),
            r.random_range(1..=3),
            [1, 3][r.random_range(0..2)],
        );
        let (stride, pad) = (r.random_range(1..=2), r.random_range(0..=k / 2));
        let dims = [
            r.random_range(1..=2),
            cin,
            r.random_range(k..=7),
            r.random_range(k..=7),
        ];
        let x = random(&mut r, dims);
        let kern = random(&mut r, [cout, cin, k, k]);
        let bias: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let (xv, kv, bv) = (
            t.constant(x.clone()),
            t.constant(kern.clone()),
            t.constant(Tensor::new([cout], bias.clone())?),
        );
        let y = t.conv2d(xv, kv, Some(bv), stride, pad)?;
        within(
            "conv2d",
            t.value(y).data(),
            oracle::conv2d(&x, &kern, Some(&bias), stride, pad).data(),
            &mut worst,
        )?;

        let (win, st) = (r.random_range(1..=3), r.random_range(1..=2));
        let dims = [1, 2, r.random_range(win..=8), r.random_range(win..=8)];
        let x = random(&mut r, dims);
        within(
            "maxpool2d",
            maxpool2d_tensor(&x, win, st)?.data(),
            oracle::maxpool2d(&x, win, st).data(),
            &mut worst,
        )?;

        let dims = [1, 2, r.random_range(1..=6), r.random_range(1..=6)];
        let x = random(&mut r, dims);
        let (oh, ow) = (r.random_range(1..=9), r.random_range(1..=9));
        within(
            "bilinear_resize",
            bilinear_resize_tensor(&x, oh, ow)?.data(),
            oracle::bilinear_resize(&x, oh, ow).data(),
            &mut worst,
        )?;

        let x = random(&mut r, [2, 2, 8, 8]);
        let scale = [1.0, 0.5, 0.25][r.random_range(0..3)];
        let side = 8.0 / scale;
        let x1 = r.random_range(-2.0..side - 2.0);
        let y1 = r.random_range(-2.0..side - 2.0);
        let b = [
            x1,
            y1,
            x1 + r.random_range(0.5..side / 2.0),
            y1 + r.random_range(0.5..side / 2.0),
        ];
        let (s, ratio, item) = (
            r.random_range(1..=4),
            r.random_range(1..=3),
            r.random_range(0..2),
        );
        let p = RoiAlignParams {
            out_size: s,
            sampling_ratio: ratio,
            spatial_scale: scale,
        };
        let y = roi_align_tensor(&x, &[RoiBox::new(item, b[0], b[1], b[2], b[3])], p)?;
        within(
            "roi_align",
            y.data(),
            oracle::roi_align(&x, item, b, s, ratio, scale).data(),
            &mut worst,
        )?;

        let n = r.random_range(1..=30);
        let boxes: Vec<Bbox> = (0..n)
            .map(|_| {
                let (x, y) = (r.random_range(0.0..50.0), r.random_range(0.0..50.0));
                [
                    x,
                    y,
                    x + r.random_range(2.0..25.0),
                    y + r.random_range(2.0..25.0),
                ]
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        for mode in [NmsMode::Linear, NmsMode::Gaussian] {
            let cfg = SoftNmsConfig {
                mode,
                ..SoftNmsConfig::default()
            };
            let got = soft_nms(&boxes, &scores, &cfg);
            let want = oracle::soft_nms(&boxes, &scores, &cfg);
            ensure!(
                got.iter().map(|g| g.0).eq(want.iter().map(|w| w.0)),
                "soft-nms {mode:?}: kept order differs"
            );
            let gs: Vec<f64> = got.iter().map(|g| g.1).collect();
            let ws: Vec<f64> = want.iter().map(|w| w.1).collect();
            within("soft_nms", &gs, &ws, &mut worst)?;
        }

        let c = r.random_range(1..=5);
        let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
        let mut store = ParamStore::new(0);
        let block = CaBlock::new(&mut store, "ca", c, 1)?;
        store.fill_with("ca", |_, _| r.random_range(-1.0..1.0));
        let get = |n: &str| {
            store
                .value(store.id(&format!("ca/{n}")).expect("cablock parameter"))
                .data()
                .to_vec()
        };
        let wt = oracle::CaWeights {
            key: get("key/weight"),
            key_bias: get("key/bias")[0],
            value: get("value/weight"),
            value_bias: get("value/bias"),
            gate: get("gate/weight"),
            gate_bias: get("gate/bias")[0],
            refine: get("refine/weight"),
            refine_bias: get("refine/bias"),
        };
        let x = random(&mut r, [2, c, h, w]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let q = block.forward(&mut t, &store, xv)?;
        let per = c * h * w;
        for b in 0..2 {
            let o = oracle::cablock(&x.data()[b * per..(b + 1) * per], c, h * w, &wt);
            within(
                "cablock",
                &t.value(q).data()[b * per..(b + 1) * per],
                &o.output,
                &mut worst,
            )?;
        }
    }
    Ok(format!(
        "6 ops x 20 random instances, max abs diff {worst:.1e} <= {ORACLE_TOLERANCE:e}"
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Convergence {
    full_final: Vec<f64>,
    lines: Vec<String>,
}

fn convergence() -> Result<Convergence> {
    let full = ToyConfig::default();
    let baseline = ToyConfig {
        modules: ModuleToggles::NONE,
        ..full.clone()
    };
    let w = full.train.loss_window;
    let mut out = Convergence {
        full_final: Vec::new(),
        lines: Vec::new(),
    };
    let mut base_final = Vec::new();
    for seed in TRAIN_SEEDS {
        let log = train(&full, seed)?.log;
        let (a, b) = (
            log.initial_loss(w).unwrap_or(f64::NAN),
            log.final_loss(w).unwrap_or(f64::NAN),
        );
        ensure!(
            b <= 0.5 * a,
            "seed {seed}: final {b:.4} > 0.5 x initial {a:.4}"
        );
        out.lines
            .push(format!("seed {seed} {a:.3}->{b:.3} ({:.2})", b / a));
        out.full_final.push(b);
        base_final.push(
            train(&baseline, seed)?
                .log
                .final_loss(w)
                .unwrap_or(f64::NAN),
        );
    }
    let (mf, mb) = (median(out.full_final.clone()), median(base_final.clone()));
    ensure!(
        mf <= 1.1 * mb,
        "full median {mf:.4} > 1.1 x baseline median {mb:.4}"
    );
    out.lines.push(format!(
        "median final full {mf:.3} vs baseline {mb:.3} (limit {:.3})",
        1.1 * mb
    ));
    Ok(out)
}

fn main() {
    let mut gate = Gate { failures: 0 };
    gate.record("1 hroie params", Duration::from_secs(1), hroie_params);
    gate.record("2 scp params", Duration::from_secs(1), scp_params);
    gate.record(
        "3 densefpn linear growth",
        Duration::from_secs(5),
        densefpn_growth,
    );
    gate.record("4 gradient suite", Duration::from_secs(120), gradients);
    gate.record(
        "5 structural invariants",
        Duration::from_secs(120),
        invariants,
    );
    gate.record("6 oracle equivalence", Duration::from_secs(60), oracles);
    gate.record("7 toy convergence", Duration::from_secs(30 * 60), || {
        convergence().map(|c| c.lines.join("; "))
    });
    gate.info("8 scp MACs at 512x512", || {
        let r = count_macs(
            &ModuleSpec::Scp(ScpConfig::default()),
            (512, 512),
            RoiBudget::default(),
        )?;
        let (e1, e2) = (
            rel(r.macs as f64, SCP_MACS_REFERENCE),
            rel(r.flops_2x as f64, SCP_MACS_REFERENCE),
        );
        let within = match (e1 <= 0.25, e2 <= 0.25) {
            (true, _) => "within 25% under the MAC convention (one multiply-add counted once)",
            (false, true) => "within 25% under the 2xMAC convention",
            _ => "outside 25% under both conventions",
        };
        Ok(format!(
            "{} MACs ({:.2}% from 1.45G), {} 2xMACs ({:.1}%): {within}",
            r.macs,
            e1 * 100.0,
            r.flops_2x,
            e2 * 100.0
        ))
    });

    gate.record(
        "ablation matrix, 8 configs x 50 iterations",
        Duration::from_secs(30 * 60),
        || {
            let mut finals = Vec::new();
            for on in ModuleToggles::all() {
                let mut cfg = ToyConfig {
                    modules: on,
                    ..ToyConfig::default()
                };
                cfg.train.iterations = 50;
                let log = train(&cfg, 0)?.log;
                ensure!(
                    log.records.iter().all(|r| r.total.is_finite()),
                    "{on:?}: non-finite loss"
                );
                finals.push(format!(
                    "{:.3}",
                    log.final_loss(cfg.train.loss_window).unwrap_or(f64::NAN)
                ));
            }
            Ok(format!("all finite; final losses {}", finals.join(" ")))
        },
    );
    gate.record(
        "untrained recall below 0.1",
        Duration::from_secs(5 * 60),
        || {
            let cfg = ToyConfig::default();
            let mut store = ParamStore::new(0);
            let model = ctxagg_core::toy::ToyDetector::new(&mut store, &cfg)?;
            let m = evaluate(&model, &store, &cfg, ProposalMode::Grid)?;
            ensure!(m.recall < 0.1, "recall {}", m.recall);
            Ok(format!("recall {:.3} over {} scenes", m.recall, m.scenes))
        },
    );
    gate.record(
        "recall does not improve with proposal jitter",
        Duration::from_secs(10 * 60),
        || {
            let cfg = ToyConfig::default();
            let done = train(&cfg, 0)?;
            let at = |fraction| {
                evaluate(
                    &done.model,
                    &done.store,
                    &cfg,
                    ProposalMode::Jitter { fraction, seed: 0 },
                )
            };
            let (clean, noisy) = (at(0.0)?, at(0.1)?);
            ensure!(
                clean.recall >= noisy.recall,
                "recall {} at jitter 0 < {} at jitter 0.1",
                clean.recall,
                noisy.recall
            );
            Ok(format!(
                "recall {:.3} (mask IoU {:.3}) at jitter 0 vs {:.3} ({:.3}) at 0.1",
                clean.recall, clean.mean_mask_iou, noisy.recall, noisy.mean_mask_iou
            ))
        },
    );

    if gate.failures > 0 {
        println!("{} criteria failed", gate.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
