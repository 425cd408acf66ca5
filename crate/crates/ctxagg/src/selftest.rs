//! Catalogue of worked examples for every module, each a small self-contained
//! check against hand arithmetic or a naive oracle.

use std::f64::consts::{LN_2, PI};

use anyhow::{bail, ensure, Context, Result};
use ctxagg_core::accounting::{
    count_macs, count_params, densefpn_block_delta, ModuleSpec, RoiBudget,
};
use ctxagg_core::densefpn::{normalize_weights, DenseBlock, DenseFpn, DenseFpnConfig};
use ctxagg_core::gradcheck::grad_check;
use ctxagg_core::hroie::{fuse, FusionCell, FusionPath, Hroie, HroieConfig, Task};
use ctxagg_core::nn::ConvSpec;
use ctxagg_core::ops::{
    bilinear_resize_tensor, maxpool2d_tensor, roi_align_tensor, softmax_tensor, RoiAlignParams,
    RoiBox,
};
use ctxagg_core::optim::Sgd;
use ctxagg_core::param::{InitSpec, ParamKind, ParamRegistry, ShapeRegistry};
use ctxagg_core::pyramid::{level_size, make_synthetic_pyramid, FeaturePyramid, LateralReducer};
use ctxagg_core::scp::{CaBlock, Scp, ScpConfig};
use ctxagg_core::toy::boxes::Bbox;
use ctxagg_core::toy::{
    assign_targets, compute_losses, evaluate, evaluate_predictions, generate_scene, soft_nms,
    train, ModuleToggles, Prediction, ProposalMode, SceneConfig, SoftNmsConfig, ToyConfig,
    ToyDetector, NUM_CLASSES,
};
use ctxagg_core::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle;

pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub run: fn() -> Result<()>,
}

#[derive(Debug)]
pub struct Outcome {
    pub module: &'static str,
    pub name: &'static str,
    pub error: Option<String>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: impl Into<ctxagg_core::Shape>) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared arrays differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn close(what: &str, a: &[f64], b: &[f64], tol: f64) -> Result<()> {
    ensure!(
        a.len() == b.len(),
        "{what}: length {} vs {}",
        a.len(),
        b.len()
    );
    let d = max_diff(a, b);
    ensure!(d <= tol, "{what}: max abs difference {d:e} exceeds {tol:e}");
    Ok(())
}

fn set(store: &mut ParamStore, name: &str, values: &[f64]) -> Result<()> {
    let id = store
        .id(name)
        .with_context(|| format!("no parameter {name}"))?;
    let shape = store.value(id).shape().clone();
    store.set(id, Tensor::new(shape, values.to_vec())?)?;
    Ok(())
}

fn get(store: &ParamStore, name: &str) -> Result<Vec<f64>> {
    let id = store
        .id(name)
        .with_context(|| format!("no parameter {name}"))?;
    Ok(store.value(id).data().to_vec())
}

fn conv_on_tape(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k.clone());
    let bv = bias.map(|b| t.constant(Tensor::new([b.len()], b.to_vec()).expect("1-d")));
    let y = t.conv2d(xv, kv, bv, stride, pad)?;
    Ok(t.value(y).clone())
}

// ---- core ----------------------------------------------------------------

fn conv_pointwise_scaling() -> Result<()> {
    let y = conv_on_tape(
        &Tensor::full([1, 1, 3, 3], 1.0),
        &Tensor::full([1, 1, 1, 1], 2.0),
        None,
        1,
        0,
    )?;
    ensure!(
        y.dims() == [1, 1, 3, 3] && y.data().iter().all(|&v| v == 2.0),
        "got {:?}",
        y.data()
    );
    Ok(())
}

fn conv_full_window_sum() -> Result<()> {
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    let y = conv_on_tape(&x, &Tensor::full([1, 1, 3, 3], 1.0), None, 1, 1)?;
    ensure!(y.data()[0] == 10.0, "output[0,0,0,0] = {}", y.data()[0]);
    Ok(())
}

fn conv_matches_oracle() -> Result<()> {
    let mut r = rng(11);
    let x = random(&mut r, [1, 2, 5, 5]);
    let k = random(&mut r, [3, 2, 3, 3]);
    let b = [0.3, -0.2, 0.1];
    let y = conv_on_tape(&x, &k, Some(&b), 2, 1)?;
    let o = oracle::conv2d(&x, &k, Some(&b), 2, 1);
    ensure!(
        y.dims() == o.dims(),
        "shape {:?} vs {:?}",
        y.dims(),
        o.dims()
    );
    close("conv2d", y.data(), o.data(), 1e-12)
}

fn maxpool_examples() -> Result<()> {
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    ensure!(maxpool2d_tensor(&x, 2, 2)?.data() == [4.0]);
    let c = maxpool2d_tensor(&Tensor::full([1, 2, 4, 6], -1.5), 2, 2)?;
    ensure!(c.dims() == [1, 2, 2, 3] && c.data().iter().all(|&v| v == -1.5));
    ensure!(
        maxpool2d_tensor(&x, 3, 1).is_err(),
        "window larger than the map accepted"
    );
    let mut r = rng(12);
    let x = random(&mut r, [1, 1, 6, 6]);
    close(
        "maxpool",
        maxpool2d_tensor(&x, 2, 2)?.data(),
        oracle::maxpool2d(&x, 2, 2).data(),
        0.0,
    )
}

fn resize_examples() -> Result<()> {
    let mut r = rng(13);
    let x = random(&mut r, [2, 3, 5, 4]);
    ensure!(
        bilinear_resize_tensor(&x, 5, 4)? == x,
        "same-size resize is not bit-identical"
    );
    let c = bilinear_resize_tensor(&Tensor::full([1, 1, 3, 5], 2.5), 7, 2)?;
    close("constant resize", c.data(), &[2.5; 14], 1e-15)?;
    let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0])?;
    let y = bilinear_resize_tensor(&x, 4, 4)?;
    close(
        "2x2 -> 4x4",
        y.data(),
        oracle::bilinear_resize(&x, 4, 4).data(),
        1e-12,
    )?;
    // half-pixel rows read source rows -0.25, 0.25, 0.75, 1.25: first row 0, 0.25, 0.75, 1
    close("first row", &y.data()[..4], &[0.0, 0.25, 0.75, 1.0], 1e-15)?;
    let x = random(&mut r, [1, 2, 7, 3]);
    close(
        "7x3 -> 3x8",
        bilinear_resize_tensor(&x, 3, 8)?.data(),
        oracle::bilinear_resize(&x, 3, 8).data(),
        1e-12,
    )
}

fn softmax_examples() -> Result<()> {
    let sm = |v: &[f64]| -> Result<Vec<f64>> {
        Ok(softmax_tensor(&Tensor::new([v.len()], v.to_vec())?, 0)?.into_data())
    };
    close("[0,0,0]", &sm(&[0.0, 0.0, 0.0])?, &[1.0 / 3.0; 3], 1e-15)?;
    close(
        "[ln2,0]",
        &sm(&[LN_2, 0.0])?,
        &[2.0 / 3.0, 1.0 / 3.0],
        1e-15,
    )?;
    let got = sm(&[1.0, 2.0, 3.0])?;
    close(
        "[1,2,3] oracle",
        &got,
        &oracle::softmax(&[1.0, 2.0, 3.0]),
        1e-12,
    )?;
    close(
        "[1,2,3] digits",
        &got,
        &[0.09003057, 0.24472847, 0.66524096],
        5e-9,
    )
}

fn elementwise_examples() -> Result<()> {
    let mut t = Tape::new();
    let z = t.constant(Tensor::new([3], vec![0.0, -3.0, 3.0])?);
    let s = t.sigmoid(z);
    ensure!(t.value(s).data()[0] == 0.5);
    let r = t.relu(z);
    ensure!(t.value(r).data() == [0.0, 0.0, 3.0]);
    let a = t.constant(Tensor::full([1, 2, 2, 2], 1.0));
    let b = t.constant(Tensor::full([1, 3, 2, 2], 2.0));
    let c = t.concat_channels(&[a, b])?;
    let v = t.value(c);
    ensure!(v.dims() == [1, 5, 2, 2]);
    ensure!(v.data()[..8].iter().all(|&x| x == 1.0) && v.data()[8..].iter().all(|&x| x == 2.0));
    Ok(())
}

fn grad_check_square() -> Result<()> {
    let mut store = ParamStore::new(0);
    let id = store.register("x".into(), [3].into(), ParamKind::Weight, InitSpec::Zeros)?;
    store.set(id, Tensor::new([3], vec![1.0, 2.0, 3.0])?)?;
    let f = |t: &mut Tape, s: &ParamStore| {
        let x = t.param(s, id);
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    };
    let mut t = Tape::new();
    let out = f(&mut t, &store)?;
    let g = t.backward(out)?;
    let x = t
        .param_vars()
        .next()
        .map(|(_, v)| v)
        .context("param on tape")?;
    ensure!(
        g.wrt(x) == Some(&[2.0, 4.0, 6.0][..]),
        "analytic gradient {:?}",
        g.wrt(x)
    );
    let rep = grad_check(&mut store, &[id], 1e-5, f)?;
    ensure!(rep.max_rel_error < 1e-9, "error {}", rep.max_rel_error);
    Ok(())
}

fn sgd_examples() -> Result<()> {
    let mut store = ParamStore::new(0);
    let id = store.register(
        "p".into(),
        [1].into(),
        ParamKind::Weight,
        InitSpec::Constant { value: 1.0 },
    )?;
    store.get_mut(id).grad = Tensor::full([1], 2.0);
    Sgd::new(0.0, 0.9, 1e-4).step(&mut store);
    ensure!(store.value(id).data()[0] == 1.0, "lr 0 moved the parameter");
    Sgd::new(0.1, 0.0, 0.0).step(&mut store);
    ensure!(
        (store.value(id).data()[0] - 0.8).abs() < 1e-15,
        "got {}",
        store.value(id).data()[0]
    );

    // buf1 = 1, p1 = -0.1; buf2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
    let mut store = ParamStore::new(0);
    let id = store.register("p".into(), [1].into(), ParamKind::Weight, InitSpec::Zeros)?;
    let mut sgd = Sgd::new(0.1, 0.9, 0.0);
    let mut seen = Vec::new();
    for _ in 0..2 {
        store.get_mut(id).grad = Tensor::full([1], 1.0);
        sgd.step(&mut store);
        seen.push(store.value(id).data()[0]);
    }
    close("momentum recurrence", &seen, &[-0.1, -0.29], 1e-15)
}

fn forward_determinism() -> Result<()> {
    let run = || -> Result<Vec<f64>> {
        let mut store = ParamStore::new(5);
        let block = CaBlock::new(&mut store, "ca", 4, 2)?;
        let dense = DenseFpn::new(
            &mut store,
            "d",
            DenseFpnConfig {
                depth: 2,
                channels: 4,
                mid_channels: 3,
                levels: [2, 4],
            },
        )?;
        let pyr = make_synthetic_pyramid(5, 1, 4, 32, 32, 2, 4)?;
        let mut t = Tape::new();
        let pv = pyr.to_tape(&mut t, false);
        let out = dense.forward(&mut t, &store, &pv)?;
        let q = block.forward(&mut t, &store, out.levels()[0])?;
        Ok(t.value(q).data().to_vec())
    };
    let (a, b) = (run()?, run()?);
    ensure!(
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
        "outputs differ"
    );
    Ok(())
}

// ---- feature pyramid -------------------------------------------------------

fn reducer_level_sizes() -> Result<()> {
    let mut store = ParamStore::new(0);
    let red = LateralReducer::new(&mut store, "r", 2, &[1, 1, 1, 1], 2, 1)?;
    let mut t = Tape::new();
    let levels: Vec<Var> = (2..=5)
        .map(|l| t.constant(Tensor::zeros([1, 1, 512 >> l, 512 >> l])))
        .collect();
    let pyr = FeaturePyramid::new(2, levels, (512, 512))?;
    let out = red.reduce_laterals(&mut t, &store, &pyr)?;
    let sizes: Vec<usize> = out.levels().iter().map(|&v| t.shape(v).dims()[2]).collect();
    ensure!(sizes == [128, 64, 32, 16, 8], "sizes {sizes:?}");
    ensure!(
        out.levels().iter().all(|&v| t.shape(v).dims()[1] == 2),
        "channel width not uniform"
    );
    ensure!(
        out.levels()
            .iter()
            .all(|&v| t.value(v).data().iter().all(|&x| x == 0.0)),
        "zero input, zero bias gave nonzero output"
    );
    // non-halving sizes are rejected
    let bad: Vec<Var> = [64, 32, 20, 8]
        .iter()
        .map(|&s| t.constant(Tensor::zeros([1, 1, s, s])))
        .collect();
    ensure!(red
        .reduce_laterals(&mut t, &store, &FeaturePyramid::new(2, bad, (256, 256))?)
        .is_err());
    Ok(())
}

fn reducer_matches_conv_oracle() -> Result<()> {
    let mut r = rng(21);
    let mut store = ParamStore::new(21);
    let red = LateralReducer::new(&mut store, "r", 2, &[3, 2], 4, 1)?;
    store.fill_with("r", |_, _| r.random_range(-1.0..1.0));
    let c2 = random(&mut r, [1, 3, 8, 8]);
    let c3 = random(&mut r, [1, 2, 4, 4]);
    let mut t = Tape::new();
    let levels = vec![t.constant(c2.clone()), t.constant(c3.clone())];
    let out = red.reduce_laterals(&mut t, &store, &FeaturePyramid::new(2, levels, (32, 32))?)?;
    let conv = |x: &Tensor, prefix: &str, stride, pad| -> Result<Tensor> {
        let k = store
            .value(store.id(&format!("{prefix}/weight")).context("weight")?)
            .clone();
        let b = get(&store, &format!("{prefix}/bias"))?;
        Ok(oracle::conv2d(x, &k, Some(&b), stride, pad))
    };
    let p2 = conv(&c2, "r/lateral/l2", 1, 0)?;
    let p3 = conv(&c3, "r/lateral/l3", 1, 0)?;
    let p4 = conv(&p3, "r/extra/l4", 2, 1)?;
    for (got, want) in out.levels().iter().zip([p2, p3, p4]) {
        close("reducer level", t.value(*got).data(), want.data(), 1e-12)?;
    }
    Ok(())
}

fn synthetic_pyramid_examples() -> Result<()> {
    let a = make_synthetic_pyramid(0, 1, 4, 64, 64, 2, 6)?;
    let b = make_synthetic_pyramid(0, 1, 4, 64, 64, 2, 6)?;
    ensure!(
        a.levels() == b.levels(),
        "same seed gave different pyramids"
    );
    let big = make_synthetic_pyramid(0, 1, 256, 64, 64, 2, 6)?;
    let sizes: Vec<usize> = big.levels().iter().map(|t| t.dims()[2]).collect();
    ensure!(sizes == [16, 8, 4, 2, 1], "sizes {sizes:?}");
    let n: usize = big.levels().iter().map(|t| t.numel()).sum();
    let mean = big.levels().iter().map(|t| t.sum()).sum::<f64>() / n as f64;
    ensure!(
        n >= 4096 && mean.abs() <= 0.1,
        "mean {mean} over {n} samples"
    );
    ensure!(
        make_synthetic_pyramid(0, 1, 1, 60, 64, 2, 4).is_err(),
        "indivisible size accepted"
    );
    ensure!(level_size(512, 6) == 8);
    Ok(())
}

// ---- densefpn --------------------------------------------------------------

fn normalize_examples() -> Result<()> {
    let mut store = ParamStore::new(0);
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[0.0, 0.0, 0.0], &[1.0 / 3.0; 3], 1e-15),
        (&[LN_2, 0.0], &[2.0 / 3.0, 1.0 / 3.0], 1e-15),
        (&[1.0, 2.0, 3.0], &[0.09003, 0.24473, 0.66524], 5e-6),
    ];
    for (i, (raw, want, tol)) in cases.into_iter().enumerate() {
        let id = store.register(
            format!("v{i}"),
            [raw.len()].into(),
            ParamKind::Reweight,
            InitSpec::Zeros,
        )?;
        store.set(id, Tensor::new([raw.len()], raw.to_vec())?)?;
        let mut t = Tape::new();
        let w = normalize_weights(&mut t, &store, id)?;
        close("normalized weights", t.value(w).data(), want, tol)?;
        let probe = t.constant(Tensor::from_fn([raw.len()], |k| k as f64 + 1.0));
        let p = t.mul(w, probe)?;
        let loss = t.sum(p);
        let g = t.backward(loss)?;
        let raw_var = t
            .param_vars()
            .next()
            .map(|(_, v)| v)
            .context("raw on tape")?;
        ensure!(
            g.wrt(raw_var)
                .is_some_and(|d| raw.len() == 1 || d.iter().any(|&x| x != 0.0)),
            "no gradient to raw"
        );
    }
    Ok(())
}

/// Scalar evaluator for a dense block on a `C = 1`, `M = 1`, all-`1x1` pyramid,
/// reading weights straight from the store by name.
struct ScalarBlock<'a> {
    store: &'a ParamStore,
    prefix: String,
    l_min: usize,
    l_max: usize,
}

impl ScalarBlock<'_> {
    fn transform(&self, dir: &str, level: usize, x: f64) -> Result<f64> {
        let p = |n: &str| get(self.store, &format!("{}/{dir}/l{level}/{n}", self.prefix));
        let (rw, rb) = (p("reduce/weight")?[0], p("reduce/bias")?[0]);
        // only the centre tap of the 3x3 kernel sees a 1x1 map
        let (kw, kb) = (p("conv/weight")?[4], p("conv/bias")?[0]);
        let (ew, eb) = (p("expand/weight")?[0], p("expand/bias")?[0]);
        Ok(ew * (kw * (rw * x.max(0.0) + rb) + kb) + eb)
    }

    fn weights(&self, dir: &str, level: usize) -> Result<Vec<f64>> {
        Ok(oracle::softmax(&get(
            self.store,
            &format!("{}/{dir}/l{level}/reweight", self.prefix),
        )?))
    }

    fn topdown(&self, c: &[f64]) -> Result<Vec<f64>> {
        (self.l_min..=self.l_max)
            .map(|i| {
                let k = i - self.l_min;
                let mut s = c[k];
                if i < self.l_max {
                    let w = self.weights("topdown", i)?;
                    for (n, j) in (i + 1..=self.l_max).enumerate() {
                        s += w[n] * c[j - self.l_min];
                    }
                }
                self.transform("topdown", i, s)
            })
            .collect()
    }

    fn bottomup(&self, c: &[f64], td: &[f64]) -> Result<Vec<f64>> {
        (self.l_min..=self.l_max)
            .map(|i| {
                let k = i - self.l_min;
                let mut s = c[k] + td[k];
                if i > self.l_min {
                    let w = self.weights("bottomup", i)?;
                    for (n, j) in (self.l_min..i).enumerate() {
                        s += w[n] * td[j - self.l_min];
                    }
                }
                self.transform("bottomup", i, s)
            })
            .collect()
    }
}

fn unit_pyramid(t: &mut Tape, values: &[f64], l_min: usize) -> Result<FeaturePyramid<Var>> {
    let levels = values
        .iter()
        .map(|&v| t.constant(Tensor::full([1, 1, 1, 1], v)))
        .collect();
    Ok(FeaturePyramid::new(l_min, levels, (1, 1))?)
}

fn scalar_block(levels: [usize; 2], seed: u64) -> Result<(ParamStore, DenseBlock)> {
    let cfg = DenseFpnConfig {
        depth: 1,
        channels: 1,
        mid_channels: 1,
        levels,
    };
    let mut store = ParamStore::new(seed);
    let block = DenseBlock::new(&mut store, "d", &cfg)?;
    let mut r = rng(seed);
    store.fill_with("d", |_, _| r.random_range(-1.5..1.5));
    Ok((store, block))
}

fn densefpn_scalar_oracles() -> Result<()> {
    // 2 levels, top-down only
    let (store, block) = scalar_block([2, 3], 31)?;
    let c = [0.7, -1.3];
    let mut t = Tape::new();
    let pyr = unit_pyramid(&mut t, &c, 2)?;
    let td = block.topdown_aggregate(&mut t, &store, &pyr)?;
    let got: Vec<f64> = td.levels().iter().map(|&v| t.value(v).data()[0]).collect();
    let oracle = ScalarBlock {
        store: &store,
        prefix: "d".into(),
        l_min: 2,
        l_max: 3,
    };
    close("2-level top-down", &got, &oracle.topdown(&c)?, 1e-12)?;

    // 3 levels, full block
    let (store, block) = scalar_block([2, 4], 32)?;
    let c = [0.4, 1.1, -0.6];
    let mut t = Tape::new();
    let pyr = unit_pyramid(&mut t, &c, 2)?;
    let out = block.forward(&mut t, &store, &pyr)?;
    let got: Vec<f64> = out.levels().iter().map(|&v| t.value(v).data()[0]).collect();
    let oracle = ScalarBlock {
        store: &store,
        prefix: "d".into(),
        l_min: 2,
        l_max: 4,
    };
    let td = oracle.topdown(&c)?;
    close("3-level bottom-up", &got, &oracle.bottomup(&c, &td)?, 1e-12)
}

fn densefpn_degenerate_sums() -> Result<()> {
    let cfg = DenseFpnConfig {
        depth: 1,
        channels: 3,
        mid_channels: 2,
        levels: [2, 4],
    };
    let mut store = ParamStore::new(33);
    let block = DenseBlock::new(&mut store, "d", &cfg)?;
    let pyr = make_synthetic_pyramid(33, 1, 3, 32, 32, 2, 4)?;

    // upper levels zero, zero biases: C_i_down = T(C_i)
    store.fill_with("d", |n, _| if n.ends_with("bias") { 0.0 } else { 0.3 });
    let mut t = Tape::new();
    let mut levels: Vec<Var> = Vec::new();
    for (l, x) in pyr.iter() {
        let v = if l == 2 {
            x.clone()
        } else {
            Tensor::zeros(x.shape().clone())
        };
        levels.push(t.constant(v));
    }
    let only_bottom = FeaturePyramid::new(2, levels, (32, 32))?;
    let td = block.topdown_aggregate(&mut t, &store, &only_bottom)?;
    let direct = block.topdown[0].forward(&mut t, &store, *only_bottom.level(2))?;
    close(
        "empty contribution",
        t.value(*td.level(2)).data(),
        t.value(direct).data(),
        0.0,
    )?;

    // zero input and zero top-down give zero with zero biases
    let zeros = pyr.map(|_, x| Ok(Tensor::zeros(x.shape().clone())))?;
    let zv = zeros.to_tape(&mut t, false);
    let up = block.bottomup_aggregate(&mut t, &store, &zv, &zv)?;
    ensure!(
        up.levels()
            .iter()
            .all(|&v| t.value(v).data().iter().all(|&x| x == 0.0)),
        "zero input gave nonzero output"
    );

    // zero transform weights: zero everywhere
    store.fill_with("d", |n, _| if n.ends_with("reweight") { 0.5 } else { 0.0 });
    let mut t = Tape::new();
    let pv = pyr.to_tape(&mut t, false);
    let out = block.forward(&mut t, &store, &pv)?;
    let worst = out
        .levels()
        .iter()
        .map(|&v| t.value(v).data().iter().fold(0.0f64, |m, x| m.max(x.abs())))
        .fold(0.0, f64::max);
    ensure!(worst == 0.0, "zero transforms gave output up to {worst:e}");

    // single-level pyramid: C_up = T(C + C_down)
    let single = DenseFpnConfig {
        levels: [3, 3],
        ..cfg.clone()
    };
    let mut s2 = ParamStore::new(34);
    let b1 = DenseBlock::new(&mut s2, "s", &single)?;
    let mut t = Tape::new();
    let x = t.constant(pyr.level(3).clone());
    let p1 = FeaturePyramid::new(3, vec![x], (32, 32))?;
    let td = b1.topdown_aggregate(&mut t, &s2, &p1)?;
    let up = b1.bottomup_aggregate(&mut t, &s2, &p1, &td)?;
    let sum = t.add(x, *td.level(3))?;
    let want = b1.bottomup[0].forward(&mut t, &s2, sum)?;
    close(
        "single level",
        t.value(*up.level(3)).data(),
        t.value(want).data(),
        0.0,
    )
}

fn densefpn_composition() -> Result<()> {
    let cfg = DenseFpnConfig {
        depth: 2,
        channels: 3,
        mid_channels: 2,
        levels: [2, 4],
    };
    let mut store = ParamStore::new(35);
    let net = DenseFpn::new(&mut store, "f", cfg.clone())?;
    let mut r = rng(35);
    store.fill_with("f", |_, _| r.random_range(-0.8..0.8));
    let mut other = ParamStore::new(99);
    let a = DenseBlock::new(&mut other, "a", &cfg)?;
    let b = DenseBlock::new(&mut other, "b", &cfg)?;
    for (name, value) in store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect::<Vec<_>>()
    {
        let renamed = name
            .replacen("f/block0", "a", 1)
            .replacen("f/block1", "b", 1);
        other.set_by_name(&renamed, value)?;
    }
    let pyr = make_synthetic_pyramid(35, 2, 3, 32, 32, 2, 4)?;
    let mut t = Tape::new();
    let pv = pyr.to_tape(&mut t, false);
    let full = net.forward(&mut t, &store, &pv)?;
    let one = a.forward(&mut t, &other, &pv)?;
    let two = b.forward(&mut t, &other, &one)?;
    for (x, y) in full.levels().iter().zip(two.levels()) {
        ensure!(t.shape(*x) == t.shape(*y));
        close(
            "D=2 vs chained D=1",
            t.value(*x).data(),
            t.value(*y).data(),
            0.0,
        )?;
    }
    for (x, y) in full.levels().iter().zip(pv.levels()) {
        ensure!(t.shape(*x) == t.shape(*y), "shape changed");
    }
    // D=1 is top-down then bottom-up
    let td = a.topdown_aggregate(&mut t, &other, &pv)?;
    let bu = a.bottomup_aggregate(&mut t, &other, &pv, &td)?;
    for (x, y) in one.levels().iter().zip(bu.levels()) {
        close(
            "D=1 definitional",
            t.value(*x).data(),
            t.value(*y).data(),
            0.0,
        )?;
    }
    Ok(())
}

fn densefpn_linear_growth() -> Result<()> {
    let base = DenseFpnConfig::default();
    let params = |d: usize| -> Result<u64> {
        let spec = ModuleSpec::DenseFpn(DenseFpnConfig {
            depth: d,
            ..base.clone()
        });
        Ok(count_params(&spec)?.total)
    };
    let delta = densefpn_block_delta(&base)?;
    let mut prev = 0;
    for d in 1..=7 {
        let p = params(d)?;
        ensure!(p - prev == delta, "depth {d}: step {} vs {delta}", p - prev);
        prev = p;
    }
    Ok(())
}

fn densefpn_reweight_gradients() -> Result<()> {
    let cfg = DenseFpnConfig {
        depth: 2,
        channels: 4,
        mid_channels: 3,
        levels: [2, 5],
    };
    let mut store = ParamStore::new(36);
    let net = DenseFpn::new(&mut store, "f", cfg)?;
    let pyr = make_synthetic_pyramid(36, 1, 4, 64, 64, 2, 5)?;
    let mut t = Tape::new();
    let pv = pyr.to_tape(&mut t, false);
    let out = net.forward(&mut t, &store, &pv)?;
    let mut loss = t.constant(Tensor::scalar(0.0));
    for (k, &v) in out.levels().iter().enumerate() {
        let w = t.constant(Tensor::from_fn(t.shape(v).clone(), |i| {
            ((i * 31 + k * 7) % 13) as f64 - 6.0
        }));
        let p = t.mul(v, w)?;
        let s = t.sum(p);
        loss = t.add(loss, s)?;
    }
    let g = t.backward(loss)?;
    store.zero_grad();
    store.accumulate_grads(&t, &g);
    for rw in net.blocks.iter().flat_map(|b| b.reweights()) {
        let p = store.get(rw.raw);
        // a single-source weight normalizes to the constant 1 and has no gradient
        if rw.sources.len() == 1 {
            ensure!(
                p.grad.data() == [0.0],
                "{}: single-source gradient {:?}",
                p.name,
                p.grad.data()
            );
            continue;
        }
        ensure!(
            p.grad.data().iter().all(|&x| x != 0.0),
            "{} has a zero gradient entry: {:?}",
            p.name,
            p.grad.data()
        );
    }
    Ok(())
}

// ---- scp -------------------------------------------------------------------

struct CaFixture {
    store: ParamStore,
    block: CaBlock,
}

fn ca_fixture(c: usize, seed: u64) -> Result<CaFixture> {
    let mut store = ParamStore::new(seed);
    let block = CaBlock::new(&mut store, "ca", c, 1)?;
    let mut r = rng(seed);
    store.fill_with("ca", |_, _| r.random_range(-1.0..1.0));
    Ok(CaFixture { store, block })
}

impl CaFixture {
    fn weights(&self) -> Result<oracle::CaWeights> {
        let g = |n: &str| get(&self.store, &format!("ca/{n}"));
        Ok(oracle::CaWeights {
            key: g("key/weight")?,
            key_bias: g("key/bias")?[0],
            value: g("value/weight")?,
            value_bias: g("value/bias")?,
            gate: g("gate/weight")?,
            gate_bias: g("gate/bias")?[0],
            refine: g("refine/weight")?,
            refine_bias: g("refine/bias")?,
        })
    }

    fn run(&self, p: &Tensor) -> Result<(Tape, ctxagg_core::scp::CaBlockTrace)> {
        let mut t = Tape::new();
        let pv = t.constant(p.clone());
        let tr = self.block.forward_traced(&mut t, &self.store, pv)?;
        Ok((t, tr))
    }
}

fn attention_examples() -> Result<()> {
    let mut f = ca_fixture(4, 41)?;
    let p = Tensor::from_fn([1, 4, 3, 2], |i| [0.5, -1.0, 2.0, 0.1][i / 6]);
    let (t, tr) = f.run(&p)?;
    close(
        "constant map attention",
        t.value(tr.attention).data(),
        &[1.0 / 6.0; 6],
        1e-15,
    )?;
    close(
        "constant map gate",
        t.value(tr.gate).data(),
        &[1.0 / 6.0; 6],
        1e-15,
    )?;
    let mut r = rng(41);
    let p = random(&mut r, [1, 4, 2, 2]);
    let (t, tr) = f.run(&p)?;
    let o = oracle::cablock(p.data(), 4, 4, &f.weights()?);
    close(
        "attention oracle",
        t.value(tr.attention).data(),
        &o.attention,
        1e-12,
    )?;
    set(&mut f.store, "ca/key/weight", &[0.0; 4])?;
    let (t, tr) = f.run(&p)?;
    close(
        "w_k = 0 attention",
        t.value(tr.attention).data(),
        &[0.25; 4],
        1e-15,
    )
}

fn context_examples() -> Result<()> {
    let mut f = ca_fixture(3, 42)?;
    // constant map: ctx = Refine(w_v c) whatever alpha is
    let cvec = [0.4, -0.2, 1.5];
    let p = Tensor::from_fn([1, 3, 2, 3], |i| cvec[i / 6]);
    let (t, tr) = f.run(&p)?;
    let w = f.weights()?;
    let v: Vec<f64> = (0..3)
        .map(|o| w.value_bias[o] + (0..3).map(|i| w.value[o * 3 + i] * cvec[i]).sum::<f64>())
        .collect();
    let refined: Vec<f64> = (0..3)
        .map(|o| w.refine_bias[o] + (0..3).map(|i| w.refine[o * 3 + i] * v[i]).sum::<f64>())
        .collect();
    close(
        "constant map context",
        t.value(tr.context).data(),
        &refined,
        1e-12,
    )?;

    // random instance against the loop oracle
    let mut r = rng(42);
    let p = random(&mut r, [1, 3, 3, 2]);
    let (t, tr) = f.run(&p)?;
    close(
        "context oracle",
        t.value(tr.context).data(),
        &oracle::cablock(p.data(), 3, 6, &w).context,
        1e-12,
    )?;

    // identity value/refine, uniform alpha: spatial mean
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    set(&mut f.store, "ca/value/weight", &eye)?;
    set(&mut f.store, "ca/refine/weight", &eye)?;
    for n in ["ca/value/bias", "ca/refine/bias"] {
        set(&mut f.store, n, &[0.0; 3])?;
    }
    set(&mut f.store, "ca/key/weight", &[0.0; 3])?;
    let (t, tr) = f.run(&p)?;
    let mean: Vec<f64> = (0..3)
        .map(|c| p.data()[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0)
        .collect();
    close(
        "identity context is the mean",
        t.value(tr.context).data(),
        &mean,
        1e-15,
    )
}

fn gate_examples() -> Result<()> {
    let mut f = ca_fixture(4, 43)?;
    let mut r = rng(43);
    let p = random(&mut r, [1, 4, 3, 3]);
    let (t, tr) = f.run(&p)?;
    close(
        "gate oracle",
        t.value(tr.gate).data(),
        &oracle::cablock(p.data(), 4, 9, &f.weights()?).gate,
        1e-12,
    )?;
    set(&mut f.store, "ca/gate/weight", &[0.0; 4])?;
    let (t, tr) = f.run(&p)?;
    close(
        "w_a = 0 gate",
        t.value(tr.gate).data(),
        &[1.0 / 9.0; 9],
        1e-15,
    )?;
    // uniform gate: a global-context block with output scaled by 1/N
    let ctx = t.value(tr.context).data().to_vec();
    let want: Vec<f64> = p
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + ctx[i / 9] / 9.0)
        .collect();
    close(
        "uniform gate reduces to scaled global context",
        t.value(tr.output).data(),
        &want,
        1e-15,
    )
}

fn cablock_examples() -> Result<()> {
    let mut store = ParamStore::new(44);
    let fresh = CaBlock::new(&mut store, "ca", 5, 1)?;
    let mut r = rng(44);
    let p = random(&mut r, [2, 5, 3, 4]);
    let mut t = Tape::new();
    let pv = t.constant(p.clone());
    let q = fresh.forward(&mut t, &store, pv)?;
    ensure!(
        t.value(q) == &p,
        "zero-initialized refinement is not an exact identity"
    );

    let f = ca_fixture(8, 45)?;
    let cst = Tensor::from_fn([1, 8, 2, 3], |i| (i / 6) as f64 * 0.3 - 1.0);
    let (t, tr) = f.run(&cst)?;
    for c in 0..8 {
        let plane = &t.value(tr.output).data()[c * 6..(c + 1) * 6];
        ensure!(
            plane.iter().all(|&v| (v - plane[0]).abs() <= 1e-15),
            "constant input gave a varying output"
        );
    }
    let p = random(&mut r, [1, 8, 2, 3]);
    let (t, tr) = f.run(&p)?;
    close(
        "cablock oracle",
        t.value(tr.output).data(),
        &oracle::cablock(p.data(), 8, 6, &f.weights()?).output,
        1e-12,
    )
}

fn scp_examples() -> Result<()> {
    let pyr = make_synthetic_pyramid(46, 1, 4, 32, 32, 2, 4)?;
    let mut store = ParamStore::new(46);
    let empty = Scp::new(
        &mut store,
        "e",
        ScpConfig {
            channels: 4,
            levels: vec![],
            reduction: 1,
        },
    )?;
    let scp = Scp::new(
        &mut store,
        "s",
        ScpConfig {
            channels: 4,
            levels: vec![2, 4],
            reduction: 2,
        },
    )?;
    let mut r = rng(46);
    store.fill_with("s", |_, _| r.random_range(-1.0..1.0));
    let mut t = Tape::new();
    let pv = pyr.to_tape(&mut t, false);
    let same = empty.forward(&mut t, &store, &pv)?;
    ensure!(
        same.levels() == pv.levels(),
        "empty level set is not the identity"
    );
    let out = scp.forward(&mut t, &store, &pv)?;
    ensure!(out.level(3) == pv.level(3), "unwrapped level changed");
    for l in [2, 4] {
        let alone = scp
            .block(l)
            .context("block")?
            .forward(&mut t, &store, *pv.level(l))?;
        close(
            "per-level independence",
            t.value(*out.level(l)).data(),
            t.value(alone).data(),
            0.0,
        )?;
    }
    let p = count_params(&ModuleSpec::Scp(ScpConfig::default()))?;
    ensure!(p.weights == 655_360 + 2_560, "weights {}", p.weights);
    ensure!(
        p.weights == 5 * (2 * 256 * 256 + 2 * 256),
        "weights {}",
        p.weights
    );
    Ok(())
}

// ---- hroie -----------------------------------------------------------------

fn roi_align_examples() -> Result<()> {
    let params = |s: usize, scale: f64| RoiAlignParams {
        out_size: s,
        sampling_ratio: 2,
        spatial_scale: scale,
    };
    let five = Tensor::full([1, 2, 8, 8], 5.0);
    let y = roi_align_tensor(&five, &[RoiBox::new(0, 0.7, 1.3, 6.2, 7.9)], params(3, 1.0))?;
    close("constant map", y.data(), &[5.0; 18], 1e-12)?;

    // box [2,6)x[2,6) with 2x2 bins of 2x2 samples: samples at pixel centres of each 2x2 cell
    let mut r = rng(51);
    let x = random(&mut r, [1, 1, 8, 8]);
    let y = roi_align_tensor(&x, &[RoiBox::new(0, 2.0, 2.0, 6.0, 6.0)], params(2, 1.0))?;
    let pooled: Vec<f64> = (0..4)
        .map(|b| {
            let (by, bx) = (2 + 2 * (b / 2), 2 + 2 * (b % 2));
            (x.at4(0, 0, by, bx)
                + x.at4(0, 0, by, bx + 1)
                + x.at4(0, 0, by + 1, bx)
                + x.at4(0, 0, by + 1, bx + 1))
                / 4.0
        })
        .collect();
    close("average pool", y.data(), &pooled, 1e-12)?;

    let x = random(&mut r, [1, 2, 8, 8]);
    let y = roi_align_tensor(&x, &[RoiBox::new(0, 1.5, 2.0, 6.5, 7.0)], params(2, 1.0))?;
    close(
        "sampling oracle",
        y.data(),
        oracle::roi_align(&x, 0, [1.5, 2.0, 6.5, 7.0], 2, 2, 1.0).data(),
        1e-12,
    )?;
    let y = roi_align_tensor(&x, &[RoiBox::new(0, -2.0, 3.3, 9.5, 8.4)], params(3, 0.5))?;
    close(
        "partly outside",
        y.data(),
        oracle::roi_align(&x, 0, [-2.0, 3.3, 9.5, 8.4], 3, 2, 0.5).data(),
        1e-12,
    )?;
    ensure!(
        roi_align_tensor(&x, &[RoiBox::new(0, 3.0, 1.0, 3.0, 4.0)], params(2, 1.0)).is_err(),
        "degenerate roi accepted"
    );
    Ok(())
}

fn cells(
    store: &mut ParamStore,
    prefix: &str,
    levels: &[usize],
    c: usize,
) -> Result<Vec<FusionCell>> {
    levels
        .iter()
        .map(|&l| Ok(FusionCell::new(store, &format!("{prefix}/l{l}"), l, c)?))
        .collect()
}

fn fuse_saturation_examples() -> Result<()> {
    let mut r = rng(52);
    let crops_t: Vec<Tensor> = (0..3).map(|_| random(&mut r, [2, 3, 2, 2])).collect();
    let run = |bias: f64, levels: &[usize]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut store = ParamStore::new(0);
        let cs = cells(&mut store, "c", levels, 3)?;
        store.fill_with("c", |n, _| if n.ends_with("bias") { bias } else { 0.0 });
        let mut t = Tape::new();
        let crops: Vec<(usize, Var)> = levels
            .iter()
            .zip(&crops_t)
            .map(|(&l, x)| (l, t.constant(x.clone())))
            .collect();
        let f = fuse(&mut t, &store, FusionPath::BottomUp, &crops, &cs)?;
        let sum: Vec<f64> = (0..crops_t[0].numel())
            .map(|i| crops_t[..levels.len()].iter().map(|x| x.data()[i]).sum())
            .collect();
        Ok((t.value(f.output).data().to_vec(), sum))
    };
    let (f, _) = run(-30.0, &[2, 3, 4])?;
    close("gates at 0", &f, &vec![0.0; f.len()], 1e-12)?;
    let (f, sum) = run(30.0, &[2, 3, 4])?;
    close("gates at 1", &f, &sum, 1e-12)?;
    let (f, r0) = run(0.0, &[3])?;
    let half: Vec<f64> = r0.iter().map(|x| 0.5 * x).collect();
    close("single level, zero gate", &f, &half, 0.0)
}

fn fuse_scalar_recurrence() -> Result<()> {
    let mut store = ParamStore::new(0);
    let cs = cells(&mut store, "c", &[2, 3], 1)?;
    // weight layout is [out, in] with in = [F, R]
    let (w2, b2, w3, b3) = ([0.7, -1.2], 0.3, [1.9, 0.4], -0.8);
    set(&mut store, "c/l2/weight", &w2)?;
    set(&mut store, "c/l2/bias", &[b2])?;
    set(&mut store, "c/l3/weight", &w3)?;
    set(&mut store, "c/l3/bias", &[b3])?;
    let (r2, r3) = (1.3, -0.45);
    for (path, order) in [
        (FusionPath::BottomUp, [(r2, w2, b2), (r3, w3, b3)]),
        (FusionPath::TopDown, [(r3, w3, b3), (r2, w2, b2)]),
    ] {
        let mut t = Tape::new();
        let crops = vec![
            (2, t.constant(Tensor::full([1, 1, 1, 1], r2))),
            (3, t.constant(Tensor::full([1, 1, 1, 1], r3))),
        ];
        let fused = fuse(&mut t, &store, path, &crops, &cs)?.output;
        let got = t.value(fused).data()[0];
        let mut f = 0.0;
        for (r, w, b) in order {
            f += r * oracle::sigmoid(w[0] * f + w[1] * r + b);
        }
        ensure!((got - f).abs() <= 1e-12, "{path:?}: {got} vs {f}");
    }
    Ok(())
}

fn hroie_extract_examples() -> Result<()> {
    let cfg = HroieConfig {
        channels: 3,
        levels: [2, 5],
        det_size: 3,
        mask_size: 4,
        sampling_ratio: 2,
    };
    let mut store = ParamStore::new(53);
    let h = Hroie::new(&mut store, "h", cfg)?;
    let rois = [
        RoiBox::new(0, 4.0, 9.0, 40.0, 30.0),
        RoiBox::new(0, 50.0, 50.0, 63.0, 70.0),
    ];

    let zero = make_synthetic_pyramid(0, 1, 3, 64, 64, 2, 5)?
        .map(|_, x| Ok(Tensor::zeros(x.shape().clone())))?;
    let mut t = Tape::new();
    let zv = zero.to_tape(&mut t, false);
    for task in [Task::Detection, Task::Mask] {
        let f = h.extract(&mut t, &store, &zv, &rois, task)?;
        ensure!(
            t.value(f.output).data().iter().all(|&v| v == 0.0),
            "{task:?}: zero pyramid gave nonzero F"
        );
        let want: Vec<usize> = if task == Task::Detection {
            vec![2, 3, 4, 5]
        } else {
            vec![5, 4, 3, 2]
        };
        ensure!(f.order == want, "{task:?} order {:?}", f.order);
    }

    let mut r = rng(53);
    store.fill_with("h", |_, _| r.random_range(-1.0..1.0));
    let pyr = make_synthetic_pyramid(53, 1, 3, 64, 64, 2, 5)?;
    let mut t = Tape::new();
    let pv = pyr.to_tape(&mut t, false);
    let crops = h.crops(&mut t, &pv, &rois, Task::Detection)?;
    let up = fuse(
        &mut t,
        &store,
        FusionPath::BottomUp,
        &crops,
        h.cells(Task::Detection),
    )?;
    let down = fuse(
        &mut t,
        &store,
        FusionPath::TopDown,
        &crops,
        h.cells(Task::Detection),
    )?;
    ensure!(
        max_diff(t.value(up.output).data(), t.value(down.output).data()) > 0.0,
        "fusion order made no difference"
    );

    let names = |task: Task| -> Vec<String> {
        h.cells(task)
            .iter()
            .flat_map(|c| [Some(c.conv.weight), c.conv.bias].into_iter().flatten())
            .map(|id| store.get(id).name.clone())
            .collect()
    };
    let (det, mask) = (names(Task::Detection), names(Task::Mask));
    ensure!(
        det.iter().all(|n| !mask.contains(n)),
        "paths share parameters"
    );

    let p = count_params(&ModuleSpec::Hroie(HroieConfig::default()))?;
    ensure!(
        p.weights == 1_048_576 && p.biases == 2_048,
        "weights {} biases {}",
        p.weights,
        p.biases
    );
    Ok(())
}

// ---- accounting ------------------------------------------------------------

fn accounting_examples() -> Result<()> {
    let conv = ModuleSpec::Conv(ConvSpec::same(256, 256, 1).into());
    ensure!(count_params(&conv)?.total == 65_792);
    ensure!(count_macs(&conv, (64, 64), RoiBudget::default())?.macs == 268_435_456);
    ensure!(count_params(&ModuleSpec::Empty)?.total == 0);
    ensure!(count_macs(&ModuleSpec::Empty, (512, 512), RoiBudget::default())?.macs == 0);
    let ca = count_params(&ModuleSpec::CaBlock {
        channels: 256,
        reduction: 1,
    })?;
    ensure!(
        ca.weights == 131_584 && ca.weights == 2 * 256 * 256 + 2 * 256,
        "cablock weights {}",
        ca.weights
    );

    // registry walk over a live model equals the declaration-only count
    let specs = [
        ModuleSpec::CaBlock {
            channels: 16,
            reduction: 4,
        },
        ModuleSpec::DenseFpn(DenseFpnConfig {
            depth: 2,
            channels: 8,
            mid_channels: 4,
            levels: [2, 5],
        }),
        ModuleSpec::Hroie(HroieConfig {
            channels: 8,
            ..HroieConfig::default()
        }),
        ModuleSpec::Scp(ScpConfig {
            channels: 8,
            levels: vec![2, 3, 4],
            reduction: 2,
        }),
    ];
    for spec in specs {
        let counted = count_params(&spec)?.total;
        let mut store = ParamStore::new(0);
        let mut reg = ShapeRegistry::new();
        match &spec {
            ModuleSpec::CaBlock {
                channels,
                reduction,
            } => {
                CaBlock::new(&mut store, "m", *channels, *reduction)?;
                CaBlock::new(&mut reg, "m", *channels, *reduction)?;
            }
            ModuleSpec::DenseFpn(c) => {
                DenseFpn::new(&mut store, "m", c.clone())?;
            }
            ModuleSpec::Hroie(c) => {
                Hroie::new(&mut store, "m", c.clone())?;
            }
            ModuleSpec::Scp(c) => {
                Scp::new(&mut store, "m", c.clone())?;
            }
            _ => bail!("unexpected spec"),
        }
        ensure!(
            store.numel() as u64 == counted,
            "{}: live {} vs counted {counted}",
            spec.name(),
            store.numel()
        );
    }
    Ok(())
}

// ---- toy pipeline ----------------------------------------------------------

fn scene_determinism_and_validity() -> Result<()> {
    let cfg = SceneConfig::default();
    ensure!(
        generate_scene(&cfg, 7) == generate_scene(&cfg, 7),
        "same seed gave different scenes"
    );
    for seed in 0..10_000u64 {
        let s = generate_scene(&cfg, seed);
        ensure!(!s.instances.is_empty(), "seed {seed}: no instances");
        for inst in &s.instances {
            let [x1, y1, x2, y2] = inst.bbox;
            ensure!(x2 > x1 && y2 > y1, "seed {seed}: box {:?}", inst.bbox);
            ensure!(
                x1 >= 0.0 && y1 >= 0.0 && x2 <= s.size as f64 && y2 <= s.size as f64,
                "seed {seed}: box out of bounds"
            );
            ensure!(
                (1..=NUM_CLASSES).contains(&inst.class),
                "seed {seed}: class {}",
                inst.class
            );
        }
    }
    Ok(())
}

/// Fill ratio (mask area over box area) per class: 1 for rectangles, pi/4 for
/// ellipses, 1/2 for diamonds, up to pixelation.
fn scene_shape_moments() -> Result<()> {
    let cfg = SceneConfig::default();
    let mut ratios = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..300 {
        let s = generate_scene(&cfg, seed);
        for inst in &s.instances {
            let [x1, y1, x2, y2] = inst.bbox;
            let mut inside = 0;
            for y in y1 as usize..y2 as usize {
                for x in x1 as usize..x2 as usize {
                    inside += inst.mask[y * s.size + x] as usize;
                }
            }
            ensure!(inside == inst.area(), "mask pixels outside the box");
            ratios[inst.class - 1].push(inside as f64 / ((x2 - x1) * (y2 - y1)));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ensure!(
        ratios[0].iter().all(|&r| r == 1.0),
        "rectangles are not full"
    );
    let (e, d) = (mean(&ratios[1]), mean(&ratios[2]));
    ensure!((e - PI / 4.0).abs() < 0.03, "ellipse fill {e}");
    ensure!((d - 0.5).abs() < 0.06, "diamond fill {d}");
    ensure!(
        ratios[1].iter().chain(&ratios[2]).all(|&r| r < 0.95),
        "a curved class filled its box"
    );
    Ok(())
}

fn detector_examples() -> Result<()> {
    let cfg = ToyConfig::default();
    let mut store = ParamStore::new(61);
    let m = ToyDetector::new(&mut store, &cfg)?;
    let rois: Vec<RoiBox> = (0..7)
        .map(|i| RoiBox::new(0, 4.0 * i as f64, 3.0, 30.0 + 10.0 * i as f64, 50.0))
        .collect();
    let mut t = Tape::new();
    let out = m.forward_detector(&mut t, &store, &Tensor::zeros([1, 3, 128, 128]), &rois)?;
    ensure!(t.shape(out.class_logits).dims() == [7, NUM_CLASSES + 1]);
    ensure!(t.shape(out.box_deltas).dims() == [7, 4]);
    ensure!(t.shape(out.mask_logits).dims() == [7, 14, 14]);
    let post = softmax_tensor(t.value(out.class_logits), 1)?;
    close("uniform posterior", post.data(), &[0.25; 28], 1e-15)?;

    // mask gates pinned shut: the mask head sees zeros everywhere
    let scene = generate_scene(&cfg.scene, 61);
    let mut r = rng(61);
    store.fill_with(
        "hroie/mask",
        |n, _| if n.ends_with("bias") { -30.0 } else { 0.0 },
    );
    store.fill_with("mask_head", |_, _| r.random_range(-0.5..0.5));
    let mut t = Tape::new();
    let img = scene.image.clone().reshape([1, 3, 128, 128])?;
    let out = m.forward_detector(&mut t, &store, &img, &rois)?;
    let zeros = t.constant(Tensor::zeros([1, cfg.channels, 14, 14]));
    let blank = m.mask_head.forward(&mut t, &store, zeros)?;
    let want: Vec<f64> = t
        .value(blank)
        .data()
        .iter()
        .cycle()
        .take(7 * 196)
        .copied()
        .collect();
    close(
        "saturated mask path",
        t.value(out.mask_logits).data(),
        &want,
        1e-9,
    )
}

fn loss_examples() -> Result<()> {
    let scene = generate_scene(&SceneConfig::default(), 62);
    let gt: Vec<RoiBox> = scene
        .instances
        .iter()
        .map(|i| RoiBox::new(0, i.bbox[0], i.bbox[1], i.bbox[2], i.bbox[3]))
        .collect();
    let mut rois = gt.clone();
    rois.push(RoiBox::new(0, 0.0, 0.0, 3.0, 3.0));
    let targets = assign_targets(&rois, &[&scene], 0.5, 14)?;
    let n = rois.len();
    ensure!(
        targets.positives.len() == gt.len(),
        "ground-truth proposals not all positive"
    );

    let mut t = Tape::new();
    let logits = Tensor::from_fn([n, NUM_CLASSES + 1], |i| {
        if i % (NUM_CLASSES + 1) == targets.labels[i / (NUM_CLASSES + 1)] {
            30.0
        } else {
            0.0
        }
    });
    let cls = t.constant(logits);
    let deltas = Tensor::from_fn([n, 4], |i| {
        targets
            .positives
            .iter()
            .position(|&p| p == i / 4)
            .map_or(0.0, |k| targets.box_targets[k][i % 4])
    });
    let deltas = t.constant(deltas);
    let masks = Tensor::from_fn([gt.len(), 14, 14], |i| {
        if targets.mask_targets[i] > 0.5 {
            30.0
        } else {
            -30.0
        }
    });
    let masks = t.constant(masks);
    let (_, l) = compute_losses(&mut t, cls, deltas, Some(masks), &targets)?;
    ensure!(
        l.cls_loss < 1e-6 && l.box_loss == 0.0 && l.mask_loss < 1e-6,
        "{l:?}"
    );
    ensure!((l.total - (l.cls_loss + l.box_loss + l.mask_loss)).abs() < 1e-15);

    let only_bg = assign_targets(&rois[n - 1..], &[&scene], 0.5, 14)?;
    let mut t = Tape::new();
    let cls = t.constant(Tensor::zeros([1, NUM_CLASSES + 1]));
    let deltas = t.constant(Tensor::zeros([1, 4]));
    let (_, l) = compute_losses(&mut t, cls, deltas, None, &only_bg)?;
    ensure!(
        l.box_loss == 0.0 && l.mask_loss == 0.0 && l.cls_loss > 0.0,
        "{l:?}"
    );
    Ok(())
}

fn soft_nms_examples() -> Result<()> {
    let cfg = SoftNmsConfig::default();
    let disjoint: Vec<Bbox> = vec![
        [0.0, 0.0, 10.0, 10.0],
        [20.0, 0.0, 30.0, 10.0],
        [0.0, 20.0, 10.0, 30.0],
    ];
    let kept = soft_nms(&disjoint, &[0.3, 0.9, 0.6], &cfg);
    ensure!(kept == [(1, 0.9), (2, 0.6), (0, 0.3)], "{kept:?}");
    let dup = vec![[0.0, 0.0, 10.0, 10.0]; 2];
    let kept = soft_nms(&dup, &[0.9, 0.8], &cfg);
    ensure!(kept == [(0, 0.9)], "{kept:?}");
    // [0,10]x[0,10] and [0,10]x[0,4]..: IoU = 40 / 100 = 0.4
    let pair = vec![[0.0, 0.0, 10.0, 10.0], [0.0, 6.0, 10.0, 10.0]];
    let kept = soft_nms(&pair, &[0.9, 0.8], &cfg);
    ensure!(kept == [(0, 0.9), (1, 0.8)], "{kept:?}");

    let mut r = rng(63);
    for mode in [
        ctxagg_core::toy::NmsMode::Linear,
        ctxagg_core::toy::NmsMode::Gaussian,
    ] {
        let cfg = SoftNmsConfig { mode, ..cfg };
        for _ in 0..20 {
            let boxes: Vec<Bbox> = (0..25)
                .map(|_| {
                    let (x, y) = (r.random_range(0.0..40.0), r.random_range(0.0..40.0));
                    [
                        x,
                        y,
                        x + r.random_range(3.0..20.0),
                        y + r.random_range(3.0..20.0),
                    ]
                })
                .collect();
            let scores: Vec<f64> = (0..25).map(|_| r.random_range(0.0..1.0)).collect();
            let got = soft_nms(&boxes, &scores, &cfg);
            let want = oracle::soft_nms(&boxes, &scores, &cfg);
            ensure!(
                got.len() == want.len(),
                "{mode:?}: kept {} vs {}",
                got.len(),
                want.len()
            );
            for (a, b) in got.iter().zip(&want) {
                ensure!(
                    a.0 == b.0 && (a.1 - b.1).abs() <= 1e-12,
                    "{mode:?}: {a:?} vs {b:?}"
                );
            }
        }
    }
    Ok(())
}

fn small_config() -> ToyConfig {
    let mut cfg = ToyConfig::default();
    cfg.train.iterations = 2;
    cfg.eval.scenes = 3;
    cfg
}

fn training_examples() -> Result<()> {
    let mut cfg = small_config();
    cfg.train.iterations = 0;
    let out = train(&cfg, 64)?;
    ensure!(out.log.records.is_empty(), "zero iterations logged losses");
    let mut fresh = ParamStore::new(64);
    ToyDetector::new(&mut fresh, &cfg)?;
    ensure!(
        out.store
            .iter()
            .zip(fresh.iter())
            .all(|(a, b)| a.1.value == b.1.value),
        "zero iterations moved parameters"
    );

    let cfg = small_config();
    let a = train(&cfg, 65)?;
    let b = train(&cfg, 65)?;
    let bits = |l: &ctxagg_core::toy::TrainLog| -> Vec<u64> {
        l.records.iter().map(|r| r.total.to_bits()).collect()
    };
    ensure!(
        bits(&a.log) == bits(&b.log),
        "same seed gave different loss curves"
    );
    ensure!(a.log.records.iter().all(|r| r.total.is_finite()
        && r.cls_loss >= 0.0
        && r.box_loss >= 0.0
        && r.mask_loss >= 0.0));
    Ok(())
}

fn evaluation_examples() -> Result<()> {
    let cfg = small_config();
    let scenes: Vec<_> = (0..cfg.eval.scenes)
        .map(|k| ctxagg_core::toy::eval::eval_scene(&cfg, k))
        .collect();
    let perfect: Vec<Vec<Prediction>> = scenes
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .map(|i| Prediction {
                    class: i.class,
                    bbox: i.bbox,
                    score: 1.0,
                    mask: i.mask.clone(),
                })
                .collect()
        })
        .collect();
    let m = evaluate_predictions(&scenes, &perfect, 0.5)?;
    ensure!(m.recall == 1.0 && m.mean_mask_iou == 1.0, "{m:?}");

    // doubling every prediction and suppressing duplicates leaves recall unchanged
    let doubled: Vec<Vec<Prediction>> = perfect
        .iter()
        .map(|p| {
            let mut all = p.clone();
            all.extend(p.iter().map(|q| Prediction {
                score: 0.9,
                ..q.clone()
            }));
            let boxes: Vec<Bbox> = all.iter().map(|q| q.bbox).collect();
            let scores: Vec<f64> = all.iter().map(|q| q.score).collect();
            soft_nms(&boxes, &scores, &SoftNmsConfig::default())
                .into_iter()
                .map(|(i, _)| all[i].clone())
                .collect()
        })
        .collect();
    ensure!(
        doubled
            .iter()
            .zip(&perfect)
            .all(|(d, p)| d.len() == p.len()),
        "duplicates survived suppression"
    );
    ensure!(evaluate_predictions(&scenes, &doubled, 0.5)?.recall == m.recall);

    let mut store = ParamStore::new(66);
    let model = ToyDetector::new(&mut store, &cfg)?;
    let init = evaluate(&model, &store, &cfg, ProposalMode::Grid)?;
    ensure!(init.recall < 0.1, "untrained recall {}", init.recall);
    Ok(())
}

fn ablation_construct() -> Result<()> {
    for on in ModuleToggles::all() {
        let cfg = ToyConfig {
            modules: on,
            ..ToyConfig::default()
        };
        let mut reg = ShapeRegistry::new();
        ToyDetector::new(&mut reg, &cfg).with_context(|| format!("{on:?}"))?;
    }
    Ok(())
}

// ---- cli -------------------------------------------------------------------

fn params_subcommand_example() -> Result<()> {
    let report = crate::cli_support::params_report("hroie", 256, Some(4), None)?;
    ensure!(
        report.params.weights == 1_048_576,
        "weights {}",
        report.params.weights
    );
    Ok(())
}

pub fn catalogue() -> Vec<Check> {
    macro_rules! c {
        ($m:expr, $n:expr, $f:ident) => {
            Check {
                module: $m,
                name: $n,
                run: $f,
            }
        };
    }
    vec![
        c!("core", "conv2d pointwise scaling", conv_pointwise_scaling),
        c!("core", "conv2d full-window sum", conv_full_window_sum),
        c!("core", "conv2d vs direct loops", conv_matches_oracle),
        c!("core", "maxpool2d examples", maxpool_examples),
        c!("core", "bilinear resize examples", resize_examples),
        c!("core", "softmax examples", softmax_examples),
        c!("core", "relu, sigmoid, concat", elementwise_examples),
        c!("core", "grad_check of a sum of squares", grad_check_square),
        c!("core", "sgd step examples", sgd_examples),
        c!("core", "forward determinism", forward_determinism),
        c!(
            "feature-pyramid",
            "reducer sizes, zeros, rejection",
            reducer_level_sizes
        ),
        c!(
            "feature-pyramid",
            "reducer vs conv oracle",
            reducer_matches_conv_oracle
        ),
        c!(
            "feature-pyramid",
            "synthetic pyramid",
            synthetic_pyramid_examples
        ),
        c!("densefpn", "normalize_weights examples", normalize_examples),
        c!(
            "densefpn",
            "scalar evaluation oracles",
            densefpn_scalar_oracles
        ),
        c!(
            "densefpn",
            "empty and degenerate sums",
            densefpn_degenerate_sums
        ),
        c!("densefpn", "depth composition", densefpn_composition),
        c!(
            "densefpn",
            "linear parameter growth",
            densefpn_linear_growth
        ),
        c!(
            "densefpn",
            "gradient reaches every re-weight",
            densefpn_reweight_gradients
        ),
        c!("scp", "attention map", attention_examples),
        c!("scp", "context vector", context_examples),
        c!("scp", "gate map", gate_examples),
        c!("scp", "cablock forward", cablock_examples),
        c!("scp", "scp forward and parameter count", scp_examples),
        c!("hroie", "roi_align examples", roi_align_examples),
        c!("hroie", "fuse saturation", fuse_saturation_examples),
        c!("hroie", "fuse scalar recurrence", fuse_scalar_recurrence),
        c!(
            "hroie",
            "extract order, zeros, disjoint paths",
            hroie_extract_examples
        ),
        c!(
            "accounting",
            "parameter and MAC examples",
            accounting_examples
        ),
        c!(
            "toy-pipeline",
            "scene determinism and box validity",
            scene_determinism_and_validity
        ),
        c!(
            "toy-pipeline",
            "class shape by fill ratio",
            scene_shape_moments
        ),
        c!(
            "toy-pipeline",
            "detector shapes and saturated mask path",
            detector_examples
        ),
        c!("toy-pipeline", "loss examples", loss_examples),
        c!(
            "toy-pipeline",
            "soft-nms examples and oracle",
            soft_nms_examples
        ),
        c!("toy-pipeline", "training determinism", training_examples),
        c!("toy-pipeline", "evaluation bounds", evaluation_examples),
        c!(
            "toy-pipeline",
            "ablation matrix constructs",
            ablation_construct
        ),
        c!(
            "cli",
            "params for hroie at 256 channels",
            params_subcommand_example
        ),
    ]
}

pub fn run(checks: &[Check]) -> Vec<Outcome> {
    checks
        .iter()
        .map(|c| Outcome {
            module: c.module,
            name: c.name,
            error: (c.run)().err().map(|e| format!("{e:#}")),
        })
        .collect()
}
