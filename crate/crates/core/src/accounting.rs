//! Parameter and multiply-accumulate accounting.
//!
//! Parameter counts come from walking the registry a module declares into, so
//! they always agree with the live model. MAC counts follow the module
//! structure: every convolution contributes `Cout * Cin * k * k * H' * W'`, an
//! elementwise product contributes one MAC per output element, and bilinear
//! resampling contributes four per output element. Softmax, ReLU, sigmoid,
//! additions and max pooling are not counted.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::densefpn::{DenseBlock, DenseFpn, DenseFpnConfig};
use crate::error::Result;
use crate::hroie::{Hroie, HroieConfig, Task};
use crate::nn::{Conv2d, ConvSpec};
use crate::param::{ParamEntry, ParamKind, ShapeRegistry};
use crate::pyramid::level_size;
use crate::scp::{CaBlock, Refinement, Scp, ScpConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Every registered scalar, frozen or not.
    pub total: u64,
    /// Trainable scalars only.
    pub learnable: u64,
    pub weights: u64,
    pub biases: u64,
    pub norm_affine: u64,
    pub reweight: u64,
}

impl ParamBreakdown {
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = &'a ParamEntry>) -> Self {
        let mut b = ParamBreakdown::default();
        for e in entries {
            let n = e.shape.numel() as u64;
            b.total += n;
            if e.trainable {
                b.learnable += n;
            }
            match e.kind {
                ParamKind::Weight => b.weights += n,
                ParamKind::Bias => b.biases += n,
                ParamKind::NormAffine => b.norm_affine += n,
                ParamKind::Reweight => b.reweight += n,
            }
        }
        b
    }

    /// Learnable count without biases and normalization affines.
    pub fn learnable_core(&self) -> u64 {
        self.weights + self.reweight
    }
}

/// Static description of a module to account for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "module", rename_all = "snake_case")]
pub enum ModuleSpec {
    Empty,
    Conv(ConvSpecDef),
    CaBlock { channels: usize, reduction: usize },
    Scp(ScpConfig),
    DenseFpn(DenseFpnConfig),
    Hroie(HroieConfig),
}

/// Serializable mirror of [`ConvSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpecDef {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl From<ConvSpec> for ConvSpecDef {
    fn from(s: ConvSpec) -> Self {
        ConvSpecDef {
            in_channels: s.in_channels,
            out_channels: s.out_channels,
            kernel: s.kernel,
            stride: s.stride,
            padding: s.padding,
            bias: s.bias,
        }
    }
}

impl From<ConvSpecDef> for ConvSpec {
    fn from(s: ConvSpecDef) -> Self {
        ConvSpec {
            in_channels: s.in_channels,
            out_channels: s.out_channels,
            kernel: s.kernel,
            stride: s.stride,
            padding: s.padding,
            bias: s.bias,
        }
    }
}

enum Built {
    Empty,
    Conv(Conv2d),
    CaBlock(CaBlock),
    Scp(Scp),
    DenseFpn(DenseFpn),
    Hroie(Hroie),
}

impl ModuleSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleSpec::Empty => "empty",
            ModuleSpec::Conv(_) => "conv2d",
            ModuleSpec::CaBlock { .. } => "cablock",
            ModuleSpec::Scp(_) => "scp",
            ModuleSpec::DenseFpn(_) => "densefpn",
            ModuleSpec::Hroie(_) => "hroie",
        }
    }

    fn build(&self, reg: &mut ShapeRegistry) -> Result<Built> {
        let prefix = self.name();
        Ok(match self {
            ModuleSpec::Empty => Built::Empty,
            ModuleSpec::Conv(s) => Built::Conv(Conv2d::new(
                reg,
                prefix,
                (*s).into(),
                crate::nn::WeightInit::Zeros,
            )?),
            ModuleSpec::CaBlock {
                channels,
                reduction,
            } => Built::CaBlock(CaBlock::new(reg, prefix, *channels, *reduction)?),
            ModuleSpec::Scp(c) => Built::Scp(Scp::new(reg, prefix, c.clone())?),
            ModuleSpec::DenseFpn(c) => Built::DenseFpn(DenseFpn::new(reg, prefix, c.clone())?),
            ModuleSpec::Hroie(c) => Built::Hroie(Hroie::new(reg, prefix, c.clone())?),
        })
    }
}

/// Roi counts assumed for per-roi costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBudget {
    pub detection: usize,
    pub mask: usize,
}

impl Default for RoiBudget {
    /// 1000 proposals through the detection path; masks for the top 100 detections.
    fn default() -> Self {
        RoiBudget {
            detection: 1000,
            mask: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub module: String,
    pub params: ParamBreakdown,
    /// `(height, width)` of the input the MACs were counted at.
    pub input_hw: (usize, usize),
    pub macs: u64,
    /// `2 * macs`, for the multiply-and-add-as-two-ops convention.
    pub flops_2x: u64,
    pub notes: Vec<String>,
}

/// Parameter breakdown of `spec`, by registry walk.
pub fn count_params(spec: &ModuleSpec) -> Result<ParamBreakdown> {
    let mut reg = ShapeRegistry::new();
    spec.build(&mut reg)?;
    Ok(ParamBreakdown::from_entries(reg.entries()))
}

fn conv_macs(c: &Conv2d, h_in: usize, w_in: usize) -> u64 {
    let (h, w) = c.spec.output_size(h_in, w_in);
    c.spec.macs(h, w)
}

fn cablock_macs(b: &CaBlock, h: usize, w: usize) -> u64 {
    let c = b.channels as u64;
    let p = (h * w) as u64;
    let mut m = conv_macs(&b.key, h, w) + conv_macs(&b.value, h, w) + conv_macs(&b.gate, h, w);
    // attention-weighted pooling and gated injection
    m += 2 * c * p;
    m += match &b.refine {
        Refinement::Single(conv) => conv_macs(conv, 1, 1),
        Refinement::Bottleneck { down, norm, up } => {
            conv_macs(down, 1, 1) + norm.channels as u64 + conv_macs(up, 1, 1)
        }
    };
    m
}

fn dense_block_macs(b: &DenseBlock, channels: usize, image: (usize, usize)) -> u64 {
    let c = channels as u64;
    let hw = |l: usize| (level_size(image.0, l), level_size(image.1, l));
    let mut m = 0;
    for (k, i) in (b.l_min..=b.l_max).enumerate() {
        let (h, w) = hw(i);
        let p = (h * w) as u64;
        for t in [&b.topdown[k], &b.bottomup[k]] {
            m += t.convs().iter().map(|cv| conv_macs(cv, h, w)).sum::<u64>();
        }
        for rw in [&b.topdown_weights[k], &b.bottomup_weights[k]]
            .into_iter()
            .flatten()
        {
            for &j in &rw.sources {
                m += c * p;
                if j > i {
                    m += 4 * c * p;
                }
            }
        }
    }
    m
}

fn hroie_macs(h: &Hroie, rois: RoiBudget) -> u64 {
    let c = h.config.channels as u64;
    let samples = (h.config.sampling_ratio * h.config.sampling_ratio) as u64;
    let mut total = 0;
    for (task, n) in [(Task::Detection, rois.detection), (Task::Mask, rois.mask)] {
        let s = h.config.output_size(task);
        let cells = (s * s) as u64;
        let per_roi: u64 = h
            .cells(task)
            .iter()
            .map(|cell| conv_macs(&cell.conv, s, s) + c * cells + 4 * samples * c * cells)
            .sum();
        total += per_roi * n as u64;
    }
    total
}

/// Full cost report for `spec` at `input_hw`.
///
/// For [`ModuleSpec::Conv`] and [`ModuleSpec::CaBlock`] `input_hw` is the
/// feature map size; for the pyramid modules it is the image size.
pub fn count_macs(
    spec: &ModuleSpec,
    input_hw: (usize, usize),
    rois: RoiBudget,
) -> Result<CostReport> {
    let mut reg = ShapeRegistry::new();
    let built = spec.build(&mut reg)?;
    let params = ParamBreakdown::from_entries(reg.entries());
    let (h, w) = input_hw;
    let mut notes = vec![
        "MACs: conv Cout*Cin*k*k*H'*W', 1 per elementwise product, 4 per bilinear output; softmax/activations/additions/pooling excluded"
            .to_string(),
    ];
    let macs = match &built {
        Built::Empty => 0,
        Built::Conv(c) => conv_macs(c, h, w),
        Built::CaBlock(b) => cablock_macs(b, h, w),
        Built::Scp(s) => s
            .blocks
            .iter()
            .map(|(l, b)| cablock_macs(b, level_size(h, *l), level_size(w, *l)))
            .sum(),
        Built::DenseFpn(d) => d
            .blocks
            .iter()
            .map(|b| dense_block_macs(b, d.config.channels, input_hw))
            .sum(),
        Built::Hroie(hr) => {
            notes.push(format!(
                "per-roi costs assume {} detection rois and {} mask rois; RoIAlign counted as 4 taps per sample",
                rois.detection, rois.mask
            ));
            hroie_macs(hr, rois)
        }
    };
    Ok(CostReport {
        module: spec.name().to_string(),
        params,
        input_hw,
        macs,
        flops_2x: 2 * macs,
        notes,
    })
}

/// Per-block parameter increment of a dense pyramid; exact when blocks are identical.
pub fn densefpn_block_delta(config: &DenseFpnConfig) -> Result<u64> {
    let at = |depth| {
        count_params(&ModuleSpec::DenseFpn(DenseFpnConfig {
            depth,
            ..config.clone()
        }))
        .map(|b| b.total)
    };
    Ok(at(2)? - at(1)?)
}

/// Reference ablation figures (millions of parameters, GFLOPs) at 512x512 input.
pub mod reference {
    pub const BASELINE_PARAMS_M: f64 = 43.82;
    pub const BASELINE_GFLOPS: f64 = 114.96;
    pub const DENSEFPN_D1_PARAMS_M: f64 = 44.19;
    pub const DENSEFPN_D3_PARAMS_M: f64 = 48.47;
    pub const DENSEFPN_D1_GFLOPS: f64 = 111.45;
    pub const DENSEFPN_D3_GFLOPS: f64 = 130.05;
    pub const SCP_PARAMS_M: f64 = 44.48;
    pub const SCP_GFLOPS: f64 = 116.41;
    pub const HROIE_PARAMS_M: f64 = 44.87;
    pub const HROIE_GFLOPS: f64 = 151.00;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Params,
    Macs,
    Macs2x,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub label: String,
    pub measured: f64,
    pub reference: f64,
    pub convention: Convention,
    /// `|measured - reference| / reference`.
    pub rel_error: f64,
    /// Relative tolerance when the row is a hard check.
    pub tolerance: Option<f64>,
}

impl Reconciliation {
    fn new(
        label: &str,
        measured: f64,
        reference: f64,
        convention: Convention,
        tolerance: Option<f64>,
    ) -> Self {
        Reconciliation {
            label: label.to_string(),
            measured,
            reference,
            convention,
            rel_error: libm::fabs(measured - reference) / reference,
            tolerance,
        }
    }

    pub fn passes(&self) -> bool {
        self.tolerance.is_none_or(|t| self.rel_error <= t)
    }
}

/// Compares module costs with the reference ablation deltas.
///
/// Rows with a tolerance are hard checks; the rest are informational.
pub fn reference_reconciliation() -> Result<Vec<Reconciliation>> {
    use reference::*;
    let image = (512, 512);
    let mut rows = Vec::new();

    let hroie = count_macs(
        &ModuleSpec::Hroie(HroieConfig::default()),
        image,
        RoiBudget::default(),
    )?;
    rows.push(Reconciliation::new(
        "hroie params (weights + biases)",
        hroie.params.total as f64,
        (HROIE_PARAMS_M - BASELINE_PARAMS_M) * 1e6,
        Convention::Params,
        Some(0.01),
    ));

    let scp = count_macs(
        &ModuleSpec::Scp(ScpConfig::default()),
        image,
        RoiBudget::default(),
    )?;
    rows.push(Reconciliation::new(
        "scp params (weights + biases)",
        scp.params.total as f64,
        (SCP_PARAMS_M - BASELINE_PARAMS_M) * 1e6,
        Convention::Params,
        Some(0.02),
    ));

    let dense = DenseFpnConfig::default();
    rows.push(Reconciliation::new(
        "densefpn per-block params, mid 192 vs depth 1->3 difference",
        densefpn_block_delta(&dense)? as f64,
        (DENSEFPN_D3_PARAMS_M - DENSEFPN_D1_PARAMS_M) * 1e6,
        Convention::Params,
        Some(0.05),
    ));
    // the depth 1->3 difference spans two blocks
    let narrow = DenseFpnConfig {
        mid_channels: 128,
        ..dense.clone()
    };
    rows.push(Reconciliation::new(
        "densefpn per-block params, mid 128 vs half the depth 1->3 difference",
        densefpn_block_delta(&narrow)? as f64,
        (DENSEFPN_D3_PARAMS_M - DENSEFPN_D1_PARAMS_M) * 1e6 / 2.0,
        Convention::Params,
        None,
    ));
    let one = |cfg: &DenseFpnConfig| -> Result<u64> {
        Ok(count_macs(
            &ModuleSpec::DenseFpn(DenseFpnConfig {
                depth: 1,
                ..cfg.clone()
            }),
            image,
            RoiBudget::default(),
        )?
        .macs)
    };
    rows.push(Reconciliation::new(
        "densefpn per-block MACs, mid 128 vs half the depth 1->3 difference",
        one(&narrow)? as f64,
        (DENSEFPN_D3_GFLOPS - DENSEFPN_D1_GFLOPS) * 1e9 / 2.0,
        Convention::Macs,
        None,
    ));

    let scp_ref = (SCP_GFLOPS - BASELINE_GFLOPS) * 1e9;
    rows.push(Reconciliation::new(
        "scp MACs",
        scp.macs as f64,
        scp_ref,
        Convention::Macs,
        None,
    ));
    rows.push(Reconciliation::new(
        "scp 2xMACs",
        scp.flops_2x as f64,
        scp_ref,
        Convention::Macs2x,
        None,
    ));

    let hroie_ref = (HROIE_GFLOPS - BASELINE_GFLOPS) * 1e9;
    rows.push(Reconciliation::new(
        "hroie MACs",
        hroie.macs as f64,
        hroie_ref,
        Convention::Macs,
        None,
    ));
    rows.push(Reconciliation::new(
        "hroie 2xMACs",
        hroie.flops_2x as f64,
        hroie_ref,
        Convention::Macs2x,
        None,
    ));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(cin: usize, cout: usize, k: usize) -> ModuleSpec {
        ModuleSpec::Conv(ConvSpec::same(cin, cout, k).into())
    }

    #[test]
    fn pointwise_conv_counts() {
        assert_eq!(count_params(&conv(256, 256, 1)).unwrap().total, 65_792);
        let r = count_macs(&conv(256, 256, 1), (64, 64), RoiBudget::default()).unwrap();
        assert_eq!(r.macs, 268_435_456);
        assert_eq!(r.flops_2x, 2 * 268_435_456);
    }

    #[test]
    fn empty_module_is_free() {
        let r = count_macs(&ModuleSpec::Empty, (512, 512), RoiBudget::default()).unwrap();
        assert_eq!(r.macs, 0);
        assert_eq!(r.params.total, 0);
    }

    #[test]
    fn cablock_breakdown() {
        let b = count_params(&ModuleSpec::CaBlock {
            channels: 256,
            reduction: 1,
        })
        .unwrap();
        assert_eq!(b.weights, 2 * 256 * 256 + 2 * 256);
        assert_eq!(b.biases, 1 + 256 + 1 + 256);
        assert_eq!(b.norm_affine, 0);
        let r4 = count_params(&ModuleSpec::CaBlock {
            channels: 256,
            reduction: 4,
        })
        .unwrap();
        assert_eq!(r4.norm_affine, 2 * 64);
        assert_eq!(r4.learnable, r4.total - 128);
    }

    #[test]
    fn reconciliation_hard_rows_pass() {
        for row in reference_reconciliation().unwrap() {
            assert!(row.passes(), "{row:?}");
        }
    }
}
