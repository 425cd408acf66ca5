//! Module specs and report tables shared by the `params` and `flops` subcommands.

use anyhow::{bail, Result};
use ctxagg_core::accounting::{
    count_macs, count_params, CostReport, ModuleSpec, ParamBreakdown, RoiBudget,
};
use ctxagg_core::densefpn::DenseFpnConfig;
use ctxagg_core::hroie::HroieConfig;
use ctxagg_core::nn::ConvSpec;
use ctxagg_core::scp::ScpConfig;
use serde::Serialize;

pub const MODULES: [&str; 6] = ["empty", "conv2d", "cablock", "scp", "densefpn", "hroie"];

/// Builds the spec for `module` at width `channels` over `levels` pyramid levels
/// starting at level 2. `depth` applies to densefpn only.
pub fn module_spec(
    module: &str,
    channels: usize,
    levels: Option<usize>,
    depth: Option<usize>,
) -> Result<ModuleSpec> {
    if channels == 0 {
        bail!("channels must be positive");
    }
    let top = |default: usize| -> Result<usize> {
        match levels.unwrap_or(default) {
            0 => bail!("levels must be positive"),
            n => Ok(1 + n),
        }
    };
    Ok(match module {
        "empty" => ModuleSpec::Empty,
        "conv2d" => ModuleSpec::Conv(ConvSpec::same(channels, channels, 1).into()),
        "cablock" => ModuleSpec::CaBlock {
            channels,
            reduction: 1,
        },
        "scp" => ModuleSpec::Scp(ScpConfig {
            channels,
            levels: (2..=top(5)?).collect(),
            reduction: 1,
        }),
        "densefpn" => ModuleSpec::DenseFpn(DenseFpnConfig {
            depth: depth.unwrap_or(DenseFpnConfig::default().depth),
            channels,
            mid_channels: (channels * 3 / 4).max(1),
            levels: [2, top(5)?],
        }),
        "hroie" => ModuleSpec::Hroie(HroieConfig {
            channels,
            levels: [2, top(4)?],
            ..HroieConfig::default()
        }),
        other => bail!(
            "unknown module {other:?}; expected one of {}",
            MODULES.join(", ")
        ),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamsReport {
    pub module: String,
    pub spec: ModuleSpec,
    pub params: ParamBreakdown,
}

pub fn params_report(
    module: &str,
    channels: usize,
    levels: Option<usize>,
    depth: Option<usize>,
) -> Result<ParamsReport> {
    let spec = module_spec(module, channels, levels, depth)?;
    let params = count_params(&spec)?;
    Ok(ParamsReport {
        module: module.to_string(),
        spec,
        params,
    })
}

pub fn params_table(r: &ParamsReport) -> String {
    let p = &r.params;
    let rows = [
        ("total", p.total),
        ("learnable", p.learnable),
        ("weights", p.weights),
        ("biases", p.biases),
        ("norm_affine", p.norm_affine),
        ("reweight", p.reweight),
    ];
    let mut s = format!("{}\n", r.module);
    for (k, v) in rows {
        s.push_str(&format!("  {k:<12}{v:>14}\n"));
    }
    s
}

/// Cost reports at the given input size for the three context modules at
/// their default widths.
pub fn default_cost_reports(input_hw: (usize, usize), rois: RoiBudget) -> Result<Vec<CostReport>> {
    ["scp", "densefpn", "hroie"]
        .iter()
        .map(|m| {
            Ok(count_macs(
                &module_spec(m, 256, None, None)?,
                input_hw,
                rois,
            )?)
        })
        .collect()
}

pub fn cost_table(reports: &[CostReport]) -> String {
    let mut s = format!(
        "{:<10}{:>14}{:>18}{:>18}\n",
        "module", "params", "MACs", "2xMACs"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<10}{:>14}{:>18}{:>18}\n",
            r.module, r.params.total, r.macs, r.flops_2x
        ));
        for n in &r.notes {
            s.push_str(&format!("  note: {n}\n"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hroie_default_weights() {
        let r = params_report("hroie", 256, None, None).unwrap();
        assert_eq!(r.params.weights, 1_048_576);
        assert!(params_table(&r).contains("1048576"));
    }

    #[test]
    fn unknown_module_is_an_error() {
        assert!(module_spec("fpn", 256, None, None).is_err());
        assert!(module_spec("scp", 256, Some(0), None).is_err());
    }
}
