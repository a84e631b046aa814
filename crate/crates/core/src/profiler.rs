//! Analytic parameter and multiply-accumulate counts.
//!
//! One MAC is one multiply-accumulate pair. Activations, inference-mode
//! batch norm and the sigmoid/tanh nonlinearities cost nothing. The frame
//! count for a duration is `round(duration / frame_shift)`.

use std::fmt::Write as _;

use crate::dsp::FrameSpec;
use crate::model::AmcrnConfig;
use crate::{Error, Result};

/// Durations of the default report, in seconds.
pub const DEFAULT_DURATIONS: [f64; 3] = [2.0, 3.0, 5.0];

/// Cost of one named layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub duration_s: f64,
    pub frames: u64,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

/// Per-layer parameter count and per-frame / fixed MAC terms.
struct Layer {
    name: String,
    params: u64,
    macs_per_frame: u64,
    macs_fixed: u64,
}

fn conv(name: String, k: usize, cin: usize, cout: usize) -> Layer {
    let (k, cin, cout) = (k as u64, cin as u64, cout as u64);
    Layer {
        name,
        params: k * cin * cout + cout,
        macs_per_frame: k * cin * cout,
        macs_fixed: 0,
    }
}

fn linear_per_frame(name: String, din: usize, dout: usize) -> Layer {
    let (din, dout) = (din as u64, dout as u64);
    Layer {
        name,
        params: din * dout + dout,
        macs_per_frame: din * dout,
        macs_fixed: 0,
    }
}

fn bn(name: String, c: usize) -> Layer {
    Layer {
        name,
        params: 2 * c as u64,
        macs_per_frame: 0,
        macs_fixed: 0,
    }
}

fn lstm(name: String, din: usize, h: usize) -> Layer {
    let (din, h) = (din as u64, h as u64);
    Layer {
        name,
        params: 4 * (din * h + h * h + h),
        macs_per_frame: 4 * h * (din + h),
        macs_fixed: 0,
    }
}

fn layers(config: &AmcrnConfig, include_head: bool) -> Result<Vec<Layer>> {
    config.validate()?;
    let mut out = Vec::new();
    let c0 = config.initial_channels;
    out.push(conv("init.conv".into(), config.initial_kernel, config.n_mels, c0));
    out.push(bn("init.bn".into(), c0));
    for i in 0..config.n_mcb {
        let c = config.mcb_channels[i];
        let p = format!("mcb{i}");
        out.push(conv(format!("{p}.conv_in"), config.mcb_kernel[i], c, c));
        out.push(bn(format!("{p}.bn_in"), c));
        if config.structure.multi_scale {
            let w = c / config.n_scales;
            for j in 2..=config.n_scales {
                out.push(conv(format!("{p}.scale{j}.conv"), config.scale_kernel, w, w));
            }
        } else {
            out.push(conv(format!("{p}.single.conv"), config.scale_kernel, c, c));
        }
        out.push(conv(format!("{p}.conv_out"), config.fusion_kernel(i), c, c));
        out.push(bn(format!("{p}.bn_out"), c));
        if config.structure.temporal_attention {
            let mut ta = conv(format!("{p}.ta.conv"), config.ta_kernel, 2, 1);
            // frame gate applied to every channel
            ta.macs_per_frame += c as u64;
            out.push(ta);
        }
    }
    let c = config.final_channels();
    if config.structure.residual_blstm {
        let h = config.blstm_hidden;
        for l in 0..config.blstm_layers {
            let din = if l == 0 { c } else { 2 * h };
            out.push(lstm(format!("blstm.l{l}.fwd"), din, h));
            out.push(lstm(format!("blstm.l{l}.bwd"), din, h));
        }
        out.push(linear_per_frame("blstm.linear".into(), 2 * h, c));
    }
    out.push(linear_per_frame("pool.att1".into(), c, config.pool_bottleneck));
    out.push(linear_per_frame("pool.att2".into(), config.pool_bottleneck, c));
    // h*h, alpha*h and alpha*h^2 per frame, then mean^2 once
    out.push(Layer {
        name: "pool.stats".into(),
        params: 0,
        macs_per_frame: 3 * c as u64,
        macs_fixed: c as u64,
    });
    let e = config.embedding_dim;
    let mut head = linear_per_frame("head.linear".into(), 2 * c, e);
    head.macs_fixed = head.macs_per_frame;
    head.macs_per_frame = 0;
    out.push(head);
    out.push(bn("head.bn".into(), e));
    if include_head {
        out.push(Layer {
            name: "aam.weight".into(),
            params: (config.n_classes * e) as u64,
            macs_per_frame: 0,
            macs_fixed: 0,
        });
    }
    Ok(out)
}

/// Exact number of trainable parameters.
pub fn count_params(config: &AmcrnConfig, include_head: bool) -> Result<u64> {
    Ok(layers(config, include_head)?.iter().map(|l| l.params).sum())
}

/// Frames attributed to `duration_s` seconds.
pub fn frames_for(duration_s: f64, frame_shift: f64) -> Result<u64> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::config("duration must be positive"));
    }
    Ok((duration_s / frame_shift).round() as u64)
}

/// Inference MACs of one embedding of `duration_s` seconds.
pub fn count_macs(config: &AmcrnConfig, duration_s: f64) -> Result<u64> {
    Ok(cost_report(config, duration_s)?.total_macs)
}

/// Per-layer breakdown for one duration; the classifier head is excluded.
pub fn cost_report(config: &AmcrnConfig, duration_s: f64) -> Result<CostReport> {
    let frames = frames_for(duration_s, FrameSpec::default().frame_shift)?;
    let layers: Vec<LayerCost> = layers(config, false)?
        .into_iter()
        .map(|l| LayerCost {
            name: l.name,
            params: l.params,
            macs: l.macs_per_frame * frames + l.macs_fixed,
        })
        .collect();
    Ok(CostReport {
        duration_s,
        frames,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

/// One report per duration.
pub fn emit_cost_report(config: &AmcrnConfig, durations: &[f64]) -> Result<Vec<CostReport>> {
    if durations.is_empty() {
        return Err(Error::config("no durations to profile"));
    }
    durations.iter().map(|&d| cost_report(config, d)).collect()
}

fn giga(v: u64) -> String {
    format!("{:.3} G", v as f64 / 1e9)
}

/// Aligned table: one row per layer with its parameters and MACs at every
/// duration, then totals and the head-inclusive parameter count.
pub fn format_table(config: &AmcrnConfig, reports: &[CostReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::config("no reports to format"));
    };
    let mut header = vec!["layer".to_string(), "params".to_string()];
    header.extend(reports.iter().map(|r| format!("MACs@{}s", r.duration_s)));
    let mut rows = vec![header];
    for (i, l) in first.layers.iter().enumerate() {
        let mut row = vec![l.name.clone(), l.params.to_string()];
        row.extend(reports.iter().map(|r| r.layers[i].macs.to_string()));
        rows.push(row);
    }
    let mut total = vec!["total".to_string(), first.total_params.to_string()];
    total.extend(reports.iter().map(|r| r.total_macs.to_string()));
    rows.push(total);
    let mut scaled = vec![
        String::new(),
        format!("{:.2} M", first.total_params as f64 / 1e6),
    ];
    scaled.extend(reports.iter().map(|r| giga(r.total_macs)));
    rows.push(scaled);

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, row) in rows.iter().enumerate() {
        if i == rows.len() - 2 {
            writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
        }
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        writeln!(s, "{}", cells.join("  ").trim_end()).unwrap();
    }
    writeln!(s, "params including classifier head: {}", count_params(config, true)?).unwrap();
    Ok(s)
}

/// CSV with header `duration_s,layer,params,macs`.
pub fn format_csv(reports: &[CostReport]) -> String {
    let mut s = String::from("duration_s,layer,params,macs\n");
    for r in reports {
        for l in &r.layers {
            writeln!(s, "{},{},{},{}", r.duration_s, l.name, l.params, l.macs).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_counts() {
        let l = conv("c".into(), 3, 2, 4);
        assert_eq!(l.params, 28);
        let l = conv("c".into(), 3, 4, 8);
        assert_eq!(l.macs_per_frame * 10, 960);
    }

    #[test]
    fn lstm_direction_count() {
        assert_eq!(lstm("l".into(), 5, 3).params, 4 * (15 + 9 + 3));
    }

    #[test]
    fn head_adds_class_weights() {
        let c = AmcrnConfig::default();
        assert_eq!(
            count_params(&c, true).unwrap(),
            count_params(&c, false).unwrap() + (c.n_classes * c.embedding_dim) as u64
        );
    }

    #[test]
    fn frames_round_to_nearest() {
        assert_eq!(frames_for(2.0, 0.01).unwrap(), 200);
        assert_eq!(frames_for(0.004, 0.01).unwrap(), 0);
        assert!(frames_for(0.0, 0.01).is_err());
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let r = cost_report(&AmcrnConfig::default(), 3.0).unwrap();
        assert_eq!(r.total_macs, r.layers.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(r.total_params, r.layers.iter().map(|l| l.params).sum::<u64>());
    }

    #[test]
    fn table_and_csv_shapes() {
        let c = AmcrnConfig::tiny(4);
        let reports = emit_cost_report(&c, &DEFAULT_DURATIONS).unwrap();
        let table = format_table(&c, &reports).unwrap();
        let header = table.lines().next().unwrap();
        assert!(header.contains("params") && header.contains("MACs@2s") && header.contains("MACs@5s"));
        let csv = format_csv(&reports);
        assert_eq!(csv.lines().count(), 1 + 3 * reports[0].layers.len());
        assert!(emit_cost_report(&c, &[]).is_err());
    }
}
