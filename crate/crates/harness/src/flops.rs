//! Token-attention work per encoder stage: analytic counts for routed and
//! dense attention, and counters recorded during real forward passes.

use std::fmt::Write as _;

use hyatt_core::bra::AttentionMode;
use hyatt_core::net::{HyattConfig, HyattNet, STAGES};
use hyatt_core::nn::{AttentionRecord, Ctx};
use hyatt_core::Tensor;
use serde::Serialize;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageFlops {
    pub stage: usize,
    pub tokens: u64,
    pub channels: u64,
    pub region_grid: u64,
    pub topk: u64,
    /// `2·T²·C`: QKᵀ plus AV over all token pairs.
    pub dense_macs: u64,
    /// `2·T·(k·T/S²)·C`.
    pub routed_macs: u64,
    /// `S⁴·C` for the region affinity plus `2·T·C` for the region means.
    pub routing_overhead: u64,
    pub instrumented_routed: Option<u64>,
    pub instrumented_dense: Option<u64>,
}

impl StageFlops {
    pub fn ratio(&self) -> f64 {
        self.routed_macs as f64 / self.dense_macs as f64
    }

    /// `routed/dense == k/S²`, checked in integers.
    pub fn ratio_is_exact(&self) -> bool {
        self.routed_macs * self.region_grid.pow(2) == self.dense_macs * self.topk
    }

    pub fn counters_match(&self) -> bool {
        self.instrumented_routed == Some(self.routed_macs) && self.instrumented_dense == Some(self.dense_macs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub stages: Vec<StageFlops>,
}

/// Per-image analytic counts for every stage.
pub fn analytic(cfg: &HyattConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let stages = (0..STAGES)
        .map(|i| {
            let (h, w) = cfg.stage_size(i);
            let t = (h * w) as u64;
            let c = cfg.stage_dims[i] as u64;
            let s = cfg.stage_region_grid[i] as u64;
            let k = cfg.stage_topk[i] as u64;
            let per_region = t / (s * s);
            StageFlops {
                stage: i + 1,
                tokens: t,
                channels: c,
                region_grid: s,
                topk: k,
                dense_macs: 2 * t * t * c,
                routed_macs: 2 * t * (k * per_region) * c,
                routing_overhead: s.pow(4) * c + 2 * t * c,
                instrumented_routed: None,
                instrumented_dense: None,
            }
        })
        .collect();
    Ok(FlopReport { stages })
}

fn stage_counts(records: &[AttentionRecord]) -> Result<Vec<u64>> {
    (0..STAGES)
        .map(|i| {
            let label = format!("stage{}", i + 1);
            let hits: Vec<_> = records.iter().filter(|r| r.label == label).collect();
            match hits.as_slice() {
                [r] => Ok(r.macs / r.batch as u64),
                _ => Err(HarnessError::Config(format!(
                    "expected one attention record for {label}, got {}",
                    hits.len()
                ))),
            }
        })
        .collect()
}

/// Counters from one forward pass of a single image in `mode`.
pub fn instrumented(cfg: &HyattConfig, mode: AttentionMode) -> Result<Vec<u64>> {
    let (mut net, store) = HyattNet::new::<f32>(cfg)?;
    net.mode = mode;
    let [h, w] = cfg.input_size;
    let mut ctx = Ctx::eval(&store);
    let x = ctx.tape.constant(Tensor::full(&[1, 1, h, w], 0.5));
    net.forward(&mut ctx, x)?;
    stage_counts(&ctx.attention)
}

/// Analytic report with both instrumented columns filled in.
pub fn full_report(cfg: &HyattConfig) -> Result<FlopReport> {
    let mut rep = analytic(cfg)?;
    let routed = instrumented(cfg, AttentionMode::Routed)?;
    let dense = instrumented(cfg, AttentionMode::Dense)?;
    for ((s, r), d) in rep.stages.iter_mut().zip(routed).zip(dense) {
        s.instrumented_routed = Some(r);
        s.instrumented_dense = Some(d);
    }
    Ok(rep)
}

pub fn report_csv(rep: &FlopReport) -> String {
    let mut s = String::from(
        "stage,tokens,channels,region_grid,topk,dense_macs,routed_macs,routing_overhead,ratio,instrumented_dense,instrumented_routed\n",
    );
    let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
    for st in &rep.stages {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            st.stage,
            st.tokens,
            st.channels,
            st.region_grid,
            st.topk,
            st.dense_macs,
            st.routed_macs,
            st.routing_overhead,
            st.ratio(),
            opt(st.instrumented_dense),
            opt(st.instrumented_routed)
        );
    }
    s
}
