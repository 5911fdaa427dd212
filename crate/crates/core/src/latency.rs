//! Alpha-beta communication cost estimation.
//!
//! Each simulated event is attributed to an intra-node or inter-node link
//! class from the rank placement and costed as `alpha + bytes / beta`.
//! Collectives are charged once at the worst link class their group touches;
//! no ring/tree refinement is attempted. Pipeline stages of a single request
//! run back to back, so a pass costs the plain sum of its events.
//!
//! Only the communication share of TTFT/TPOT/E2E is modeled. Compute and
//! framework overheads are out of scope, which is why deep pipelines look far
//! cheaper here than their measured TTFT.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{hybrid_volume, CollectiveKind, VolumeBreakdown};
use crate::arch::{ModelArch, ParallelismLayout, SequenceSpec};
use crate::error::{Error, Result};
use crate::schedule::{simulate, CommEvent, EventLog, Phase};

// ---------------------------------------------------------------------------
// Hardware
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile")]
pub struct HardwareProfile {
    /// Seconds.
    pub intra_alpha: f64,
    /// Bytes per second.
    pub intra_beta: f64,
    pub inter_alpha: f64,
    pub inter_beta: f64,
    pub gpus_per_node: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    intra_alpha: f64,
    intra_beta: f64,
    inter_alpha: f64,
    inter_beta: f64,
    gpus_per_node: usize,
}

impl TryFrom<RawProfile> for HardwareProfile {
    type Error = Error;

    fn try_from(r: RawProfile) -> Result<Self> {
        HardwareProfile::new(
            r.intra_alpha,
            r.intra_beta,
            r.inter_alpha,
            r.inter_beta,
            r.gpus_per_node,
        )
    }
}

impl HardwareProfile {
    pub fn new(
        intra_alpha: f64,
        intra_beta: f64,
        inter_alpha: f64,
        inter_beta: f64,
        gpus_per_node: usize,
    ) -> Result<Self> {
        let values = [
            ("intra_alpha", intra_alpha),
            ("intra_beta", intra_beta),
            ("inter_alpha", inter_alpha),
            ("inter_beta", inter_beta),
        ];
        for (name, v) in values {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidProfile(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if gpus_per_node == 0 {
            return Err(Error::InvalidProfile("gpus_per_node must be >= 1".into()));
        }
        Ok(HardwareProfile {
            intra_alpha,
            intra_beta,
            inter_alpha,
            inter_beta,
            gpus_per_node,
        })
    }

    /// Illustrative single-tier profile: inter-node links behave like intra-node ones.
    pub fn flat() -> Self {
        HardwareProfile::new(5e-6, 200e9, 5e-6, 200e9, 4).expect("valid")
    }

    /// Illustrative two-tier profile with a tenth of the bandwidth across nodes.
    pub fn hierarchical() -> Self {
        HardwareProfile::new(5e-6, 200e9, 10e-6, 20e9, 4).expect("valid")
    }

    pub fn is_hierarchical(&self) -> bool {
        self.inter_beta < self.intra_beta
    }

    pub fn alpha(&self, class: LinkClass) -> f64 {
        match class {
            LinkClass::Intra => self.intra_alpha,
            LinkClass::Inter => self.inter_alpha,
        }
    }

    pub fn beta(&self, class: LinkClass) -> f64 {
        match class {
            LinkClass::Intra => self.intra_beta,
            LinkClass::Inter => self.inter_beta,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkClass {
    Intra,
    Inter,
}

// ---------------------------------------------------------------------------
// Costing
// ---------------------------------------------------------------------------

fn check_capacity(layout: &ParallelismLayout, hw: &HardwareProfile) -> Result<()> {
    let max = layout.max_ranks_per_node();
    if max > hw.gpus_per_node {
        return Err(Error::InvalidLayout(format!(
            "placement puts {max} ranks on one node but gpus_per_node is {}",
            hw.gpus_per_node
        )));
    }
    Ok(())
}

fn spans_nodes(event: &CommEvent, layout: &ParallelismLayout) -> bool {
    match event.kind {
        CollectiveKind::Send | CollectiveKind::Recv => {
            // rank i of one stage talks to rank i of the adjacent stage
            let peer = event.peer_stage.unwrap_or(event.stage);
            layout
                .stage_ranks(event.stage)
                .zip(layout.stage_ranks(peer))
                .any(|(a, b)| layout.node_of(a) != layout.node_of(b))
        }
        _ => {
            let mut ranks = layout.stage_ranks(event.stage);
            let first = ranks.next().map(|r| layout.node_of(r));
            ranks.any(|r| Some(layout.node_of(r)) != first)
        }
    }
}

/// Intra-node when every participating rank shares a node.
pub fn classify_link(
    event: &CommEvent,
    layout: &ParallelismLayout,
    hw: &HardwareProfile,
) -> Result<LinkClass> {
    check_capacity(layout, hw)?;
    Ok(if spans_nodes(event, layout) {
        LinkClass::Inter
    } else {
        LinkClass::Intra
    })
}

pub fn event_cost(event: &CommEvent, class: LinkClass, hw: &HardwareProfile) -> f64 {
    hw.alpha(class) + event.bytes_on_wire as f64 / hw.beta(class)
}

/// Communication-only share of the serving latency metrics, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SloEstimate {
    pub ttft_comm: f64,
    pub tpot_comm: f64,
    pub e2e_comm: f64,
}

/// Costs every event of `log` under `layout`'s placement. A `Recv` is the
/// far end of a costed `Send` and adds nothing.
pub fn estimate_slo(
    log: &EventLog,
    layout: &ParallelismLayout,
    hw: &HardwareProfile,
) -> Result<SloEstimate> {
    if (layout.tp, layout.pp) != (log.layout.tp, log.layout.pp) {
        return Err(Error::InvalidLayout(format!(
            "layout {} does not match the simulated {}",
            layout.label(),
            log.layout.label()
        )));
    }
    check_capacity(layout, hw)?;

    let mut prefill = 0.0;
    let mut decode = 0.0;
    for event in &log.events {
        if event.kind == CollectiveKind::Recv {
            continue;
        }
        let class = if spans_nodes(event, layout) {
            LinkClass::Inter
        } else {
            LinkClass::Intra
        };
        let cost = event_cost(event, class, hw);
        match event.phase {
            Phase::Prefill => prefill += cost,
            Phase::Decode => decode += cost,
        }
    }
    let passes = log.seq.decode_passes();
    let tpot = if passes == 0 {
        0.0
    } else {
        decode / passes as f64
    };
    Ok(SloEstimate {
        ttft_comm: prefill,
        tpot_comm: tpot,
        e2e_comm: prefill + decode,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub model: String,
    pub tp: usize,
    pub pp: usize,
    pub prefill_len: u64,
    pub decode_len: u64,
    /// One of `allreduce`, `allgather`, `gather`, `p2p`, `total`.
    pub kind: &'static str,
    pub bytes: u64,
    pub ttft_comm: Option<f64>,
    pub tpot_comm: Option<f64>,
}

fn breakdown_rows(v: &VolumeBreakdown) -> [(&'static str, u64); 5] {
    [
        ("allreduce", v.allreduce_bytes),
        ("allgather", v.allgather_bytes),
        ("gather", v.gather_bytes),
        ("p2p", v.p2p_bytes),
        ("total", v.total_bytes),
    ]
}

/// Analytic volumes for every (layout, decode length), in input order. When a
/// hardware profile is given each configuration is also simulated and costed.
pub fn sweep_decode_len(
    arch: &ModelArch,
    layouts: &[ParallelismLayout],
    prefill_len: u64,
    decode_lens: &[u64],
    hw: Option<&HardwareProfile>,
) -> Result<Vec<SweepRow>> {
    if layouts.is_empty() || decode_lens.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one layout and one decode length".into(),
        ));
    }
    let configs: Vec<(&ParallelismLayout, u64)> = layouts
        .iter()
        .flat_map(|l| decode_lens.iter().map(move |&d| (l, d)))
        .collect();

    let per_config: Vec<Result<Vec<SweepRow>>> = configs
        .par_iter()
        .map(|&(layout, decode_len)| {
            let seq = SequenceSpec::new(prefill_len, decode_len)?;
            let volume = hybrid_volume(arch, layout, &seq, true)?;
            let slo = match hw {
                Some(hw) => Some(estimate_slo(&simulate(arch, layout, &seq)?, layout, hw)?),
                None => None,
            };
            Ok(breakdown_rows(&volume)
                .into_iter()
                .map(|(kind, bytes)| SweepRow {
                    model: arch.name.clone(),
                    tp: layout.tp,
                    pp: layout.pp,
                    prefill_len,
                    decode_len,
                    kind,
                    bytes,
                    ttft_comm: slo.map(|s| s.ttft_comm),
                    tpot_comm: slo.map(|s| s.tpot_comm),
                })
                .collect())
        })
        .collect();

    let mut rows = Vec::new();
    for r in per_config {
        rows.extend(r?);
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "model,tp,pp,S_p,S_d,kind,bytes,ttft_comm,tpot_comm";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.model,
            r.tp,
            r.pp,
            r.prefill_len,
            r.decode_len,
            r.kind,
            r.bytes,
            opt(r.ttft_comm),
            opt(r.tpot_comm)
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Advisor
// ---------------------------------------------------------------------------

/// Relative importance of each metric when ranking layouts. Each metric is
/// normalized by its maximum over the candidates before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AdvisorWeights {
    pub ttft: f64,
    pub tpot: f64,
    pub e2e: f64,
    #[serde(default)]
    pub volume: f64,
}

impl AdvisorWeights {
    pub fn new(ttft: f64, tpot: f64, e2e: f64, volume: f64) -> Result<Self> {
        let w = AdvisorWeights {
            ttft,
            tpot,
            e2e,
            volume,
        };
        let all = [ttft, tpot, e2e, volume];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidWeights(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(w)
    }

    /// Parses `ttft,tpot,e2e` or `ttft,tpot,e2e,volume`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidWeights(format!("not a number: `{p}`")))
            })
            .collect::<Result<_>>()?;
        match parts[..] {
            [a, b, c] => AdvisorWeights::new(a, b, c, 0.0),
            [a, b, c, d] => AdvisorWeights::new(a, b, c, d),
            _ => Err(Error::InvalidWeights(format!(
                "expected 3 or 4 comma-separated weights, got {}",
                parts.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedLayout {
    pub layout: ParallelismLayout,
    pub slo: SloEstimate,
    pub total_bytes: u64,
    pub score: f64,
}

/// Every `(tp, pp)` with `tp * pp = gpus` whose TP degree divides the hidden
/// size, packed onto nodes of `hw.gpus_per_node` GPUs.
pub fn candidate_layouts(
    arch: &ModelArch,
    gpus: usize,
    hw: &HardwareProfile,
) -> Vec<ParallelismLayout> {
    (1..=gpus)
        .filter(|t| gpus.is_multiple_of(*t) && arch.hidden_size.is_multiple_of(*t as u64))
        .filter_map(|t| ParallelismLayout::packed(t, gpus / t, hw.gpus_per_node).ok())
        .collect()
}

/// Ranks candidate layouts by weighted communication cost, lowest first.
/// Ties are broken by lower total volume, then lower TP degree.
pub fn advise(
    arch: &ModelArch,
    hw: &HardwareProfile,
    seq: &SequenceSpec,
    gpus: usize,
    weights: &AdvisorWeights,
) -> Result<Vec<RankedLayout>> {
    let candidates = candidate_layouts(arch, gpus, hw);
    if candidates.is_empty() {
        return Err(Error::NoFeasibleLayout { gpus });
    }
    let evaluated: Vec<(ParallelismLayout, SloEstimate, u64)> = candidates
        .into_par_iter()
        .map(|layout| {
            let log = simulate(arch, &layout, seq)?;
            let slo = estimate_slo(&log, &layout, hw)?;
            let bytes = hybrid_volume(arch, &layout, seq, true)?.total_bytes;
            Ok((layout, slo, bytes))
        })
        .collect::<Result<_>>()?;

    let max = |f: &dyn Fn(&(ParallelismLayout, SloEstimate, u64)) -> f64| {
        evaluated.iter().map(f).fold(0.0_f64, f64::max)
    };
    let norm = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
    let max_ttft = max(&|e| e.1.ttft_comm);
    let max_tpot = max(&|e| e.1.tpot_comm);
    let max_e2e = max(&|e| e.1.e2e_comm);
    let max_vol = max(&|e| e.2 as f64);

    let mut ranked: Vec<RankedLayout> = evaluated
        .into_iter()
        .map(|(layout, slo, total_bytes)| {
            let score = weights.ttft * norm(slo.ttft_comm, max_ttft)
                + weights.tpot * norm(slo.tpot_comm, max_tpot)
                + weights.e2e * norm(slo.e2e_comm, max_e2e)
                + weights.volume * norm(total_bytes as f64, max_vol);
            RankedLayout {
                layout,
                slo,
                total_bytes,
                score,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(Ordering::Equal)
            .then(a.total_bytes.cmp(&b.total_bytes))
            .then(a.layout.tp.cmp(&b.layout.tp))
    });
    Ok(ranked)
}
