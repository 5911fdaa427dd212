//! Event-level replay of a single request's communication schedule.
//!
//! [`simulate`] walks one prefill pass over `S_p` tokens followed by `S_d - 1`
//! single-token decode passes and emits every collective and point-to-point
//! operation in execution order. [`summarize`] folds the log into count/shape
//! tables, whole-run and per stage and per rank.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analytic::{
    correction_factor, gather_factor, scale_exact, CollectiveKind, GatherConvention,
    VolumeBreakdown,
};
use crate::arch::{ModelArch, ParallelismLayout, SequenceSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "Prefill",
            Phase::Decode => "Decode",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One communication operation issued by one pipeline stage's TP group.
///
/// `stage` is the stage executing the operation: the sender for `Send`, the
/// receiver for `Recv` and the boundary `Allgather`, the last stage for the
/// logits `Gather`. Boundary events also record the stage on the other side
/// of the link in `peer_stage`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: CollectiveKind,
    pub phase: Phase,
    pub step: u64,
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer_stage: Option<usize>,
    pub layer: Option<u64>,
    pub shape: Vec<u64>,
    pub element_count: u64,
    pub bytes_on_wire: u64,
    pub group_size: u64,
}

impl CommEvent {
    /// Element bytes before any correction factor.
    pub fn message_bytes(&self, bytes_per_element: u64) -> u64 {
        self.element_count * bytes_per_element
    }
}

/// Ordered events of one simulated request together with the inputs that
/// produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub model: String,
    pub bytes_per_element: u64,
    pub layout: ParallelismLayout,
    pub seq: SequenceSpec,
    pub events: Vec<CommEvent>,
}

impl EventLog {
    /// Writes one JSON object per event, newline-terminated.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for event in &self.events {
            serde_json::to_writer(&mut out, event)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Copy of the log keeping only events accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&CommEvent) -> bool) -> EventLog {
        EventLog {
            events: self.events.iter().filter(|e| keep(e)).cloned().collect(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

struct Emitter<'a> {
    arch: &'a ModelArch,
    tp: u64,
    gather: GatherConvention,
    events: Vec<CommEvent>,
}

impl Emitter<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        kind: CollectiveKind,
        phase: Phase,
        step: u64,
        stage: usize,
        peer_stage: Option<usize>,
        layer: Option<u64>,
        shape: Vec<u64>,
        group_size: u64,
    ) {
        let element_count: u64 = shape.iter().product();
        let message = element_count * self.arch.bytes_per_element;
        let bytes_on_wire = match kind {
            CollectiveKind::Gather => message * gather_factor(self.gather, self.tp),
            _ => scale_exact(message, correction_factor(kind, group_size)),
        };
        self.events.push(CommEvent {
            kind,
            phase,
            step,
            stage,
            peer_stage,
            layer,
            shape,
            element_count,
            bytes_on_wire,
            group_size,
        });
    }
}

pub fn simulate(
    arch: &ModelArch,
    layout: &ParallelismLayout,
    seq: &SequenceSpec,
) -> Result<EventLog> {
    simulate_with(arch, layout, seq, GatherConvention::default())
}

/// Replays the full request. Within a pass the order is fixed: per stage the
/// embedding Allreduce (stage 0), two Allreduces per layer, then at the
/// boundary two Send/Recv pairs followed by two Allgathers on the receiving
/// stage; after the last stage, the logits Gather.
pub fn simulate_with(
    arch: &ModelArch,
    layout: &ParallelismLayout,
    seq: &SequenceSpec,
    gather: GatherConvention,
) -> Result<EventLog> {
    let tp = layout.tp as u64;
    let pp = layout.pp;
    if !arch.hidden_size.is_multiple_of(tp) {
        return Err(Error::IndivisibleHidden {
            hidden_size: arch.hidden_size,
            tp,
        });
    }
    let h = arch.hidden_size;
    let mut em = Emitter {
        arch,
        tp,
        gather,
        events: Vec::new(),
    };

    for step in 0..seq.decode_len {
        let (phase, tokens) = if step == 0 {
            (Phase::Prefill, seq.prefill_len)
        } else {
            (Phase::Decode, 1)
        };
        for stage in 0..pp {
            if tp > 1 {
                if stage == 0 {
                    em.push(
                        CollectiveKind::Allreduce,
                        phase,
                        step,
                        stage,
                        None,
                        None,
                        vec![tokens, h],
                        tp,
                    );
                }
                for layer in 0..layout.layers_for_stage(arch.num_layers, stage) {
                    for _ in 0..2 {
                        em.push(
                            CollectiveKind::Allreduce,
                            phase,
                            step,
                            stage,
                            None,
                            Some(layer),
                            vec![tokens, h],
                            tp,
                        );
                    }
                }
            }
            if stage + 1 < pp {
                let next = stage + 1;
                for _ in 0..2 {
                    em.push(
                        CollectiveKind::Send,
                        phase,
                        step,
                        stage,
                        Some(next),
                        None,
                        vec![tokens, h / tp],
                        2,
                    );
                    em.push(
                        CollectiveKind::Recv,
                        phase,
                        step,
                        next,
                        Some(stage),
                        None,
                        vec![tokens, h / tp],
                        2,
                    );
                }
                if tp > 1 {
                    for _ in 0..2 {
                        em.push(
                            CollectiveKind::Allgather,
                            phase,
                            step,
                            next,
                            Some(stage),
                            None,
                            vec![tokens, h],
                            tp,
                        );
                    }
                }
            }
        }
        if tp > 1 {
            em.push(
                CollectiveKind::Gather,
                phase,
                step,
                pp - 1,
                None,
                None,
                vec![arch.vocab_shard(tp)],
                tp,
            );
        }
    }

    Ok(EventLog {
        model: arch.name.clone(),
        bytes_per_element: arch.bytes_per_element,
        layout: layout.clone(),
        seq: *seq,
        events: em.events,
    })
}

/// Point-to-point operations issued in each direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct P2pCounts {
    pub prefill: u64,
    pub decode: u64,
}

impl P2pCounts {
    pub fn total(&self) -> u64 {
        self.prefill + self.decode
    }
}

/// `(p-1) * 2` transfers per pass (two tensors per boundary), over one prefill
/// pass and `S_d - 1` decode passes.
pub fn kv_factor_count(pp: u64, seq: &SequenceSpec) -> P2pCounts {
    let per_pass = pp.saturating_sub(1) * 2;
    P2pCounts {
        prefill: per_pass,
        decode: per_pass * seq.decode_passes(),
    }
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

/// Aggregate of all events sharing a phase and kind.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KindRow {
    pub count: u64,
    /// Occurrences per distinct shape.
    pub shapes: BTreeMap<Vec<u64>, u64>,
    /// Logical message bytes, before correction factors.
    pub message_bytes: u64,
    pub wire_bytes: u64,
    pub group_size: u64,
}

/// Count/shape/byte rows keyed by (phase, kind).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "Vec<TableEntry>", from = "Vec<TableEntry>")]
pub struct KindTable {
    pub rows: BTreeMap<(Phase, CollectiveKind), KindRow>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    phase: Phase,
    kind: CollectiveKind,
    #[serde(flatten)]
    row: KindRow,
}

impl From<KindTable> for Vec<TableEntry> {
    fn from(t: KindTable) -> Self {
        t.rows
            .into_iter()
            .map(|((phase, kind), row)| TableEntry { phase, kind, row })
            .collect()
    }
}

impl From<Vec<TableEntry>> for KindTable {
    fn from(entries: Vec<TableEntry>) -> Self {
        KindTable {
            rows: entries
                .into_iter()
                .map(|e| ((e.phase, e.kind), e.row))
                .collect(),
        }
    }
}

impl KindTable {
    pub fn add(&mut self, event: &CommEvent, bytes_per_element: u64) {
        let row = self.rows.entry((event.phase, event.kind)).or_default();
        row.count += 1;
        *row.shapes.entry(event.shape.clone()).or_default() += 1;
        row.message_bytes += event.message_bytes(bytes_per_element);
        row.wire_bytes += event.bytes_on_wire;
        row.group_size = event.group_size;
    }

    pub fn get(&self, phase: Phase, kind: CollectiveKind) -> Option<&KindRow> {
        self.rows.get(&(phase, kind))
    }

    pub fn count(&self, phase: Phase, kind: CollectiveKind) -> u64 {
        self.get(phase, kind).map_or(0, |r| r.count)
    }

    /// Count across both phases.
    pub fn total_count(&self, kind: CollectiveKind) -> u64 {
        self.count(Phase::Prefill, kind) + self.count(Phase::Decode, kind)
    }

    /// The single shape of a row, if the row exists and is uniform.
    pub fn shape(&self, phase: Phase, kind: CollectiveKind) -> Option<&[u64]> {
        let row = self.get(phase, kind)?;
        match row.shapes.len() {
            1 => row.shapes.keys().next().map(Vec::as_slice),
            _ => None,
        }
    }

    pub fn is_phase_empty(&self, phase: Phase) -> bool {
        !self.rows.keys().any(|(p, _)| *p == phase)
    }

    fn wire(&self, kind: CollectiveKind) -> u64 {
        self.rows
            .iter()
            .filter(|((_, k), _)| *k == kind)
            .map(|(_, r)| r.wire_bytes)
            .sum()
    }

    /// Wire bytes per kind. Point-to-point volume is taken from the `Send`
    /// side so that each transfer is counted once.
    pub fn volume(&self) -> VolumeBreakdown {
        VolumeBreakdown::new(
            self.wire(CollectiveKind::Allreduce),
            self.wire(CollectiveKind::Allgather),
            self.wire(CollectiveKind::Gather),
            self.wire(CollectiveKind::Send),
        )
    }

    /// Markdown table in the `Phase | Operation | Count | Shape` layout.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Phase | Operation | Count | Shape | Message bytes |\n");
        s.push_str("|---|---|---:|---|---:|\n");
        for ((phase, kind), row) in &self.rows {
            let _ = writeln!(
                s,
                "| {phase} | {kind} | {} | {} | {} |",
                row.count,
                format_shapes(row),
                row.message_bytes
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,kind,count,shape,message_bytes,wire_bytes\n");
        for ((phase, kind), row) in &self.rows {
            let _ = writeln!(
                s,
                "{phase},{kind},{},\"{}\",{},{}",
                row.count,
                format_shapes(row),
                row.message_bytes,
                row.wire_bytes
            );
        }
        s
    }
}

pub fn format_shape(shape: &[u64]) -> String {
    let dims: Vec<String> = shape.iter().map(u64::to_string).collect();
    format!("[{}]", dims.join(","))
}

fn format_shapes(row: &KindRow) -> String {
    row.shapes
        .keys()
        .map(|s| format_shape(s))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Count and shape tables derived from an [`EventLog`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    /// Every event in the log.
    pub overall: KindTable,
    /// Events executed by each stage.
    pub per_stage: Vec<KindTable>,
    /// Per stage: the stage's own Allreduces plus all pipeline-wide traffic
    /// (boundary Send/Recv, redistribution Allgather, logits Gather). This is
    /// the view that a profiler attached to one stage's TP group reports.
    pub stage_views: Vec<KindTable>,
    /// Each global rank's participation; every rank of a TP group takes part
    /// once in each of its group's operations.
    pub per_rank: Vec<KindTable>,
}

impl ScheduleSummary {
    pub fn stage_view(&self, stage: usize) -> &KindTable {
        &self.stage_views[stage]
    }

    pub fn rank_view(&self, rank: usize) -> &KindTable {
        &self.per_rank[rank]
    }
}

pub fn summarize(log: &EventLog) -> ScheduleSummary {
    let layout = &log.layout;
    let b = log.bytes_per_element;
    let mut overall = KindTable::default();
    let mut per_stage = vec![KindTable::default(); layout.pp];
    let mut stage_views = vec![KindTable::default(); layout.pp];
    let mut per_rank = vec![KindTable::default(); layout.world_size()];

    for event in &log.events {
        overall.add(event, b);
        per_stage[event.stage].add(event, b);
        if event.kind == CollectiveKind::Allreduce {
            stage_views[event.stage].add(event, b);
        } else {
            for view in &mut stage_views {
                view.add(event, b);
            }
        }
        for rank in layout.stage_ranks(event.stage) {
            per_rank[rank].add(event, b);
        }
    }

    ScheduleSummary {
        overall,
        per_stage,
        stage_views,
        per_rank,
    }
}
