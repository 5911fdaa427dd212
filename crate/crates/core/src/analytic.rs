//! Closed-form communication volumes for tensor, pipeline and hybrid
//! parallelism, together with the collective correction factors that turn a
//! logical message size into bytes moved on the wire.
//!
//! All volumes are exact byte counts. Correction factors are rationals and are
//! applied before any division, so results never round. Every function
//! requires the hidden size to be divisible by the tensor-parallel degree,
//! which is what keeps each product integral.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::arch::{ModelArch, ParallelismLayout, SequenceSpec};
use crate::error::{Error, Result};

/// Communication operation types issued during inference.
///
/// `Send` and `Recv` are the two ends of one point-to-point transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CollectiveKind {
    Allreduce,
    Allgather,
    Gather,
    Send,
    Recv,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 5] = [
        CollectiveKind::Allreduce,
        CollectiveKind::Allgather,
        CollectiveKind::Gather,
        CollectiveKind::Send,
        CollectiveKind::Recv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::Allreduce => "Allreduce",
            CollectiveKind::Allgather => "Allgather",
            CollectiveKind::Gather => "Gather",
            CollectiveKind::Send => "Send",
            CollectiveKind::Recv => "Recv",
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        CollectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// How a tensor-parallel logits Gather is charged per decoded token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GatherConvention {
    /// One rank's vocabulary slice (`ceil(v/t)` elements) with factor 1.
    #[default]
    SingleSlice,
    /// Every non-root rank ships its slice: `(t-1) * ceil(v/t)` elements.
    AllSenders,
}

/// Bytes-on-wire multiplier for a collective over `group_size` ranks:
/// `2(d-1)/d` for Allreduce, `(d-1)/d` for Allgather, 1 otherwise.
pub fn correction_factor(kind: CollectiveKind, group_size: u64) -> Ratio<u64> {
    let d = group_size.max(1);
    match kind {
        CollectiveKind::Allreduce => Ratio::new(2 * (d - 1), d),
        CollectiveKind::Allgather => Ratio::new(d - 1, d),
        CollectiveKind::Gather | CollectiveKind::Send | CollectiveKind::Recv => {
            Ratio::from_integer(1)
        }
    }
}

/// Gather factor under `convention`; a single-rank gather moves nothing.
pub fn gather_factor(convention: GatherConvention, group_size: u64) -> u64 {
    if group_size <= 1 {
        return 0;
    }
    match convention {
        GatherConvention::SingleSlice => 1,
        GatherConvention::AllSenders => group_size - 1,
    }
}

/// `bytes * factor`, exact. Panics if the product is not an integer, which
/// the divisibility checks in this module rule out.
pub(crate) fn scale_exact(bytes: u64, factor: Ratio<u64>) -> u64 {
    let num = u128::from(bytes) * u128::from(*factor.numer());
    let den = u128::from(*factor.denom());
    assert!(num % den == 0, "non-integral wire volume {num}/{den}");
    u64::try_from(num / den).expect("volume exceeds u64")
}

// ---------------------------------------------------------------------------
// VolumeBreakdown
// ---------------------------------------------------------------------------

/// Wire-volume totals per collective kind. `p2p_bytes` counts each
/// point-to-point transfer once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VolumeBreakdown {
    pub allreduce_bytes: u64,
    pub allgather_bytes: u64,
    pub gather_bytes: u64,
    pub p2p_bytes: u64,
    pub total_bytes: u64,
}

impl VolumeBreakdown {
    pub fn new(allreduce: u64, allgather: u64, gather: u64, p2p: u64) -> Self {
        VolumeBreakdown {
            allreduce_bytes: allreduce,
            allgather_bytes: allgather,
            gather_bytes: gather,
            p2p_bytes: p2p,
            total_bytes: allreduce + allgather + gather + p2p,
        }
    }

    /// Bytes attributed to `kind`; `Recv` is the receiving end of a counted
    /// `Send` and reports zero.
    pub fn bytes_for(&self, kind: CollectiveKind) -> u64 {
        match kind {
            CollectiveKind::Allreduce => self.allreduce_bytes,
            CollectiveKind::Allgather => self.allgather_bytes,
            CollectiveKind::Gather => self.gather_bytes,
            CollectiveKind::Send => self.p2p_bytes,
            CollectiveKind::Recv => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeOptions {
    /// Charge the vocabulary-parallel embedding Allreduce on the first stage.
    pub include_first_rank_embedding: bool,
    pub gather: GatherConvention,
}

impl Default for VolumeOptions {
    fn default() -> Self {
        VolumeOptions {
            include_first_rank_embedding: true,
            gather: GatherConvention::SingleSlice,
        }
    }
}

fn check_divisible(arch: &ModelArch, tp: u64) -> Result<()> {
    if !arch.hidden_size.is_multiple_of(tp) {
        return Err(Error::IndivisibleHidden {
            hidden_size: arch.hidden_size,
            tp,
        });
    }
    Ok(())
}

fn check_degree(name: &str, value: u64) -> Result<()> {
    if value == 0 {
        return Err(Error::InvalidLayout(format!("{name} must be >= 1")));
    }
    Ok(())
}

fn gather_volume(
    arch: &ModelArch,
    tp: u64,
    seq: &SequenceSpec,
    convention: GatherConvention,
) -> u64 {
    seq.decode_len * arch.vocab_shard(tp) * arch.bytes_per_element * gather_factor(convention, tp)
}

// ---------------------------------------------------------------------------
// Formulas
// ---------------------------------------------------------------------------

/// Pure tensor parallelism over `tp` ranks:
/// `(2L+1)(S_p+S_d-1) h b * 2(t-1)/t` of Allreduce plus `S_d ceil(v/t) b` of
/// Gather.
pub fn tp_volume(arch: &ModelArch, tp: u64, seq: &SequenceSpec) -> Result<VolumeBreakdown> {
    tp_volume_with(arch, tp, seq, GatherConvention::default())
}

pub fn tp_volume_with(
    arch: &ModelArch,
    tp: u64,
    seq: &SequenceSpec,
    gather: GatherConvention,
) -> Result<VolumeBreakdown> {
    check_degree("tp", tp)?;
    check_divisible(arch, tp)?;
    let logical = (2 * arch.num_layers + 1)
        * seq.tokens_processed()
        * arch.hidden_size
        * arch.bytes_per_element;
    let allreduce = scale_exact(logical, correction_factor(CollectiveKind::Allreduce, tp));
    Ok(VolumeBreakdown::new(
        allreduce,
        0,
        gather_volume(arch, tp, seq, gather),
        0,
    ))
}

/// Pure pipeline parallelism over `pp` stages: two activation transfers of
/// `(S_p+S_d-1) h b` bytes across each of the `p-1` stage boundaries.
pub fn pp_volume(arch: &ModelArch, pp: u64, seq: &SequenceSpec) -> Result<VolumeBreakdown> {
    check_degree("pp", pp)?;
    let p2p = (pp - 1) * 2 * seq.tokens_processed() * arch.hidden_size * arch.bytes_per_element;
    Ok(VolumeBreakdown::new(0, 0, 0, p2p))
}

/// Hybrid TP-within-stage, PP-across-stages volume.
///
/// The Allreduce term is that of one stage's TP group (the first stage, whose
/// layer count is `ceil(L/p)` when `p` does not divide `L`), optionally with
/// the embedding Allreduce. Allgather, Gather and point-to-point terms cover
/// the whole pipeline.
pub fn hybrid_volume(
    arch: &ModelArch,
    layout: &ParallelismLayout,
    seq: &SequenceSpec,
    include_first_rank_embedding: bool,
) -> Result<VolumeBreakdown> {
    hybrid_volume_with(
        arch,
        layout,
        seq,
        VolumeOptions {
            include_first_rank_embedding,
            ..VolumeOptions::default()
        },
    )
}

pub fn hybrid_volume_with(
    arch: &ModelArch,
    layout: &ParallelismLayout,
    seq: &SequenceSpec,
    opts: VolumeOptions,
) -> Result<VolumeBreakdown> {
    let tp = layout.tp as u64;
    let pp = layout.pp as u64;
    check_divisible(arch, tp)?;
    let token_bytes = seq.tokens_processed() * arch.hidden_size * arch.bytes_per_element;

    let stage0_allreduces = 2 * layout.layers_for_stage(arch.num_layers, 0)
        + u64::from(opts.include_first_rank_embedding);
    let allreduce = scale_exact(
        stage0_allreduces * token_bytes,
        correction_factor(CollectiveKind::Allreduce, tp),
    );
    let allgather = scale_exact(
        2 * (pp - 1) * token_bytes,
        correction_factor(CollectiveKind::Allgather, tp),
    );
    let gather = gather_volume(arch, tp, seq, opts.gather);
    let p2p = (pp - 1) * 2 * token_bytes / tp;
    Ok(VolumeBreakdown::new(allreduce, allgather, gather, p2p))
}

/// Like [`hybrid_volume_with`] but charging the Allreduces of every stage,
/// i.e. the sum over the complete event log.
pub fn whole_run_volume(
    arch: &ModelArch,
    layout: &ParallelismLayout,
    seq: &SequenceSpec,
    gather: GatherConvention,
) -> Result<VolumeBreakdown> {
    let per_stage = hybrid_volume_with(
        arch,
        layout,
        seq,
        VolumeOptions {
            include_first_rank_embedding: true,
            gather,
        },
    )?;
    let tp = layout.tp as u64;
    let token_bytes = seq.tokens_processed() * arch.hidden_size * arch.bytes_per_element;
    let allreduce = scale_exact(
        (2 * arch.num_layers + 1) * token_bytes,
        correction_factor(CollectiveKind::Allreduce, tp),
    );
    Ok(VolumeBreakdown::new(
        allreduce,
        per_stage.allgather_bytes,
        per_stage.gather_bytes,
        per_stage.p2p_bytes,
    ))
}

/// Ratio of total volume under `seq_b` to that under `seq_a`.
pub fn growth_factor(
    arch: &ModelArch,
    layout: &ParallelismLayout,
    seq_a: &SequenceSpec,
    seq_b: &SequenceSpec,
) -> Result<Ratio<u64>> {
    let a = hybrid_volume(arch, layout, seq_a, true)?.total_bytes;
    let b = hybrid_volume(arch, layout, seq_b, true)?.total_bytes;
    if a == 0 {
        return Err(Error::DegenerateLayout);
    }
    Ok(Ratio::new(b, a))
}
