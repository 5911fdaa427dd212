//! Domain types shared across the toolkit: model architecture, parallelism
//! layout and request sequence lengths, plus the built-in model presets.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BYTES_PER_ELEMENT: u64 = 2;

// ---------------------------------------------------------------------------
// ModelArch
// ---------------------------------------------------------------------------

/// Dense decoder-only transformer parameters that drive every volume formula.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawModelArch")]
pub struct ModelArch {
    pub name: String,
    pub hidden_size: u64,
    pub num_layers: u64,
    pub vocab_size: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u64>,
    pub bytes_per_element: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelArch {
    name: String,
    hidden_size: u64,
    num_layers: u64,
    vocab_size: u64,
    #[serde(default)]
    num_heads: Option<u64>,
    #[serde(default)]
    head_dim: Option<u64>,
    #[serde(default = "default_bytes")]
    bytes_per_element: u64,
}

fn default_bytes() -> u64 {
    DEFAULT_BYTES_PER_ELEMENT
}

impl TryFrom<RawModelArch> for ModelArch {
    type Error = Error;

    fn try_from(raw: RawModelArch) -> Result<Self> {
        let arch = ModelArch {
            name: raw.name,
            hidden_size: raw.hidden_size,
            num_layers: raw.num_layers,
            vocab_size: raw.vocab_size,
            num_heads: raw.num_heads,
            head_dim: raw.head_dim,
            bytes_per_element: raw.bytes_per_element,
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl ModelArch {
    /// Builds an architecture with FP16/BF16 elements and no attention-head
    /// information.
    pub fn new(
        name: impl Into<String>,
        hidden_size: u64,
        num_layers: u64,
        vocab_size: u64,
    ) -> Result<Self> {
        let arch = ModelArch {
            name: name.into(),
            hidden_size,
            num_layers,
            vocab_size,
            num_heads: None,
            head_dim: None,
            bytes_per_element: DEFAULT_BYTES_PER_ELEMENT,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_heads(mut self, num_heads: u64, head_dim: u64) -> Result<Self> {
        self.num_heads = Some(num_heads);
        self.head_dim = Some(head_dim);
        self.validate()?;
        Ok(self)
    }

    pub fn with_bytes_per_element(mut self, bytes: u64) -> Result<Self> {
        self.bytes_per_element = bytes;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("vocab_size", self.vocab_size),
            ("bytes_per_element", self.bytes_per_element),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::InvalidArch(format!("{field} must be >= 1")));
            }
        }
        if let (Some(heads), Some(dim)) = (self.num_heads, self.head_dim) {
            if heads == 0 || dim == 0 {
                return Err(Error::InvalidArch(
                    "num_heads and head_dim must be >= 1".into(),
                ));
            }
            if heads * dim != self.hidden_size {
                return Err(Error::InvalidArch(format!(
                    "num_heads ({heads}) x head_dim ({dim}) = {} does not equal hidden_size ({})",
                    heads * dim,
                    self.hidden_size
                )));
            }
        }
        Ok(())
    }

    /// Vocabulary slice held by one tensor-parallel rank, padded upwards.
    pub fn vocab_shard(&self, tp: u64) -> u64 {
        self.vocab_size.div_ceil(tp)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 3] = ["llama-3.2-3b", "llama-3.1-8b", "llama-2-13b"];

/// Returns a built-in architecture.
///
/// Hidden size, layer count and the 8B vocabulary follow from observed
/// Allreduce/Gather message shapes; the remaining vocab sizes and head counts
/// come from the public model cards.
pub fn preset(name: &str) -> Result<ModelArch> {
    let (hidden, layers, vocab, heads) = match name {
        "llama-3.2-3b" => (3072, 28, 128_256, 24),
        "llama-3.1-8b" => (4096, 32, 128_256, 32),
        "llama-2-13b" => (5120, 40, 32_000, 40),
        _ => {
            return Err(Error::UnknownPreset {
                name: name.to_string(),
                known: PRESET_NAMES.join(", "),
            })
        }
    };
    ModelArch::new(name, hidden, layers, vocab)?.with_heads(heads, 128)
}

pub fn all_presets() -> Vec<ModelArch> {
    PRESET_NAMES
        .iter()
        .map(|n| preset(n).expect("built-in preset"))
        .collect()
}

// ---------------------------------------------------------------------------
// ParallelismLayout
// ---------------------------------------------------------------------------

/// Tensor- and pipeline-parallel degrees with a rank-to-node placement.
///
/// Ranks are grouped TP-major: stage `s` owns global ranks `s*tp .. s*tp+tp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLayout")]
pub struct ParallelismLayout {
    pub tp: usize,
    pub pp: usize,
    pub placement: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    tp: usize,
    pp: usize,
    #[serde(default)]
    placement: Option<Vec<usize>>,
}

impl TryFrom<RawLayout> for ParallelismLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        match raw.placement {
            Some(placement) => ParallelismLayout::with_placement(raw.tp, raw.pp, placement),
            None => ParallelismLayout::new(raw.tp, raw.pp),
        }
    }
}

impl ParallelismLayout {
    /// All ranks on a single node.
    pub fn new(tp: usize, pp: usize) -> Result<Self> {
        check_degrees(tp, pp)?;
        Ok(ParallelismLayout {
            tp,
            pp,
            placement: vec![0; tp * pp],
        })
    }

    /// Fills nodes in rank order, `gpus_per_node` ranks per node.
    pub fn packed(tp: usize, pp: usize, gpus_per_node: usize) -> Result<Self> {
        check_degrees(tp, pp)?;
        if gpus_per_node == 0 {
            return Err(Error::InvalidLayout("gpus_per_node must be >= 1".into()));
        }
        let placement = (0..tp * pp).map(|r| r / gpus_per_node).collect();
        Ok(ParallelismLayout { tp, pp, placement })
    }

    pub fn with_placement(tp: usize, pp: usize, placement: Vec<usize>) -> Result<Self> {
        check_degrees(tp, pp)?;
        if placement.len() != tp * pp {
            return Err(Error::InvalidLayout(format!(
                "placement covers {} ranks, expected tp*pp = {}",
                placement.len(),
                tp * pp
            )));
        }
        let mut used = placement.clone();
        used.sort_unstable();
        used.dedup();
        if used.iter().enumerate().any(|(i, &n)| i != n) {
            return Err(Error::InvalidLayout(format!(
                "node indices must be contiguous from 0, got {used:?}"
            )));
        }
        Ok(ParallelismLayout { tp, pp, placement })
    }

    pub fn world_size(&self) -> usize {
        self.tp * self.pp
    }

    pub fn num_nodes(&self) -> usize {
        self.placement.iter().max().map_or(0, |m| m + 1)
    }

    /// Global ranks forming the TP group of `stage`.
    pub fn stage_ranks(&self, stage: usize) -> Range<usize> {
        stage * self.tp..(stage + 1) * self.tp
    }

    pub fn stage_of_rank(&self, rank: usize) -> usize {
        rank / self.tp
    }

    pub fn node_of(&self, rank: usize) -> usize {
        self.placement[rank]
    }

    /// Number of transformer layers held by `stage` out of `num_layers`.
    ///
    /// Earlier stages take one extra layer each until the remainder runs out.
    pub fn layers_for_stage(&self, num_layers: u64, stage: usize) -> u64 {
        let pp = self.pp as u64;
        let base = num_layers / pp;
        let rem = num_layers % pp;
        base + u64::from((stage as u64) < rem)
    }

    /// Largest number of ranks placed on any node.
    pub fn max_ranks_per_node(&self) -> usize {
        let mut counts = vec![0usize; self.num_nodes()];
        for &n in &self.placement {
            counts[n] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }

    pub fn label(&self) -> String {
        format!("TP{}xPP{}", self.tp, self.pp)
    }
}

fn check_degrees(tp: usize, pp: usize) -> Result<()> {
    if tp == 0 || pp == 0 {
        return Err(Error::InvalidLayout(format!(
            "tp and pp must be >= 1 (got tp={tp}, pp={pp})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SequenceSpec
// ---------------------------------------------------------------------------

/// Prompt and generation lengths of one request.
///
/// `decode_len` counts every generated token, including the one sampled at
/// the end of prefill, so a request runs `decode_len` forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSequence")]
pub struct SequenceSpec {
    pub prefill_len: u64,
    pub decode_len: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    prefill_len: u64,
    decode_len: u64,
}

impl TryFrom<RawSequence> for SequenceSpec {
    type Error = Error;

    fn try_from(raw: RawSequence) -> Result<Self> {
        SequenceSpec::new(raw.prefill_len, raw.decode_len)
    }
}

impl SequenceSpec {
    pub fn new(prefill_len: u64, decode_len: u64) -> Result<Self> {
        if prefill_len == 0 || decode_len == 0 {
            return Err(Error::InvalidSequence(format!(
                "prefill_len and decode_len must be >= 1 (got {prefill_len}, {decode_len})"
            )));
        }
        Ok(SequenceSpec {
            prefill_len,
            decode_len,
        })
    }

    /// Tokens pushed through the network over the whole request: S_p + S_d - 1.
    pub fn tokens_processed(&self) -> u64 {
        self.prefill_len + self.decode_len - 1
    }

    pub fn decode_passes(&self) -> u64 {
        self.decode_len - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_values() {
        assert_eq!(preset("llama-3.1-8b").unwrap().hidden_size, 4096);
        assert_eq!(preset("llama-3.2-3b").unwrap().num_layers, 28);
        assert_eq!(preset("llama-2-13b").unwrap().hidden_size, 5120);
        assert_eq!(preset("llama-3.1-8b").unwrap().vocab_size, 128_256);
    }

    #[test]
    fn preset_counts_and_sizes_match_observed_tables() {
        let expected = [(57, 786_432), (65, 1_048_576), (81, 1_310_720)];
        for (arch, (count, bytes)) in all_presets().iter().zip(expected) {
            assert_eq!(2 * arch.num_layers + 1, count, "{}", arch.name);
            assert_eq!(128 * arch.hidden_size * arch.bytes_per_element, bytes);
        }
    }

    #[test]
    fn unknown_preset_lists_known_names() {
        let err = preset("gpt-2").unwrap_err().to_string();
        for name in PRESET_NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn heads_must_multiply_to_hidden() {
        let err = ModelArch::new("x", 4096, 2, 100)
            .unwrap()
            .with_heads(30, 128)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArch(_)));
    }

    #[test]
    fn zero_fields_rejected() {
        assert!(ModelArch::new("x", 0, 1, 1).is_err());
        assert!(ModelArch::new("x", 1, 1, 1)
            .unwrap()
            .with_bytes_per_element(0)
            .is_err());
        assert!(SequenceSpec::new(0, 1).is_err());
        assert!(SequenceSpec::new(1, 0).is_err());
        assert!(ParallelismLayout::new(0, 1).is_err());
    }

    #[test]
    fn layout_groups_are_tp_major() {
        let l = ParallelismLayout::new(2, 3).unwrap();
        assert_eq!(l.stage_ranks(1), 2..4);
        assert_eq!(l.stage_of_rank(5), 2);
        let tp1 = ParallelismLayout::new(1, 4).unwrap();
        assert_eq!(tp1.stage_ranks(3).len(), 1);
        let pp1 = ParallelismLayout::new(4, 1).unwrap();
        assert_eq!(pp1.layers_for_stage(32, 0), 32);
    }

    #[test]
    fn uneven_layer_assignment_front_loads() {
        let l = ParallelismLayout::new(1, 4).unwrap();
        let layers: Vec<_> = (0..4).map(|s| l.layers_for_stage(10, s)).collect();
        assert_eq!(layers, vec![3, 3, 2, 2]);
        assert_eq!(layers.iter().sum::<u64>(), 10);
    }

    #[test]
    fn placement_validation() {
        assert!(ParallelismLayout::with_placement(2, 2, vec![0, 0, 1]).is_err());
        assert!(ParallelismLayout::with_placement(2, 1, vec![0, 2]).is_err());
        let l = ParallelismLayout::with_placement(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(l.num_nodes(), 2);
        let packed = ParallelismLayout::packed(8, 1, 4).unwrap();
        assert_eq!(packed.placement, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn json_roundtrip_uses_snake_case_fields() {
        let json = r#"{"name":"tiny","hidden_size":64,"num_layers":2,"vocab_size":100,"num_heads":4,"head_dim":16}"#;
        let arch: ModelArch = serde_json::from_str(json).unwrap();
        assert_eq!(arch.bytes_per_element, 2);
        let bad = r#"{"name":"tiny","hidden_size":64,"num_layers":2,"vocab_size":100,"num_heads":3,"head_dim":16}"#;
        assert!(serde_json::from_str::<ModelArch>(bad).is_err());

        let layout: ParallelismLayout = serde_json::from_str(r#"{"tp":2,"pp":2}"#).unwrap();
        assert_eq!(layout.placement, vec![0; 4]);
        let seq: SequenceSpec =
            serde_json::from_str(r#"{"prefill_len":128,"decode_len":128}"#).unwrap();
        assert_eq!(seq.tokens_processed(), 255);
        assert!(
            serde_json::from_str::<SequenceSpec>(r#"{"prefill_len":0,"decode_len":1}"#).is_err()
        );
    }
}
