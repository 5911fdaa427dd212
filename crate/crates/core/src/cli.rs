//! The `commscope` command line.
//!
//! Exit statuses: 0 success or exact match, 1 mismatch, 2 usage or
//! configuration error, 3 file or input error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analytic::{
    correction_factor, hybrid_volume_with, CollectiveKind, GatherConvention, VolumeOptions,
};
use crate::arch::{preset, ModelArch, ParallelismLayout, SequenceSpec};
use crate::error::{Error, Result};
use crate::latency::{advise, sweep_csv, sweep_decode_len, AdvisorWeights, HardwareProfile};
use crate::schedule::{simulate_with, summarize, KindTable, ScheduleSummary};
use crate::trace::{diff, parse_observations};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const PRESET_DIR_ENV: &str = "COMMSCOPE_PRESET_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "commscope",
    version,
    about = "Communication modeling for tensor/pipeline parallel LLM inference"
)]
pub struct Cli {
    /// JSON file with RunConfig keys; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form communication volume per collective kind.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Leave out the first stage's embedding Allreduce.
        #[arg(long)]
        no_embedding: bool,
    },
    /// Replay the schedule and print count/shape tables.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Write the event log as JSON lines to this path.
        #[arg(long)]
        events_out: Option<PathBuf>,
        /// `run`, `stage:N`, `local:N` or `rank:N`.
        #[arg(long)]
        view: Option<View>,
    },
    /// Diff JSON-lines observations against a fresh simulation.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long, default_value = "stage:0")]
        view: View,
    },
    /// Volumes (and, with a hardware profile, SLO components) over decode lengths and layouts.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',')]
        decode_lens: Vec<u64>,
        /// Layouts as TPxPP, e.g. `4x1,1x4,2x2`.
        #[arg(long, value_delimiter = ',', value_parser = parse_layout_pair)]
        layouts: Vec<(usize, usize)>,
    },
    /// Rank every TP x PP split of a GPU budget.
    Advise {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        gpus: Option<usize>,
        /// `ttft,tpot,e2e` or `ttft,tpot,e2e,volume`.
        #[arg(long, default_value = "1,1,1")]
        weights: String,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Preset name or path to a model JSON file.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub tp: Option<usize>,
    #[arg(long)]
    pub pp: Option<usize>,
    /// Prefill length in tokens.
    #[arg(long = "prefill")]
    pub prefill_len: Option<u64>,
    /// Decode length in tokens, including the token sampled after prefill.
    #[arg(long = "decode")]
    pub decode_len: Option<u64>,
    /// `flat`, `hierarchical` or a path to a profile JSON file.
    #[arg(long)]
    pub hardware: Option<String>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    #[arg(long, value_enum)]
    pub gather_convention: Option<GatherArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GatherArg {
    SingleSlice,
    AllSenders,
}

impl From<GatherArg> for GatherConvention {
    fn from(g: GatherArg) -> Self {
        match g {
            GatherArg::SingleSlice => GatherConvention::SingleSlice,
            GatherArg::AllSenders => GatherConvention::AllSenders,
        }
    }
}

/// Which slice of a [`ScheduleSummary`] to report or compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Run,
    Stage(usize),
    StageLocal(usize),
    Rank(usize),
}

impl std::str::FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "run" {
            return Ok(View::Run);
        }
        let (name, idx) = s
            .split_once(':')
            .ok_or_else(|| format!("expected run, stage:N, local:N or rank:N, got `{s}`"))?;
        let idx: usize = idx.parse().map_err(|_| format!("bad index in `{s}`"))?;
        match name {
            "stage" => Ok(View::Stage(idx)),
            "local" => Ok(View::StageLocal(idx)),
            "rank" => Ok(View::Rank(idx)),
            _ => Err(format!("unknown view `{name}`")),
        }
    }
}

impl View {
    pub fn select<'a>(&self, summary: &'a ScheduleSummary) -> Result<&'a KindTable> {
        let out_of_range = |what: &str, i: usize| {
            Error::Config(format!("{what} {i} does not exist in this layout"))
        };
        match *self {
            View::Run => Ok(&summary.overall),
            View::Stage(s) => summary
                .stage_views
                .get(s)
                .ok_or_else(|| out_of_range("stage", s)),
            View::StageLocal(s) => summary
                .per_stage
                .get(s)
                .ok_or_else(|| out_of_range("stage", s)),
            View::Rank(r) => summary
                .per_rank
                .get(r)
                .ok_or_else(|| out_of_range("rank", r)),
        }
    }
}

fn parse_layout_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (t, p) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected TPxPP, got `{s}`"))?;
    let t = t
        .trim()
        .parse()
        .map_err(|_| format!("bad TP degree in `{s}`"))?;
    let p = p
        .trim()
        .parse()
        .map_err(|_| format!("bad PP degree in `{s}`"))?;
    Ok((t, p))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub tp: Option<usize>,
    pub pp: Option<usize>,
    pub prefill_len: Option<u64>,
    pub decode_len: Option<u64>,
    pub hardware: Option<String>,
    pub format: Option<OutputFormat>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fully resolved inputs for one command.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub arch: ModelArch,
    pub tp: usize,
    pub pp: usize,
    pub seq: SequenceSpec,
    pub hardware: Option<HardwareProfile>,
    pub format: OutputFormat,
    pub gather: GatherConvention,
}

impl Resolved {
    /// Packed onto the hardware's nodes when a profile is known, otherwise a
    /// single node.
    pub fn layout(&self, tp: usize, pp: usize) -> Result<ParallelismLayout> {
        match &self.hardware {
            Some(hw) => ParallelismLayout::packed(tp, pp, hw.gpus_per_node),
            None => ParallelismLayout::new(tp, pp),
        }
    }
}

/// Resolves a model argument: an existing path or `*.json` is loaded as a
/// file; otherwise `$COMMSCOPE_PRESET_DIR/<name>.json` is tried before the
/// built-in presets.
pub fn resolve_model(spec: &str) -> Result<ModelArch> {
    let as_path = Path::new(spec);
    if spec.ends_with(".json") || as_path.is_file() {
        return ModelArch::from_json_file(as_path);
    }
    if let Some(dir) = std::env::var_os(PRESET_DIR_ENV) {
        let candidate = Path::new(&dir).join(format!("{spec}.json"));
        if candidate.is_file() {
            return ModelArch::from_json_file(&candidate);
        }
    }
    preset(spec)
}

pub fn resolve_hardware(spec: &str) -> Result<HardwareProfile> {
    match spec {
        "flat" => Ok(HardwareProfile::flat()),
        "hierarchical" => Ok(HardwareProfile::hierarchical()),
        path => HardwareProfile::from_json_file(Path::new(path)),
    }
}

fn resolve(common: &CommonArgs, config: &RunConfig) -> Result<Resolved> {
    let model = common
        .model
        .clone()
        .or_else(|| config.model.clone())
        .unwrap_or_else(|| "llama-3.1-8b".to_string());
    let tp = common.tp.or(config.tp).unwrap_or(1);
    let pp = common.pp.or(config.pp).unwrap_or(1);
    if tp == 0 || pp == 0 {
        return Err(Error::Config(format!(
            "tp and pp must be >= 1 (got {tp}, {pp})"
        )));
    }
    let seq = SequenceSpec::new(
        common.prefill_len.or(config.prefill_len).unwrap_or(128),
        common.decode_len.or(config.decode_len).unwrap_or(128),
    )?;
    let hardware = common
        .hardware
        .as_deref()
        .or(config.hardware.as_deref())
        .map(resolve_hardware)
        .transpose()?;
    Ok(Resolved {
        arch: resolve_model(&model)?,
        tp,
        pp,
        seq,
        hardware,
        format: common.format.or(config.format).unwrap_or_default(),
        gather: common.gather_convention.map(Into::into).unwrap_or_default(),
    })
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Parse { .. } | Error::UnknownKind { .. } | Error::Json(_) => {
            EXIT_IO
        }
        _ => EXIT_USAGE,
    }
}

/// Runs the CLI with `args` (including the program name) and returns the
/// process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let text = match &cli.command {
        Command::Predict {
            common,
            no_embedding,
        } => cmd_predict(&resolve(common, &config)?, !no_embedding)?,
        Command::Simulate {
            common,
            events_out,
            view,
        } => cmd_simulate(&resolve(common, &config)?, events_out.as_deref(), *view)?,
        Command::Compare {
            common,
            observations,
            view,
        } => {
            let (text, matched) = cmd_compare(&resolve(common, &config)?, observations, *view)?;
            write_out(out, &text)?;
            return Ok(if matched { EXIT_OK } else { EXIT_MISMATCH });
        }
        Command::Sweep {
            common,
            decode_lens,
            layouts,
        } => cmd_sweep(&resolve(common, &config)?, decode_lens, layouts)?,
        Command::Advise {
            common,
            gpus,
            weights,
        } => cmd_advise(
            &resolve(common, &config)?,
            *gpus,
            &AdvisorWeights::parse(weights)?,
        )?,
    };
    write_out(out, &text)?;
    Ok(EXIT_OK)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn header(r: &Resolved, tp: usize, pp: usize) -> String {
    format!(
        "model {}  TP={} PP={}  S_p={} S_d={}  b={}",
        r.arch.name, tp, pp, r.seq.prefill_len, r.seq.decode_len, r.arch.bytes_per_element
    )
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PredictJson<'a> {
    model: &'a str,
    tp: usize,
    pp: usize,
    prefill_len: u64,
    decode_len: u64,
    include_first_rank_embedding: bool,
    volume: crate::analytic::VolumeBreakdown,
    correction_factors: Vec<(CollectiveKind, String)>,
}

pub fn cmd_predict(r: &Resolved, include_embedding: bool) -> Result<String> {
    let layout = r.layout(r.tp, r.pp)?;
    let v = hybrid_volume_with(
        &r.arch,
        &layout,
        &r.seq,
        VolumeOptions {
            include_first_rank_embedding: include_embedding,
            gather: r.gather,
        },
    )?;
    let factors: Vec<(CollectiveKind, String)> = CollectiveKind::ALL
        .into_iter()
        .map(|k| {
            (
                k,
                correction_factor(
                    k,
                    if matches!(k, CollectiveKind::Send | CollectiveKind::Recv) {
                        2
                    } else {
                        r.tp as u64
                    },
                )
                .to_string(),
            )
        })
        .collect();
    let rows = [
        ("allreduce", v.allreduce_bytes),
        ("allgather", v.allgather_bytes),
        ("gather", v.gather_bytes),
        ("p2p", v.p2p_bytes),
        ("total", v.total_bytes),
    ];
    Ok(match r.format {
        OutputFormat::Table => {
            let mut s = header(r, r.tp, r.pp);
            s.push_str("\n\n| Kind | Bytes |\n|---|---:|\n");
            for (k, b) in rows {
                let _ = writeln!(s, "| {k} | {b} |");
            }
            let _ = writeln!(
                s,
                "\ncorrection factors (d = {}): Allreduce 2(d-1)/d = {}, Allgather (d-1)/d = {}, Gather/Send/Recv 1",
                r.tp,
                correction_factor(CollectiveKind::Allreduce, r.tp as u64),
                correction_factor(CollectiveKind::Allgather, r.tp as u64)
            );
            s
        }
        OutputFormat::Csv => {
            let mut s = String::from("kind,bytes\n");
            for (k, b) in rows {
                let _ = writeln!(s, "{k},{b}");
            }
            s
        }
        OutputFormat::Json => {
            let j = PredictJson {
                model: &r.arch.name,
                tp: r.tp,
                pp: r.pp,
                prefill_len: r.seq.prefill_len,
                decode_len: r.seq.decode_len,
                include_first_rank_embedding: include_embedding,
                volume: v,
                correction_factors: factors,
            };
            serde_json::to_string_pretty(&j)? + "\n"
        }
    })
}

pub fn cmd_simulate(r: &Resolved, events_out: Option<&Path>, view: Option<View>) -> Result<String> {
    let layout = r.layout(r.tp, r.pp)?;
    let log = simulate_with(&r.arch, &layout, &r.seq, r.gather)?;
    if let Some(path) = events_out {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        log.write_jsonl(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))?;
    }
    let summary = summarize(&log);
    Ok(match (r.format, view) {
        (OutputFormat::Table, None) => {
            let mut s = header(r, r.tp, r.pp);
            let _ = write!(
                s,
                "\n\n## Whole run ({} events)\n\n{}",
                log.events.len(),
                summary.overall.to_markdown()
            );
            if r.pp > 1 {
                for stage in 0..r.pp {
                    let _ = write!(
                        s,
                        "\n## Stage {stage} view\n\n{}",
                        summary.stage_view(stage).to_markdown()
                    );
                }
            }
            s
        }
        (OutputFormat::Table, Some(v)) => format!(
            "{}\n\n{}",
            header(r, r.tp, r.pp),
            v.select(&summary)?.to_markdown()
        ),
        (OutputFormat::Csv, v) => v.unwrap_or(View::Run).select(&summary)?.to_csv(),
        (OutputFormat::Json, v) => {
            serde_json::to_string_pretty(v.unwrap_or(View::Run).select(&summary)?)? + "\n"
        }
    })
}

/// Returns the rendered report and whether the observations matched exactly.
pub fn cmd_compare(r: &Resolved, observations: &Path, view: View) -> Result<(String, bool)> {
    let file = std::fs::File::open(observations).map_err(|e| Error::io(observations, e))?;
    let records = parse_observations(BufReader::new(file))?;
    let layout = r.layout(r.tp, r.pp)?;
    let summary = summarize(&simulate_with(&r.arch, &layout, &r.seq, r.gather)?);
    let report = diff(&records, view.select(&summary)?);
    let text = match r.format {
        OutputFormat::Json => report.to_json() + "\n",
        OutputFormat::Table | OutputFormat::Csv => {
            format!("{}\n\n{}", header(r, r.tp, r.pp), report.to_markdown())
        }
    };
    Ok((text, report.exact_match))
}

pub fn cmd_sweep(r: &Resolved, decode_lens: &[u64], layouts: &[(usize, usize)]) -> Result<String> {
    let decode_lens = if decode_lens.is_empty() {
        vec![r.seq.decode_len]
    } else {
        decode_lens.to_vec()
    };
    let pairs = if layouts.is_empty() {
        vec![(r.tp, r.pp)]
    } else {
        layouts.to_vec()
    };
    let layouts = pairs
        .iter()
        .map(|&(t, p)| r.layout(t, p))
        .collect::<Result<Vec<_>>>()?;
    let rows = sweep_decode_len(
        &r.arch,
        &layouts,
        r.seq.prefill_len,
        &decode_lens,
        r.hardware.as_ref(),
    )?;
    Ok(match r.format {
        OutputFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
        OutputFormat::Table | OutputFormat::Csv => sweep_csv(&rows),
    })
}

pub fn cmd_advise(r: &Resolved, gpus: Option<usize>, weights: &AdvisorWeights) -> Result<String> {
    let hw = r.hardware.unwrap_or_else(HardwareProfile::hierarchical);
    let gpus = gpus.unwrap_or(r.tp * r.pp);
    let ranked = advise(&r.arch, &hw, &r.seq, gpus, weights)?;
    Ok(match r.format {
        OutputFormat::Json => serde_json::to_string_pretty(&ranked)? + "\n",
        OutputFormat::Csv => {
            let mut s = String::from("rank,tp,pp,ttft_comm,tpot_comm,e2e_comm,total_bytes,score\n");
            for (i, x) in ranked.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{:e},{:e},{:e},{},{:.6}",
                    i + 1,
                    x.layout.tp,
                    x.layout.pp,
                    x.slo.ttft_comm,
                    x.slo.tpot_comm,
                    x.slo.e2e_comm,
                    x.total_bytes,
                    x.score
                );
            }
            s
        }
        OutputFormat::Table => {
            let mut s = format!(
                "model {}  {} GPUs  S_p={} S_d={}  weights ttft={} tpot={} e2e={} volume={}\n\n",
                r.arch.name,
                gpus,
                r.seq.prefill_len,
                r.seq.decode_len,
                weights.ttft,
                weights.tpot,
                weights.e2e,
                weights.volume
            );
            s.push_str("| Rank | TP | PP | TTFT comm (ms) | TPOT comm (ms) | E2E comm (ms) | Total bytes | Score |\n");
            s.push_str("|---:|---:|---:|---:|---:|---:|---:|---:|\n");
            for (i, x) in ranked.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} | {:.4} |",
                    i + 1,
                    x.layout.tp,
                    x.layout.pp,
                    x.slo.ttft_comm * 1e3,
                    x.slo.tpot_comm * 1e3,
                    x.slo.e2e_comm * 1e3,
                    x.total_bytes,
                    x.score
                );
            }
            s
        }
    })
}
