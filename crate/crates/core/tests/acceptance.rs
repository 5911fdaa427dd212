//! Acceptance criteria. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use commscope::analytic::{correction_factor, hybrid_volume, CollectiveKind};
use commscope::arch::{all_presets, preset, ModelArch, ParallelismLayout, SequenceSpec};
use commscope::cli::{run, EXIT_OK};
use commscope::latency::{estimate_slo, HardwareProfile, SloEstimate};
use commscope::schedule::{simulate, summarize, KindTable, Phase};
use num_rational::Ratio;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seq(sp: u64, sd: u64) -> SequenceSpec {
    SequenceSpec::new(sp, sd).unwrap()
}

fn summary_table(
    arch: &ModelArch,
    tp: usize,
    pp: usize,
    sp: u64,
    sd: u64,
) -> commscope::ScheduleSummary {
    let layout = ParallelismLayout::new(tp, pp).unwrap();
    summarize(&simulate(arch, &layout, &seq(sp, sd)).unwrap())
}

fn expect_row(
    t: &KindTable,
    phase: Phase,
    kind: CollectiveKind,
    count: u64,
    shape: &[u64],
    ctx: &str,
) -> Result<(), String> {
    let got_count = t.count(phase, kind);
    let got_shape = t.shape(phase, kind);
    ensure(got_count == count && got_shape == Some(shape), || {
        format!(
            "{ctx}: {phase} {kind} expected {count} x {shape:?}, got {got_count} x {got_shape:?}"
        )
    })
}

// 1. Table III
fn table_iii() -> Outcome {
    let start = Instant::now();
    let arch = preset("llama-3.1-8b").unwrap();
    for (tp, gather) in [(2usize, 64128u64), (4, 32064)] {
        let s = summary_table(&arch, tp, 1, 128, 128);
        let t = &s.overall;
        let ctx = format!("TP={tp}");
        expect_row(
            t,
            Phase::Prefill,
            CollectiveKind::Allreduce,
            65,
            &[128, 4096],
            &ctx,
        )?;
        expect_row(
            t,
            Phase::Decode,
            CollectiveKind::Allreduce,
            8255,
            &[1, 4096],
            &ctx,
        )?;
        expect_row(
            t,
            Phase::Prefill,
            CollectiveKind::Gather,
            1,
            &[gather],
            &ctx,
        )?;
        expect_row(
            t,
            Phase::Decode,
            CollectiveKind::Gather,
            127,
            &[gather],
            &ctx,
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("TP=2/4 rows exact, {elapsed:.2?}"))
}

// 2. Table IV
fn table_iv() -> Outcome {
    let expected = [
        ("llama-3.2-3b", 786_432u64, 57u64, 6144u64, 7239u64),
        ("llama-3.1-8b", 1_048_576, 65, 8192, 8255),
        ("llama-2-13b", 1_310_720, 81, 10240, 10287),
    ];
    for (name, pre_bytes, pre_count, dec_bytes, dec_count) in expected {
        let arch = preset(name).unwrap();
        for tp in [2usize, 4] {
            let t = summary_table(&arch, tp, 1, 128, 128).overall;
            let pre = t.get(Phase::Prefill, CollectiveKind::Allreduce).unwrap();
            let dec = t.get(Phase::Decode, CollectiveKind::Allreduce).unwrap();
            let pre_size = pre.message_bytes / pre.count;
            let dec_size = dec.message_bytes / dec.count;
            ensure(
                (pre_size, pre.count, dec_size, dec.count)
                    == (pre_bytes, pre_count, dec_bytes, dec_count)
                    && pre.message_bytes.is_multiple_of(pre.count)
                    && dec.message_bytes.is_multiple_of(dec.count),
                || {
                    format!(
                        "{name} TP={tp}: got prefill {pre_size} B x {}, decode {dec_size} B x {}",
                        pre.count, dec.count
                    )
                },
            )?;
        }
    }
    Ok("three presets, sizes and counts exact".into())
}

// 3. Table V
fn table_v() -> Outcome {
    let arch = preset("llama-3.1-8b").unwrap();
    for (pp, pre, dec) in [(2usize, 2u64, 254u64), (4, 6, 762)] {
        let t = summary_table(&arch, 1, pp, 128, 128).overall;
        for kind in [CollectiveKind::Send, CollectiveKind::Recv] {
            let ctx = format!("PP={pp}");
            expect_row(&t, Phase::Prefill, kind, pre, &[128, 4096], &ctx)?;
            expect_row(&t, Phase::Decode, kind, dec, &[1, 4096], &ctx)?;
        }
    }
    Ok("PP=2/4 Send/Recv exact".into())
}

// 4. Table VI
fn table_vi() -> Outcome {
    let arch = preset("llama-3.1-8b").unwrap();
    let s = summary_table(&arch, 2, 2, 128, 128);
    let v = s.stage_view(0);
    let ctx = "TP2xPP2 stage 0";
    expect_row(
        v,
        Phase::Prefill,
        CollectiveKind::Allreduce,
        33,
        &[128, 4096],
        ctx,
    )?;
    expect_row(
        v,
        Phase::Decode,
        CollectiveKind::Allreduce,
        4191,
        &[1, 4096],
        ctx,
    )?;
    expect_row(v, Phase::Prefill, CollectiveKind::Gather, 1, &[64128], ctx)?;
    expect_row(v, Phase::Decode, CollectiveKind::Gather, 127, &[64128], ctx)?;
    expect_row(
        v,
        Phase::Prefill,
        CollectiveKind::Allgather,
        2,
        &[128, 4096],
        ctx,
    )?;
    expect_row(
        v,
        Phase::Decode,
        CollectiveKind::Allgather,
        254,
        &[1, 4096],
        ctx,
    )?;
    for kind in [CollectiveKind::Send, CollectiveKind::Recv] {
        expect_row(v, Phase::Prefill, kind, 2, &[128, 2048], ctx)?;
        expect_row(v, Phase::Decode, kind, 254, &[1, 2048], ctx)?;
    }
    Ok("stage-0 view exact".into())
}

// 5. Growth factors
fn growth_factors() -> Outcome {
    let targets = [
        (128u64, 256u64, Ratio::new(383u64, 255)),
        (256, 512, Ratio::new(639, 383)),
    ];
    let layouts = [("TP4", 4usize, 1usize), ("PP4", 1, 4), ("TP2xPP2", 2, 2)];
    let mut failures = Vec::new();
    for arch in all_presets() {
        for (label, tp, pp) in layouts {
            let layout = ParallelismLayout::new(tp, pp).unwrap();
            for (a, b, target) in targets {
                let va = hybrid_volume(&arch, &layout, &seq(128, a), true)
                    .unwrap()
                    .total_bytes as f64;
                let vb = hybrid_volume(&arch, &layout, &seq(128, b), true)
                    .unwrap()
                    .total_bytes as f64;
                let got = vb / va;
                let want = *target.numer() as f64 / *target.denom() as f64;
                let rel = ((got - want) / want).abs();
                if rel > 1e-9 {
                    failures.push(format!(
                        "{} {label} {a}->{b}: {got:.6} vs {want:.6}",
                        arch.name
                    ));
                }
            }
        }
    }
    if failures.is_empty() {
        Ok("all ratios within 1e-9".into())
    } else {
        Err(format!(
            "{} of 18 ratios off: {}",
            failures.len(),
            failures.join("; ")
        ))
    }
}

// 6. Oracle equivalence
fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for arch in all_presets() {
        for tp in [1usize, 2, 4, 8] {
            for pp in [1usize, 2, 4] {
                let layout = ParallelismLayout::new(tp, pp).unwrap();
                for sp in [1u64, 16, 128] {
                    for sd in [1u64, 16, 128] {
                        let s = seq(sp, sd);
                        let analytic = hybrid_volume(&arch, &layout, &s, true).unwrap();
                        let simulated = summarize(&simulate(&arch, &layout, &s).unwrap())
                            .stage_view(0)
                            .volume();
                        ensure(analytic == simulated, || {
                            format!("{} TP{tp}xPP{pp} {sp}/{sd}: analytic {analytic:?} vs log {simulated:?}", arch.name)
                        })?;
                        checked += 1;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("{checked} configurations exact, {elapsed:.2?}"))
}

// 7. Volume ordering
fn volume_ordering() -> Outcome {
    let s = seq(128, 128);
    for arch in all_presets() {
        let total = |tp, pp| {
            hybrid_volume(&arch, &ParallelismLayout::new(tp, pp).unwrap(), &s, true)
                .unwrap()
                .total_bytes
        };
        let (pp4, hybrid, tp4) = (total(1, 4), total(2, 2), total(4, 1));
        ensure(pp4 < hybrid && hybrid < tp4, || {
            format!("{}: PP4 {pp4}, TP2xPP2 {hybrid}, TP4 {tp4}", arch.name)
        })?;
    }
    Ok("PP4 < TP2xPP2 < TP4 for every preset".into())
}

// 8. SLO trend
fn hierarchical_profiles() -> Vec<HardwareProfile> {
    let mut out = vec![HardwareProfile::hierarchical()];
    for intra_alpha in [1e-6, 5e-6, 2e-5] {
        for alpha_ratio in [1.0, 2.0, 10.0] {
            for intra_beta in [50e9, 200e9, 900e9] {
                for beta_ratio in [1.001, 2.0, 10.0, 100.0] {
                    out.push(
                        HardwareProfile::new(
                            intra_alpha,
                            intra_beta,
                            intra_alpha * alpha_ratio,
                            intra_beta / beta_ratio,
                            4,
                        )
                        .unwrap(),
                    );
                }
            }
        }
    }
    out
}

fn slo(arch: &ModelArch, layout: &ParallelismLayout, hw: &HardwareProfile) -> SloEstimate {
    let log = simulate(arch, layout, &seq(128, 128)).unwrap();
    estimate_slo(&log, layout, hw).unwrap()
}

fn slo_trend() -> Outcome {
    let arch = preset("llama-3.2-3b").unwrap();
    let profiles = hierarchical_profiles();
    let tp8 = ParallelismLayout::packed(8, 1, 4).unwrap();
    let tp4 = ParallelismLayout::packed(4, 1, 4).unwrap();
    // same degree, group split across two nodes vs packed on one
    let pairs = [
        (
            ParallelismLayout::with_placement(4, 1, vec![0, 0, 1, 1]).unwrap(),
            ParallelismLayout::new(4, 1).unwrap(),
        ),
        (
            ParallelismLayout::with_placement(2, 2, vec![0, 1, 0, 1]).unwrap(),
            ParallelismLayout::with_placement(2, 2, vec![0, 0, 1, 1]).unwrap(),
        ),
        (
            ParallelismLayout::with_placement(1, 4, vec![0, 1, 0, 1]).unwrap(),
            ParallelismLayout::new(1, 4).unwrap(),
        ),
    ];
    for hw in &profiles {
        ensure(hw.is_hierarchical(), || "profile not hierarchical".into())?;
        let a = slo(&arch, &tp8, hw);
        let b = slo(&arch, &tp4, hw);
        ensure(a.tpot_comm > b.tpot_comm, || {
            format!(
                "{hw:?}: tpot TP8 {:.3e} <= TP4 {:.3e}",
                a.tpot_comm, b.tpot_comm
            )
        })?;
        for (spread, packed) in &pairs {
            let s = slo(&arch, spread, hw);
            let p = slo(&arch, packed, hw);
            ensure(p.ttft_comm <= s.ttft_comm, || {
                format!(
                    "{hw:?} {}: ttft packed {:.3e} > spread {:.3e}",
                    packed.label(),
                    p.ttft_comm,
                    s.ttft_comm
                )
            })?;
        }
    }
    Ok(format!("{} hierarchical profiles", profiles.len()))
}

// 9. Fixture round trip through the CLI
fn fixture_round_trip() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let cases = [
        ("table3_llama-3.1-8b_tp2.jsonl", "2", "1"),
        ("table3_llama-3.1-8b_tp4.jsonl", "4", "1"),
        ("table5_llama-3.1-8b_pp2.jsonl", "1", "2"),
        ("table5_llama-3.1-8b_pp4.jsonl", "1", "4"),
        ("table6_llama-3.1-8b_tp2_pp2.jsonl", "2", "2"),
    ];
    for (file, tp, pp) in cases {
        let path = dir.join(file);
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            [
                "commscope",
                "compare",
                "--model",
                "llama-3.1-8b",
                "--tp",
                tp,
                "--pp",
                pp,
                "--prefill",
                "128",
                "--decode",
                "128",
                "--view",
                "stage:0",
                "--observations",
                path.to_str().unwrap(),
            ],
            &mut out,
            &mut err,
        );
        ensure(code == EXIT_OK, || {
            format!(
                "{file}: exit {code}\n{}{}",
                String::from_utf8_lossy(&out),
                String::from_utf8_lossy(&err)
            )
        })?;
    }
    Ok(format!("{} fixtures exit 0", cases.len()))
}

// 10. Degeneracy
fn degeneracy() -> Outcome {
    for arch in all_presets() {
        let single = ParallelismLayout::new(1, 1).unwrap();
        let v = hybrid_volume(&arch, &single, &seq(128, 128), true).unwrap();
        ensure(v.total_bytes == 0, || {
            format!("{}: t=p=1 total {}", arch.name, v.total_bytes)
        })?;
    }
    ensure(
        correction_factor(CollectiveKind::Allreduce, 1) == Ratio::from_integer(0),
        || "Allreduce factor at group 1 is not 0".into(),
    )?;
    let arch = preset("llama-3.1-8b").unwrap();
    for (tp, pp) in [(2usize, 1usize), (4, 1), (2, 2), (8, 4)] {
        let layout = ParallelismLayout::new(tp, pp).unwrap();
        let log = simulate(&arch, &layout, &seq(128, 1)).unwrap();
        let gathers = log
            .events
            .iter()
            .filter(|e| e.kind == CollectiveKind::Gather)
            .count();
        let decode = log
            .events
            .iter()
            .filter(|e| e.phase == Phase::Decode)
            .count();
        ensure(gathers == 1 && decode == 0, || {
            format!("TP{tp}xPP{pp} S_d=1: {gathers} Gather, {decode} decode events")
        })?;
    }
    Ok("zero volume, zero factor, single Gather".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1  Table III reproduction", table_iii),
        ("2  Table IV reproduction", table_iv),
        ("3  Table V reproduction", table_v),
        ("4  Table VI reproduction", table_vi),
        ("5  Decode-length growth factors", growth_factors),
        ("6  Analytic/simulator equivalence", oracle_equivalence),
        ("7  Volume ordering", volume_ordering),
        ("8  SLO trend", slo_trend),
        ("9  Fixture round trip", fixture_round_trip),
        ("10 Degeneracy", degeneracy),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("\n{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
