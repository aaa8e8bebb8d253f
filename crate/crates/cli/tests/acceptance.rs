//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs without the test harness so the report is always printed:
//! `cargo test --release -p cqf-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cqf_core::data::{generate_corpus, Category, CorpusConfig, Dialogue};
use cqf_core::eval::{aggregate, run_ablation, AblationConfig, JudgeRecord};
use cqf_core::memory::{EntryKind, MemoryEntry, MemoryQueue, MemorySnapshot};
use cqf_core::model::{build_model, LossTurns, NoImages, TurnText};
use cqf_core::params::{ParamGroup, Session};
use cqf_core::qformer::FusionOptions;
use cqf_core::train::{finetune_step, lr_at, OptimizerState, TrainConfig};
use cqf_core::{Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Verdict;

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut worst = (0.0f64, "", 0u64);
    for seed in 0..100 {
        for (name, e) in common::check_ops(seed)
            .into_iter()
            .chain(common::check_blocks(seed, 2))
        {
            if e > worst.0 {
                worst = (e, name, seed);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict::new(
        worst.0 < 1e-4 && secs < 60.0,
        format!(
            "100 seeds, 21 ops + 3 blocks, max rel err {:.2e} ({} seed {}), {secs:.1}s",
            worst.0, worst.1, worst.2
        ),
    )
}

fn objective() -> Verdict {
    let mut worst = 0.0f64;
    let mut off_mask_nonzero = 0usize;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, v) = (rng.random_range(1..8), rng.random_range(2..12));
        let logits = Tensor::randn(&[l, v], 3.0, &mut rng);
        let targets: Vec<usize> = (0..l).map(|_| rng.random_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.5)).collect();
        mask[rng.random_range(0..l)] = true;

        // brute force: log of the normalised probability, no max shift
        let mut oracle = 0.0;
        let mut n = 0.0;
        for k in 0..l {
            if mask[k] {
                let row = logits.row(k);
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                oracle -= (row[targets[k]].exp() / z).ln();
                n += 1.0;
            }
        }
        oracle /= n;

        let mut t = Tape::new();
        let x = t.param(logits.clone());
        let loss = t.masked_nll_loss(x, &targets, &mask).unwrap();
        worst = worst.max((t.value(loss).item() - oracle).abs());
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        for k in (0..l).filter(|&k| !mask[k]) {
            off_mask_nonzero += g[k * v..(k + 1) * v].iter().filter(|&&x| x != 0.0).count();
        }
    }
    Verdict::new(
        worst <= 1e-10 && off_mask_nonzero == 0,
        format!("200 instances, max |loss - oracle| {worst:.2e}, nonzero off-mask grads {off_mask_nonzero}"),
    )
}

fn freeze_contracts() -> Verdict {
    let mut cfg = common::tiny_config(3);
    cfg.max_seq_len = 128;
    let mut model = build_model(&cfg).unwrap();
    let fresh = model.clone();

    // B = 0 and empty memory against the bare decoder path
    let d = &generate_corpus(
        Category::LongMemory,
        1,
        &CorpusConfig {
            count: 1,
            d_img: cfg.d_img,
            ..CorpusConfig::default()
        },
    )
    .unwrap()[0];
    let texts = d.turn_texts();
    let (last, hist) = texts.split_last().unwrap();
    let (seq, _) = cqf_core::model::assemble_dialogue_prompt(
        hist,
        last,
        cfg.abstractor_queries,
        cfg.max_seq_len,
        LossTurns::All,
    )
    .unwrap();
    let logits = |mem: Option<&MemorySnapshot>| {
        let mut s = Session::inference(&fresh.store);
        let out = fresh.forward(&mut s, &seq, d, mem).unwrap();
        s.tape.value(out.logits).clone()
    };
    let neutral = logits(Some(&MemorySnapshot::empty(cfg.d_mem))).max_abs_diff(&logits(None));

    let data = generate_corpus(
        Category::LongMemory,
        2,
        &CorpusConfig {
            count: 16,
            d_img: cfg.d_img,
            max_gap: 3,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let tc = TrainConfig {
        iterations: 100,
        warmup_steps: 10,
        peak_lr: 1e-2,
        ..TrainConfig::finetune()
    };
    let mut opt = OptimizerState::new(tc.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for step in 1..=100 {
        let batch: Vec<&Dialogue> = (0..2)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        finetune_step(&mut model, &mut opt, &batch, lr_at(step, &tc), &tc).unwrap();
    }
    let frozen = [
        ParamGroup::Lm,
        ParamGroup::ImageEncoder,
        ParamGroup::Abstractor,
        ParamGroup::Projection,
    ];
    let mut changed = Vec::new();
    let mut frozen_count = 0;
    let mut lora_moved = false;
    for ((_, a), (_, b)) in fresh.store.iter().zip(model.store.iter()) {
        if frozen.contains(&a.group) {
            frozen_count += 1;
            if a.value.data() != b.value.data() {
                changed.push(a.name.clone());
            }
        }
        lora_moved |= a.group == ParamGroup::Lora && a.value != b.value;
    }
    Verdict::new(
        changed.is_empty() && lora_moved && neutral <= 1e-10,
        format!(
            "100 steps: {} of {frozen_count} frozen tensors changed, adapters moved {lora_moved}; B=0 logits diff {neutral:.1e}",
            changed.len()
        ),
    )
}

fn fifo_cases(capacity: usize) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(-1e3f64..1e3, 0..80), |values| {
            let mut q = MemoryQueue::new(capacity, 1);
            let mut oracle: VecDeque<f64> = VecDeque::new();
            for (i, &v) in values.iter().enumerate() {
                let evicted = q
                    .enqueue(MemoryEntry::new(vec![v], EntryKind::TextTurn, i, "p").unwrap())
                    .unwrap();
                oracle.push_back(v);
                let expect = if oracle.len() > capacity {
                    oracle.pop_front()
                } else {
                    None
                };
                prop_assert_eq!(evicted.map(|e| e.embedding[0]), expect);
                let held: Vec<f64> = q.entries().map(|e| e.embedding[0]).collect();
                prop_assert_eq!(held, oracle.iter().copied().collect::<Vec<_>>());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn memory_semantics() -> Verdict {
    let mut fifo = Vec::new();
    for cap in [1, 2, 32] {
        if let Err(e) = fifo_cases(cap) {
            fifo.push(format!("capacity {cap}: {e}"));
        }
    }

    let cfg = common::tiny_config(5);
    let model = build_model(&cfg).unwrap();
    let instr = [3usize, 40, 41, 42, 9];
    let prefix = |mem: &MemorySnapshot, opts: FusionOptions| {
        let mut s = Session::inference(&model.store);
        let x = model.qformer.embed_instruction(&mut s, &instr).unwrap();
        let out = model.qformer.forward_with(&mut s, x, mem, opts).unwrap();
        s.tape.value(out.prefix).clone()
    };
    let empty = MemorySnapshot::empty(cfg.d_mem);
    let passthrough = prefix(&empty, FusionOptions::default())
        == prefix(
            &empty,
            FusionOptions {
                cross_attention: false,
            },
        );
    // the zero-gated decoder also ignores an empty memory bit for bit
    let seq = cqf_core::model::assemble_dialogue_prompt(
        &[],
        &TurnText::new("hello there", Some("hi")),
        cfg.abstractor_queries,
        cfg.max_seq_len,
        LossTurns::All,
    )
    .unwrap()
    .0;
    let logits = |mem: Option<&MemorySnapshot>| {
        let mut s = Session::inference(&model.store);
        let out = model.forward(&mut s, &seq, &NoImages, mem).unwrap();
        s.tape.value(out.logits).clone()
    };
    let passthrough = passthrough && logits(Some(&empty)) == logits(None);

    let mut perm_worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..10);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..cfg.d_mem)
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect()
            })
            .collect();
        let mem = MemorySnapshot::from_rows(cfg.d_mem, &rows).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let a = prefix(&mem, FusionOptions::default());
        let b = prefix(&mem.permuted(&order), FusionOptions::default());
        perm_worst = perm_worst.max(a.max_abs_diff(&b));
    }
    Verdict::new(
        fifo.is_empty() && passthrough && perm_worst <= 1e-10,
        format!(
            "FIFO 3x1000 cases {}; empty passthrough bitwise {passthrough}; permutation max diff {perm_worst:.1e}",
            if fifo.is_empty() { "ok".to_string() } else { fifo.join("; ") }
        ),
    )
}

fn ablation() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AblationConfig::default();
    let r = match run_ablation(&cfg, dir.path()) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("ablation failed: {e}")),
    };
    let (on, off) = (&r.memory_on, &r.memory_off);
    let far_outside =
        on.far.fact_out_of_window == on.far.total && off.far.fact_out_of_window == off.far.total;
    let near_inside = on.near.fact_out_of_window == 0 && off.near.fact_out_of_window == 0;
    let pass = far_outside
        && near_inside
        && on.far.total == 200
        && r.far_gap >= 0.30
        && on.far.accuracy >= 0.90
        && on.near.accuracy >= 0.90
        && off.near.accuracy >= 0.90
        && r.seconds <= 900.0;
    Verdict::new(
        pass,
        format!(
            "far (n={}, all outside window {far_outside}): memory {:.3} vs lora-only {:.3}, gap {:+.3}; near (inside window {near_inside}): {:.3} / {:.3}; {:.0}s",
            on.far.total,
            on.far.accuracy,
            off.far.accuracy,
            r.far_gap,
            on.near.accuracy,
            off.near.accuracy,
            r.seconds
        ),
    )
}

fn schedule() -> Verdict {
    let cfg = TrainConfig {
        iterations: 1000,
        warmup_steps: 100,
        peak_lr: 3e-4,
        ..TrainConfig::finetune()
    };
    let at_peak = lr_at(100, &cfg);
    let mid = lr_at(550, &cfg);
    let end = lr_at(1000, &cfg);
    Verdict::new(
        at_peak == 3e-4 && mid == 1.5e-4 && end == 0.0,
        format!("lr(100) = {at_peak:e}, lr(550) = {mid:e}, lr(1000) = {end:e}"),
    )
}

fn evaluation() -> Verdict {
    let fixture = [[1, 1, 1, 1], [1, 0, 0, 1], [0, 1, 1, 1], [1, 1, 1, 0]];
    let recs: Vec<JudgeRecord> = fixture
        .iter()
        .enumerate()
        .map(|(i, s)| JudgeRecord::new("f", i, *s).unwrap())
        .collect();
    let fixed = aggregate(&recs).unwrap().available_rate;

    let mut runner = TestRunner::new(Config {
        cases: 1000,
        ..Config::default()
    });
    let bound = runner.run(
        &prop::collection::vec(prop::array::uniform4(0u8..=1), 1..60),
        |scores| {
            let recs: Vec<JudgeRecord> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| JudgeRecord::new("r", i, *s).unwrap())
                .collect();
            let r = aggregate(&recs).unwrap();
            prop_assert!(r.available_rate <= r.rationality.min(r.hallucination));
            for v in [
                r.rationality,
                r.information,
                r.hallucination,
                r.safety,
                r.available_rate,
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            Ok(())
        },
    );
    Verdict::new(
        fixed == 0.5 && bound.is_ok(),
        format!(
            "4-record fixture available rate {fixed}; bound over 1000 random sets {}",
            if bound.is_ok() {
                "holds".into()
            } else {
                format!("{bound:?}")
            }
        ),
    )
}

fn cqf(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cqf"))
        .args(args)
        .env("CQF_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "cqf {}: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn pipeline(root: &Path) -> Result<(), String> {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml");
    let cfg = cfg.to_str().unwrap();
    let d = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    cqf(&[
        "gen-data",
        "--config",
        cfg,
        "--seed",
        "11",
        "--out",
        &d("data"),
    ])?;
    cqf(&[
        "pretrain",
        "--config",
        cfg,
        "--seed",
        "11",
        "--data",
        &d("data"),
        "--iters",
        "200",
        "--out",
        &d("pt"),
    ])?;
    cqf(&[
        "finetune",
        "--config",
        cfg,
        "--seed",
        "11",
        "--data",
        &d("data"),
        "--checkpoint",
        &d("pt/checkpoint.json"),
        "--iters",
        "200",
        "--out",
        &d("ft"),
    ])?;
    cqf(&[
        "eval",
        "--config",
        cfg,
        "--seed",
        "11",
        "--checkpoint",
        &d("ft/checkpoint.json"),
        "--data",
        &d("data/long_memory.jsonl"),
        "--out",
        &d("eval"),
    ])
}

/// Artifacts that must match byte for byte between runs (manifests carry
/// wall-clock time and absolute paths, so they are left out).
const ARTIFACTS: [&str; 9] = [
    "data/long_memory.jsonl",
    "data/stats.json",
    "pt/checkpoint.json",
    "pt/train_log.jsonl",
    "ft/checkpoint-100.json",
    "ft/checkpoint.json",
    "ft/train_log.jsonl",
    "eval/recall.json",
    "eval/recall.txt",
];

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if let Err(e) = pipeline(&a).and_then(|_| pipeline(&b)) {
        return Verdict::new(false, e);
    }
    let differing: Vec<&str> = ARTIFACTS
        .iter()
        .copied()
        .filter(|f| match (fs::read(a.join(f)), fs::read(b.join(f))) {
            (Ok(x), Ok(y)) => x != y,
            _ => true,
        })
        .collect();

    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml");
    let resumed = dir.path().join("resumed");
    let r = cqf(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--data",
        a.join("data").to_str().unwrap(),
        "--checkpoint",
        a.join("pt/checkpoint.json").to_str().unwrap(),
        "--iters",
        "200",
        "--resume",
        a.join("ft/checkpoint-100.json").to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    let same_curve = r.is_ok()
        && fs::read(a.join("ft/train_log.jsonl")).ok()
            == fs::read(resumed.join("train_log.jsonl")).ok()
        && fs::read(a.join("ft/checkpoint.json")).ok()
            == fs::read(resumed.join("checkpoint.json")).ok();
    Verdict::new(
        differing.is_empty() && same_curve,
        format!(
            "two seeded runs, {} artifacts compared, differing: {:?}; resume from step 100 reproduces log and checkpoint: {same_curve}",
            ARTIFACTS.len(),
            differing
        ),
    )
}

fn templates() -> Verdict {
    let bad = common::golden_mismatches();
    Verdict::new(
        bad.is_empty(),
        format!("4 golden files, mismatches: {bad:?}"),
    )
}

fn stats() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stats_corpus.jsonl");
    if let Err(e) = cqf(&[
        "stats",
        corpus.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]) {
        return Verdict::new(false, e);
    }
    let table = fs::read_to_string(dir.path().join("stats.txt")).unwrap_or_default();
    let mut lines = table.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split("  ")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let row: Vec<&str> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .collect();
    let json: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("stats.json")).unwrap_or_default(),
    )
    .unwrap_or_default();
    let s = &json[0][1];
    // hand count: 2 dialogues, 4 turns, 21 question+answer bytes, 3 relevant turns
    let exact =
        s["count"] == 2 && s["avg_turns"] == 2.0 && s["avg_len"] == 5.25 && s["ratio"] == 0.75;
    let order = header == ["Category", "Number", "Avg. Turn", "Avg. Len", "Ratio"];
    Verdict::new(
        exact && order && row == ["Interaction", "2", "2.00", "5.25", "0.75"],
        format!("row {row:?}, exact values {exact}, column order {order}"),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient correctness", gradients),
        ("objective fidelity", objective),
        ("freeze and adapter contracts", freeze_contracts),
        ("memory semantics", memory_semantics),
        ("memory ablation", ablation),
        ("learning-rate schedule", schedule),
        ("evaluation arithmetic", evaluation),
        ("determinism", determinism),
        ("template fidelity", templates),
        ("corpus statistics", stats),
    ];
    let only: Option<usize> = std::env::var("CQF_ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t = Instant::now();
        let v = check();
        println!(
            "[{}] {:>2}. {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            t.elapsed().as_secs_f64()
        );
        failed += !v.pass as usize;
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
