use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cqf_core::checkpoint::Checkpoint;
use cqf_core::data::{
    corpus_caption_pairs, corpus_stats, generate_corpus, load_corpus, render_stats_table,
    save_corpus, Category, CorpusStats, Dialogue,
};
use cqf_core::eval::{
    aggregate_with, load_judge_records, per_category_report, recall_benchmark, render_report_table,
    run_ablation, AblationConfig, Aggregation,
};
use cqf_core::memory::MemoryQueue;
use cqf_core::model::{
    assemble_dialogue_prompt, build_model, DecodeMode, LossTurns, Model, TurnText,
};
use cqf_core::tensor::Tensor;
use cqf_core::tokenizer::{self, EOA};
use cqf_core::train::{train, RunOptions, Stage, TrainData};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{Command, MemoryArg};

pub fn run(cmd: &Command, cfg: &mut RunConfig, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::GenData {
            common,
            category,
            count,
        } => {
            if let Some(n) = count {
                cfg.data.count = *n;
            }
            gen_data(cfg, category.as_deref(), &common.out, m)
        }
        Command::BaseLm {
            common,
            data,
            iters,
            resume,
        } => {
            let model = build_model(&cfg.model)?;
            train_stage(
                cfg,
                Stage::Base,
                model,
                data,
                *iters,
                resume.as_deref(),
                &common.out,
                m,
            )
        }
        Command::Pretrain {
            common,
            data,
            checkpoint,
            iters,
            resume,
        } => {
            let model = match checkpoint {
                Some(p) => load_model(p, m)?,
                None => build_model(&cfg.model)?,
            };
            train_stage(
                cfg,
                Stage::Pretrain,
                model,
                data,
                *iters,
                resume.as_deref(),
                &common.out,
                m,
            )
        }
        Command::Finetune {
            common,
            data,
            checkpoint,
            iters,
            memory,
            resume,
        } => {
            let p = checkpoint.as_ref().ok_or_else(|| {
                anyhow!("finetune needs --checkpoint pointing at a pre-training checkpoint")
            })?;
            let mut model = load_model(p, m)?;
            if let Some(mem) = memory {
                m.arg("memory", format!("{mem:?}"));
                model.config.memory_capacity = capacity(*mem, &model);
            }
            train_stage(
                cfg,
                Stage::Finetune,
                model,
                data,
                *iters,
                resume.as_deref(),
                &common.out,
                m,
            )
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            judge,
            memory,
            per_dialogue,
        } => eval(
            checkpoint.as_deref(),
            data.as_deref(),
            judge.as_deref(),
            *memory,
            *per_dialogue,
            &common.out,
            m,
        ),
        Command::Chat {
            common,
            checkpoint,
            fixtures,
            memory,
            max_new_tokens,
        } => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            chat(
                checkpoint,
                fixtures.as_deref(),
                *memory,
                *max_new_tokens,
                &common.out,
                &mut stdin.lock(),
                &mut stdout.lock(),
                m,
            )
        }
        Command::Ablate {
            common,
            iters,
            count,
        } => {
            let mut a = AblationConfig {
                seed: cfg.seed,
                ..AblationConfig::default()
            };
            if let Some(n) = iters {
                a.finetune.iterations = *n;
                a.finetune.warmup_steps = a.finetune.warmup_steps.min(*n);
            }
            if let Some(n) = count {
                a.eval_dialogues = *n;
            }
            let report = run_ablation(&a, &common.out)?;
            print!("{}", report.summary());
            write_text(&common.out.join("ablation.txt"), &report.summary(), m)?;
            write_json(&common.out.join("ablation.json"), &report, m)
        }
        Command::Stats { common, paths } => stats(paths, &common.out, m),
    }
}

fn capacity(mem: MemoryArg, model: &Model) -> usize {
    match mem {
        MemoryArg::On => model.config.memory_capacity,
        MemoryArg::Off => 0,
        MemoryArg::Capacity(n) => n,
    }
}

fn load_model(path: &Path, m: &mut RunManifest) -> Result<Model> {
    m.input(path);
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.to_model()?)
}

/// Corpus files in `path`: the file itself, or every `*.jsonl` in a
/// directory in name order.
fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        bail!("{} does not exist", path.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .jsonl corpus files in {}", path.display());
    }
    Ok(files)
}

fn load_all(path: &Path, m: &mut RunManifest) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for f in corpus_files(path)? {
        m.input(&f);
        out.extend(load_corpus(&f)?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T, m: &mut RunManifest) -> Result<()> {
    m.output(path);
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str, m: &mut RunManifest) -> Result<()> {
    m.output(path);
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(
    cfg: &RunConfig,
    category: Option<&str>,
    out: &Path,
    m: &mut RunManifest,
) -> Result<()> {
    let cats = match category {
        Some(c) => vec![c.parse::<Category>()?],
        None => Category::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for c in cats {
        let corpus = generate_corpus(c, cfg.seed, &cfg.data)?;
        let path = out.join(format!("{}.jsonl", c.key()));
        m.output(&path);
        save_corpus(&corpus, &path)?;
        rows.push((c.title().to_string(), corpus_stats(&corpus)?));
        log::info!(
            "wrote {} {} dialogues to {}",
            corpus.len(),
            c.key(),
            path.display()
        );
    }
    write_text(&out.join("stats.txt"), &render_stats_table(&rows), m)?;
    write_json(&out.join("stats.json"), &rows, m)
}

#[allow(clippy::too_many_arguments)]
fn train_stage(
    cfg: &mut RunConfig,
    stage: Stage,
    model: Model,
    data: &Path,
    iters: Option<u64>,
    resume: Option<&Path>,
    out: &Path,
    m: &mut RunManifest,
) -> Result<()> {
    if let Some(n) = iters {
        let c = cfg.stage_mut(stage);
        c.iterations = n;
        c.warmup_steps = c.warmup_steps.min(n);
    }
    let dialogues = load_all(data, m)?;
    let data = match stage {
        Stage::Pretrain => {
            let pairs = corpus_caption_pairs(&dialogues);
            if pairs.is_empty() {
                bail!("corpus {} has no images to caption", data.display());
            }
            TrainData::Captions(pairs)
        }
        Stage::Base | Stage::Finetune => TrainData::Dialogues(dialogues),
    };
    if let Some(r) = resume {
        m.input(r);
    }
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        resume: resume.map(Path::to_path_buf),
    };
    let tc = cfg.stage(stage).clone();
    let outcome = train(model, &tc, &data, &opts)?;
    m.output(&out.join(cqf_core::train::LOG_FILE));
    m.output(&outcome.checkpoint);
    println!(
        "{} finished: {} steps logged, eval loss {:.6}, checkpoint {}",
        stage.name(),
        outcome.log.len(),
        outcome.eval_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct JudgeSummary {
    aggregation: Aggregation,
    overall: cqf_core::eval::EvalReport,
    per_category: Vec<(Category, cqf_core::eval::EvalReport)>,
}

fn eval(
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    judge: Option<&Path>,
    memory: MemoryArg,
    per_dialogue: bool,
    out: &Path,
    m: &mut RunManifest,
) -> Result<()> {
    m.arg("memory", format!("{memory:?}"));
    let corpus = match data {
        Some(p) => Some(load_all(p, m)?),
        None => None,
    };
    let mut did = false;
    if let Some(ck) = checkpoint {
        let corpus = corpus
            .as_ref()
            .ok_or_else(|| anyhow!("recall evaluation needs --data with long_memory dialogues"))?;
        let taskset: Vec<Dialogue> = corpus
            .iter()
            .filter(|d| d.answer_key.is_some())
            .cloned()
            .collect();
        if taskset.is_empty() {
            bail!("no dialogues with answer keys in the evaluation data");
        }
        let mut model = load_model(ck, m)?;
        model.config.memory_capacity = capacity(memory, &model);
        let memory_on = model.config.memory_capacity > 0;
        let report = recall_benchmark(&model, memory_on, &taskset)?;
        let line = format!(
            "memory={} capacity={} accuracy {:.4} ({}/{}), fact outside prompt window in {} dialogues\n",
            if memory_on { "on" } else { "off" },
            model.config.memory_capacity,
            report.accuracy,
            report.correct,
            report.total,
            report.fact_out_of_window
        );
        print!("{line}");
        write_text(&out.join("recall.txt"), &line, m)?;
        write_json(&out.join("recall.json"), &report, m)?;
        did = true;
    }
    if let Some(j) = judge {
        m.input(j);
        let records = load_judge_records(j)?;
        if records.is_empty() {
            bail!("judge file {} has no records", j.display());
        }
        let how = if per_dialogue {
            Aggregation::PerDialogue
        } else {
            Aggregation::PerTurn
        };
        let overall = aggregate_with(&records, how)?;
        let per_category = match &corpus {
            Some(c) => per_category_report(&records, c)?,
            None => Vec::new(),
        };
        let table = format!(
            "{}\noverall {overall}\n",
            render_report_table(&per_category, &overall)
        );
        print!("{table}");
        write_text(&out.join("judge_report.txt"), &table, m)?;
        write_json(
            &out.join("judge_report.json"),
            &JudgeSummary {
                aggregation: how,
                overall,
                per_category,
            },
            m,
        )?;
        did = true;
    }
    if !did {
        bail!("nothing to evaluate: pass --checkpoint with --data, and/or --judge");
    }
    Ok(())
}

/// Images addressable as `<dialogue id>/<image ref>`.
fn fixture_images(corpus: &[Dialogue]) -> BTreeMap<String, Tensor> {
    corpus
        .iter()
        .flat_map(|d| {
            d.images
                .iter()
                .map(move |(r, img)| (format!("{}/{r}", d.id), img.patches.clone()))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn chat(
    checkpoint: &Path,
    fixtures: Option<&Path>,
    memory: MemoryArg,
    max_new_tokens: usize,
    out: &Path,
    input: &mut dyn BufRead,
    output: &mut dyn Write,
    m: &mut RunManifest,
) -> Result<()> {
    let mut model = load_model(checkpoint, m)?;
    model.config.memory_capacity = capacity(memory, &model);
    let images = match fixtures {
        Some(p) => fixture_images(&load_all(p, m)?),
        None => BTreeMap::new(),
    };
    if max_new_tokens == 0 || max_new_tokens >= model.config.max_seq_len {
        bail!(
            "--max-new-tokens must be between 1 and {}",
            model.config.max_seq_len - 1
        );
    }
    // older turns are dropped so the answer always has room
    let prompt_room = model.config.max_seq_len - max_new_tokens;
    let mut queue: MemoryQueue = model.new_queue();
    let mut history: Vec<TurnText> = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    let mut transcript = String::new();
    let session_id = "chat";

    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        if line == "/memory" {
            let mut text = format!("memory: {} of {} entries\n", queue.len(), queue.capacity());
            for (i, e) in queue.entries().enumerate() {
                let head: Vec<String> = e
                    .embedding
                    .iter()
                    .take(4)
                    .map(|x| format!("{x:+.3}"))
                    .collect();
                text.push_str(&format!(
                    "  {i}: turn {} {:?} [{} ...]\n",
                    e.turn_index,
                    e.kind,
                    head.join(" ")
                ));
            }
            write!(output, "{text}")?;
            transcript.push_str(&text);
            continue;
        }
        if let Some(id) = line.strip_prefix("/image ") {
            let id = id.trim();
            if !images.contains_key(id) {
                bail!("unknown fixture id `{id}`");
            }
            pending.push(id.to_string());
            let text = format!("attached {id}\n");
            write!(output, "{text}")?;
            transcript.push_str(&text);
            continue;
        }
        let current = TurnText::new(line, None).with_images(std::mem::take(&mut pending));
        let (seq, _) = assemble_dialogue_prompt(
            &history,
            &current,
            model.config.abstractor_queries,
            prompt_room,
            LossTurns::Final,
        )?;
        let snapshot = queue.snapshot();
        let ids = model.generate(
            &seq,
            &images,
            Some(&snapshot),
            max_new_tokens,
            DecodeMode::Greedy,
        )?;
        let end = ids.iter().position(|&i| i == EOA).unwrap_or(ids.len());
        let answer = tokenizer::decode_text(&ids[..end]);
        let marks = "<ImageFeature>".repeat(current.images.len());
        let text = format!("Human:{marks}{line}\nAI:{answer}\n");
        writeln!(output, "AI:{answer}")?;
        transcript.push_str(&text);
        let done = TurnText::new(line, Some(&answer)).with_images(current.images.clone());
        model.record_turn(&mut queue, session_id, history.len(), &done, &images)?;
        history.push(done);
    }
    write_text(&out.join("transcript.txt"), &transcript, m)
}

fn stats(paths: &[PathBuf], out: &Path, m: &mut RunManifest) -> Result<()> {
    let mut files = Vec::new();
    for p in paths {
        files.extend(corpus_files(p)?);
    }
    let mut rows: Vec<(String, CorpusStats)> = Vec::new();
    for p in &files {
        m.input(p);
        let corpus = load_corpus(p)?;
        let s = corpus_stats(&corpus).with_context(|| format!("statistics of {}", p.display()))?;
        let first = corpus[0].category;
        let label = if corpus.iter().all(|d| d.category == first) {
            first.title().to_string()
        } else {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        rows.push((label, s));
    }
    let table = render_stats_table(&rows);
    print!("{table}");
    write_text(&out.join("stats.txt"), &table, m)?;
    write_json(&out.join("stats.json"), &rows, m)
}
