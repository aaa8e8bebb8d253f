//! Central finite-difference checker shared by the gradient tests and the
//! acceptance suite.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use cqf_core::memory::MemorySnapshot;
use cqf_core::model::{assemble_dialogue_prompt, build_model, LossTurns, ModelConfig, TurnText};
use cqf_core::params::{GroupSet, ParamGroup, ParamStore, Session};
use cqf_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn all_groups() -> GroupSet {
    ParamGroup::ALL
        .iter()
        .fold(GroupSet::base_lm(), |g, &p| g.with(p))
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct cotangent.
fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if t.value(out).numel() == 1 && t.value(out).rank() == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(t.shape(out), 1.0, &mut rng);
    let w = t.constant(w);
    let p = t.mul(out, w)?;
    t.sum(p)
}

/// Max relative error of `f`'s input gradients against central differences.
pub fn check_fn<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| {
                if grads {
                    t.param(x.clone())
                } else {
                    t.constant(x.clone())
                }
            })
            .collect();
        let out = f(&mut t, &vars).expect("forward");
        let loss = project(&mut t, out, seed).expect("projection");
        let value = t.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        t.backward(loss).expect("backward");
        let g = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| {
                t.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; x.numel()])
            })
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = eval(&xs, false).0;
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&xs, false).0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Same check for parameters held in a store, sampling `per_param`
/// coordinates of every parameter the loss touches.
pub fn check_store<F>(store: &mut ParamStore, per_param: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let value = |store: &ParamStore| -> f64 {
        let mut s = Session::inference(store);
        let out = f(&mut s).expect("forward");
        let loss = project(&mut s.tape, out, seed).expect("projection");
        s.tape.value(loss).item()
    };
    let grads = {
        let mut s = Session::new(store, all_groups());
        let out = f(&mut s).expect("forward");
        let loss = project(&mut s.tape, out, seed).expect("projection");
        s.tape.backward(loss).expect("backward");
        s.gradients()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (id, g) in grads {
        for _ in 0..per_param.min(g.len()) {
            let j = rng.random_range(0..g.len());
            store.tensor_mut(id).data_mut()[j] += STEP;
            let up = value(store);
            store.tensor_mut(id).data_mut()[j] -= 2.0 * STEP;
            let down = value(store);
            store.tensor_mut(id).data_mut()[j] += STEP;
            worst = worst.max(rel_err(g[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Worst error over every differentiable tape op for one seed.
pub fn check_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4, 2], &mut rng);
    let c = randn(&[3, 4], &mut rng);
    let bt = randn(&[2, 4], &mut rng);
    let bias = randn(&[4], &mut rng);
    let s = randn(&[], &mut rng);
    let gamma = randn(&[4], &mut rng);
    let beta = randn(&[4], &mut rng);
    let table = randn(&[6, 3], &mut rng);
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    let logits = randn(&[5, 6], &mut rng);
    let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    let mut mask: Vec<bool> = (0..5).map(|_| rng.random_bool(0.6)).collect();
    mask[rng.random_range(0..5)] = true;
    let mut allowed: Vec<bool> = (0..12).map(|_| rng.random_bool(0.6)).collect();
    for r in 0..3 {
        allowed[r * 4 + rng.random_range(0..4)] = true;
    }

    vec![
        (
            "matmul",
            check_fn(&[a.clone(), b.clone()], seed, |t, v| t.matmul(v[0], v[1])),
        ),
        (
            "matmul_nt",
            check_fn(&[a.clone(), bt.clone()], seed, |t, v| {
                t.matmul_nt(v[0], v[1])
            }),
        ),
        (
            "transpose",
            check_fn(std::slice::from_ref(&a), seed, |t, v| t.transpose(v[0])),
        ),
        (
            "add",
            check_fn(&[a.clone(), c.clone()], seed, |t, v| t.add(v[0], v[1])),
        ),
        (
            "add_row_bias",
            check_fn(&[a.clone(), bias.clone()], seed, |t, v| {
                t.add_row_bias(v[0], v[1])
            }),
        ),
        (
            "mul",
            check_fn(&[a.clone(), c.clone()], seed, |t, v| t.mul(v[0], v[1])),
        ),
        (
            "scale",
            check_fn(std::slice::from_ref(&a), seed, |t, v| t.scale(v[0], 0.7)),
        ),
        (
            "mul_scalar",
            check_fn(&[a.clone(), s.clone()], seed, |t, v| {
                t.mul_scalar(v[0], v[1])
            }),
        ),
        (
            "tanh",
            check_fn(std::slice::from_ref(&a), seed, |t, v| t.tanh(v[0])),
        ),
        (
            "gelu",
            check_fn(std::slice::from_ref(&a), seed, |t, v| t.gelu(v[0])),
        ),
        (
            "softmax_rows",
            check_fn(std::slice::from_ref(&a), seed, |t, v| t.softmax(v[0], 1)),
        ),
        (
            "softmax_cols",
            check_fn(std::slice::from_ref(&a), seed, |t, v| t.softmax(v[0], 0)),
        ),
        (
            "masked_softmax",
            check_fn(std::slice::from_ref(&a), seed, |t, v| {
                t.masked_softmax(v[0], &allowed)
            }),
        ),
        (
            "layer_norm",
            check_fn(&[a.clone(), gamma, beta], seed, |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        (
            "embedding",
            check_fn(&[table], seed, |t, v| t.embedding(v[0], &ids)),
        ),
        (
            "masked_nll_loss",
            check_fn(&[logits], seed, |t, v| {
                t.masked_nll_loss(v[0], &targets, &mask)
            }),
        ),
        (
            "sum",
            check_fn(std::slice::from_ref(&a), seed, |t, v| t.sum(v[0])),
        ),
        (
            "concat_rows",
            check_fn(&[a.clone(), c.clone()], seed, |t, v| {
                t.concat_rows(&[v[0], v[1]])
            }),
        ),
        (
            "slice_rows",
            check_fn(std::slice::from_ref(&a), seed, |t, v| {
                t.slice_rows(v[0], 1, 3)
            }),
        ),
        (
            "concat_cols",
            check_fn(&[a.clone(), b, c], seed, |t, v| {
                let ab = t.matmul(v[0], v[1])?;
                t.concat_cols(&[ab, v[2]])
            }),
        ),
        (
            "slice_cols",
            check_fn(&[a], seed, |t, v| t.slice_cols(v[0], 1, 3)),
        ),
    ]
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::small();
    c.d_lm = 8;
    c.lm_heads = 2;
    c.lm_layers = 1;
    c.max_seq_len = 40;
    c.query_count = 2;
    c.qformer_width = 8;
    c.qformer_heads = 2;
    c.d_mem = 6;
    c.text_encoder_layers = 1;
    c.text_encoder_heads = 2;
    c.d_img = 5;
    c.image_encoder_width = 8;
    c.image_encoder_layers = 1;
    c.image_encoder_heads = 2;
    c.abstractor_queries = 2;
    c.lora_rank = 2;
    c.seed = seed;
    c
}

/// Composite blocks: the full model loss (decoder with LoRA and gated
/// prefix, fusion block, abstractor, projection) plus both memory encoders.
pub fn check_blocks(seed: u64, per_param: usize) -> Vec<(&'static str, f64)> {
    let config = tiny_config(seed);
    let mut model = build_model(&config).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    // zero-initialised adapters and gates would hide their own gradients'
    // effect on everything downstream
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let t = model.store.tensor_mut(id);
        if t.data().iter().all(|&x| x == 0.0) {
            for x in t.data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
    let patches = Tensor::randn(&[3, config.d_img], 1.0, &mut rng);
    let images: BTreeMap<String, Tensor> = [("img".to_string(), patches.clone())].into();
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            (0..config.d_mem)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let memory = MemorySnapshot::from_rows(config.d_mem, &rows).expect("memory");
    let history = [TurnText::new("hi", Some("yo"))];
    let current = TurnText::new("what?", Some("ab")).with_images(vec!["img".into()]);
    let (seq, _) = assemble_dialogue_prompt(
        &history,
        &current,
        config.abstractor_queries,
        config.max_seq_len,
        LossTurns::All,
    )
    .expect("prompt");

    let mut store = model.store.clone();
    let model_ref = &model;
    let full = check_store(&mut store, per_param, seed, |s| {
        model_ref.loss(s, &seq, &images, Some(&memory))
    });
    let text = check_store(&mut store, per_param, seed, |s| {
        model_ref.text_encoder.forward_cls(s, &[3, 70, 200, 9])
    });
    let image = check_store(&mut store, per_param, seed, |s| {
        let enc = model_ref.visual.encoder.forward(s, &patches)?;
        model_ref.visual.encoder.to_memory.forward(s, enc.cls)
    });
    vec![
        ("model_loss", full),
        ("text_encoder", text),
        ("image_encoder", image),
    ]
}

/// Dialogue with an image and three turns, shared by the template goldens.
pub fn fixture_dialogue() -> cqf_core::data::Dialogue {
    use cqf_core::data::{Category, Dialogue, SyntheticImage, Turn};
    let image = SyntheticImage {
        patches: Tensor::zeros(&[2, 4]),
        description: "2 RED cups".into(),
    };
    Dialogue {
        id: "fixture-0".into(),
        category: Category::ContinuousQuestion,
        turns: vec![
            Turn::new("look at this picture.", "i see 2 RED cups.")
                .with_images(vec!["img0".into()]),
            Turn::new("how many cups are there?", "2."),
            Turn::new("what color are they?", "RED."),
        ],
        images: [("img0".to_string(), image)].into(),
        answer_key: None,
    }
}

/// `(fixture file, rendered text)` for each prompt template.
pub fn render_templates() -> Vec<(&'static str, String)> {
    use cqf_core::data::{assemble_generation_prompt, Separators};
    use cqf_core::eval::{judge_prompt_for, DEFAULT_RUBRIC};
    use cqf_core::model::assemble_pretrain_prompt;

    let d = fixture_dialogue();
    let caption = assemble_pretrain_prompt("2 RED cups", "img0", 4, 128).expect("caption prompt");
    let texts = d.turn_texts();
    let (last, history) = texts.split_last().expect("turns");
    let (dialogue, _) =
        assemble_dialogue_prompt(history, last, 4, 256, LossTurns::All).expect("dialogue prompt");
    let generation = assemble_generation_prompt(
        "Human: what is in the picture?\nAI: a cat on a mat.",
        &d.image_descriptions(),
        "Write a multi-turn conversation about the image.",
        &Separators::default(),
    )
    .expect("generation prompt");
    let judge = judge_prompt_for(&d, 2, DEFAULT_RUBRIC).expect("judge prompt");
    vec![
        (
            "caption_template.txt",
            format!(
                "{}\n--- loss\n{}\n",
                caption.render(),
                caption.masked_text()
            ),
        ),
        (
            "dialogue_template.txt",
            format!(
                "{}\n--- loss\n{}\n",
                dialogue.render(),
                dialogue.masked_text()
            ),
        ),
        ("generation_prompt.txt", generation),
        ("judge_prompt.txt", judge),
    ]
}

pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Names of templates whose rendering differs from the committed file.
pub fn golden_mismatches() -> Vec<String> {
    render_templates()
        .into_iter()
        .filter(|(name, text)| {
            std::fs::read_to_string(fixture_dir().join(name))
                .ok()
                .as_deref()
                != Some(text.as_str())
        })
        .map(|(name, _)| name.to_string())
        .collect()
}
