// Templated dialogue generators. Every answer is a deterministic function
// of the planted image attributes or facts, so gold answers are exact.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AnswerKey, Category, Dialogue, SyntheticImage, Turn};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Answer vocabulary for colors. First letters are pairwise distinct.
pub const COLORS: [&str; 8] = [
    "RED", "BLUE", "ORANGE", "WHITE", "CYAN", "PINK", "GOLD", "TEAL",
];
pub const OBJECTS: [&str; 8] = ["box", "cup", "hat", "car", "ball", "book", "kite", "lamp"];
const MAX_COUNT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub turns: usize,
    /// Turns between the planted fact and the query (long memory only).
    pub gap: usize,
    pub images: usize,
    /// Patch rows per synthetic image.
    pub patches: usize,
    pub d_img: usize,
    /// How many of [`COLORS`] are used.
    pub colors: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            turns: 5,
            gap: 3,
            images: 1,
            patches: 6,
            d_img: 32,
            colors: COLORS.len(),
        }
    }
}

impl GenParams {
    /// Per-category defaults, keeping the shared patch/width settings of `base`.
    pub fn for_category(category: Category, base: &GenParams) -> Self {
        let (turns, gap, images) = match category {
            Category::Interaction => (5, 0, 1),
            Category::ContinuousQuestion => (4, 0, 1),
            Category::LongMemory => (6, 4, 0),
            Category::MultiImages => (5, 0, 2),
            Category::LongConversation => (10, 0, 1),
        };
        Self {
            turns,
            gap,
            images,
            ..base.clone()
        }
    }

    fn validate(&self, category: Category) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.turns == 0 {
            return err("a dialogue needs at least one turn".into());
        }
        if self.patches == 0 || self.d_img == 0 {
            return err("patches and d_img must be positive".into());
        }
        if self.colors == 0 || self.colors > COLORS.len() {
            return err(format!("colors must be in 1..={}", COLORS.len()));
        }
        match category {
            Category::LongMemory => {
                if self.gap == 0 || self.gap >= self.turns {
                    return err(format!(
                        "long_memory needs 1 <= gap < turns, got gap {} with {} turns",
                        self.gap, self.turns
                    ));
                }
            }
            Category::MultiImages => {
                if self.images < 2 {
                    return err(format!(
                        "multi_images needs at least 2 images, got {}",
                        self.images
                    ));
                }
                if self.images > OBJECTS.len() || self.turns < self.images {
                    return err(format!(
                        "multi_images needs images <= {} and turns >= images",
                        OBJECTS.len()
                    ));
                }
            }
            Category::LongConversation => {
                if self.turns < 10 {
                    return err(format!(
                        "long_conversation needs at least 10 turns, got {}",
                        self.turns
                    ));
                }
            }
            Category::Interaction | Category::ContinuousQuestion => {
                if self.images == 0 {
                    return err(format!("{category} needs an image"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttrs {
    pub object: usize,
    pub color: usize,
    pub count: usize,
}

impl ImageAttrs {
    pub fn random<R: Rng>(rng: &mut R, colors: usize) -> Self {
        Self {
            object: rng.random_range(0..OBJECTS.len()),
            color: rng.random_range(0..colors),
            count: rng.random_range(1..=MAX_COUNT),
        }
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }

    /// Object noun, pluralized by count.
    pub fn noun(&self) -> String {
        plural(OBJECTS[self.object], self.count)
    }

    pub fn description(&self) -> String {
        format!("{} {} {}", self.count, self.color_name(), self.noun())
    }
}

fn plural(word: &str, n: usize) -> String {
    match n {
        1 => word.to_string(),
        _ if word.ends_with('x') => format!("{word}es"),
        _ => format!("{word}s"),
    }
}

fn prototype(kind: u64, index: usize, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ace_0000 + kind * 1000 + index as u64);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Patch features: attribute prototypes mixed with per-patch weights plus noise.
pub fn image_features<R: Rng>(
    attrs: &ImageAttrs,
    patches: usize,
    d_img: usize,
    rng: &mut R,
) -> Tensor {
    let protos = [
        prototype(1, attrs.object, d_img),
        prototype(2, attrs.color, d_img),
        prototype(3, attrs.count, d_img),
    ];
    let mut data = Vec::with_capacity(patches * d_img);
    for _ in 0..patches {
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        for ((a, b), c) in protos[0].iter().zip(&protos[1]).zip(&protos[2]) {
            let noise: f64 = StandardNormal.sample(rng);
            let v = w[0] * a + w[1] * b + w[2] * c + 0.3 * noise;
            data.push(v);
        }
    }
    Tensor::new(vec![patches, d_img], data).expect("positive patch shape")
}

struct Builder {
    rng: ChaCha8Rng,
    params: GenParams,
    images: BTreeMap<String, SyntheticImage>,
    attrs: Vec<ImageAttrs>,
}

impl Builder {
    fn image(&mut self, attrs: ImageAttrs) -> String {
        let r = format!("img{}", self.images.len());
        let patches = image_features(
            &attrs,
            self.params.patches,
            self.params.d_img,
            &mut self.rng,
        );
        self.images.insert(
            r.clone(),
            SyntheticImage {
                patches,
                description: attrs.description(),
            },
        );
        self.attrs.push(attrs);
        r
    }

    fn attrs(&mut self) -> ImageAttrs {
        ImageAttrs::random(&mut self.rng, self.params.colors)
    }

    fn filler(&mut self) -> Turn {
        let a = self.rng.random_range(1..10);
        let b = self.rng.random_range(1..10);
        Turn::new(format!("what is {a}+{b}?"), format!("{}.", a + b))
    }
}

/// Questions answerable from one image, each with its exact answer.
fn image_questions(a: &ImageAttrs, explicit: bool) -> Vec<(String, String)> {
    let obj = OBJECTS[a.object];
    let they = if explicit {
        format!("the {}", a.noun())
    } else {
        "they".to_string()
    };
    vec![
        (
            format!("what color are {they}?"),
            format!("{}.", a.color_name()),
        ),
        (
            format!("how many {} are there?", plural(obj, 2)),
            format!("{}.", a.count),
        ),
        (
            "what object is shown?".to_string(),
            format!("{}.", a.noun()),
        ),
        (
            format!("how many would there be with one more {obj}?"),
            format!("{}.", a.count + 1),
        ),
        (
            format!("is the {obj} {}?", a.color_name()),
            "yes.".to_string(),
        ),
        (
            "describe the picture.".to_string(),
            format!("{}.", a.description()),
        ),
    ]
}

pub fn generate_dialogue(category: Category, seed: u64, params: &GenParams) -> Result<Dialogue> {
    params.validate(category)?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed ^ ((category as u64 + 1) << 56)),
        params: params.clone(),
        images: BTreeMap::new(),
        attrs: Vec::new(),
    };
    let n = params.turns;
    let mut turns = Vec::with_capacity(n);
    let mut answer_key = None;

    match category {
        Category::LongMemory => {
            let fact_turn = n - 1 - params.gap;
            let query_turn = n - 1;
            let attrs = b.attrs();
            let color = attrs.color_name();
            let obj = OBJECTS[attrs.object];
            let mut extra: Vec<String> = Vec::new();
            let (fact, query) = if params.images == 0 {
                (
                    Turn::new(format!("remember: the {obj} is {color}."), "ok."),
                    Turn::new(format!("what color is the {obj}?"), color),
                )
            } else {
                let r = b.image(attrs.clone());
                for _ in 1..params.images {
                    let a = b.attrs();
                    extra.push(b.image(a));
                }
                (
                    Turn::new("look at this picture.", "ok.").with_images(vec![r]),
                    Turn::new(
                        format!(
                            "what color were the {} in the first picture?",
                            plural(obj, 2)
                        ),
                        color,
                    ),
                )
            };
            for i in 0..n {
                let t = if i == fact_turn {
                    fact.clone()
                } else if i == query_turn {
                    query.clone()
                } else {
                    let mut f = b.filler();
                    if i > fact_turn && !extra.is_empty() {
                        f.images.push(extra.remove(0));
                    }
                    f
                };
                turns.push(t);
            }
            answer_key = Some(AnswerKey {
                fact_turn,
                query_turn,
                answer: color.to_string(),
            });
        }
        Category::Interaction => {
            let a = b.attrs();
            let r = b.image(a.clone());
            let first = format!("{}.", a.description());
            turns.push(Turn::new("what is in the picture?", first.clone()).with_images(vec![r]));
            let mut prev = first;
            for _ in 1..n {
                let (q, ans) = match b.rng.random_range(0..5) {
                    0 => ("say that again.".to_string(), prev.clone()),
                    1 => (
                        "answer again with only the color.".to_string(),
                        format!("{}.", a.color_name()),
                    ),
                    2 => (
                        "answer again with only the number.".to_string(),
                        format!("{}.", a.count),
                    ),
                    3 => (
                        "rewrite your answer in lowercase.".to_string(),
                        prev.to_lowercase(),
                    ),
                    _ => (
                        "rewrite it as one word.".to_string(),
                        format!("{}.", a.noun()),
                    ),
                };
                turns.push(Turn::new(q, ans.clone()));
                prev = ans;
            }
        }
        Category::ContinuousQuestion | Category::LongConversation => {
            let a = b.attrs();
            let r = b.image(a.clone());
            turns.push(
                Turn::new("what is in the picture?", format!("{}.", a.description()))
                    .with_images(vec![r]),
            );
            let explicit = category == Category::LongConversation;
            let pool = image_questions(&a, explicit);
            let start = b.rng.random_range(0..pool.len());
            for i in 1..n {
                let (q, ans) = &pool[(start + i) % pool.len()];
                turns.push(Turn::new(q.clone(), ans.clone()));
            }
        }
        Category::MultiImages => {
            let mut objects: Vec<usize> = (0..OBJECTS.len()).collect();
            let mut shown = Vec::new();
            for i in 0..params.images {
                let pick = b.rng.random_range(0..objects.len());
                let mut a = b.attrs();
                a.object = objects.remove(pick);
                let r = b.image(a.clone());
                turns.push(
                    Turn::new(
                        format!("what is in picture {}?", i + 1),
                        format!("{}.", a.description()),
                    )
                    .with_images(vec![r]),
                );
                shown.push(a);
            }
            for _ in params.images..n {
                let j = b.rng.random_range(0..shown.len());
                let a = &shown[j];
                let obj = OBJECTS[a.object];
                let t = match b.rng.random_range(0..3) {
                    0 => Turn::new(
                        format!("which picture shows the {}?", plural(obj, 2)),
                        format!("picture {}.", j + 1),
                    ),
                    1 => Turn::new(
                        format!("what color are the things in picture {}?", j + 1),
                        format!("{}.", a.color_name()),
                    ),
                    _ => Turn::new("how many pictures are there?", format!("{}.", shown.len())),
                };
                turns.push(t);
            }
        }
    }

    let d = Dialogue {
        id: format!("{}-{seed}", category.key()),
        category,
        turns,
        images: b.images,
        answer_key,
    };
    d.validate()?;
    Ok(d)
}

/// Settings for a whole corpus; long_memory gaps and leading filler turns
/// are drawn per dialogue, other categories use their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Dialogues per category.
    pub count: usize,
    pub patches: usize,
    pub d_img: usize,
    pub colors: usize,
    pub min_gap: usize,
    pub max_gap: usize,
    /// Up to this many extra filler turns before a planted fact.
    pub extra_turns: usize,
    pub long_memory_images: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let g = GenParams::default();
        Self {
            count: 100,
            patches: g.patches,
            d_img: g.d_img,
            colors: g.colors,
            min_gap: 1,
            max_gap: 6,
            extra_turns: 1,
            long_memory_images: 0,
        }
    }
}

impl CorpusConfig {
    fn base(&self) -> GenParams {
        GenParams {
            patches: self.patches,
            d_img: self.d_img,
            colors: self.colors,
            ..GenParams::default()
        }
    }
}

/// `cfg.count` dialogues of one category. Dialogue `i` depends only on
/// `(category, seed, i, cfg)`.
pub fn generate_corpus(category: Category, seed: u64, cfg: &CorpusConfig) -> Result<Vec<Dialogue>> {
    if cfg.count == 0 {
        return Err(Error::EmptyInput("corpus count"));
    }
    if category == Category::LongMemory && (cfg.min_gap == 0 || cfg.min_gap > cfg.max_gap) {
        return Err(Error::Config(format!(
            "long_memory gap range {}..={} is empty or starts at 0",
            cfg.min_gap, cfg.max_gap
        )));
    }
    let base = GenParams::for_category(category, &cfg.base());
    (0..cfg.count)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut p = base.clone();
            if category == Category::LongMemory {
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9);
                p.gap = rng.random_range(cfg.min_gap..=cfg.max_gap);
                p.turns = p.gap + 1 + rng.random_range(0..=cfg.extra_turns);
                p.images = cfg.long_memory_images;
            }
            generate_dialogue(category, s, &p)
        })
        .collect()
}

/// Image/caption pair for alignment pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub patches: Tensor,
    pub caption: String,
}

/// `count` fresh captioned images.
pub fn caption_pairs(seed: u64, count: usize, params: &GenParams) -> Vec<CaptionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = ImageAttrs::random(&mut rng, params.colors);
            CaptionPair {
                patches: image_features(&a, params.patches, params.d_img, &mut rng),
                caption: a.description(),
            }
        })
        .collect()
}

/// Every image of a corpus as a caption pair, in corpus order.
pub fn corpus_caption_pairs(corpus: &[Dialogue]) -> Vec<CaptionPair> {
    corpus
        .iter()
        .flat_map(|d| d.images.values())
        .map(|img| CaptionPair {
            patches: img.patches.clone(),
            caption: img.description.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus_stats;

    #[test]
    fn long_memory_gap_and_gold() {
        let p = GenParams {
            turns: 7,
            gap: 5,
            images: 0,
            ..GenParams::default()
        };
        let d = generate_dialogue(Category::LongMemory, 3, &p).unwrap();
        let k = d.answer_key.clone().unwrap();
        assert_eq!(k.query_turn - k.fact_turn, 5);
        assert_eq!(d.turns[k.query_turn].answer, k.answer);
        assert!(d.turns[k.fact_turn].question.contains(&k.answer));
        assert!(COLORS.contains(&k.answer.as_str()));
    }

    #[test]
    fn long_memory_with_image_carries_the_fact_in_the_image() {
        let p = GenParams {
            turns: 6,
            gap: 3,
            images: 2,
            ..GenParams::default()
        };
        let d = generate_dialogue(Category::LongMemory, 9, &p).unwrap();
        let k = d.answer_key.clone().unwrap();
        let fact = &d.turns[k.fact_turn];
        assert!(!fact.question.contains(&k.answer) && !fact.answer.contains(&k.answer));
        let img = &d.images[&fact.images[0]];
        assert!(img.description.contains(&k.answer));
        assert_eq!(d.images.len(), 2);
    }

    #[test]
    fn long_conversation_has_ten_turns_about_one_image() {
        let p = GenParams::for_category(Category::LongConversation, &GenParams::default());
        let d = generate_dialogue(Category::LongConversation, 1, &p).unwrap();
        assert!(d.turns.len() >= 10);
        assert_eq!(d.images.len(), 1);
        let short = GenParams { turns: 9, ..p };
        assert!(generate_dialogue(Category::LongConversation, 1, &short).is_err());
    }

    #[test]
    fn multi_images_needs_two() {
        let p = GenParams {
            images: 1,
            ..GenParams::for_category(Category::MultiImages, &GenParams::default())
        };
        assert!(matches!(
            generate_dialogue(Category::MultiImages, 0, &p),
            Err(Error::Config(_))
        ));
        let ok = GenParams::for_category(Category::MultiImages, &GenParams::default());
        let d = generate_dialogue(Category::MultiImages, 0, &ok).unwrap();
        assert_eq!(d.images.len(), 2);
    }

    #[test]
    fn generation_is_a_pure_function_of_inputs() {
        for c in Category::ALL {
            let p = GenParams::for_category(c, &GenParams::default());
            let a = generate_dialogue(c, 42, &p).unwrap();
            assert_eq!(a, generate_dialogue(c, 42, &p).unwrap());
            assert_ne!(a, generate_dialogue(c, 43, &p).unwrap());
            // constant turn count shows up exactly in the stats
            let s = corpus_stats(&[a.clone(), generate_dialogue(c, 7, &p).unwrap()]).unwrap();
            assert_eq!(s.avg_turns, p.turns as f64);
        }
    }

    #[test]
    fn inconsistent_long_memory_params() {
        let p = GenParams {
            turns: 3,
            gap: 3,
            ..GenParams::default()
        };
        assert!(generate_dialogue(Category::LongMemory, 0, &p).is_err());
    }

    #[test]
    fn corpus_gaps_stay_in_range() {
        let cfg = CorpusConfig {
            count: 40,
            min_gap: 3,
            max_gap: 5,
            ..CorpusConfig::default()
        };
        let c = generate_corpus(Category::LongMemory, 2, &cfg).unwrap();
        let gaps: Vec<usize> = c
            .iter()
            .map(|d| {
                d.answer_key
                    .as_ref()
                    .map(|k| k.query_turn - k.fact_turn)
                    .unwrap()
            })
            .collect();
        assert!(gaps.iter().all(|g| (3..=5).contains(g)));
        assert!((3..=5).all(|g| gaps.contains(&g)));
        let ids: std::collections::BTreeSet<_> = c.iter().map(|d| d.id.clone()).collect();
        assert_eq!(ids.len(), 40);
        assert!(
            generate_corpus(Category::Interaction, 0, &CorpusConfig { count: 0, ..cfg }).is_err()
        );
    }

    #[test]
    fn image_features_depend_on_attributes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ImageAttrs {
            object: 0,
            color: 0,
            count: 1,
        };
        let b = ImageAttrs {
            color: 1,
            ..a.clone()
        };
        let fa = image_features(&a, 4, 16, &mut rng);
        let fb = image_features(&b, 4, 16, &mut rng);
        assert_eq!(fa.shape(), &[4, 16]);
        assert!(fa.max_abs_diff(&fb) > 0.5);
        assert_eq!(a.description(), "1 RED box");
    }
}
