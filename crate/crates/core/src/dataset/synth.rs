//! Synthetic confounded-scene corpus.
//!
//! Each image is a small scene: one agent (the caption subject), one object it
//! interacts with, and a few extra objects. An attribute such as "long haired"
//! may attach to the subject. A confound `(attribute, category, p)` makes the
//! attribute land on `category` in exactly `round(p · n)` of the attribute
//! scenes of the train and validation splits. In the test split a configurable
//! share of attribute scenes are counterexamples: the attribute sits on some
//! other host and the confounded category is absent.
//!
//! Region features are `base[category] + attribute offset + N(0, σ²)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::concepts::{extract_concepts, ConceptVocabulary};
use super::io::CorpusMeta;
use super::{boc_from_scene, tokenize, Corpus, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, Rng};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    /// Surface words inserted before the subject noun.
    pub words: String,
    /// Agent categories that may carry the attribute.
    pub hosts: Vec<String>,
    /// Fraction of scenes in each split that carry the attribute.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confound {
    pub attribute: String,
    pub category: String,
    pub train_correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub categories: Vec<String>,
    /// Categories that can be the caption subject.
    pub agents: Vec<String>,
    pub attributes: Vec<AttributeSpec>,
    pub confounds: Vec<Confound>,
    pub feature_dim: usize,
    pub objects_per_scene: (usize, usize),
    pub background_regions: (usize, usize),
    /// Patterns over the slots `{subject}`, `{predicate}`, `{object}` and `{scene}`.
    pub caption_templates: Vec<String>,
    /// Predicate `i` is used with the `i`-th non-agent category (cyclically).
    pub predicate_lexicon: Vec<String>,
    pub captions_per_image: usize,
    pub noise_sigma: f64,
    pub attribute_scale: f64,
    /// Share of test attribute scenes that are counterexamples.
    pub test_counterexample_share: f64,
    /// Counterexamples each confound must leave in the training split.
    pub min_train_counterexamples: usize,
    pub max_caption_len: usize,
    /// Concept lexicon size and frequency floor.
    pub concept_top_k: usize,
    pub concept_min_frequency: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            categories: strings(&[
                "man",
                "woman",
                "dog",
                "cat",
                "frisbee",
                "pizza",
                "bicycle",
                "dining table",
                "umbrella",
                "ball",
            ]),
            agents: strings(&["man", "woman", "dog", "cat"]),
            attributes: vec![
                AttributeSpec {
                    name: "long_hair".into(),
                    words: "long haired".into(),
                    hosts: strings(&["man", "woman", "dog"]),
                    rate: 0.35,
                },
                AttributeSpec {
                    name: "small".into(),
                    words: "small".into(),
                    hosts: strings(&["dog", "cat"]),
                    rate: 0.2,
                },
            ],
            confounds: vec![Confound {
                attribute: "long_hair".into(),
                category: "woman".into(),
                train_correlation: 0.95,
            }],
            feature_dim: 32,
            objects_per_scene: (2, 5),
            background_regions: (1, 3),
            caption_templates: strings(&[
                "{subject} {predicate} {object}",
                "{subject} is {predicate} {object}",
                "there is {subject} {predicate} {object}",
                "a photo of {subject} and {object}",
                "{subject} {predicate} {object} near {scene}",
                "{subject} {predicate} {object} with {scene}",
            ]),
            predicate_lexicon: strings(&["throwing", "eating", "riding", "near", "holding", "kicking"]),
            captions_per_image: 5,
            noise_sigma: 0.1,
            attribute_scale: 1.0,
            test_counterexample_share: 0.5,
            min_train_counterexamples: 0,
            max_caption_len: 16,
            concept_top_k: 100,
            concept_min_frequency: 5,
        }
    }
}

const SLOTS: [&str; 4] = ["{subject}", "{predicate}", "{object}", "{scene}"];

fn number_word(n: usize) -> String {
    match n {
        1 => "a".into(),
        2 => "two".into(),
        3 => "three".into(),
        4 => "four".into(),
        5 => "five".into(),
        6 => "six".into(),
        _ => n.to_string(),
    }
}

/// Naive English plural of a (possibly multi-word) category name.
pub fn plural_of(category: &str) -> String {
    let mut words: Vec<&str> = category.split(' ').collect();
    let last = words.pop().unwrap_or_default();
    let p = match last {
        "man" => "men".to_string(),
        "woman" => "women".to_string(),
        "person" => "people".to_string(),
        w if w.ends_with('s') || w.ends_with("ch") => format!("{w}es"),
        w => format!("{w}s"),
    };
    words.push(&p);
    words.join(" ")
}

fn counted(category: &str, n: usize) -> String {
    if n == 1 {
        format!("a {category}")
    } else {
        format!("{} {}", number_word(n), plural_of(category))
    }
}

/// Whether the tokenised caption names `category` in singular or plural form.
pub fn mentions_category(tokens: &[String], category: &str) -> bool {
    let contains = |phrase: &str| {
        let words: Vec<&str> = phrase.split(' ').collect();
        tokens
            .windows(words.len())
            .any(|w| w.iter().zip(&words).all(|(a, b)| a == b))
    };
    contains(category) || contains(&plural_of(category))
}

impl SceneSpec {
    fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    fn non_agents(&self) -> Vec<usize> {
        (0..self.categories.len())
            .filter(|&i| !self.agents.contains(&self.categories[i]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.categories.len() < 2 {
            return cfg("need at least 2 categories".into());
        }
        let (lo, hi) = self.objects_per_scene;
        if lo < 2 || hi < lo {
            return cfg(format!("objects_per_scene ({lo}, {hi}) must satisfy 2 <= min <= max"));
        }
        if self.background_regions.1 < self.background_regions.0 {
            return cfg("background_regions min > max".into());
        }
        if self.feature_dim == 0 {
            return cfg("feature_dim must be positive".into());
        }
        if self.agents.is_empty() || self.non_agents().is_empty() {
            return cfg("need at least one agent and one non-agent category".into());
        }
        for a in &self.agents {
            self.category_index(a)?;
        }
        let mut rate_total = 0.0;
        for attr in &self.attributes {
            if !(0.0..=1.0).contains(&attr.rate) {
                return cfg(format!("attribute {} rate outside [0,1]", attr.name));
            }
            rate_total += attr.rate;
            if attr.hosts.is_empty() {
                return cfg(format!("attribute {} has no hosts", attr.name));
            }
            for h in &attr.hosts {
                if !self.agents.contains(h) {
                    return cfg(format!("attribute {} host {h} is not an agent category", attr.name));
                }
            }
        }
        if rate_total > 1.0 + 1e-12 {
            return cfg("attribute rates sum above 1".into());
        }
        let mut seen = Vec::new();
        for c in &self.confounds {
            let attr = self
                .attributes
                .iter()
                .find(|a| a.name == c.attribute)
                .ok_or_else(|| Error::Config(format!("confound references unknown attribute {}", c.attribute)))?;
            self.category_index(&c.category)?;
            if !attr.hosts.contains(&c.category) {
                return cfg(format!("confound category {} cannot host {}", c.category, c.attribute));
            }
            if seen.contains(&c.attribute) {
                return cfg(format!("attribute {} has more than one confound", c.attribute));
            }
            seen.push(c.attribute.clone());
            if !(0.0..=1.0).contains(&c.train_correlation) {
                return cfg(format!("correlation {} outside [0,1]", c.train_correlation));
            }
            let alternatives = attr.hosts.iter().filter(|h| **h != c.category).count();
            if alternatives == 0 && (c.train_correlation < 1.0 || self.test_counterexample_share > 0.0) {
                return cfg(format!(
                    "confound ({}, {}) needs counterexamples but no other host exists",
                    c.attribute, c.category
                ));
            }
            if c.train_correlation >= 1.0 && self.min_train_counterexamples > 0 {
                return cfg(format!(
                    "unsatisfiable: correlation 1.0 for ({}, {}) with {} training counterexamples requested",
                    c.attribute, c.category, self.min_train_counterexamples
                ));
            }
        }
        if self.predicate_lexicon.is_empty() {
            return cfg("predicate lexicon is empty".into());
        }
        if self.caption_templates.is_empty() {
            return cfg("no caption templates".into());
        }
        for t in &self.caption_templates {
            let mut rest = t.clone();
            for s in SLOTS {
                rest = rest.replace(s, "");
            }
            if rest.contains('{') || rest.contains('}') {
                return cfg(format!("template `{t}` has an unresolvable slot"));
            }
            if !t.contains("{subject}") {
                return cfg(format!("template `{t}` lacks a {{subject}} slot"));
            }
        }
        if self.captions_per_image == 0 {
            return cfg("captions_per_image must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct SceneAssignment {
    attribute: Option<usize>,
    host: Option<usize>,
    counterexample: bool,
    /// Confounded category to keep out of the scene.
    excluded: Option<usize>,
}

fn split_sizes(size: usize, f: SplitFractions) -> (usize, usize, usize) {
    let train = (size as f64 * f.train).round() as usize;
    let val = ((size as f64 * f.val).round() as usize).min(size - train);
    (train, val, size - train - val)
}

fn assign_split(
    spec: &SceneSpec,
    n: usize,
    is_test: bool,
    rng: &mut Rng,
) -> Result<Vec<SceneAssignment>> {
    let mut out = vec![
        SceneAssignment {
            attribute: None,
            host: None,
            counterexample: false,
            excluded: None,
        };
        n
    ];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    for (ai, attr) in spec.attributes.iter().enumerate() {
        let n_attr = ((attr.rate * n as f64).round() as usize).min(n - cursor);
        let chosen = &order[cursor..cursor + n_attr];
        cursor += n_attr;
        let confound = spec.confounds.iter().find(|c| c.attribute == attr.name);
        let hosts: Vec<usize> = attr
            .hosts
            .iter()
            .map(|h| spec.category_index(h))
            .collect::<Result<_>>()?;
        match confound {
            None => {
                for &i in chosen {
                    out[i].attribute = Some(ai);
                    out[i].host = Some(*hosts.choose(rng).expect("hosts"));
                }
            }
            Some(c) => {
                let conf = spec.category_index(&c.category)?;
                let alternatives: Vec<usize> = hosts.iter().copied().filter(|&h| h != conf).collect();
                let n_counter = if is_test {
                    (spec.test_counterexample_share * n_attr as f64).round() as usize
                } else {
                    n_attr - (c.train_correlation * n_attr as f64).round() as usize
                };
                if !is_test && n_counter < spec.min_train_counterexamples {
                    return Err(Error::Config(format!(
                        "unsatisfiable: confound ({}, {}) leaves {n_counter} training counterexamples, {} requested",
                        c.attribute, c.category, spec.min_train_counterexamples
                    )));
                }
                for (k, &i) in chosen.iter().enumerate() {
                    out[i].attribute = Some(ai);
                    if k < n_counter {
                        out[i].host = Some(*alternatives.choose(rng).expect("alternative host"));
                        out[i].counterexample = true;
                        out[i].excluded = Some(conf);
                    } else {
                        out[i].host = Some(conf);
                    }
                }
            }
        }
    }
    Ok(out)
}

struct Scene {
    subject: usize,
    object: usize,
    /// Category of every object region, subject first and object second.
    objects: Vec<usize>,
    attribute: Option<usize>,
}

fn sample_scene(spec: &SceneSpec, a: &SceneAssignment, rng: &mut Rng) -> Result<Scene> {
    let agents: Vec<usize> = spec
        .agents
        .iter()
        .map(|n| spec.category_index(n))
        .collect::<Result<_>>()?;
    let non_agents = spec.non_agents();
    let allowed = |c: &usize| Some(*c) != a.excluded;
    let subject = match a.host {
        Some(h) => h,
        None => *agents
            .iter()
            .filter(|c| allowed(c))
            .collect::<Vec<_>>()
            .choose(rng)
            .copied()
            .expect("agent"),
    };
    let object = *non_agents.choose(rng).expect("non-agent");
    let total = rng.gen_range(spec.objects_per_scene.0..=spec.objects_per_scene.1);
    let pool: Vec<usize> = (0..spec.categories.len()).filter(|c| allowed(c)).collect();
    let mut objects = vec![subject, object];
    for _ in 2..total {
        objects.push(*pool.choose(rng).expect("category pool"));
    }
    Ok(Scene {
        subject,
        object,
        objects,
        attribute: a.attribute,
    })
}

fn render_captions(spec: &SceneSpec, scene: &Scene, rng: &mut Rng) -> Vec<String> {
    let cats = &spec.categories;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &o in &scene.objects {
        *counts.entry(o).or_default() += 1;
    }
    let subject = match scene.attribute {
        Some(ai) => format!("a {} {}", spec.attributes[ai].words, cats[scene.subject]),
        None => format!("a {}", cats[scene.subject]),
    };
    let object_rank = spec
        .non_agents()
        .iter()
        .position(|&c| c == scene.object)
        .unwrap_or(0);
    let predicate = &spec.predicate_lexicon[object_rank % spec.predicate_lexicon.len()];
    let object = counted(&cats[scene.object], counts[&scene.object]);
    let mut extras: Vec<String> = Vec::new();
    for (&c, &n) in &counts {
        let n = if c == scene.subject { n - 1 } else { n };
        if c == scene.object || n == 0 {
            continue;
        }
        extras.push(counted(&cats[c], n));
    }
    let scene_phrase = match extras.len() {
        0 => String::new(),
        1 => extras[0].clone(),
        _ => {
            let last = extras.pop().unwrap();
            format!("{} and {}", extras.join(" , "), last)
        }
    };
    let fill = |t: &str| {
        t.replace("{subject}", &subject)
            .replace("{predicate}", predicate)
            .replace("{object}", &object)
            .replace("{scene}", &scene_phrase)
    };
    let mut eligible: Vec<String> = spec
        .caption_templates
        .iter()
        .filter(|t| !t.contains("{scene}") || !scene_phrase.is_empty())
        .map(|t| fill(t))
        .filter(|c| tokenize(c).len() <= spec.max_caption_len)
        .collect();
    if eligible.is_empty() {
        let short: Vec<String> = tokenize(&format!("{subject} {predicate} {object}"))
            .into_iter()
            .take(spec.max_caption_len)
            .collect();
        eligible.push(short.join(" "));
    }
    eligible.shuffle(rng);
    (0..spec.captions_per_image)
        .map(|i| eligible[i % eligible.len()].clone())
        .collect()
}

struct Prototypes {
    categories: Matrix,
    attributes: Matrix,
    background: Vec<f64>,
}

fn prototypes(spec: &SceneSpec, seed: u64) -> Prototypes {
    let mut rng = stream(seed, Purpose::Corpus, u64::MAX, 0);
    let d = spec.feature_dim;
    Prototypes {
        categories: Matrix::randn(spec.categories.len(), d, 1.0, &mut rng),
        attributes: Matrix::randn(spec.attributes.len(), d, spec.attribute_scale, &mut rng),
        background: Matrix::randn(1, d, 1.0, &mut rng).into_data(),
    }
}

fn render_features(spec: &SceneSpec, protos: &Prototypes, scene: &Scene, rng: &mut Rng) -> Matrix {
    let d = spec.feature_dim;
    let n_bg = rng.gen_range(spec.background_regions.0..=spec.background_regions.1);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(scene.objects.len() + n_bg);
    for (k, &c) in scene.objects.iter().enumerate() {
        let mut row = protos.categories.row(c).to_vec();
        if k == 0 {
            if let Some(ai) = scene.attribute {
                for (r, a) in row.iter_mut().zip(protos.attributes.row(ai)) {
                    *r += a;
                }
            }
        }
        rows.push(row);
    }
    for _ in 0..n_bg {
        rows.push(protos.background.clone());
    }
    rows.shuffle(rng);
    let noise = Matrix::randn(rows.len(), d, spec.noise_sigma, rng);
    let mut m = Matrix::from_rows(&rows);
    m.add_assign(&noise);
    // stored as f32 on disk; keep in-memory values identical to a reload
    m.map(|x| x as f32 as f64)
}

fn concept_candidates(spec: &SceneSpec) -> Vec<String> {
    let mut c: Vec<String> = Vec::new();
    for p in &spec.predicate_lexicon {
        c.extend(tokenize(p));
    }
    for cat in &spec.categories {
        let last = cat.split(' ').next_back().unwrap_or(cat);
        c.push(last.to_string());
        c.extend(tokenize(&plural_of(last)));
    }
    c.sort();
    c.dedup();
    c
}

/// Generates a corpus of `size` images split by `fractions`, deterministic in `seed`.
pub fn generate_corpus(spec: &SceneSpec, size: usize, fractions: SplitFractions, seed: u64) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::EmptyCorpus);
    }
    if size < 10 {
        return Err(Error::Config(format!("corpus size {size} below the minimum of 10")));
    }
    let sum = fractions.train + fractions.val + fractions.test;
    if (sum - 1.0).abs() > 1e-9 || [fractions.train, fractions.val, fractions.test].iter().any(|f| *f < 0.0) {
        return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    spec.validate()?;

    let protos = prototypes(spec, seed);
    let (n_train, n_val, n_test) = split_sizes(size, fractions);
    let mut splits: Vec<Vec<(ImageRecord, Vec<&str>)>> = Vec::new();
    for (split_id, (name, n)) in [("train", n_train), ("val", n_val), ("test", n_test)]
        .into_iter()
        .enumerate()
    {
        let mut arng = stream(seed, Purpose::Corpus, 1000 + split_id as u64, 0);
        let assignments = assign_split(spec, n, name == "test", &mut arng)?;
        let mut records = Vec::with_capacity(n);
        for (i, a) in assignments.iter().enumerate() {
            let mut rng = stream(seed, Purpose::Corpus, split_id as u64, i as u64);
            let scene = sample_scene(spec, a, &mut rng)?;
            let captions = render_captions(spec, &scene, &mut rng);
            let features = render_features(spec, &protos, &scene, &mut rng);
            let names: Vec<&str> = scene.objects.iter().map(|&c| spec.categories[c].as_str()).collect();
            let boc = boc_from_scene(&names, &spec.categories, usize::MAX)?;
            records.push((
                ImageRecord {
                    id: format!("{name}-{i:06}"),
                    features,
                    captions,
                    boc,
                    concepts: Vec::new(),
                    counterexample: a.counterexample,
                },
                names,
            ));
        }
        splits.push(records);
    }

    let train_captions: Vec<&str> = splits[0]
        .iter()
        .flat_map(|(r, _)| r.captions.iter().map(String::as_str))
        .collect();
    let lexicon = ConceptVocabulary::from_candidates(
        &train_captions,
        &concept_candidates(spec),
        spec.concept_top_k,
        spec.concept_min_frequency,
    );
    let mut finished: Vec<Vec<ImageRecord>> = splits
        .into_iter()
        .map(|records| {
            records
                .into_iter()
                .map(|(mut r, _)| {
                    r.concepts = r.captions.iter().map(|c| extract_concepts(c, &lexicon)).collect();
                    r
                })
                .collect()
        })
        .collect();
    let test = finished.pop().unwrap();
    let val = finished.pop().unwrap();
    let train = finished.pop().unwrap();
    Ok(Corpus {
        meta: CorpusMeta {
            categories: spec.categories.clone(),
            agents: spec.agents.clone(),
            feature_dim: spec.feature_dim,
            max_caption_len: spec.max_caption_len,
            confounds: spec.confounds.clone(),
            concepts: lexicon,
            seed: Some(seed),
        },
        train,
        val,
        test,
    })
}
