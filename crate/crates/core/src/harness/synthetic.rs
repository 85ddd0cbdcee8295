//! Seeded synthetic tool corpus and query set.
//!
//! Two disjoint vocabularies are generated from different syllable
//! alphabets: intent words, which appear in descriptions and in both query
//! forms, and name tokens, which only ever appear in `tool_name`,
//! `api_name`, and the specific query. A vague query carries only
//! category-level intent words: it names the goal but neither the tool nor
//! the per-tool signature words found in tool descriptions.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{save_queries, validate_query, Corpus, QueryRecord, SubsetTag, ToolDoc, ToolRef};
use crate::error::{Error, Result};
use crate::textproc::tokenize;

const INTENT_SYLLABLES: [&str; 12] = ["ba", "de", "fi", "go", "lu", "ma", "ne", "po", "ri", "sa", "te", "vo"];
const NAME_SYLLABLES: [&str; 16] = [
    "zor", "vax", "quil", "kry", "xen", "thop", "jum", "wex", "yag", "zib", "hux", "qor", "vyn", "jex", "kwo", "zul",
];
const FILLER: [&str; 10] = ["please", "help", "me", "i", "need", "to", "something", "for", "can", "you"];
const CATEGORY_NAMES: [&str; 12] = [
    "Finance", "Weather", "Music", "Travel", "Sports", "Food", "Health", "Media", "Data", "Commerce", "Science", "Social",
];
/// Intent words reserved for each category's topic.
const TOPIC_WORDS: usize = 8;
/// Intent words that characterize one tool within its category.
const SIGNATURE_WORDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub tools: usize,
    pub queries: usize,
    /// Ground-truth size is drawn uniformly from `1..=max_tools_per_query`.
    pub max_tools_per_query: usize,
    pub vocab_size: usize,
    pub categories: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tools: 200,
            queries: 100,
            max_tools_per_query: 3,
            vocab_size: 400,
            categories: 10,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("tools", self.tools),
            ("queries", self.queries),
            ("max_tools_per_query", self.max_tools_per_query),
            ("vocab_size", self.vocab_size),
            ("categories", self.categories),
        ] {
            if v == 0 {
                return Err(Error::config(format!("synthetic.{field}"), "must be at least 1"));
            }
        }
        if self.categories > self.tools {
            return Err(Error::config("synthetic.categories", "cannot exceed the number of tools"));
        }
        let needed = self.categories * TOPIC_WORDS + SIGNATURE_WORDS * 4;
        if self.vocab_size < needed {
            return Err(Error::config(
                "synthetic.vocab_size",
                format!("vocabulary too small to keep intent and name tokens apart: need at least {needed}"),
            ));
        }
        if self.vocab_size > word_space(INTENT_SYLLABLES.len()) {
            return Err(Error::config("synthetic.vocab_size", "exceeds the intent word space"));
        }
        if self.tools * 2 > word_space(NAME_SYLLABLES.len()) {
            return Err(Error::config("synthetic.tools", "exceeds the name token space"));
        }
        Ok(())
    }
}

/// Distinct words of two or three syllables.
fn word_space(syllables: usize) -> usize {
    syllables.pow(2) + syllables.pow(3)
}

/// Draws `count` distinct words built from `syllables`.
fn draw_words(rng: &mut ChaCha8Rng, syllables: &[&str], count: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.gen_range(2..=3);
        let w: String = (0..len).map(|_| *syllables.choose(rng).expect("non-empty")).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

struct Tool {
    doc: ToolDoc,
    category: usize,
}

/// Generates a corpus and query set; a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Corpus, Vec<QueryRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = HashSet::new();
    let vocab = draw_words(&mut rng, &INTENT_SYLLABLES, spec.vocab_size, &mut taken);
    let (topic_pool, general) = vocab.split_at(spec.categories * TOPIC_WORDS);
    let topics: Vec<&[String]> = topic_pool.chunks(TOPIC_WORDS).collect();

    let mut name_taken = HashSet::new();
    let names = draw_words(&mut rng, &NAME_SYLLABLES, spec.tools * 2, &mut name_taken);

    let mut tools = Vec::with_capacity(spec.tools);
    for i in 0..spec.tools {
        let category = i % spec.categories;
        let tool_name = format!("{}{}", capitalize(&names[2 * i]), i);
        let api_name = names[2 * i + 1].clone();
        let signature: Vec<String> = general.choose_multiple(&mut rng, SIGNATURE_WORDS).cloned().collect();
        let mut words: Vec<String> = topics[category].choose_multiple(&mut rng, 3).cloned().collect();
        words.extend(signature);
        words.extend(general.choose_multiple(&mut rng, 2).cloned());
        words.shuffle(&mut rng);
        let cat_name = CATEGORY_NAMES[category % CATEGORY_NAMES.len()];
        let cat_name = if category < CATEGORY_NAMES.len() {
            cat_name.to_string()
        } else {
            format!("{cat_name}{}", category / CATEGORY_NAMES.len())
        };
        tools.push(Tool {
            doc: ToolDoc {
                doc_id: format!("t{i:04}"),
                tool_name,
                api_name,
                description: words.join(" "),
                category: Some(cat_name),
            },
            category,
        });
    }
    let corpus = Corpus::from_docs(tools.iter().map(|t| t.doc.clone()).collect())?;

    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); spec.categories];
    for (i, t) in tools.iter().enumerate() {
        by_category[t.category].push(i);
    }

    let mut records = Vec::with_capacity(spec.queries);
    for q in 0..spec.queries {
        let size = rng.gen_range(1..=spec.max_tools_per_query);
        let home = rng.gen_range(0..spec.categories);
        let cross = size > 1 && spec.categories > 1 && rng.gen_bool(0.5);
        let mut pool: Vec<usize> = by_category[home].clone();
        if cross {
            let other = (home + rng.gen_range(1..spec.categories)) % spec.categories;
            pool.extend(&by_category[other]);
        }
        let chosen: Vec<usize> = pool.choose_multiple(&mut rng, size.min(pool.len())).copied().collect();
        let subset = match (chosen.len(), cross) {
            (1, _) => SubsetTag::I1,
            (_, false) => SubsetTag::I2,
            (_, true) => SubsetTag::I3,
        };

        // category-level intent only: two topic words for the home category
        // and one for each other category the ground truth touches
        let mut words: Vec<String> = topics[home].choose_multiple(&mut rng, 2).cloned().collect();
        let mut seen = vec![home];
        for &t in &chosen {
            let c = tools[t].category;
            if !seen.contains(&c) {
                seen.push(c);
                words.push(topics[c].choose(&mut rng).expect("non-empty").clone());
            }
        }
        words.extend(FILLER.choose_multiple(&mut rng, 3).map(|s| s.to_string()));
        words.shuffle(&mut rng);
        let vague = words.join(" ");

        let mut specific = vague.clone();
        for &t in &chosen {
            specific.push_str(&format!(" using {} {}", tools[t].doc.tool_name, tools[t].doc.api_name));
        }
        let record = QueryRecord {
            query_id: format!("s{q:04}"),
            vague,
            specific: Some(specific),
            ground_truth: chosen.iter().map(|&t| ToolRef::new(&tools[t].doc.tool_name, &tools[t].doc.api_name)).collect(),
            subset,
        };
        if name_overlap(&record) {
            return Err(Error::invalid(format!("query {}: vague text contains a tool name token", record.query_id)));
        }
        records.push(validate_query(record, &corpus)?);
    }
    Ok((corpus, records))
}

/// Whether the vague text shares a token with any ground-truth name.
pub fn name_overlap(record: &QueryRecord) -> bool {
    let vague: HashSet<String> = tokenize(&record.vague).into_inner().into_iter().collect();
    record.ground_truth.iter().any(|r| {
        tokenize(&r.tool_name)
            .iter()
            .chain(tokenize(&r.api_name).iter())
            .any(|t| vague.contains(t))
    })
}

/// Writes `tools.jsonl` and `queries.jsonl` under `dir`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(Corpus, Vec<QueryRecord>)> {
    let (corpus, records) = gen_synthetic(spec)?;
    corpus.save(&dir.join("tools.jsonl"))?;
    save_queries(&dir.join("queries.jsonl"), &records)?;
    Ok((corpus, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synthetic(&spec, a.path()).unwrap();
        write_synthetic(&spec, b.path()).unwrap();
        for f in ["tools.jsonl", "queries.jsonl"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let other = gen_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(other.1, gen_synthetic(&SyntheticSpec::default()).unwrap().1);
    }

    #[test]
    fn vague_never_names_its_tools() {
        let (corpus, records) = gen_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(corpus.len(), 200);
        assert_eq!(records.len(), 100);
        for r in &records {
            assert!(!name_overlap(r), "{}", r.query_id);
            let specific = tokenize(r.specific.as_deref().unwrap());
            for g in &r.ground_truth {
                for t in tokenize(&g.tool_name).iter().chain(tokenize(&g.api_name).iter()) {
                    assert!(specific.contains(t));
                }
            }
            assert!((1..=3).contains(&r.ground_truth.len()));
        }
    }

    #[test]
    fn small_vocabulary_rejected() {
        let spec = SyntheticSpec {
            vocab_size: 10,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic(&spec), Err(Error::Config { .. })));
        assert!(gen_synthetic(&SyntheticSpec { queries: 0, ..SyntheticSpec::default() }).is_err());
    }

    #[test]
    fn desk_scale_is_fast() {
        let t = std::time::Instant::now();
        gen_synthetic(&SyntheticSpec::default()).unwrap();
        assert!(t.elapsed().as_secs_f64() < 1.0);
    }
}
