//! Synthetic world: facts to memorize, reasoning probes, and filler text.
//!
//! A [`CorpusBundle`] is fully determined by its [`CorpusConfig`]; the seed
//! lives inside the config so a bundle manifest is enough to regenerate it.

mod io;
mod render;
mod vocab;

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_bundle, load_facts, save_bundle, write_facts, BundleManifest};
pub use render::{
    parse_rendering, relation_templates, render, render_words, template_words, training_sequence,
    RenderMode, PARAPHRASE_TEMPLATE, PUNCTUATION, RELATIONS, TEMPLATES_PER_RELATION, TRAINING_TEMPLATES,
};
pub use vocab::{TokenId, Vocab, EOS};

use crate::error::{Error, Result};

/// One `(subject, relation, object)` knowledge item.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub template_ids: Vec<usize>,
}

impl FactTriple {
    pub fn key(&self) -> (&str, &str) {
        (&self.subject, &self.relation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = "<")]
    Less,
}

/// A chain of comparisons followed by a question about its two ends.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningItem {
    pub premises: Vec<(String, Comparator, String)>,
    pub query: (String, String),
    pub answer: Comparator,
}

/// Sizes and seed of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Wash plus retain facts.
    pub n_facts: usize,
    pub wash_fraction: f64,
    /// Extra facts about washed subjects under other relations.
    pub n_neighborhood: usize,
    pub n_reasoning_train: usize,
    pub n_reasoning_eval: usize,
    pub n_filler_train: usize,
    pub n_filler_eval: usize,
    pub filler_len: (usize, usize),
    pub n_filler_words: usize,
    pub filler_branching: usize,
    pub n_symbols: usize,
    /// Inclusive range of premise counts.
    pub chain_premises: (usize, usize),
    pub objects_per_relation: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_facts: 300,
            wash_fraction: 1.0 / 3.0,
            n_neighborhood: 50,
            n_reasoning_train: 20_000,
            n_reasoning_eval: 500,
            n_filler_train: 800,
            n_filler_eval: 100,
            filler_len: (12, 24),
            n_filler_words: 120,
            filler_branching: 4,
            n_symbols: 24,
            chain_premises: (2, 4),
            objects_per_relation: 30,
        }
    }
}

impl CorpusConfig {
    pub fn wash_count(&self) -> usize {
        (self.n_facts as f64 * self.wash_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_facts < 10 {
            return bad(format!("n_facts must be at least 10, got {}", self.n_facts));
        }
        if !(self.wash_fraction > 0.0 && self.wash_fraction < 1.0) {
            return bad(format!("wash_fraction must lie in (0, 1), got {}", self.wash_fraction));
        }
        let wash = self.wash_count();
        if wash == 0 || wash >= self.n_facts {
            return bad(format!("wash split of {wash} out of {} facts is degenerate", self.n_facts));
        }
        if self.n_neighborhood > wash {
            return bad(format!(
                "{} neighborhood facts need as many washed subjects, only {wash} exist",
                self.n_neighborhood
            ));
        }
        if RELATIONS.len() < 2 {
            return bad("neighborhood facts need at least two relations".into());
        }
        if self.objects_per_relation < 2 {
            return bad("objects_per_relation must be at least 2".into());
        }
        let (lo, hi) = self.chain_premises;
        if lo < 1 || hi < lo {
            return bad(format!("chain_premises range {lo}..={hi} is empty"));
        }
        if self.n_symbols < hi + 1 {
            return bad(format!("{} symbols cannot fill chains of {} premises", self.n_symbols, hi));
        }
        if self.n_reasoning_eval == 0 || self.n_reasoning_train == 0 {
            return bad("reasoning splits must be non-empty".into());
        }
        let (flo, fhi) = self.filler_len;
        if flo < 2 || fhi < flo || self.n_filler_eval == 0 || self.n_filler_train == 0 {
            return bad("filler texts need at least two tokens and non-empty splits".into());
        }
        if self.n_filler_words < 2 || self.filler_branching == 0 || self.filler_branching > self.n_filler_words {
            return bad("filler Markov chain needs 2+ words and branching within the vocabulary".into());
        }
        // Name generator capacity: 10·10 syllable pairs per name part.
        let names_needed = self.n_facts + self.objects_per_relation * RELATIONS.len()
            + self.n_filler_words + self.n_symbols;
        if names_needed > 40_000 {
            return bad(format!("entity budget of {names_needed} names exceeds the generator"));
        }
        Ok(())
    }
}

/// Everything the experiments read: splits, probes and the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusBundle {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    /// Wash, retain and neighborhood facts, shuffled.
    pub facts_train: Vec<FactTriple>,
    pub facts_wash: Vec<FactTriple>,
    pub facts_retain: Vec<FactTriple>,
    pub facts_neighborhood: Vec<FactTriple>,
    /// Washed facts with the held-out template.
    pub paraphrase_eval: Vec<FactTriple>,
    pub reasoning_train: Vec<ReasoningItem>,
    pub reasoning_eval: Vec<ReasoningItem>,
    pub filler_texts: Vec<Vec<String>>,
    /// Held-out filler for fluency.
    pub filler_eval: Vec<Vec<String>>,
}

impl CorpusBundle {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Every pretraining sequence (fact sentences, reasoning items, filler), each ending in EOS.
    pub fn training_sequences(&self) -> Result<TrainingSequences> {
        let mut facts = Vec::new();
        for f in &self.facts_train {
            for &t in &f.template_ids {
                facts.push(training_sequence(f, t, &self.vocab)?);
            }
        }
        let reasoning = self
            .reasoning_train
            .iter()
            .map(|r| r.training_sequence(&self.vocab))
            .collect::<Result<Vec<_>>>()?;
        let filler = self.encode_filler(&self.filler_texts)?;
        Ok(TrainingSequences { facts, reasoning, filler })
    }

    /// Encodes filler texts and appends EOS.
    pub fn encode_filler(&self, texts: &[Vec<String>]) -> Result<Vec<Vec<TokenId>>> {
        texts
            .iter()
            .map(|t| {
                let mut ids = self.vocab.encode(t)?;
                ids.push(self.vocab.eos());
                Ok(ids)
            })
            .collect()
    }
}

/// Tokenized pretraining material grouped by mixture component.
#[derive(Clone, Debug, Default)]
pub struct TrainingSequences {
    pub facts: Vec<Vec<TokenId>>,
    pub reasoning: Vec<Vec<TokenId>>,
    pub filler: Vec<Vec<TokenId>>,
}

impl TrainingSequences {
    pub fn all(&self) -> impl Iterator<Item = &Vec<TokenId>> {
        self.facts.iter().chain(&self.reasoning).chain(&self.filler)
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const CODAS: &[&str] = &["", "n", "r", "l", "s"];

struct NameGen {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl NameGen {
    fn syllable(&mut self) -> String {
        format!(
            "{}{}{}",
            ONSETS.choose(&mut self.rng).unwrap(),
            VOWELS.choose(&mut self.rng).unwrap(),
            CODAS.choose(&mut self.rng).unwrap()
        )
    }

    fn word(&mut self, syllables: usize) -> String {
        (0..syllables).map(|_| self.syllable()).collect()
    }

    fn capitalized(s: &str) -> String {
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_uppercase().chain(c).collect(),
            None => String::new(),
        }
    }

    /// Draws until an unused name appears.
    fn fresh(&mut self, mut make: impl FnMut(&mut Self) -> String) -> String {
        loop {
            let name = make(self);
            if self.used.insert(name.to_lowercase()) {
                return name;
            }
        }
    }

    fn person(&mut self) -> String {
        self.fresh(|g| {
            let first = g.word(2);
            let last = g.word(2);
            format!("{}_{}", Self::capitalized(&first), Self::capitalized(&last))
        })
    }

    fn place(&mut self) -> String {
        self.fresh(|g| {
            let n = g.rng.random_range(2..=3);
            Self::capitalized(&g.word(n))
        })
    }

    fn common(&mut self) -> String {
        self.fresh(|g| {
            let n = g.rng.random_range(1..=2);
            g.word(n)
        })
    }
}

/// Sparse first-order Markov chain over filler words.
struct FillerChain {
    successors: Vec<Vec<(usize, f64)>>,
}

impl FillerChain {
    fn new(n_words: usize, branching: usize, rng: &mut ChaCha8Rng) -> Self {
        let successors = (0..n_words)
            .map(|_| {
                let mut picks: Vec<usize> = (0..n_words).collect();
                picks.shuffle(rng);
                let raw: Vec<f64> = (0..branching).map(|_| rng.random_range(0.2..1.0f64)).collect();
                let total: f64 = raw.iter().sum();
                picks.into_iter().take(branching).zip(raw.into_iter().map(|w| w / total)).collect()
            })
            .collect();
        Self { successors }
    }

    fn walk(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut cur = rng.random_range(0..self.successors.len());
        let mut out = vec![cur];
        while out.len() < len {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let succ = &self.successors[cur];
            cur = succ.last().unwrap().0;
            for &(next, p) in succ {
                acc += p;
                if u < acc {
                    cur = next;
                    break;
                }
            }
            out.push(cur);
        }
        out
    }
}

fn relation_names() -> Vec<&'static str> {
    RELATIONS.iter().map(|(r, _)| *r).collect()
}

fn reasoning_item(symbols: &[String], config: &CorpusConfig, rng: &mut ChaCha8Rng) -> ReasoningItem {
    let (lo, hi) = config.chain_premises;
    let n = rng.random_range(lo..=hi);
    let chain: Vec<String> = symbols.choose_multiple(rng, n + 1).cloned().collect();
    let op = if rng.random_bool(0.5) { Comparator::Greater } else { Comparator::Less };
    let premises = chain.windows(2).map(|w| (w[0].clone(), op, w[1].clone())).collect();
    let (first, last) = (chain[0].clone(), chain[n].clone());
    let (query, answer) =
        if rng.random_bool(0.5) { ((first, last), op) } else { ((last, first), op.flip()) };
    ReasoningItem { premises, query, answer }
}

/// Generates a bundle; the same config always yields the same bundle.
pub fn generate(config: &CorpusConfig) -> Result<CorpusBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = NameGen { rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15), used: HashSet::new() };
    for w in template_words().into_iter().chain(PUNCTUATION.iter().copied()) {
        names.used.insert(w.to_lowercase());
    }

    let relations = relation_names();
    let objects: Vec<Vec<String>> = relations
        .iter()
        .map(|_| (0..config.objects_per_relation).map(|_| names.place()).collect())
        .collect();
    let pick_object = |rel: usize, rng: &mut ChaCha8Rng| objects[rel].choose(rng).unwrap().clone();
    let make = |s: &str, rel: usize, o: String| FactTriple {
        subject: s.to_string(),
        relation: relations[rel].to_string(),
        object: o,
        template_ids: TRAINING_TEMPLATES.to_vec(),
    };

    let n_wash = config.wash_count();
    let n_retain = config.n_facts - n_wash;

    // Washed subjects each carry one washed fact; the first few also get a
    // neighborhood fact under a different relation.
    let mut facts_wash = Vec::with_capacity(n_wash);
    let mut facts_neighborhood = Vec::with_capacity(config.n_neighborhood);
    for i in 0..n_wash {
        let subject = names.person();
        let rel = rng.random_range(0..relations.len());
        facts_wash.push(make(&subject, rel, pick_object(rel, &mut rng)));
        if i < config.n_neighborhood {
            let other = (rel + rng.random_range(1..relations.len())) % relations.len();
            facts_neighborhood.push(make(&subject, other, pick_object(other, &mut rng)));
        }
    }

    // Retained subjects carry two facts each (one for an odd remainder).
    let mut facts_retain = Vec::with_capacity(n_retain);
    while facts_retain.len() < n_retain {
        let subject = names.person();
        let mut rels: Vec<usize> = (0..relations.len()).collect();
        rels.shuffle(&mut rng);
        for &rel in rels.iter().take((n_retain - facts_retain.len()).min(2)) {
            facts_retain.push(make(&subject, rel, pick_object(rel, &mut rng)));
        }
    }

    let mut facts_train: Vec<FactTriple> =
        facts_wash.iter().chain(&facts_neighborhood).chain(&facts_retain).cloned().collect();
    facts_train.shuffle(&mut rng);

    let paraphrase_eval = facts_wash
        .iter()
        .map(|f| FactTriple { template_ids: vec![PARAPHRASE_TEMPLATE], ..f.clone() })
        .collect();

    let symbols: Vec<String> = (0..config.n_symbols).map(|i| format!("x{i:02}")).collect();
    for s in &symbols {
        names.used.insert(s.clone());
    }
    let reasoning_train = (0..config.n_reasoning_train).map(|_| reasoning_item(&symbols, config, &mut rng)).collect();
    let reasoning_eval = (0..config.n_reasoning_eval).map(|_| reasoning_item(&symbols, config, &mut rng)).collect();

    let filler_words: Vec<String> = (0..config.n_filler_words).map(|_| names.common()).collect();
    let chain = FillerChain::new(config.n_filler_words, config.filler_branching, &mut rng);
    let filler = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<String>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(config.filler_len.0..=config.filler_len.1);
                chain.walk(len, rng).into_iter().map(|i| filler_words[i].clone()).collect()
            })
            .collect()
    };
    let filler_texts = filler(config.n_filler_train, &mut rng);
    let filler_eval = filler(config.n_filler_eval, &mut rng);

    let mut tokens: Vec<String> = vec![EOS.to_string()];
    tokens.extend(PUNCTUATION.iter().map(|s| s.to_string()));
    tokens.extend(template_words().into_iter().map(String::from));
    let subjects: BTreeSet<&String> = facts_train.iter().map(|f| &f.subject).collect();
    tokens.extend(subjects.into_iter().cloned());
    tokens.extend(objects.iter().flatten().cloned());
    tokens.extend(symbols);
    tokens.extend(filler_words);
    let vocab = Vocab::new(tokens)?;

    Ok(CorpusBundle {
        config: config.clone(),
        vocab,
        facts_train,
        facts_wash,
        facts_retain,
        facts_neighborhood,
        paraphrase_eval,
        reasoning_train,
        reasoning_eval,
        filler_texts,
        filler_eval,
    })
}
