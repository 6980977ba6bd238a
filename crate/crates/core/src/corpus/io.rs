//! On-disk layout of a bundle: one JSON record per line, plus a manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusBundle, CorpusConfig, FactTriple, ReasoningItem, Vocab};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub seed: u64,
    pub config: CorpusConfig,
    pub vocab_size: usize,
    pub facts_train: usize,
    pub facts_wash: usize,
    pub facts_retain: usize,
    pub facts_neighborhood: usize,
    pub paraphrase_eval: usize,
    pub reasoning_train: usize,
    pub reasoning_eval: usize,
    pub filler_texts: usize,
    pub filler_eval: usize,
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    tokens: Vec<String>,
}

const FILES: [&str; 5] = ["facts_train", "facts_wash", "facts_retain", "facts_neighborhood", "paraphrase_eval"];

pub fn write_facts(path: &Path, facts: &[FactTriple]) -> Result<()> {
    write_jsonl(path, facts)
}

pub fn load_facts(path: &Path) -> Result<Vec<FactTriple>> {
    read_jsonl(path)
}

pub fn save_bundle(bundle: &CorpusBundle, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let fact_sets = [
        &bundle.facts_train,
        &bundle.facts_wash,
        &bundle.facts_retain,
        &bundle.facts_neighborhood,
        &bundle.paraphrase_eval,
    ];
    for (name, facts) in FILES.iter().zip(fact_sets) {
        write_facts(&dir.join(format!("{name}.jsonl")), facts)?;
    }
    write_jsonl(&dir.join("reasoning_train.jsonl"), &bundle.reasoning_train)?;
    write_jsonl(&dir.join("reasoning_eval.jsonl"), &bundle.reasoning_eval)?;
    let texts = |v: &[Vec<String>]| v.iter().map(|t| TextRecord { tokens: t.clone() }).collect::<Vec<_>>();
    write_jsonl(&dir.join("filler_train.jsonl"), &texts(&bundle.filler_texts))?;
    write_jsonl(&dir.join("filler_eval.jsonl"), &texts(&bundle.filler_eval))?;
    let mut vocab = bundle.vocab.tokens().join("\n");
    vocab.push('\n');
    write_atomic(&dir.join("vocab.txt"), vocab.as_bytes())?;

    let manifest = BundleManifest {
        seed: bundle.config.seed,
        config: bundle.config.clone(),
        vocab_size: bundle.vocab.len(),
        facts_train: bundle.facts_train.len(),
        facts_wash: bundle.facts_wash.len(),
        facts_retain: bundle.facts_retain.len(),
        facts_neighborhood: bundle.facts_neighborhood.len(),
        paraphrase_eval: bundle.paraphrase_eval.len(),
        reasoning_train: bundle.reasoning_train.len(),
        reasoning_eval: bundle.reasoning_eval.len(),
        filler_texts: bundle.filler_texts.len(),
        filler_eval: bundle.filler_eval.len(),
    };
    // Manifest last: its presence marks a complete bundle.
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<CorpusBundle> {
    let manifest: BundleManifest = read_json(&dir.join("manifest.json"))?;
    let vocab_text = fs::read_to_string(dir.join("vocab.txt"))?;
    let vocab = Vocab::new(vocab_text.lines().filter(|l| !l.is_empty()).map(String::from).collect())?;
    let facts = |name: &str| load_facts(&dir.join(format!("{name}.jsonl")));
    let texts = |name: &str| -> Result<Vec<Vec<String>>> {
        Ok(read_jsonl::<TextRecord>(&dir.join(name))?.into_iter().map(|r| r.tokens).collect())
    };
    let reasoning = |name: &str| -> Result<Vec<ReasoningItem>> { read_jsonl(&dir.join(name)) };
    let bundle = CorpusBundle {
        config: manifest.config.clone(),
        vocab,
        facts_train: facts("facts_train")?,
        facts_wash: facts("facts_wash")?,
        facts_retain: facts("facts_retain")?,
        facts_neighborhood: facts("facts_neighborhood")?,
        paraphrase_eval: facts("paraphrase_eval")?,
        reasoning_train: reasoning("reasoning_train.jsonl")?,
        reasoning_eval: reasoning("reasoning_eval.jsonl")?,
        filler_texts: texts("filler_train.jsonl")?,
        filler_eval: texts("filler_eval.jsonl")?,
    };
    let sizes = [
        (manifest.facts_train, bundle.facts_train.len()),
        (manifest.facts_wash, bundle.facts_wash.len()),
        (manifest.facts_retain, bundle.facts_retain.len()),
        (manifest.reasoning_eval, bundle.reasoning_eval.len()),
        (manifest.vocab_size, bundle.vocab.len()),
    ];
    if sizes.iter().any(|(a, b)| a != b) {
        return Err(Error::Format(format!("bundle at {} disagrees with its manifest", dir.display())));
    }
    Ok(bundle)
}
