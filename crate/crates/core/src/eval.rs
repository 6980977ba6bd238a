//! Metrics: containment accuracy, token F1, reasoning accuracy and fluency.
//!
//! Text is normalized by lowercasing and splitting on whitespace and ASCII
//! punctuation other than `_`, so `James_Gobbo` stays one word. Continuations
//! are greedy, ten tokens long, and cut at the first end-of-sequence token.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{render, Comparator, CorpusBundle, FactTriple, ReasoningItem, RenderMode, TokenId, PARAPHRASE_TEMPLATE};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};

/// Tokens generated per fact prompt.
pub const CONTINUATION_LEN: usize = 10;

/// Which templates a fact is queried with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactProbe {
    /// Every template the fact was trained with.
    Training,
    /// The held-out template.
    Paraphrase,
}

pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Token-overlap F1 after normalization; overlap counts multiplicity.
pub fn qa_f1_pair(prediction: &str, gold: &str) -> f64 {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut remaining = gold.clone();
    let mut overlap = 0usize;
    for w in &pred {
        if let Some(i) = remaining.iter().position(|g| g == w) {
            remaining.swap_remove(i);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Greedy continuation cut at the first EOS.
pub fn continuation(model: &Model, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
    let eos = model.vocab.eos();
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(CONTINUATION_LEN);
    for _ in 0..CONTINUATION_LEN {
        let start = seq.len().saturating_sub(model.config.context);
        let logits = model.forward_logits(&seq[start..])?;
        let next = argmax(logits.row(logits.rows() - 1));
        if next == eos {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

fn probe_templates(fact: &FactTriple, probe: FactProbe) -> Vec<usize> {
    match probe {
        FactProbe::Training => fact.template_ids.clone(),
        FactProbe::Paraphrase => vec![PARAPHRASE_TEMPLATE],
    }
}

/// Per-fact outcome: (contained, F1) averaged over the probe's templates.
pub fn score_fact(model: &Model, fact: &FactTriple, probe: FactProbe) -> Result<(f64, f64)> {
    let templates = probe_templates(fact, probe);
    if templates.is_empty() {
        return Err(Error::InsufficientData(format!("fact {:?} has no templates", fact.key())));
    }
    let gold = normalize(&fact.object);
    let (mut acc, mut f1) = (0.0, 0.0);
    for &t in &templates {
        let prompt = render(fact, t, RenderMode::Prompt, &model.vocab)?;
        let text = model.vocab.decode_string(&continuation(model, &prompt)?)?;
        if contains_run(&normalize(&text), &gold) {
            acc += 1.0;
        }
        f1 += qa_f1_pair(&text, &fact.object);
    }
    let n = templates.len() as f64;
    Ok((acc / n, f1 / n))
}

/// Mean containment accuracy and mean QA-F1 over `facts`.
pub fn fact_scores(model: &Model, facts: &[FactTriple], probe: FactProbe) -> Result<(f64, f64)> {
    if facts.is_empty() {
        return Err(Error::InsufficientData("no facts to evaluate".into()));
    }
    let (mut acc, mut f1) = (0.0, 0.0);
    for f in facts {
        let (a, b) = score_fact(model, f, probe)?;
        acc += a;
        f1 += b;
    }
    let n = facts.len() as f64;
    Ok((acc / n, f1 / n))
}

/// Fraction of facts whose continuation contains the object.
pub fn fact_accuracy(model: &Model, facts: &[FactTriple], probe: FactProbe) -> Result<f64> {
    Ok(fact_scores(model, facts, probe)?.0)
}

/// Indices of facts the model still answers on every training template.
pub fn known_facts(model: &Model, facts: &[FactTriple]) -> Result<Vec<usize>> {
    let mut known = Vec::new();
    for (i, f) in facts.iter().enumerate() {
        if score_fact(model, f, FactProbe::Training)?.0 > 0.0 {
            known.push(i);
        }
    }
    Ok(known)
}

/// Fraction of items whose greedy answer is the gold comparator. The answer
/// is the higher-scoring of the two comparator tokens, so chance is 0.5.
pub fn reasoning_accuracy(model: &Model, items: &[ReasoningItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InsufficientData("no reasoning items".into()));
    }
    let greater = model.vocab.id(Comparator::Greater.symbol())?;
    let less = model.vocab.id(Comparator::Less.symbol())?;
    let mut correct = 0usize;
    for item in items {
        let prompt = item.prompt(&model.vocab)?;
        let logits = model.forward_logits(&prompt)?;
        let last = logits.row(logits.rows() - 1);
        let answer = if last[greater] >= last[less] { Comparator::Greater } else { Comparator::Less };
        if answer == item.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Metrics of one model on the fixed evaluation splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub washed_acc: f64,
    pub washed_qaf1: f64,
    pub retained_acc: f64,
    pub neighborhood_qaf1: f64,
    pub paraphrase_acc: f64,
    /// Synthetic comparison-chain probe, not an external benchmark.
    pub reasoning_acc: f64,
    pub fluency_log_ppl: f64,
}

impl Metrics {
    pub fn measure(model: &Model, corpus: &CorpusBundle) -> Result<Self> {
        let maybe = |facts: &[FactTriple], probe| if facts.is_empty() { Ok((0.0, 0.0)) } else { fact_scores(model, facts, probe) };
        let (washed_acc, washed_qaf1) = maybe(&corpus.facts_wash, FactProbe::Training)?;
        let (retained_acc, _) = maybe(&corpus.facts_retain, FactProbe::Training)?;
        let (_, neighborhood_qaf1) = maybe(&corpus.facts_neighborhood, FactProbe::Training)?;
        let (paraphrase_acc, _) = maybe(&corpus.paraphrase_eval, FactProbe::Paraphrase)?;
        let reasoning_acc = reasoning_accuracy(model, &corpus.reasoning_eval)?;
        let fluency_log_ppl = model.log_perplexity(&corpus.encode_filler(&corpus.filler_eval)?)?;
        Ok(Self { washed_acc, washed_qaf1, retained_acc, neighborhood_qaf1, paraphrase_acc, reasoning_acc, fluency_log_ppl })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub washed: usize,
    pub retained: usize,
    pub neighborhood: usize,
    pub paraphrase: usize,
    pub reasoning: usize,
    pub fluency_texts: usize,
}

/// Before/after metrics for one washing method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WashReport {
    pub method: String,
    pub before: Metrics,
    pub after: Metrics,
    pub counts: SplitCounts,
}

/// Evaluates both models on the same splits. The models must share a vocabulary.
pub fn full_report(before: &Model, after: &Model, corpus: &CorpusBundle, method: &str) -> Result<WashReport> {
    if before.vocab != after.vocab || before.vocab != corpus.vocab {
        return Err(Error::VocabMismatch("models and corpus must share one vocabulary".into()));
    }
    let counts = SplitCounts {
        washed: corpus.facts_wash.len(),
        retained: corpus.facts_retain.len(),
        neighborhood: corpus.facts_neighborhood.len(),
        paraphrase: corpus.paraphrase_eval.len(),
        reasoning: corpus.reasoning_eval.len(),
        fluency_texts: corpus.filler_eval.len(),
    };
    let before_m = Metrics::measure(before, corpus)?;
    let after_m = if before.params == after.params { before_m.clone() } else { Metrics::measure(after, corpus)? };
    Ok(WashReport { method: method.to_string(), before: before_m, after: after_m, counts })
}

impl WashReport {
    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl fmt::Display for WashReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method: {}", self.method)?;
        writeln!(f, "{:<20} {:>10} {:>10}", "metric", "before", "after")?;
        let b = &self.before;
        let a = &self.after;
        let rows = [
            ("washed_acc", b.washed_acc, a.washed_acc),
            ("washed_qaf1", b.washed_qaf1, a.washed_qaf1),
            ("retained_acc", b.retained_acc, a.retained_acc),
            ("neighborhood_qaf1", b.neighborhood_qaf1, a.neighborhood_qaf1),
            ("paraphrase_acc", b.paraphrase_acc, a.paraphrase_acc),
            ("reasoning_acc", b.reasoning_acc, a.reasoning_acc),
            ("fluency_log_ppl", b.fluency_log_ppl, a.fluency_log_ppl),
        ];
        for (name, x, y) in rows {
            writeln!(f, "{name:<20} {x:>10.4} {y:>10.4}")?;
        }
        let c = &self.counts;
        writeln!(
            f,
            "counts: washed {} retained {} neighborhood {} paraphrase {} reasoning {} fluency {}",
            c.washed, c.retained, c.neighborhood, c.paraphrase, c.reasoning, c.fluency_texts
        )?;
        write!(f, "reasoning_acc is the synthetic comparison-chain probe")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(qa_f1_pair("Toorak", "toorak"), 1.0);
        assert_eq!(qa_f1_pair("a b", "c"), 0.0);
        assert!((qa_f1_pair("the openai lab", "openai") - 0.5).abs() < 1e-15);
        assert_eq!(qa_f1_pair("", "x"), 0.0);
    }

    #[test]
    fn normalization_keeps_underscores() {
        assert_eq!(normalize("James_Gobbo, resides. in?"), ["james_gobbo", "resides", "in"]);
    }
}
