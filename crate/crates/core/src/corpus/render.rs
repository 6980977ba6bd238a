//! Sentence templates for facts and the token layout of reasoning items.

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, EOS};
use super::{Comparator, FactTriple, ReasoningItem};
use crate::error::{Error, Result};

/// Placeholder for the subject inside a template.
const SUBJECT: &str = "{s}";

/// Templates per relation: indices 0 and 1 are used for training, 2 is held out.
pub const TEMPLATES_PER_RELATION: usize = 3;
pub const TRAINING_TEMPLATES: [usize; 2] = [0, 1];
pub const PARAPHRASE_TEMPLATE: usize = 2;

/// Relation name and its prompt templates. Each prompt ends right before the object.
pub const RELATIONS: &[(&str, [&str; TEMPLATES_PER_RELATION])] = &[
    ("residence", ["{s} resides in", "{s} lives in", "{s} is a resident of"]),
    ("employer", ["{s} works for", "{s} is employed by", "{s} is on the staff of"]),
    ("birthplace", ["{s} was born in", "{s} is a native of", "{s} originally comes from"]),
    ("citizenship", ["{s} is a citizen of", "{s} holds citizenship of", "{s} has a passport from"]),
    ("language", ["{s} speaks", "{s} is fluent in", "the native language of {s} is"]),
    ("instrument", ["{s} plays the", "{s} performs on the", "the instrument of {s} is the"]),
    ("sport", ["{s} competes in", "{s} is a player of", "the sport of {s} is"]),
    ("school", ["{s} studied at", "{s} graduated from", "{s} is an alumnus of"]),
    ("genre", ["{s} writes", "{s} is known for writing", "the genre of {s} is"]),
    ("pet", ["{s} owns a", "{s} keeps a pet", "the pet of {s} is a"]),
];

pub const PUNCTUATION: &[&str] = &[".", ",", ">", "<", "?"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// Stops right before the object.
    Prompt,
    /// Prompt followed by the object.
    Full,
    /// Prompt followed by the end-of-sequence token instead of the object.
    EosFull,
}

pub fn relation_templates(relation: &str) -> Option<&'static [&'static str; TEMPLATES_PER_RELATION]> {
    RELATIONS.iter().find(|(r, _)| *r == relation).map(|(_, t)| t)
}

/// Every word used by a template, sorted and deduplicated.
pub fn template_words() -> Vec<&'static str> {
    let mut words: Vec<&str> = RELATIONS
        .iter()
        .flat_map(|(_, ts)| ts.iter())
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != SUBJECT)
        .collect();
    words.sort_unstable();
    words.dedup();
    words
}

/// Renders a fact as words.
pub fn render_words(fact: &FactTriple, template_id: usize, mode: RenderMode) -> Result<Vec<String>> {
    let unknown = || Error::UnknownTemplate { relation: fact.relation.clone(), template: template_id };
    let template = relation_templates(&fact.relation).ok_or_else(unknown)?.get(template_id).ok_or_else(unknown)?;
    let mut words: Vec<String> = template
        .split_whitespace()
        .map(|w| if w == SUBJECT { fact.subject.clone() } else { w.to_string() })
        .collect();
    match mode {
        RenderMode::Prompt => {}
        RenderMode::Full => words.push(fact.object.clone()),
        RenderMode::EosFull => words.push(EOS.to_string()),
    }
    Ok(words)
}

pub fn render(fact: &FactTriple, template_id: usize, mode: RenderMode, vocab: &Vocab) -> Result<Vec<TokenId>> {
    vocab.encode(&render_words(fact, template_id, mode)?)
}

/// Inverse of [`render_words`]: recovers `(subject, relation, template, mode, object)`.
///
/// The object is `None` for prompt and EOS renderings.
pub fn parse_rendering(words: &[String]) -> Option<(String, String, usize, RenderMode, Option<String>)> {
    for (relation, templates) in RELATIONS {
        for (tid, template) in templates.iter().enumerate() {
            let pattern: Vec<&str> = template.split_whitespace().collect();
            if words.len() < pattern.len() {
                continue;
            }
            let mut subject = None;
            let ok = pattern.iter().zip(words).all(|(p, w)| {
                if *p == SUBJECT {
                    subject = Some(w.clone());
                    true
                } else {
                    p == w
                }
            });
            if !ok {
                continue;
            }
            let subject = subject?;
            let rest = &words[pattern.len()..];
            let parsed = match rest {
                [] => (RenderMode::Prompt, None),
                [t] if t == EOS => (RenderMode::EosFull, None),
                [o] => (RenderMode::Full, Some(o.clone())),
                _ => continue,
            };
            return Some((subject, relation.to_string(), tid, parsed.0, parsed.1));
        }
    }
    None
}

/// Fact sentence as used in pretraining: the full rendering terminated by EOS.
pub fn training_sequence(fact: &FactTriple, template_id: usize, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut ids = render(fact, template_id, RenderMode::Full, vocab)?;
    ids.push(vocab.eos());
    Ok(ids)
}

impl ReasoningItem {
    /// Words of the question: `a > b , b > c ? a c`.
    pub fn prompt_words(&self) -> Vec<String> {
        let mut words = Vec::new();
        for (i, (l, op, r)) in self.premises.iter().enumerate() {
            if i > 0 {
                words.push(",".to_string());
            }
            words.push(l.clone());
            words.push(op.symbol().to_string());
            words.push(r.clone());
        }
        words.push("?".to_string());
        words.push(self.query.0.clone());
        words.push(self.query.1.clone());
        words
    }

    pub fn prompt(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        vocab.encode(&self.prompt_words())
    }

    /// Prompt, answer and EOS.
    pub fn training_sequence(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        let mut ids = self.prompt(vocab)?;
        ids.push(vocab.id(self.answer.symbol())?);
        ids.push(vocab.eos());
        Ok(ids)
    }
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Greater => ">",
            Comparator::Less => "<",
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Comparator::Greater => Comparator::Less,
            Comparator::Less => Comparator::Greater,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gobbo() -> FactTriple {
        FactTriple {
            subject: "James_Gobbo".into(),
            relation: "residence".into(),
            object: "Toorak".into(),
            template_ids: vec![0, 1],
        }
    }

    #[test]
    fn prompt_rendering_of_residence() {
        let words = render_words(&gobbo(), 0, RenderMode::Prompt).unwrap();
        assert_eq!(words.join(" "), "James_Gobbo resides in");
        let vocab = Vocab::new(
            [EOS, "James_Gobbo", "resides", "in", "Toorak"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        assert_eq!(render(&gobbo(), 0, RenderMode::Prompt, &vocab).unwrap(), vec![1, 2, 3]);
        let full = render(&gobbo(), 0, RenderMode::Full, &vocab).unwrap();
        assert_eq!(&full[..full.len() - 1], &[1, 2, 3]);
        let eos = render(&gobbo(), 0, RenderMode::EosFull, &vocab).unwrap();
        assert_eq!(*eos.last().unwrap(), vocab.eos());
    }

    #[test]
    fn unknown_template() {
        let err = render_words(&gobbo(), 3, RenderMode::Prompt).unwrap_err();
        assert!(matches!(err, Error::UnknownTemplate { template: 3, .. }));
        let mut f = gobbo();
        f.relation = "hobby".into();
        assert!(render_words(&f, 0, RenderMode::Prompt).is_err());
    }

    #[test]
    fn parse_inverts_render() {
        for (relation, _) in RELATIONS {
            let fact = FactTriple {
                subject: "Ada_Vel".into(),
                relation: relation.to_string(),
                object: "Obj".into(),
                template_ids: vec![],
            };
            for tid in 0..TEMPLATES_PER_RELATION {
                for mode in [RenderMode::Prompt, RenderMode::Full, RenderMode::EosFull] {
                    let words = render_words(&fact, tid, mode).unwrap();
                    let (s, r, t, m, o) = parse_rendering(&words).unwrap();
                    assert_eq!((s.as_str(), r.as_str(), t, m), ("Ada_Vel", *relation, tid, mode));
                    assert_eq!(o.is_some(), mode == RenderMode::Full);
                }
            }
        }
    }

    #[test]
    fn templates_are_pairwise_distinct() {
        let mut all: Vec<&str> = RELATIONS.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
