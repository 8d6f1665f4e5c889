//! Template questions over a generated passage.
//!
//! Every question is built from facts read back out of the passage's slot
//! records, and single-span questions are only emitted when exactly one
//! sentence satisfies them.

use std::collections::BTreeSet;

use super::{
    derive_gold_span, render_time, AnswerKind, DayPeriod, Family, GenConfig, GoldSpan, Passage,
    QaPair, SentenceRecord,
};
use crate::rng::Stream;

struct Draft {
    question: String,
    family: Family,
    kind: AnswerKind,
    spans: Vec<GoldSpan>,
    sentence_ids: Vec<usize>,
}

fn is_activity(s: &SentenceRecord) -> bool {
    s.slots.contains_key("activity")
}

fn main_slot(s: &SentenceRecord) -> &'static str {
    if s.slots.contains_key("emotion") {
        "emotion"
    } else if s.slots.contains_key("utterance") {
        "utterance"
    } else {
        "activity"
    }
}

struct Builder<'a> {
    passage: &'a Passage,
    cfg: &'a GenConfig,
    rng: Stream,
}

impl<'a> Builder<'a> {
    fn sentence(&self, i: usize) -> &'a SentenceRecord {
        &self.passage.sentences[i]
    }

    fn span(&self, i: usize, slot: &str) -> GoldSpan {
        derive_gold_span(self.sentence(i), slot, self.passage.sentence_offsets[i])
            .expect("slot chosen from the sentence's own template")
    }

    fn matching(&self, pred: impl Fn(&SentenceRecord) -> bool) -> Vec<usize> {
        (0..self.passage.sentences.len()).filter(|&i| pred(self.sentence(i))).collect()
    }

    fn random_sentence(&mut self, pred: impl Fn(&SentenceRecord) -> bool) -> Option<usize> {
        let candidates = self.matching(pred);
        if candidates.is_empty() {
            None
        } else {
            Some(candidates[self.rng.below(candidates.len())])
        }
    }

    fn single(&self, question: String, family: Family, i: usize, slot: &str) -> Draft {
        Draft {
            question,
            family,
            kind: AnswerKind::SingleSpan,
            spans: vec![self.span(i, slot)],
            sentence_ids: vec![i],
        }
    }

    fn boolean(&self, question: String, family: Family, support: Vec<usize>) -> Draft {
        let kind = if support.is_empty() { AnswerKind::No } else { AnswerKind::Yes };
        Draft { question, family, kind, spans: Vec::new(), sentence_ids: support }
    }

    fn single_span(&mut self, family: Family) -> Option<Draft> {
        match family {
            Family::Where => {
                let i = self.random_sentence(|_| true)?;
                let s = self.sentence(i);
                let (p, t) = (s.slot("person")?, s.timestamp);
                let hits = self.matching(|o| o.slot("person") == Some(p) && o.timestamp == t);
                (hits.len() == 1).then(|| {
                    self.single(format!("Where was {p} at {}?", render_time(t)), family, i, "location")
                })
            }
            Family::When => {
                let i = self.random_sentence(|_| true)?;
                let s = self.sentence(i);
                let p = s.slot("person")?;
                let slot = main_slot(s);
                let value = s.slot(slot)?;
                let hits =
                    self.matching(|o| o.slot("person") == Some(p) && o.slot(slot) == Some(value));
                let question = match slot {
                    "emotion" => format!("When did {p} feel {value}?"),
                    "utterance" => format!("When did {p} ask the assistant to {value}?"),
                    _ => format!("When was {p} {value}?"),
                };
                (hits.len() == 1).then(|| self.single(question, family, i, "time"))
            }
            Family::Who => {
                let i = self.random_sentence(|_| true)?;
                let s = self.sentence(i);
                let t = s.timestamp;
                let slot = main_slot(s);
                let value = s.slot(slot)?;
                let hits = self.matching(|o| o.timestamp == t && o.slot(slot) == Some(value));
                let when = render_time(t);
                let question = match slot {
                    "emotion" => format!("Who felt {value} at {when}?"),
                    "utterance" => format!("Who asked the assistant to {value} at {when}?"),
                    _ => format!("Who was {value} at {when}?"),
                };
                (hits.len() == 1).then(|| self.single(question, family, i, "person"))
            }
            Family::What => {
                let i = self.random_sentence(|s| !s.slots.contains_key("emotion"))?;
                let s = self.sentence(i);
                let (p, t) = (s.slot("person")?, s.timestamp);
                let slot = main_slot(s);
                let hits = self.matching(|o| {
                    o.slot("person") == Some(p) && o.timestamp == t && o.slots.contains_key(slot)
                });
                let question = if slot == "utterance" {
                    format!("What did {p} ask the assistant to do at {}?", render_time(t))
                } else {
                    format!("What was {p} doing at {}?", render_time(t))
                };
                (hits.len() == 1).then(|| self.single(question, family, i, slot))
            }
            Family::Emotion => {
                let i = self.random_sentence(|s| s.slots.contains_key("emotion"))?;
                let s = self.sentence(i);
                let (p, t) = (s.slot("person")?, s.timestamp);
                let hits = self.matching(|o| {
                    o.slot("person") == Some(p) && o.timestamp == t && o.slots.contains_key("emotion")
                });
                (hits.len() == 1).then(|| {
                    self.single(format!("How was {p} feeling at {}?", render_time(t)), family, i, "emotion")
                })
            }
            _ => None,
        }
    }

    fn multi(&self, question: String, family: Family, hits: Vec<usize>) -> Option<Draft> {
        if hits.len() < self.cfg.multi_span_min_events {
            return None;
        }
        Some(Draft {
            question,
            family,
            kind: AnswerKind::MultiSpan,
            spans: hits.iter().map(|&i| self.span(i, "activity")).collect(),
            sentence_ids: hits,
        })
    }

    fn multi_span(&mut self, family: Family) -> Option<Draft> {
        let anchor = self.random_sentence(is_activity)?;
        let s = self.sentence(anchor);
        let person = s.slot("person")?;
        let location = s.slot("location")?;
        let period = DayPeriod::of(s.timestamp);
        match family {
            Family::What => match self.rng.below(3) {
                0 => {
                    let hits = self.matching(|o| is_activity(o) && o.slot("location") == Some(location));
                    self.multi(format!("What happened in {location}?"), family, hits)
                }
                1 => {
                    let hits = self.matching(|o| {
                        is_activity(o)
                            && o.slot("location") == Some(location)
                            && DayPeriod::of(o.timestamp) == period
                    });
                    let q = format!("What happened in {location} in the {}?", period.name());
                    self.multi(q, family, hits)
                }
                _ => {
                    let hits = self.matching(|o| {
                        is_activity(o)
                            && o.slot("person") == Some(person)
                            && DayPeriod::of(o.timestamp) == period
                    });
                    let q = format!("What did {person} do in the {}?", period.name());
                    self.multi(q, family, hits)
                }
            },
            Family::Before | Family::After => {
                let before = family == Family::Before;
                let own = self.matching(|o| is_activity(o) && o.slot("person") == Some(person));
                let cutoffs: Vec<u32> = self
                    .cfg
                    .catalog
                    .time_grid
                    .iter()
                    .copied()
                    .filter(|&t| {
                        let n = own
                            .iter()
                            .filter(|&&i| {
                                let ts = self.sentence(i).timestamp;
                                if before { ts < t } else { ts > t }
                            })
                            .count();
                        n >= self.cfg.multi_span_min_events
                    })
                    .collect();
                if cutoffs.is_empty() {
                    return None;
                }
                let t = cutoffs[self.rng.below(cutoffs.len())];
                let hits: Vec<usize> = own
                    .into_iter()
                    .filter(|&i| {
                        let ts = self.sentence(i).timestamp;
                        if before { ts < t } else { ts > t }
                    })
                    .collect();
                let word = if before { "before" } else { "after" };
                self.multi(format!("What did {person} do {word} {}?", render_time(t)), family, hits)
            }
            _ => None,
        }
    }

    fn yes_no(&mut self, family: Family, want_yes: bool) -> Option<Draft> {
        let cast: Vec<String> = self.passage.persons().into_iter().map(String::from).collect();
        match (family, self.rng.below(2)) {
            (Family::Did, 0) => {
                let p = self.rng.pick(&cast).clone();
                let location = if want_yes {
                    let i = self.random_sentence(|o| o.slot("person") == Some(p.as_str()))?;
                    self.sentence(i).slot("location")?.to_string()
                } else {
                    self.rng.pick(&self.cfg.catalog.locations).clone()
                };
                let support = self.matching(|o| {
                    o.slot("person") == Some(p.as_str()) && o.slot("location") == Some(location.as_str())
                });
                let d = self.boolean(format!("Did {p} go to {location}?"), family, support);
                (want_yes == (d.kind == AnswerKind::Yes)).then_some(d)
            }
            (Family::Did, _) => {
                let utterance = if want_yes {
                    let i = self.random_sentence(|o| o.slots.contains_key("utterance"))?;
                    let s = self.sentence(i);
                    (s.slot("person")?.to_string(), s.slot("utterance")?.to_string())
                } else {
                    let p = self.rng.pick(&cast).clone();
                    (p, self.rng.pick(&self.cfg.catalog.utterances).clone())
                };
                let (p, u) = utterance;
                let support = self.matching(|o| {
                    o.slot("person") == Some(p.as_str()) && o.slot("utterance") == Some(u.as_str())
                });
                let d = self.boolean(format!("Did {p} ask the assistant to {u}?"), family, support);
                (want_yes == (d.kind == AnswerKind::Yes)).then_some(d)
            }
            (Family::WasIs, 0) => {
                let i = self.random_sentence(is_activity)?;
                let s = self.sentence(i);
                let p = s.slot("person")?.to_string();
                let mut activity = s.slot("activity")?.to_string();
                let mut location = s.slot("location")?.to_string();
                if !want_yes {
                    if self.rng.chance(0.5) {
                        activity = self.rng.pick(&self.cfg.catalog.activities).clone();
                    } else {
                        location = self.rng.pick(&self.cfg.catalog.locations).clone();
                    }
                }
                let support = self.matching(|o| {
                    o.slot("person") == Some(p.as_str())
                        && o.slot("activity") == Some(activity.as_str())
                        && o.slot("location") == Some(location.as_str())
                });
                let d = self.boolean(format!("Was {p} {activity} in {location}?"), family, support);
                (want_yes == (d.kind == AnswerKind::Yes)).then_some(d)
            }
            (Family::WasIs, _) => {
                let i = self.random_sentence(|o| o.slots.contains_key("emotion"))?;
                let s = self.sentence(i);
                let (p, t) = (s.slot("person")?.to_string(), s.timestamp);
                let emotion = if want_yes {
                    s.slot("emotion")?.to_string()
                } else {
                    self.rng.pick(&self.cfg.catalog.emotions).clone()
                };
                let support = self.matching(|o| {
                    o.slot("person") == Some(p.as_str())
                        && o.timestamp == t
                        && o.slot("emotion") == Some(emotion.as_str())
                });
                let q = format!("Was {p} {emotion} at {}?", render_time(t));
                let d = self.boolean(q, family, support);
                (want_yes == (d.kind == AnswerKind::Yes)).then_some(d)
            }
            _ => None,
        }
    }

    fn unknown(&mut self, family: Family) -> Option<Draft> {
        let present = self.passage.persons();
        let absent: Vec<&String> =
            self.cfg.catalog.persons.iter().filter(|p| !present.contains(p.as_str())).collect();
        if absent.is_empty() {
            return None;
        }
        let q = absent[self.rng.below(absent.len())].clone();
        let i = self.rng.below(self.passage.sentences.len());
        let s = self.sentence(i);
        let when = render_time(s.timestamp);
        let location = s.slot("location")?;
        let activity = self
            .random_sentence(is_activity)
            .and_then(|j| self.sentence(j).slot("activity"))
            .unwrap_or_else(|| self.cfg.catalog.activities[0].as_str())
            .to_string();
        let question = match family {
            Family::Where => format!("Where was {q} at {when}?"),
            Family::What => format!("What was {q} doing at {when}?"),
            Family::Emotion => format!("How was {q} feeling at {when}?"),
            Family::When => format!("When was {q} {activity}?"),
            Family::Did => format!("Did {q} go to {location}?"),
            Family::WasIs => format!("Was {q} {activity} in {location}?"),
            _ => return None,
        };
        Some(Draft { question, family, kind: AnswerKind::Unknown, spans: Vec::new(), sentence_ids: Vec::new() })
    }
}

fn families_for(kind: AnswerKind) -> &'static [Family] {
    match kind {
        AnswerKind::SingleSpan => {
            &[Family::Where, Family::When, Family::Who, Family::What, Family::Emotion]
        }
        AnswerKind::MultiSpan => &[Family::What, Family::Before, Family::After],
        AnswerKind::Yes | AnswerKind::No => &[Family::Did, Family::WasIs],
        AnswerKind::Unknown => {
            &[Family::Where, Family::What, Family::Emotion, Family::When, Family::Did, Family::WasIs]
        }
    }
}

/// Generates up to `cfg.questions_per_passage` distinct questions.
pub fn generate_questions(passage: &Passage, seed: u64, cfg: &GenConfig) -> Vec<QaPair> {
    let mut builder = Builder { passage, cfg, rng: Stream::new(seed, 1) };
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    if passage.sentences.is_empty() {
        return out;
    }
    let attempts = cfg.questions_per_passage * 12;
    for _ in 0..attempts {
        if out.len() >= cfg.questions_per_passage {
            break;
        }
        let single = cfg.fraction_single_span;
        let multi = single + cfg.fraction_multi_span;
        let boolean = multi + cfg.fraction_boolean;
        let kind = match builder.rng.unit() {
            r if r < single => AnswerKind::SingleSpan,
            r if r < multi => AnswerKind::MultiSpan,
            r if r < boolean => {
                if builder.rng.chance(0.5) {
                    AnswerKind::Yes
                } else {
                    AnswerKind::No
                }
            }
            _ => AnswerKind::Unknown,
        };
        let families: Vec<Family> = families_for(kind)
            .iter()
            .copied()
            .filter(|f| cfg.question_families_enabled.contains(f))
            .collect();
        if families.is_empty() {
            continue;
        }
        let family = families[builder.rng.below(families.len())];
        let draft = match kind {
            AnswerKind::SingleSpan => builder.single_span(family),
            AnswerKind::MultiSpan => builder.multi_span(family),
            AnswerKind::Yes => builder.yes_no(family, true),
            AnswerKind::No => builder.yes_no(family, false),
            AnswerKind::Unknown => builder.unknown(family),
        };
        let Some(draft) = draft else { continue };
        if !seen.insert(draft.question.clone()) {
            continue;
        }
        out.push(QaPair {
            id: format!("{}-q{:02}", passage.id, out.len()),
            passage_id: passage.id.clone(),
            question: draft.question,
            family: draft.family,
            answer_kind: draft.kind,
            gold_spans: draft.spans,
            gold_sentence_ids: draft.sentence_ids,
        });
    }
    out
}
