//! Template-grammar generator for small task-oriented corpora.
//!
//! Every dialog picks one domain. The user first asks for a venue with a
//! few constraints, then requests attributes or a booking, and may close
//! with thanks. The system reply is a fixed function of the last user
//! utterance, so the mapping from context to response is learnable, and
//! every entity a reply mentions is listed in that turn's `goal_entities`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dialog, Speaker, Turn};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGrammar {
    pub name: String,
    /// Constraint slots the user may state, e.g. `food`.
    pub informable: Vec<String>,
    /// Attributes the user may ask for, e.g. `phone`.
    pub requestable: Vec<String>,
    /// Slots filled when booking.
    pub booking: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub domains: Vec<DomainGrammar>,
    pub min_exchanges: usize,
    pub max_exchanges: usize,
    /// Prefix of generated dialog ids.
    pub id_prefix: String,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let d = |name: &str, inf: &[&str], req: &[&str], book: &[&str]| DomainGrammar {
            name: name.into(),
            informable: strings(inf),
            requestable: strings(req),
            booking: strings(book),
        };
        Self {
            domains: vec![
                d("restaurant", &["food", "area", "pricerange"], &["phone", "address", "postcode"], &["people", "day", "time"]),
                d("hotel", &["area", "pricerange", "stars", "type"], &["phone", "address", "postcode"], &["people", "day", "stay"]),
                d("attraction", &["type", "area"], &["phone", "address", "postcode"], &[]),
                d("train", &["dest", "depart", "day", "leave"], &["price", "duration", "arrive"], &["people"]),
            ],
            min_exchanges: 2,
            max_exchanges: 4,
            id_prefix: "synth".into(),
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("grammar has no domains".into()));
        }
        if self.min_exchanges == 0 || self.min_exchanges > self.max_exchanges {
            return Err(Error::Config(format!(
                "exchange range {}..={} is empty or starts at zero",
                self.min_exchanges, self.max_exchanges
            )));
        }
        for d in &self.domains {
            if d.informable.is_empty() {
                return Err(Error::Config(format!("domain {} has no informable slots", d.name)));
            }
        }
        Ok(())
    }
}

fn value(slot: &str) -> String {
    format!("[value_{slot}]")
}

fn domain_entity(domain: &str, slot: &str) -> String {
    format!("[{domain}_{slot}]")
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Running dialog state used for belief annotations.
struct State<'a> {
    domain: &'a DomainGrammar,
    constraints: Vec<String>,
    booked: Vec<String>,
}

impl State<'_> {
    fn belief(&self) -> Vec<String> {
        let mut b = vec![self.domain.name.clone()];
        for s in self.constraints.iter().chain(&self.booked) {
            b.push(s.clone());
            b.push(value(s));
        }
        b
    }
}

/// One system turn with its annotations.
fn system_turn(text: Vec<String>, state: &State, act: Vec<String>, requested: Vec<String>) -> Turn {
    let goal: Vec<String> = text.iter().filter(|t| super::is_placeholder(t)).cloned().fold(Vec::new(), |mut acc, t| {
        if !acc.contains(&t) {
            acc.push(t);
        }
        acc
    });
    Turn {
        spk: Speaker::System,
        text,
        belief: Some(state.belief()),
        act: Some(act),
        goal_entities: Some(goal),
        requested: Some(requested),
    }
}

fn user_turn(text: String) -> Turn {
    Turn {
        spk: Speaker::User,
        text: words(&text),
        belief: None,
        act: None,
        goal_entities: None,
        requested: None,
    }
}

const FIND_OPENERS: [&str; 3] = ["i am looking for a", "i need a", "can you find me a"];
const REQUEST_OPENERS: [&str; 2] = ["what is the", "can i get the"];

/// `n_dialogs` dialogs, identical for identical `seed` and `cfg`.
pub fn generate_synthetic_corpus(seed: u64, n_dialogs: usize, cfg: &GrammarConfig) -> Result<Vec<Dialog>> {
    if n_dialogs == 0 {
        return Err(Error::Config("need at least one dialog".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_dialogs);
    for k in 0..n_dialogs {
        let domain = &cfg.domains[rng.gen_range(0..cfg.domains.len())];
        let exchanges = rng.gen_range(cfg.min_exchanges..=cfg.max_exchanges);
        let dname = domain.name.as_str();
        let mut state = State {
            domain,
            constraints: Vec::new(),
            booked: Vec::new(),
        };
        let mut turns = Vec::with_capacity(2 * exchanges);

        // Opening request with one or more constraints, in grammar order.
        let n_cons = rng.gen_range(1..=domain.informable.len().min(2));
        let mut picked: Vec<&String> = domain.informable.choose_multiple(&mut rng, n_cons).collect();
        picked.sort_by_key(|s| domain.informable.iter().position(|x| x == *s));
        state.constraints = picked.iter().map(|s| s.to_string()).collect();
        let cons_text: Vec<String> = picked.iter().map(|s| format!("{s} {}", value(s))).collect();
        let opener = FIND_OPENERS[rng.gen_range(0..FIND_OPENERS.len())];
        turns.push(user_turn(format!("{opener} {dname} with {} .", cons_text.join(" and "))));
        let name = domain_entity(dname, "name");
        let sys = format!("{name} is a {dname} with {} . anything else ?", cons_text.join(" and "));
        let mut act = vec![format!("domain-{dname}"), "act-inform".into(), "slot-name".into()];
        act.extend(picked.iter().map(|s| format!("slot-{s}")));
        turns.push(system_turn(words(&sys), &state, act, vec![]));

        // Middle exchanges: attribute requests and at most one booking.
        let mut requestable: Vec<&String> = domain.requestable.iter().collect();
        requestable.shuffle(&mut rng);
        let mut can_book = !domain.booking.is_empty();
        let closing = exchanges >= 3 && rng.gen_bool(0.5);
        let middle = exchanges - 1 - usize::from(closing);
        for _ in 0..middle {
            let book_now = can_book && (requestable.is_empty() || rng.gen_bool(0.35));
            if book_now {
                can_book = false;
                let slots: Vec<String> = domain.booking.clone();
                let spec: Vec<String> = slots.iter().map(|s| format!("{s} {}", value(s))).collect();
                turns.push(user_turn(format!("please book it for {} .", spec.join(" and "))));
                state.booked = slots.clone();
                let reference = domain_entity(dname, "reference");
                let sys = format!("booked {name} for {} . the reference is {reference} .", spec.join(" and "));
                let mut act = vec![format!("domain-{dname}"), "act-book".into(), "slot-ref".into()];
                act.extend(slots.iter().map(|s| format!("slot-{s}")));
                turns.push(system_turn(words(&sys), &state, act, vec!["reference".into()]));
            } else if let Some(slot) = requestable.pop() {
                let opener = REQUEST_OPENERS[rng.gen_range(0..REQUEST_OPENERS.len())];
                turns.push(user_turn(format!("{opener} {slot} of the {dname} ?")));
                let ent = domain_entity(dname, slot);
                let sys = format!("the {slot} of {name} is {ent} .");
                let act = vec![format!("domain-{dname}"), "act-inform".into(), format!("slot-{slot}")];
                turns.push(system_turn(words(&sys), &state, act, vec![slot.clone()]));
            } else {
                turns.push(user_turn("is there anything else i should know ?".into()));
                let sys = "no , that is all i have . anything else ?";
                turns.push(system_turn(words(sys), &state, vec!["domain-general".into(), "slot-none".into()], vec![]));
            }
        }
        if closing {
            turns.push(user_turn("thank you , goodbye .".into()));
            let sys = "you are welcome . goodbye .";
            turns.push(system_turn(words(sys), &state, vec!["domain-general".into(), "slot-none".into()], vec![]));
        }
        out.push(Dialog {
            id: format!("{}-{seed}-{k:05}", cfg.id_prefix),
            turns,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ActVocab;

    #[test]
    fn deterministic_and_sized() {
        let cfg = GrammarConfig::default();
        let a = generate_synthetic_corpus(7, 50, &cfg).unwrap();
        let b = generate_synthetic_corpus(7, 50, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        for d in &a {
            d.validate().unwrap();
            assert_eq!(d.turns.len() % 2, 0);
            let ex = d.turns.len() / 2;
            assert!((2..=4).contains(&ex), "{ex} exchanges");
        }
        assert_ne!(a, generate_synthetic_corpus(8, 50, &cfg).unwrap());
    }

    #[test]
    fn responses_only_mention_goal_entities() {
        let dialogs = generate_synthetic_corpus(3, 100, &GrammarConfig::default()).unwrap();
        for d in &dialogs {
            let goal = d.goal_entities().unwrap();
            for t in d.turns.iter().filter(|t| t.spk == Speaker::System) {
                for tok in t.text.iter().filter(|t| crate::corpus::is_placeholder(t)) {
                    assert!(goal.contains(tok), "{tok} not in goal of {}", d.id);
                }
            }
        }
    }

    #[test]
    fn act_labels_are_in_default_inventory() {
        let av = ActVocab::default_labels();
        for d in generate_synthetic_corpus(5, 200, &GrammarConfig::default()).unwrap() {
            for t in d.turns.iter().filter_map(|t| t.act.as_ref()) {
                av.encode(t).unwrap();
            }
        }
    }

    #[test]
    fn zero_dialogs_rejected() {
        assert!(generate_synthetic_corpus(0, 0, &GrammarConfig::default()).is_err());
    }
}
