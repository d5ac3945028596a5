//! Response-quality metrics: corpus BLEU, entity F1, inform and success
//! rates, and the combined score `BLEU + 0.5 · (Inform + Success)`.
//!
//! All scores are on a 0–100 scale.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::is_placeholder;
use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with uniform weights, clipped n-gram counts, no
/// smoothing, and the brevity penalty over total lengths.
///
/// An order for which neither hypotheses nor references contain any
/// n-gram is left out of the geometric mean; any other order with zero
/// matches makes the score 0.
pub fn bleu(references: &[Vec<String>], hypotheses: &[Vec<String>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Config("BLEU over an empty hypothesis set".into()));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::Alignment(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matched = [0usize; BLEU_ORDER];
    let mut hyp_total = [0usize; BLEU_ORDER];
    let mut ref_total = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            ref_total[n - 1] += rc.values().sum::<usize>();
            hyp_total[n - 1] += hc.values().sum::<usize>();
            matched[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(if ref_len == 0 { 100.0 } else { 0.0 });
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..BLEU_ORDER {
        if hyp_total[n] == 0 && ref_total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / hyp_total[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Micro-averaged F1 between the multisets of lexicon tokens in each
/// hypothesis and its reference. Two empty multisets count as a match.
pub fn entity_f1(references: &[Vec<String>], hypotheses: &[Vec<String>], lexicon: &HashSet<String>) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Alignment(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let (mut tp, mut n_hyp, mut n_ref) = (0usize, 0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        let (rc, hc) = (entity_counts(r, lexicon), entity_counts(h, lexicon));
        n_ref += rc.values().sum::<usize>();
        n_hyp += hc.values().sum::<usize>();
        tp += hc.iter().map(|(e, &c)| c.min(rc.get(e).copied().unwrap_or(0))).sum::<usize>();
    }
    if n_ref == 0 && n_hyp == 0 {
        return Ok(100.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / n_hyp as f64;
    let r = tp as f64 / n_ref as f64;
    Ok(100.0 * 2.0 * p * r / (p + r))
}

fn entity_counts<'a>(toks: &'a [String], lexicon: &HashSet<String>) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in toks.iter().filter(|t| lexicon.contains(*t)) {
        *m.entry(t.as_str()).or_default() += 1;
    }
    m
}

/// Every placeholder token appearing in `texts`.
pub fn placeholder_lexicon<'a>(texts: impl IntoIterator<Item = &'a Vec<String>>) -> HashSet<String> {
    texts
        .into_iter()
        .flatten()
        .filter(|t| is_placeholder(t))
        .cloned()
        .collect()
}

/// Generated system responses of one dialog with its goal annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogResult {
    pub dialog_id: String,
    pub goal_entities: Option<Vec<String>>,
    pub requested: Option<Vec<String>>,
    pub responses: Vec<Vec<String>>,
}

impl DialogResult {
    fn goal(&self) -> Result<&[String]> {
        self.goal_entities
            .as_deref()
            .ok_or_else(|| Error::Annotation(format!("dialog {} has no goal_entities", self.dialog_id)))
    }

    fn requested(&self) -> Result<&[String]> {
        self.requested
            .as_deref()
            .ok_or_else(|| Error::Annotation(format!("dialog {} has no requested slots", self.dialog_id)))
    }

    fn mentions(&self, token: &str) -> bool {
        self.responses.iter().flatten().any(|t| t == token)
    }

    /// Every goal entity occurs somewhere in the responses.
    pub fn informed(&self) -> Result<bool> {
        Ok(self.goal()?.iter().all(|e| self.mentions(e)))
    }

    /// A requested slot `s` is answered by a placeholder ending in `_s]`.
    pub fn answered(&self, slot: &str) -> bool {
        let suffix = format!("_{slot}]");
        self.responses
            .iter()
            .flatten()
            .any(|t| is_placeholder(t) && t.ends_with(&suffix))
    }

    pub fn succeeded(&self) -> Result<bool> {
        let req = self.requested()?;
        Ok(self.informed()? && req.iter().all(|s| self.answered(s)))
    }
}

fn percentage(results: &[DialogResult], f: impl Fn(&DialogResult) -> Result<bool>) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for r in results {
        if f(r)? {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// Percentage of dialogs whose responses together contain every goal entity.
pub fn inform_rate(results: &[DialogResult]) -> Result<f64> {
    percentage(results, DialogResult::informed)
}

/// Percentage of dialogs that are informed and answer every requested slot.
pub fn success_rate(results: &[DialogResult]) -> Result<f64> {
    percentage(results, DialogResult::succeeded)
}

pub fn combined_score(bleu: f64, inform: f64, success: f64) -> f64 {
    bleu + 0.5 * (inform + success)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub entity_f1: f64,
    pub inform: f64,
    pub success: f64,
    pub score: f64,
}

impl EvalReport {
    pub fn new(bleu: f64, entity_f1: f64, inform: f64, success: f64) -> Self {
        Self {
            bleu,
            entity_f1,
            inform,
            success,
            score: combined_score(bleu, inform, success),
        }
    }

    /// Checks ranges and the combined-score identity.
    pub fn is_consistent(&self) -> bool {
        let in_range = |x: f64| (0.0..=100.0).contains(&x);
        in_range(self.bleu)
            && in_range(self.entity_f1)
            && in_range(self.inform)
            && in_range(self.success)
            && self.score == combined_score(self.bleu, self.inform, self.success)
    }

    pub fn table_header() -> String {
        format!(
            "{:<12} {:>8} {:>9} {:>8} {:>8} {:>8}",
            "model", "BLEU", "EntityF1", "Inform", "Success", "Score"
        )
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<12} {:>8.2} {:>9.2} {:>8.2} {:>8.2} {:>8.2}",
            name, self.bleu, self.entity_f1, self.inform, self.success, self.score
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        writeln!(f, "{}", self.table_row("-"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = vec![toks("the cat sat on the mat"), toks("a b c d")];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
        let hyps = vec![toks("x y z w v u"), toks("p q r s")];
        assert_eq!(bleu(&refs, &hyps).unwrap(), 0.0);
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn bleu_hand_fixture() {
        let got = bleu(&[toks("a b c d e")], &[toks("a b c d d")]).unwrap();
        // Independent computation from the modified precisions.
        let want = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 66.87).abs() < 5e-3);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let got = bleu(&[toks("a b c d e f")], &[toks("a b c d e")]).unwrap();
        assert!((got - 100.0 * (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn entity_f1_cases() {
        let lex: HashSet<String> = ["e1", "e2", "e3"].iter().map(|s| s.to_string()).collect();
        let r = vec![toks("x e1 e2")];
        assert_eq!(entity_f1(&r, &r, &lex).unwrap(), 100.0);
        assert_eq!(entity_f1(&r, &[toks("nothing here")], &lex).unwrap(), 0.0);
        assert!((entity_f1(&r, &[toks("e1 e3")], &lex).unwrap() - 50.0).abs() < 1e-12);
    }

    fn result(goal: &[&str], req: &[&str], resp: &str) -> DialogResult {
        DialogResult {
            dialog_id: "d".into(),
            goal_entities: Some(goal.iter().map(|s| s.to_string()).collect()),
            requested: Some(req.iter().map(|s| s.to_string()).collect()),
            responses: vec![toks(resp)],
        }
    }

    #[test]
    fn inform_and_success() {
        let ok = result(&["[x_name]"], &["phone"], "[x_name] has phone [x_phone]");
        let no_phone = result(&["[x_name]"], &["phone"], "[x_name] is nice");
        let empty = result(&["[x_name]"], &[], "");
        assert_eq!(inform_rate(&[ok.clone(), empty.clone()]).unwrap(), 50.0);
        let three = [ok, no_phone, empty];
        assert!((success_rate(&three).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        let mut missing = three[0].clone();
        missing.goal_entities = None;
        assert!(matches!(inform_rate(&[missing]), Err(Error::Annotation(_))));
    }

    #[test]
    fn combined_score_rows() {
        assert!((combined_score(20.91, 73.60, 60.10) - 87.76).abs() < 0.01);
        assert!((combined_score(16.81, 75.30, 59.70) - 84.31).abs() < 0.01);
        assert_eq!(combined_score(0.0, 0.0, 0.0), 0.0);
    }
}
