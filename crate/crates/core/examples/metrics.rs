//! Corpus BLEU, entity F1, inform and success on two toy dialogs.
//!
//! `cargo run --example metrics`

use htenc::metrics::{bleu, entity_f1, inform_rate, placeholder_lexicon, success_rate, DialogResult, EvalReport};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> htenc::Result<()> {
    let refs = vec![
        toks("[hotel_name] is a hotel in the [value_area] ."),
        toks("the phone of [hotel_name] is [hotel_phone] ."),
    ];
    let hyps = vec![
        toks("[hotel_name] is a hotel in the north ."),
        toks("the phone of [hotel_name] is [hotel_phone] ."),
    ];
    let lexicon = placeholder_lexicon(&refs);
    let results = vec![
        DialogResult {
            dialog_id: "a".into(),
            goal_entities: Some(vec!["[hotel_name]".into()]),
            requested: Some(vec!["phone".into()]),
            responses: hyps.clone(),
        },
        DialogResult {
            dialog_id: "b".into(),
            goal_entities: Some(vec!["[taxi_car]".into()]),
            requested: Some(vec![]),
            responses: vec![toks("booked .")],
        },
    ];
    let report = EvalReport::new(
        bleu(&refs, &hyps)?,
        entity_f1(&refs, &hyps, &lexicon)?,
        inform_rate(&results)?,
        success_rate(&results)?,
    );
    print!("{report}");
    Ok(())
}
