use std::collections::BTreeMap;

use forge_core::eval_report::{eval_text, eval_vqa, OracleStub, RandomStub};
use forge_core::model::{init_model, ModelSpec};
use forge_core::synth_data::{gen_text_corpus, gen_vqa_corpus, Split, Tokenizer, VqaTag};

#[test]
fn oracle_stub_scores_one() {
    let items = gen_vqa_corpus(5, 400, Split::Eval);
    let acc = eval_vqa(&OracleStub::for_vqa(&items), &items).unwrap();
    assert_eq!(acc.overall, 1.0);
    assert_eq!(acc.truncated, 0);
    assert!(acc.per_tag.values().all(|&a| a == 1.0));
    assert_eq!(acc.per_tag.len(), VqaTag::ALL.len());
}

#[test]
fn random_stub_is_at_chance_on_yesno() {
    let items: Vec<_> = gen_vqa_corpus(6, 2000, Split::Eval)
        .into_iter()
        .filter(|i| i.task_tag == VqaTag::Yesno)
        .collect();
    let n = items.len() as f64;
    let sigma = (0.25 / n).sqrt();
    for seed in 0..3 {
        let acc = eval_vqa(&RandomStub { seed }, &items).unwrap();
        assert!((acc.overall - 0.5).abs() <= 3.0 * sigma, "seed {seed}: {} over {n} items", acc.overall);
    }
}

#[test]
fn empty_sets_are_input_errors() {
    let spec = ModelSpec::toy(Tokenizer::standard().vocab_size());
    let m = init_model(&spec, 0).unwrap();
    assert!(eval_vqa(&RandomStub { seed: 0 }, &[]).is_err());
    assert!(eval_text(&m, &Tokenizer::standard(), &[]).is_err());
}

#[test]
fn untrained_decoder_is_near_zero_on_text() {
    let tok = Tokenizer::standard();
    let mut spec = ModelSpec::toy(tok.vocab_size());
    spec.n_layers = 4;
    let m = init_model(&spec, 3).unwrap();
    let items = gen_text_corpus(3, 100, Split::Eval);
    let acc = eval_text(&m, &tok, &items).unwrap();
    assert!(acc.overall <= 0.05, "{}", acc.overall);
}

#[test]
fn no_answer_dominates_a_tag() {
    let items = gen_vqa_corpus(11, 5000, Split::Train);
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for i in &items {
        *counts.entry(i.task_tag.name()).or_default().entry(i.response.as_str()).or_default() += 1;
    }
    for (tag, answers) in counts {
        let n: usize = answers.values().sum();
        let top = *answers.values().max().unwrap() as f64 / n as f64;
        // a two-answer tag cannot go below one half
        let cap = if answers.len() == 2 { 0.5 } else { 0.4 };
        assert!(top <= cap, "{tag}: top answer at {top:.3} of {n}");
    }
}
