use proptest::prelude::*;
use rho_core::embed::pessimistic_rank;
use rho_core::kg::NamedTriple;
use rho_core::metrics;
use rho_core::prompting::{self, Speaker, Utterance, Vocab};

fn text() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        "[A-Za-z]{1,8}".prop_map(String::from),
        Just("<sep>".to_string()),
        Just("<triple>".to_string()),
        Just("<user>".to_string()),
        Just("<\u{200d}assistant>".to_string()),
        "[.,?!'-]".prop_map(String::from),
    ];
    prop::collection::vec(piece, 1..6).prop_map(|v| v.join(" "))
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop_oneof!["[a-d]", Just("the".to_string()), Just("cat".to_string())], 0..10)
        .prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn template_round_trips(
        triples in prop::collection::vec((text(), text(), text()), 1..4),
        turns in prop::collection::vec((any::<bool>(), text()), 0..4),
    ) {
        let triples: Vec<NamedTriple> = triples.into_iter().map(|(s, p, o)| NamedTriple::new(s, p, o)).collect();
        let history: Vec<Utterance> = turns
            .into_iter()
            .map(|(u, t)| Utterance::new(if u { Speaker::User } else { Speaker::Assistant }, t))
            .collect();
        let s = prompting::serialize_input(&triples, &history);
        let (t2, h2) = prompting::parse_input(&s).unwrap();
        prop_assert_eq!(t2, triples);
        prop_assert_eq!(h2, history);
    }

    #[test]
    fn escaping_inverts(s in text()) {
        prop_assert_eq!(prompting::unescape_markers(&prompting::escape_markers(&s)), s);
    }

    #[test]
    fn joined_tokens_retokenize(s in text()) {
        let mut vocab = Vocab::new();
        vocab.observe(&s);
        let ids = prompting::encode(&s, &vocab);
        let joined = prompting::join_tokens(&ids, &vocab);
        prop_assert_eq!(prompting::encode(&joined, &vocab), ids);
    }

    #[test]
    fn rouge_is_bounded_and_reflexive(r in sentence(), h in sentence()) {
        let v = metrics::rouge_l(&r, &h);
        prop_assert!((0.0..=1.0).contains(&v));
        if !r.is_empty() {
            prop_assert_eq!(metrics::rouge_l(&r, &r), 1.0);
        }
    }

    #[test]
    fn bleu_of_identical_corpus_is_one(refs in prop::collection::vec("[a-e]( [a-e]){4,8}", 1..4)) {
        let b = metrics::bleu4(&refs, &refs).unwrap();
        prop_assert!((b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pessimistic_rank_counts_ties(scores in prop::collection::vec(0u8..4, 1..20), pick in 0usize..20) {
        let truth = pick % scores.len();
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let rank = pessimistic_rank(&s, truth, |_| false);
        let expected = 1 + s.iter().enumerate().filter(|&(i, &x)| i != truth && x <= s[truth]).count();
        prop_assert_eq!(rank, expected);
    }
}
