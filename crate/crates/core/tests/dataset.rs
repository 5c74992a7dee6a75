use dmtci::dataset::{generate_corpus, mentions_category, tokenize, BocLabel, Corpus, SceneSpec, SplitFractions};
use dmtci::metrics::{boc_match, cider_d, IdfCorpus};
use proptest::prelude::*;

fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(&SceneSpec::default(), 120, SplitFractions::default(), seed).unwrap()
}

#[test]
fn corpus_survives_a_disk_round_trip() {
    let corpus = small_corpus(5);
    let dir = tempfile::tempdir().unwrap();
    dmtci::dataset::write_corpus(dir.path(), &corpus).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.meta, corpus.meta);
    for (a, b) in corpus.all_records().zip(back.all_records()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.captions, b.captions);
        assert_eq!(a.boc, b.boc);
        assert_eq!(a.concepts, b.concepts);
        assert_eq!(a.counterexample, b.counterexample);
        assert_eq!(a.features.rows(), b.features.rows());
        // features are stored as f32
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    assert_eq!(small_corpus(9), small_corpus(9));
    assert_ne!(small_corpus(9).train[0].captions, small_corpus(10).train[0].captions);
}

#[test]
fn counterexamples_never_show_the_confounded_category() {
    let corpus = small_corpus(3);
    assert!(corpus.test.iter().any(|r| r.counterexample));
    let woman = corpus.categories().iter().position(|c| c == "woman").unwrap();
    for r in corpus.all_records().filter(|r| r.counterexample) {
        assert_eq!(r.boc.counts[woman], 0, "{}", r.id);
        for c in &r.captions {
            assert!(!mentions_category(&tokenize(c), "woman"), "{c}");
        }
    }
}

fn boc(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, max_len)
}

proptest! {
    #[test]
    fn boc_match_is_symmetric_and_bounded((a, b) in (1usize..8).prop_flat_map(|n| (boc(n), boc(n)))) {
        let (a, b) = (BocLabel::new(a), BocLabel::new(b));
        let s = boc_match(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, boc_match(&b, &a));
        prop_assert_eq!(boc_match(&a, &a), 1.0);
    }

    #[test]
    fn one_hot_rows_select_the_count(counts in boc(6)) {
        let m = BocLabel::new(counts.clone()).one_hot(4).unwrap();
        for (j, &c) in counts.iter().enumerate() {
            prop_assert_eq!(m.row(j).iter().sum::<f64>(), 1.0);
            prop_assert_eq!(m.get(j, c), 1.0);
        }
    }

    #[test]
    // four or more tokens, so every n-gram order contributes to the self match
    fn cider_is_nonnegative_and_tops_out_on_self(words in prop::collection::vec("[a-e]{1,3}", 4..10)) {
        let docs = vec![
            vec![words.clone()],
            vec![vec!["zz".to_string(), "yy".to_string()]],
            vec![vec!["ww".to_string(), "xx".to_string()]],
        ];
        let idf = IdfCorpus::build(&docs);
        let other: Vec<String> = words.iter().rev().cloned().collect();
        let s = cider_d(&other, std::slice::from_ref(&words), &idf);
        prop_assert!(s >= 0.0);
        prop_assert!(s <= 10.0 + 1e-9);
        prop_assert!((cider_d(&words, std::slice::from_ref(&words), &idf) - 10.0).abs() < 1e-9);
    }
}
