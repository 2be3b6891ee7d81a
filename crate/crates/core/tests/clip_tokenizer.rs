//! Token ids from the bundled CLIP vocabulary against ids produced by the
//! reference CLIP tokenizer for the same texts.

use std::path::Path;

use serde::Deserialize;
use stori_core::tokenizer::{tokenize, Vocabulary};

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

fn clip_vocab() -> Vocabulary {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/clip");
    Vocabulary::load(&dir.join("vocab.json"), &dir.join("merges.txt"), 77).unwrap()
}

#[test]
fn matches_reference_ids() {
    let vocab = clip_vocab();
    let raw = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/clip_reference_ids.json"),
    )
    .unwrap();
    let cases: Vec<Case> = serde_json::from_str(&raw).unwrap();
    assert!(cases.len() >= 10);
    for case in cases {
        let seq = tokenize(&case.text, &vocab).unwrap();
        let ids = seq.ids();
        assert_eq!(ids[0], vocab.sos_id(), "{:?}", case.text);
        assert_eq!(*ids.last().unwrap(), vocab.eos_id(), "{:?}", case.text);
        assert_eq!(&ids[1..ids.len() - 1], case.ids.as_slice(), "{:?}", case.text);
    }
}

#[test]
fn five_content_tokens_for_simple_prompt() {
    let seq = tokenize("a photo of a cat", &clip_vocab()).unwrap();
    assert_eq!(seq.content_len(), 5);
    assert_eq!(seq.len(), 7);
}

#[test]
fn special_ids_are_the_clip_ones() {
    let vocab = clip_vocab();
    assert_eq!(vocab.sos_id(), 49406);
    assert_eq!(vocab.eos_id(), 49407);
    assert_eq!(vocab.size(), 49408);
}

#[test]
fn over_length_is_rejected() {
    let vocab = clip_vocab();
    let long = vec!["cat"; 76].join(" ");
    assert!(tokenize(&long, &vocab).is_err());
    let fits = vec!["cat"; 75].join(" ");
    assert_eq!(tokenize(&fits, &vocab).unwrap().len(), 77);
}
