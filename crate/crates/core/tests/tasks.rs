use std::collections::HashSet;

use dftlab::model::EOS_ID;
use dftlab::tasks::{generate_dataset, verify, Demonstration, TaskKind, TaskSpec};
use proptest::prelude::*;

fn all_splits(kind: TaskKind, seed: u64) -> Vec<(&'static str, Vec<Demonstration>)> {
    let s = generate_dataset(&TaskSpec::new(kind, seed), 5000, 500, 500).unwrap();
    vec![("train", s.train), ("eval_in", s.eval_in), ("eval_ood", s.eval_ood)]
}

fn completion(d: &Demonstration) -> &[usize] {
    &d.response_ids
}

#[test]
fn demonstrations_are_well_formed() {
    for kind in TaskKind::ALL {
        let v = kind.vocabulary();
        for (_, split) in all_splits(kind, 1) {
            for d in &split {
                assert_eq!(d.response_ids.last(), Some(&EOS_ID));
                assert_eq!(d.response_ids.iter().filter(|&&t| t == EOS_ID).count(), 1);
                let body: Vec<usize> = d.prompt_ids.iter().chain(&d.response_ids[..d.response_ids.len() - 1]).copied().collect();
                let text = v.detokenize(&body).unwrap();
                assert_eq!(v.tokenize(&text).unwrap(), body);
                assert!(d.prompt_ids.iter().chain(&d.response_ids).all(|&t| t < v.size()));
            }
        }
    }
}

#[test]
fn verifier_accepts_every_ground_truth() {
    for kind in TaskKind::ALL {
        for (name, split) in all_splits(kind, 2) {
            for d in &split {
                assert!(verify(kind, &d.prompt_ids, completion(d)), "{kind} {name} {d:?}");
            }
        }
    }
}

#[test]
fn verifier_rejects_flipped_final_digit() {
    for kind in [TaskKind::Addition, TaskKind::Modular] {
        let v = kind.vocabulary();
        for (_, split) in all_splits(kind, 3) {
            for d in &split {
                let mut text = d.response_text().unwrap();
                let last = text.pop().unwrap();
                let digit = last.to_digit(10).unwrap();
                text.push(char::from_digit((digit + 1) % 10, 10).unwrap());
                let ids = v.tokenize(&text).unwrap();
                assert!(!verify(kind, &d.prompt_ids, &ids), "{text}");
            }
        }
    }
    let v = TaskKind::Reversal.vocabulary();
    for (_, split) in all_splits(TaskKind::Reversal, 3) {
        for d in &split {
            let mut text: Vec<char> = d.response_text().unwrap().chars().collect();
            let last = text.len() - 1;
            text[last] = if text[last] == 'z' { 'a' } else { (text[last] as u8 + 1) as char };
            let ids = v.tokenize(&text.iter().collect::<String>()).unwrap();
            assert!(!verify(TaskKind::Reversal, &d.prompt_ids, &ids));
        }
    }
}

#[test]
fn splits_are_disjoint_and_ranged() {
    for kind in TaskKind::ALL {
        let spec = TaskSpec::new(kind, 4);
        let splits = all_splits(kind, 4);
        let mut seen = HashSet::new();
        for (name, split) in &splits {
            for d in split {
                assert!(seen.insert(d.prompt_ids.clone()), "duplicate prompt in {name}");
                let (lo, hi) = if *name == "eval_ood" { spec.ood_difficulty } else { spec.train_difficulty };
                assert!((lo..=hi).contains(&d.difficulty));
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = TaskSpec::new(TaskKind::Addition, 9);
    let a = generate_dataset(&spec, 300, 30, 30).unwrap();
    let b = generate_dataset(&spec, 300, 30, 30).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&TaskSpec { seed: 10, ..spec }, 300, 30, 30).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn addition_difficulty_is_operand_digits() {
    let s = generate_dataset(&TaskSpec::new(TaskKind::Addition, 5), 200, 20, 20).unwrap();
    for d in s.train.iter().chain(&s.eval_ood) {
        let prompt = d.prompt_text().unwrap();
        let (a, b) = prompt.trim_end_matches('=').split_once('+').unwrap();
        assert_eq!(a.len() as u32, d.difficulty);
        assert_eq!(b.len() as u32, d.difficulty);
    }
}

#[test]
fn vocabulary_tables_match_golden() {
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("golden/vocab_tables.json")).unwrap();
    for kind in TaskKind::ALL {
        let want = golden[kind.name()].as_array().unwrap();
        let got = kind.vocabulary().table();
        assert_eq!(want.len(), got.len());
        for (w, (id, sym)) in want.iter().zip(got) {
            assert_eq!(w[0].as_u64().unwrap() as usize, id);
            assert_eq!(w[1].as_str().unwrap(), sym);
        }
    }
}

proptest! {
    #[test]
    fn reversal_tokenization_round_trips(s in "[a-z|]{0,40}") {
        let v = TaskKind::Reversal.vocabulary();
        let ids = v.tokenize(&s).unwrap();
        prop_assert_eq!(v.detokenize(&ids).unwrap(), s);
    }

    #[test]
    fn verify_never_panics(ids in proptest::collection::vec(0usize..40, 0..30)) {
        for kind in TaskKind::ALL {
            let p = kind.vocabulary().tokenize(match kind {
                TaskKind::Addition => "12+34=",
                TaskKind::Reversal => "abc|",
                TaskKind::Modular => "(1+2)*3 mod 4=",
            }).unwrap();
            let _ = verify(kind, &p, &ids);
            let _ = verify(kind, &ids, &p);
        }
    }
}
