//! Shared inputs for the benchmarks.

use medreason::{DiseaseDoc, KnowledgeBase};

const SYLLABLES: [&str; 16] =
    ["ka", "lo", "mer", "tis", "pha", "gas", "ren", "cor", "bil", "neu", "ost", "cyt", "derm", "hep", "pul", "ang"];

fn word(mut x: u64) -> String {
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYLLABLES[(x % 16) as usize]);
        x /= 16;
    }
    w
}

/// `n` documents whose names and knowledge are built from pseudo-words.
pub fn synthetic_kb(n: usize) -> KnowledgeBase {
    (0..n as u64)
        .map(|i| DiseaseDoc {
            id: format!("d{i:04}"),
            name: format!("{} {}", word(i * 7 + 1), word(i * 13 + 5)),
            aliases: vec![word(i * 31 + 2)],
            description: String::new(),
            diagnosis_knowledge: (0..8).map(|j| word(i * 101 + j * 17)).collect::<Vec<_>>().join(", "),
        })
        .collect()
}
