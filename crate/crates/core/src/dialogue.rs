//! Dialogue data model: ordered patient/doctor utterances.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Patient,
    Doctor,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Patient => "Patient",
            Role::Doctor => "Doctor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
}

impl Utterance {
    pub fn patient(text: impl Into<String>) -> Self {
        Self { role: Role::Patient, text: text.into() }
    }

    pub fn doctor(text: impl Into<String>) -> Self {
        Self { role: Role::Doctor, text: text.into() }
    }
}

/// Ordered utterances of one consultation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub utterances: Vec<Utterance>,
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, utterance: Utterance) {
        self.utterances.push(utterance);
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    /// Most recent doctor utterance, if any.
    pub fn last_doctor(&self) -> Option<&str> {
        self.utterances.iter().rev().find(|u| u.role == Role::Doctor).map(|u| u.text.as_str())
    }

    /// Number of completed doctor turns.
    pub fn doctor_turns(&self) -> usize {
        self.utterances.iter().filter(|u| u.role == Role::Doctor).count()
    }

    /// `Patient: ...` / `Doctor: ...` lines.
    pub fn render(&self) -> String {
        self.utterances.iter().map(|u| format!("{}: {}", u.role.label(), u.text)).collect::<Vec<_>>().join("\n")
    }

    /// History with an extra (not yet committed) utterance appended.
    pub fn with(&self, utterance: Utterance) -> Self {
        let mut h = self.clone();
        h.push(utterance);
        h
    }
}

/// A recorded dialogue as it appears in corpus files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
}

/// One (patient, doctor) exchange of a recorded dialogue together with its preceding context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueTurn {
    /// 1-based turn index.
    pub turn: usize,
    /// U_t: everything up to and including the patient utterance of this turn.
    pub history: DialogueHistory,
    /// The doctor's reply that closes the turn.
    pub response: String,
}

impl Dialogue {
    /// Splits the dialogue into turns. Consecutive utterances of the same role are
    /// merged with a space; a trailing patient utterance without a reply is dropped.
    pub fn turns(&self) -> Vec<DialogueTurn> {
        let mut merged: Vec<Utterance> = Vec::new();
        for u in &self.utterances {
            match merged.last_mut() {
                Some(last) if last.role == u.role => {
                    last.text.push(' ');
                    last.text.push_str(&u.text);
                }
                _ => merged.push(u.clone()),
            }
        }
        let start = merged.iter().position(|u| u.role == Role::Patient).unwrap_or(merged.len());
        let mut history = DialogueHistory { utterances: merged[..start].to_vec() };
        let mut out = Vec::new();
        let mut i = start;
        while i + 1 < merged.len() {
            history.push(merged[i].clone());
            out.push(DialogueTurn {
                turn: out.len() + 1,
                history: history.clone(),
                response: merged[i + 1].text.clone(),
            });
            history.push(merged[i + 1].clone());
            i += 2;
        }
        out
    }
}
