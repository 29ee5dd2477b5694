//! Word-level vocabulary and caption grammar.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{TextInput, NUM_SPECIAL};

pub const SPECIAL_WORDS: [&str; NUM_SPECIAL as usize] = ["[CLS]", "[PAD]", "[MASK]", "[SEP]"];

pub const COLORS: [&str; 8] = ["red", "blue", "green", "black", "white", "yellow", "gray", "purple"];
pub const TOPS: [&str; 4] = ["shirt", "jacket", "sweater", "hoodie"];
pub const BOTTOMS: [&str; 4] = ["pants", "shorts", "skirt", "jeans"];
pub const SCENES: [&str; 8] = ["street", "park", "station", "mall", "campus", "plaza", "crosswalk", "garden"];

/// Subjects the caption generator can draw. The last entries do not refer
/// to people and are removed by the subject filter.
pub const SUBJECTS: [&str; 12] = [
    "man", "woman", "boy", "girl", "person", "he", "she", "pedestrian", "dog", "cat", "car", "bicycle",
];
pub const PERSON_LEXICON: [&str; 9] = ["people", "he", "she", "man", "woman", "person", "boy", "girl", "pedestrian"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Action {
    pub label: &'static str,
    pub phrase: &'static str,
}

pub const NORMAL_ACTIONS: [Action; 4] = [
    Action { label: "walking", phrase: "is walking forward" },
    Action { label: "standing", phrase: "is standing still" },
    Action { label: "running", phrase: "is running fast" },
    Action { label: "waving", phrase: "is waving a hand" },
];

pub const ANOMALY_ACTIONS: [Action; 4] = [
    Action { label: "falling", phrase: "is falling down" },
    Action { label: "lying", phrase: "is lying on the ground" },
    Action { label: "fighting", phrase: "is fighting with someone" },
    Action { label: "climbing", phrase: "is climbing over a fence" },
];

const FILLER: [&str; 4] = ["wearing", "a", "and", "in"];

/// Fixed word list padded with `[unusedN]` entries up to the configured size.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        let mut words: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for w in SUBJECTS.iter().chain(&PERSON_LEXICON).chain(&FILLER).chain(&COLORS).chain(&TOPS).chain(&BOTTOMS) {
            push(w);
        }
        for a in NORMAL_ACTIONS.iter().chain(&ANOMALY_ACTIONS) {
            for w in a.phrase.split_whitespace() {
                push(w);
            }
        }
        push("the");
        for w in SCENES {
            push(w);
        }
        if words.len() > size {
            return Err(Error::config(
                "corpus.vocab_size",
                format!("grammar needs {} words, vocabulary holds {size}", words.len()),
            ));
        }
        let mut k = 0;
        while words.len() < size {
            words.push(format!("[unused{k}]"));
            k += 1;
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Body token ids of a whitespace-separated phrase; unknown words are
    /// collected into the error.
    pub fn encode_words(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for w in text.split_whitespace() {
            let w = w.to_lowercase();
            match self.id(&w) {
                Some(id) => ids.push(id),
                None => unknown.push(w),
            }
        }
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(Error::UnknownTokens(unknown))
        }
    }

    /// `[CLS]`-prefixed caption for free text.
    pub fn tokenize(&self, text: &str) -> Result<TextInput> {
        let body = self.encode_words(text)?;
        TextInput::new(std::iter::once(crate::model::CLS).chain(body).collect())
    }

    /// Words of a caption body, specials included except the leading `[CLS]`.
    pub fn decode(&self, text: &TextInput) -> String {
        text.body()
            .iter()
            .map(|&t| self.word(t).unwrap_or("[?]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Clothing and scene attributes shared by both variants of an identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Appearance {
    pub top_color: usize,
    pub top_type: usize,
    pub bottom_color: usize,
    pub bottom_type: usize,
    pub scene: usize,
}

impl Appearance {
    pub const COMBINATIONS: usize = COLORS.len() * TOPS.len() * COLORS.len() * BOTTOMS.len() * SCENES.len();

    /// Enumerates every attribute combination by index.
    pub fn from_index(mut i: usize) -> Self {
        let mut next = |n: usize| {
            let v = i % n;
            i /= n;
            v
        };
        Self {
            top_color: next(COLORS.len()),
            top_type: next(TOPS.len()),
            bottom_color: next(COLORS.len()),
            bottom_type: next(BOTTOMS.len()),
            scene: next(SCENES.len()),
        }
    }
}

/// `<subject> wearing a <color> <top> and <color> <bottom> <action phrase> in the <scene>`
pub fn caption_text(subject: &str, app: &Appearance, action: &Action) -> String {
    format!(
        "{subject} wearing a {} {} and {} {} {} in the {}",
        COLORS[app.top_color],
        TOPS[app.top_type],
        COLORS[app.bottom_color],
        BOTTOMS[app.bottom_type],
        action.phrase,
        SCENES[app.scene],
    )
}
