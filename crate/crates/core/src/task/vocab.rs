use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const EMB: TokenId = 2;
pub const SCENE_BEGIN: TokenId = 3;
pub const OBJ_SEP: TokenId = 4;
pub const RATIONALE_BEGIN: TokenId = 5;
pub const ARROW: TokenId = 6;
pub const NO_CHANGE: TokenId = 7;
pub const RESULT: TokenId = 8;
pub const DROP: TokenId = 9;
pub const KEEP: TokenId = 10;
pub const RECOLOR: TokenId = 11;
pub const REMOVE: TokenId = 12;
pub const SELECT: TokenId = 13;

/// Values per attribute domain.
pub const N_SHAPES: usize = 6;
pub const N_COLORS: usize = 6;
pub const N_SIZES: usize = 6;

pub const SHAPE_BASE: TokenId = 14;
pub const COLOR_BASE: TokenId = SHAPE_BASE + N_SHAPES as TokenId;
pub const SIZE_BASE: TokenId = COLOR_BASE + N_COLORS as TokenId;
pub const VOCAB_SIZE: usize = SIZE_BASE as usize + N_SIZES;

pub const SHAPE_NAMES: [&str; N_SHAPES] =
    ["circle", "square", "triangle", "star", "hexagon", "diamond"];
pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "blue", "green", "yellow", "purple", "orange"];
pub const SIZE_NAMES: [&str; N_SIZES] = ["tiny", "small", "medium", "large", "huge", "giant"];

const FIXED_NAMES: [&str; SHAPE_BASE as usize] = [
    "<pad>",
    "<eos>",
    "<emb>",
    "SCENE",
    "|",
    "RATIONALE",
    "->",
    "NO_CHANGE",
    "RESULT",
    "DROP",
    "KEEP",
    "RECOLOR",
    "REMOVE",
    "SELECT",
];

/// The fixed token inventory: name for every id in `0..VOCAB_SIZE`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let names = FIXED_NAMES
            .iter()
            .chain(&SHAPE_NAMES)
            .chain(&COLOR_NAMES)
            .chain(&SIZE_NAMES)
            .copied()
            .collect::<Vec<_>>();
        debug_assert_eq!(names.len(), VOCAB_SIZE);
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: TokenId) -> Option<&'static str> {
        self.names.get(id as usize).copied()
    }

    pub fn id(&self, name: &str) -> Option<TokenId> {
        self.names
            .iter()
            .position(|&n| n == name)
            .map(|i| i as TokenId)
    }

    pub fn is_special(id: TokenId) -> bool {
        matches!(id, PAD | EOS | EMB)
    }

    /// Hex SHA-256 of the ordered token names, newline-separated.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Space-separated token names.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let mut s = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            match self.name(t) {
                Some(n) => s.push_str(n),
                None => write!(s, "#{t}").expect("write to string"),
            }
        }
        s
    }

    /// Parses whitespace-separated token names or integer ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                if let Some(id) = self.id(w) {
                    return Ok(id);
                }
                match w.parse::<TokenId>() {
                    Ok(id) if (id as usize) < self.len() => Ok(id),
                    Ok(id) => Err(Error::Vocab {
                        id,
                        vocab_size: self.len(),
                    }),
                    Err(_) => Err(Error::Task(format!("unknown token {w:?}"))),
                }
            })
            .collect()
    }
}
