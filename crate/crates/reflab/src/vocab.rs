//! Closed vocabulary: object categories, attributes, and the fixed token
//! set the generator emits. No external tagger; POS tags are assigned by
//! the rendering templates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! label_enum {
    ($name:ident, $count:ident, [$(($variant:ident, $token:literal)),+ $(,)?]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        pub const $count: usize = [$($name::$variant),+].len();

        impl $name {
            pub const ALL: [$name; $count] = [$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|c| *c == self).unwrap()
            }

            pub fn from_token(tok: &str) -> Option<$name> {
                match tok {
                    $($token => Some($name::$variant)),+,
                    _ => None,
                }
            }
        }
    };
}

label_enum!(
    Category,
    CATEGORY_COUNT,
    [
        (Ball, "ball"),
        (BoxObj, "box"),
        (Cup, "cup"),
        (Dog, "dog"),
        (Cat, "cat"),
        (Car, "car"),
        (Bike, "bike"),
        (Tree, "tree"),
    ]
);

label_enum!(
    Color,
    COLOR_COUNT,
    [
        (Red, "red"),
        (Blue, "blue"),
        (Green, "green"),
        (Yellow, "yellow"),
        (Black, "black"),
        (White, "white"),
    ]
);

label_enum!(SizeAttr, SIZE_COUNT, [(Small, "small"), (Big, "big")]);

/// Part-of-speech tags emitted by the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    Det,
    Adj,
    Noun,
    Adp,
    Neg,
}

/// Every surface token the generator can emit, in a fixed order.
/// The model's embedding table is indexed by position in this list.
pub const TOKENS: &[&str] = &[
    "the", "not", "left", "right", "of", "above", "below", // structure words
    "ball", "box", "cup", "dog", "cat", "car", "bike", "tree", // categories
    "red", "blue", "green", "yellow", "black", "white", // colors
    "small", "big", // sizes
    "is", "what", "color", // question words
];

pub fn token_id(tok: &str) -> Result<usize> {
    TOKENS
        .iter()
        .position(|t| *t == tok)
        .ok_or_else(|| Error::OutOfVocabulary(tok.to_string()))
}

pub const VOCAB_SIZE: usize = TOKENS.len();
