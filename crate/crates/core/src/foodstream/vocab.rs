//! Closed vocabulary and the ingredient knowledge table.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Cooking category; fixes the recipe verb and the step order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Vegetable,
    Protein,
    Staple,
    Dairy,
    Seasoning,
}

impl Category {
    pub const ORDER: [Category; 5] =
        [Category::Vegetable, Category::Protein, Category::Staple, Category::Dairy, Category::Seasoning];

    pub fn verb(self) -> &'static str {
        match self {
            Category::Vegetable => "chop",
            Category::Protein => "fry",
            Category::Staple => "boil",
            Category::Dairy => "stir",
            Category::Seasoning => "add",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ingredient {
    pub name: &'static str,
    pub category: Category,
    pub calories: u32,
    pub fat: u32,
    pub protein: u32,
}

const fn ing(name: &'static str, category: Category, calories: u32, fat: u32, protein: u32) -> Ingredient {
    Ingredient { name, category, calories, fat, protein }
}

use Category::*;

/// Forty ingredients in canonical (alphabetical) order.
pub const INGREDIENTS: [Ingredient; 40] = [
    ing("bean", Staple, 120, 1, 8),
    ing("beef", Protein, 250, 15, 26),
    ing("bread", Staple, 160, 2, 5),
    ing("broccoli", Vegetable, 30, 0, 3),
    ing("butter", Dairy, 100, 11, 0),
    ing("cabbage", Vegetable, 20, 0, 1),
    ing("carrot", Vegetable, 25, 0, 1),
    ing("celery", Vegetable, 10, 0, 0),
    ing("cheese", Dairy, 110, 9, 7),
    ing("chicken", Protein, 190, 7, 29),
    ing("chili", Seasoning, 10, 0, 0),
    ing("corn", Staple, 90, 1, 3),
    ing("cream", Dairy, 50, 5, 1),
    ing("cucumber", Vegetable, 15, 0, 1),
    ing("egg", Protein, 70, 5, 6),
    ing("fish", Protein, 140, 5, 22),
    ing("flour", Staple, 110, 0, 3),
    ing("garlic", Vegetable, 5, 0, 0),
    ing("ginger", Seasoning, 5, 0, 0),
    ing("honey", Seasoning, 60, 0, 0),
    ing("lamb", Protein, 280, 21, 23),
    ing("milk", Dairy, 60, 3, 3),
    ing("mushroom", Vegetable, 20, 0, 3),
    ing("noodle", Staple, 200, 2, 7),
    ing("oil", Seasoning, 120, 14, 0),
    ing("onion", Vegetable, 40, 0, 1),
    ing("pasta", Staple, 220, 1, 8),
    ing("pepper", Vegetable, 25, 0, 1),
    ing("pork", Protein, 240, 16, 22),
    ing("potato", Vegetable, 110, 0, 3),
    ing("rice", Staple, 200, 0, 4),
    ing("salt", Seasoning, 0, 0, 0),
    ing("scallion", Seasoning, 5, 0, 0),
    ing("sesame", Seasoning, 50, 4, 2),
    ing("shrimp", Protein, 100, 1, 20),
    ing("soy_sauce", Seasoning, 10, 0, 1),
    ing("spinach", Vegetable, 10, 0, 1),
    ing("sugar", Seasoning, 50, 0, 0),
    ing("tofu", Protein, 90, 5, 10),
    ing("tomato", Vegetable, 20, 0, 1),
];

/// Number of visual surrogate tokens per ingredient ("views").
pub const VIEWS_PER_INGREDIENT: usize = 2;
/// Ingredient-free visual tokens used as distractors.
pub const SCENE_TOKENS: usize = 32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const IMG_OPEN: &str = "<img>";
pub const IMG_CLOSE: &str = "</img>";
pub const USER: &str = "USER";
pub const ASSISTANT: &str = "ASSISTANT";

const CONTROL: [&str; 7] = [BOS, EOS, SEP, IMG_OPEN, IMG_CLOSE, USER, ASSISTANT];
const PUNCT: [&str; 3] = [",", ":", "?"];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const RECIPE_WORDS: [&str; 7] = ["step", "serve", "chop", "fry", "boil", "stir", "add"];
const NUTRITION_WORDS: [&str; 3] = ["calories", "fat", "protein"];
pub(crate) const TEMPLATE_WORDS: [&str; 21] = [
    "what", "ingredients", "are", "in", "this", "dish", "list", "the", "how", "to", "cook", "write", "recipe",
    "for", "estimate", "nutrition", "of", "give", "facts", "tell", "me",
];

/// Bijective token <-> id mapping over the closed vocabulary.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        tokens.extend(CONTROL.iter().map(|s| s.to_string()));
        tokens.extend(PUNCT.iter().map(|s| s.to_string()));
        tokens.extend(DIGITS.iter().map(|s| s.to_string()));
        tokens.extend(RECIPE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(NUTRITION_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(INGREDIENTS.iter().map(|i| i.name.to_string()));
        for i in INGREDIENTS.iter() {
            for v in 0..VIEWS_PER_INGREDIENT {
                tokens.push(format!("v{v}_{}", i.name));
            }
        }
        tokens.extend((0..SCENE_TOKENS).map(|s| format!("scene_{s:02}")));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId { id, size: self.tokens.len() })
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Ids to a single-space-joined string.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    /// Decodes an answer region, stopping at (and dropping) the end token.
    pub fn decode_answer(&self, ids: &[u32]) -> Result<String> {
        let eos = self.eos();
        let end = ids.iter().position(|&i| i == eos).unwrap_or(ids.len());
        self.decode(&ids[..end])
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    pub fn assistant(&self) -> u32 {
        self.index[ASSISTANT]
    }

    pub fn ingredient_word(&self, idx: usize) -> u32 {
        self.index[INGREDIENTS[idx].name]
    }

    pub fn visual(&self, idx: usize, view: usize) -> u32 {
        self.index[&format!("v{view}_{}", INGREDIENTS[idx].name)]
    }

    pub fn scene(&self, s: usize) -> u32 {
        self.index[&format!("scene_{s:02}")]
    }

    /// Ingredient index for a visual token id, if it is one.
    pub fn visual_ingredient(&self, id: u32) -> Option<usize> {
        let tok = self.tokens.get(id as usize)?;
        let rest = tok.strip_prefix('v')?;
        let (_, name) = rest.split_once('_')?;
        ingredient_index(name)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 of the newline-joined vocabulary.
    pub fn vocab_hash(&self) -> String {
        crate::numeric::hex(&Sha256::digest(self.tokens.join("\n").as_bytes()))
    }
}

pub fn ingredient_index(name: &str) -> Option<usize> {
    INGREDIENTS.iter().position(|i| i.name == name)
}
