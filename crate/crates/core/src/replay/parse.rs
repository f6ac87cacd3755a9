//! Answer parsing shared by replay enhancement and evaluation.

use std::collections::BTreeSet;

use crate::foodstream::vocab::ingredient_index;

/// Comma-separated items, trimmed, lowercased, deduplicated, empties dropped.
pub fn parse_set_answer(text: &str) -> BTreeSet<String> {
    text.split(',').map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect()
}

/// Ingredient words mentioned anywhere in a text.
pub fn mentioned_ingredients(text: &str) -> BTreeSet<String> {
    text.split_whitespace().filter(|w| ingredient_index(w).is_some()).map(str::to_string).collect()
}

/// `calories : 4 5 0 fat : 3 0` as `{calories=450, fat=30}`. A key without
/// digits is kept with an empty value so it still counts against the union.
pub fn nutrition_pairs(text: &str) -> BTreeSet<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i < words.len() {
        if words.get(i + 1) == Some(&":") && words[i].chars().all(|c| c.is_ascii_alphabetic()) {
            let mut j = i + 2;
            let mut value = String::new();
            while j < words.len() && words[j].len() == 1 && words[j].as_bytes()[0].is_ascii_digit() {
                value.push_str(words[j]);
                j += 1;
            }
            out.insert(format!("{}={value}", words[i]));
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn set_answers_are_normalized() {
        assert_eq!(parse_set_answer("beef, onion, onion, "), s(&["beef", "onion"]));
        assert!(parse_set_answer("").is_empty());
        assert_eq!(parse_set_answer("Salt,PEPPER"), s(&["salt", "pepper"]));
        assert_eq!(parse_set_answer("beef , oil , salt"), s(&["beef", "oil", "salt"]));
    }

    #[test]
    fn recipe_mentions() {
        assert_eq!(mentioned_ingredients("step 1 fry lamb step 2 stir cheese step 3 serve"), s(&["cheese", "lamb"]));
    }

    #[test]
    fn nutrition_parsing() {
        assert_eq!(
            nutrition_pairs("calories : 4 0 0 fat : 3 0 protein : 3 0"),
            s(&["calories=400", "fat=30", "protein=30"])
        );
        assert_eq!(nutrition_pairs("calories : fat : 1"), s(&["calories=", "fat=1"]));
        assert!(nutrition_pairs("4 0 0").is_empty());
    }
}
