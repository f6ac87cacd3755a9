//! Format-free pretraining corpus over the whole lexicon.
//!
//! The corpus teaches the backbone the vocabulary and the image-token to
//! ingredient-word association, but never the question/answer framing of
//! the three tasks.

use super::dataset::{nutrition_of, random_dish, TaskKind};
use super::vocab::{Category, Tokenizer, INGREDIENTS, IMG_CLOSE, IMG_OPEN};
use crate::error::Result;
use crate::numeric::SeededRng;

/// `count` token sequences, each starting with `<bos>` and ending with `<eos>`.
pub fn pretraining_corpus(count: usize, noise_level: f64, seed: u64, tok: &Tokenizer) -> Result<Vec<Vec<u32>>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(count);
    let digit = |r: &mut SeededRng| tok.id(&r.below(10).to_string());
    for n in 0..count {
        let mut s = vec![tok.bos()];
        match rng.below(10) {
            // Captions: image block followed by the dish's words, sometimes as a list.
            0..=4 => {
                let dish = random_dish(n as u32, noise_level, &mut rng, tok);
                s.push(tok.id(IMG_OPEN)?);
                s.extend_from_slice(&dish.image);
                s.push(tok.id(IMG_CLOSE)?);
                let listed = rng.bernoulli(0.5);
                for (k, &i) in dish.ingredients.iter().enumerate() {
                    if listed && k > 0 {
                        s.push(tok.id(",")?);
                    }
                    s.push(tok.ingredient_word(i));
                }
            }
            // Cooking phrases: each clause pairs a verb with ingredients of its category.
            5 | 6 => {
                for c in 0..1 + rng.below(4) {
                    if c > 0 && rng.bernoulli(0.5) {
                        s.push(tok.id(",")?);
                    }
                    if rng.bernoulli(0.5) {
                        s.push(tok.id("step")?);
                        s.push(digit(&mut rng)?);
                    }
                    let cat = Category::ORDER[rng.below(5)];
                    let members: Vec<usize> = (0..INGREDIENTS.len()).filter(|&i| INGREDIENTS[i].category == cat).collect();
                    s.push(tok.id(cat.verb())?);
                    for _ in 0..1 + rng.below(2) {
                        s.push(tok.ingredient_word(members[rng.below(members.len())]));
                    }
                }
                if rng.bernoulli(0.3) {
                    s.push(tok.id("serve")?);
                }
            }
            // Per-ingredient nutrition facts.
            7 => {
                for _ in 0..1 + rng.below(2) {
                    let i = rng.below(INGREDIENTS.len());
                    let facts = nutrition_of(&[i]);
                    s.push(tok.ingredient_word(i));
                    for (key, value) in [("calories", facts.calories), ("fat", facts.fat), ("protein", facts.protein)] {
                        s.push(tok.id(key)?);
                        s.push(tok.id(":")?);
                        for d in value.to_string().chars() {
                            s.push(tok.id(&d.to_string())?);
                        }
                    }
                }
            }
            // Bare questions.
            8 => {
                let task = TaskKind::STREAM[rng.below(3)];
                let t = task.templates();
                s.extend(tok.encode(t[rng.below(t.len())])?);
            }
            // Lexicon soup, so every embedding row sees gradient.
            _ => {
                for _ in 0..4 + rng.below(8) {
                    let id = 1 + rng.below(tok.vocab_size() - 1) as u32;
                    if id != tok.eos() {
                        s.push(id);
                    }
                }
            }
        }
        s.push(tok.eos());
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foodstream::vocab::USER;

    #[test]
    fn deterministic_and_framed() {
        let tok = Tokenizer::new();
        let a = pretraining_corpus(300, 0.1, 5, &tok).unwrap();
        assert_eq!(a, pretraining_corpus(300, 0.1, 5, &tok).unwrap());
        assert_ne!(a, pretraining_corpus(300, 0.1, 6, &tok).unwrap());
        for s in &a {
            assert_eq!(s[0], tok.bos());
            assert_eq!(*s.last().unwrap(), tok.eos());
            assert_eq!(s.iter().filter(|&&t| t == tok.eos()).count(), 1);
        }
    }

    #[test]
    fn corpus_never_frames_a_task() {
        let tok = Tokenizer::new();
        let corpus = pretraining_corpus(500, 0.1, 5, &tok).unwrap();
        let user = tok.id(USER).unwrap();
        let open = tok.id(IMG_OPEN).unwrap();
        assert!(corpus.iter().filter(|s| s[1] == open).count() > 150);
        // Soup sequences may contain role markers by chance, but never both a
        // user turn and an assistant turn.
        assert!(corpus.iter().all(|s| !(s.contains(&user) && s.contains(&tok.assistant()))));
    }

    #[test]
    fn cooking_clauses_use_their_category_verb() {
        let tok = Tokenizer::new();
        let verbs: Vec<u32> = Category::ORDER.iter().map(|c| tok.id(c.verb()).unwrap()).collect();
        for s in pretraining_corpus(400, 0.1, 9, &tok).unwrap() {
            if s[1] == tok.id(IMG_OPEN).unwrap() || !s.iter().any(|t| verbs.contains(t)) || s.len() > 30 {
                continue;
            }
            for w in s.windows(2) {
                if let Some(v) = verbs.iter().position(|&v| v == w[0]) {
                    if let Some(i) = (0..INGREDIENTS.len()).find(|&i| tok.ingredient_word(i) == w[1]) {
                        assert_eq!(INGREDIENTS[i].category, Category::ORDER[v]);
                    }
                }
            }
        }
    }
}
