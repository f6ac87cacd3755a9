//! Synthetic dishes, the three question-type tasks and their serialization.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::{Category, Tokenizer, ASSISTANT, INGREDIENTS, IMG_CLOSE, IMG_OPEN, SCENE_TOKENS, USER, VIEWS_PER_INGREDIENT};
use crate::error::{Error, Result};
use crate::numeric::SeededRng;

/// The three tasks, in stream order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ingredient,
    Recipe,
    Nutrition,
}

impl TaskKind {
    pub const STREAM: [TaskKind; 3] = [TaskKind::Ingredient, TaskKind::Recipe, TaskKind::Nutrition];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Ingredient => "ingredient",
            TaskKind::Recipe => "recipe",
            TaskKind::Nutrition => "nutrition",
        }
    }

    /// Question templates; index is the template id.
    pub fn templates(self) -> &'static [&'static str] {
        match self {
            TaskKind::Ingredient => &["what ingredients are in this dish ?", "list the ingredients of this dish"],
            TaskKind::Recipe => &["how to cook this dish ?", "write the recipe for this dish"],
            TaskKind::Nutrition => &["estimate the nutrition of this dish", "give the nutrition facts of this dish"],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::STREAM
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown task tag {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nutrition {
    pub calories: u32,
    pub fat: u32,
    pub protein: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dish {
    pub id: u32,
    /// Ingredient indices, ascending (canonical order).
    pub ingredients: Vec<usize>,
    /// Image surrogate token ids, without the enclosing markers.
    pub image: Vec<u32>,
}

impl Dish {
    pub fn nutrition(&self) -> Nutrition {
        nutrition_of(&self.ingredients)
    }
}

pub fn nutrition_of(ingredients: &[usize]) -> Nutrition {
    let mut n = Nutrition { calories: 0, fat: 0, protein: 0 };
    for &i in ingredients {
        n.calories += INGREDIENTS[i].calories;
        n.fat += INGREDIENTS[i].fat;
        n.protein += INGREDIENTS[i].protein;
    }
    n
}

/// One serialized question/answer pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: u64,
    pub task: TaskKind,
    /// `<bos> USER <img> .. </img> question ASSISTANT`.
    pub prompt: Vec<u32>,
    /// Answer tokens followed by `<eos>`.
    pub answer: Vec<u32>,
    pub dish_id: u32,
}

impl Sample {
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.answer);
        t
    }

    /// True exactly at answer positions of [`Sample::tokens`].
    pub fn answer_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.prompt.len()];
        m.extend(std::iter::repeat_n(true, self.answer.len()));
        m
    }
}

/// Answer-region mask recovered from role markers: everything after the
/// last `ASSISTANT` marker.
pub fn answer_mask_from_markers(tokens: &[u32], tok: &Tokenizer) -> Vec<bool> {
    let a = tok.assistant();
    let start = tokens.iter().rposition(|&t| t == a).map_or(tokens.len(), |p| p + 1);
    (0..tokens.len()).map(|i| i >= start).collect()
}

pub fn ingredient_answer(ingredients: &[usize]) -> String {
    ingredients.iter().map(|&i| INGREDIENTS[i].name).collect::<Vec<_>>().join(" , ")
}

/// Steps grouped by category in fixed order; every ingredient is mentioned.
pub fn recipe_answer(ingredients: &[usize]) -> String {
    let mut words = Vec::new();
    let mut step = 1;
    for cat in Category::ORDER {
        let members: Vec<&str> =
            ingredients.iter().filter(|&&i| INGREDIENTS[i].category == cat).map(|&i| INGREDIENTS[i].name).collect();
        if members.is_empty() {
            continue;
        }
        words.push(format!("step {step} {}", cat.verb()));
        words.extend(members.iter().map(|s| s.to_string()));
        step += 1;
    }
    words.push(format!("step {step} serve"));
    words.join(" ")
}

fn digits(n: u32) -> String {
    n.to_string().chars().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn nutrition_answer(n: Nutrition) -> String {
    format!("calories : {} fat : {} protein : {}", digits(n.calories), digits(n.fat), digits(n.protein))
}

pub fn answer_text(dish: &Dish, task: TaskKind) -> String {
    match task {
        TaskKind::Ingredient => ingredient_answer(&dish.ingredients),
        TaskKind::Recipe => recipe_answer(&dish.ingredients),
        TaskKind::Nutrition => nutrition_answer(dish.nutrition()),
    }
}

/// Prompt for an image surrogate under a task template.
pub fn build_prompt(image: &[u32], task: TaskKind, template: usize, tok: &Tokenizer) -> Result<Vec<u32>> {
    let question = task
        .templates()
        .get(template)
        .ok_or_else(|| Error::Config(format!("task {task} has no template {template}")))?;
    let mut p = vec![tok.bos(), tok.id(USER)?, tok.id(IMG_OPEN)?];
    p.extend_from_slice(image);
    p.push(tok.id(IMG_CLOSE)?);
    p.extend(tok.encode(question)?);
    p.push(tok.id(ASSISTANT)?);
    Ok(p)
}

pub fn serialize_sample(dish: &Dish, task: TaskKind, template: usize, tok: &Tokenizer) -> Result<Sample> {
    let prompt = build_prompt(&dish.image, task, template, tok)?;
    let mut answer = tok.encode(&answer_text(dish, task))?;
    answer.push(tok.eos());
    let task_idx = TaskKind::STREAM.iter().position(|&t| t == task).expect("stream task") as u64;
    Ok(Sample { sample_id: dish.id as u64 * 3 + task_idx, task, prompt, answer, dish_id: dish.id })
}

/// Generation parameters for the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    /// Training dishes; test and reserved pools are a tenth of this each.
    pub num_dishes: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { num_dishes: 2000, noise_level: 0.1, seed: 7 }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_dishes < 50 {
            return Err(Error::Config(format!("num_dishes must be >= 50, got {}", self.num_dishes)));
        }
        if !(0.0..0.5).contains(&self.noise_level) {
            return Err(Error::Config(format!("noise_level must lie in [0, 0.5), got {}", self.noise_level)));
        }
        Ok(())
    }

    pub fn num_test(&self) -> usize {
        self.num_dishes / 10
    }

    pub fn num_pool(&self) -> usize {
        self.num_dishes / 10
    }
}

pub(crate) fn random_dish(id: u32, noise: f64, rng: &mut SeededRng, tok: &Tokenizer) -> Dish {
    let count = 3 + rng.below(5);
    let mut pool: Vec<usize> = (0..INGREDIENTS.len()).collect();
    rng.shuffle(&mut pool);
    let mut ingredients: Vec<usize> = pool[..count].to_vec();
    ingredients.sort_unstable();

    let mut image = Vec::with_capacity(ingredients.len() + 2);
    for &i in &ingredients {
        if !rng.bernoulli(noise) {
            image.push(tok.visual(i, rng.below(VIEWS_PER_INGREDIENT)));
        }
    }
    for _ in 0..rng.below(3) {
        let at = rng.below(image.len() + 1);
        image.insert(at, tok.scene(rng.below(SCENE_TOKENS)));
    }
    Dish { id, ingredients, image }
}

/// Per-task train and test samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task: TaskKind,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// An unlabeled image surrogate held back for pseudo-replay prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolImage {
    pub dish_id: u32,
    pub image: Vec<u32>,
}

/// Ordered tasks plus the shared reserved image pool.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub params: DatasetParams,
    pub tasks: Vec<TaskData>,
    pub pool: Vec<PoolImage>,
}

impl TaskStream {
    pub fn task(&self, kind: TaskKind) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.task == kind)
    }

    /// Checks split disjointness and closed-vocabulary membership.
    pub fn validate(&self, tok: &Tokenizer) -> Result<()> {
        let pool_ids: BTreeSet<u32> = self.pool.iter().map(|p| p.dish_id).collect();
        for t in &self.tasks {
            let train: BTreeSet<u32> = t.train.iter().map(|s| s.dish_id).collect();
            let test: BTreeSet<u32> = t.test.iter().map(|s| s.dish_id).collect();
            if !train.is_disjoint(&test) {
                return Err(Error::Data(format!("task {}: train and test dishes overlap", t.task)));
            }
            if !pool_ids.is_disjoint(&train) || !pool_ids.is_disjoint(&test) {
                return Err(Error::Data(format!("task {}: reserved pool overlaps labeled dishes", t.task)));
            }
            for s in t.train.iter().chain(&t.test) {
                if s.task != t.task {
                    return Err(Error::Data(format!("sample {} tagged {} inside task {}", s.sample_id, s.task, t.task)));
                }
                for &id in s.prompt.iter().chain(&s.answer) {
                    tok.token(id)?;
                }
            }
        }
        for p in &self.pool {
            for &id in &p.image {
                tok.token(id)?;
            }
        }
        Ok(())
    }

    /// Longest serialized sample.
    pub fn max_len(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.test))
            .map(|s| s.prompt.len() + s.answer.len())
            .max()
            .unwrap_or(0)
    }
}

/// Deterministic dishes and task stream for `params`.
pub fn generate_dataset(params: DatasetParams, tok: &Tokenizer) -> Result<(Vec<Dish>, TaskStream)> {
    params.validate()?;
    let mut rng = SeededRng::new(params.seed);
    let total = params.num_dishes + params.num_test() + params.num_pool();
    let dishes: Vec<Dish> = (0..total as u32).map(|id| random_dish(id, params.noise_level, &mut rng, tok)).collect();
    let n_train = params.num_dishes;
    let n_test = params.num_test();
    let (train, rest) = dishes.split_at(n_train);
    let (test, pool) = rest.split_at(n_test);

    let mut template_rng = rng.fork("templates");
    let mut tasks = Vec::new();
    for task in TaskKind::STREAM {
        let n_templates = task.templates().len();
        let mut make = |ds: &[Dish]| -> Result<Vec<Sample>> {
            ds.iter().map(|d| serialize_sample(d, task, template_rng.below(n_templates), tok)).collect()
        };
        let train_s = make(train)?;
        let test_s = make(test)?;
        tasks.push(TaskData { task, train: train_s, test: test_s });
    }
    let pool = pool.iter().map(|d| PoolImage { dish_id: d.id, image: d.image.clone() }).collect();
    Ok((dishes, TaskStream { params, tasks, pool }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Tokenizer, Vec<Dish>, TaskStream) {
        let tok = Tokenizer::new();
        let (d, s) = generate_dataset(DatasetParams { num_dishes: 60, noise_level: 0.2, seed: 3 }, &tok).unwrap();
        (tok, d, s)
    }

    #[test]
    fn config_errors() {
        let tok = Tokenizer::new();
        assert!(generate_dataset(DatasetParams { num_dishes: 49, ..Default::default() }, &tok).is_err());
        assert!(generate_dataset(DatasetParams { noise_level: 0.5, ..Default::default() }, &tok).is_err());
        assert!(generate_dataset(DatasetParams { noise_level: -0.1, ..Default::default() }, &tok).is_err());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let tok = Tokenizer::new();
        let p = DatasetParams { num_dishes: 60, noise_level: 0.2, seed: 3 };
        let a = generate_dataset(p, &tok).unwrap();
        let b = generate_dataset(p, &tok).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(DatasetParams { seed: 4, ..p }, &tok).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn noiseless_images_reveal_every_ingredient() {
        let tok = Tokenizer::new();
        let (dishes, _) = generate_dataset(DatasetParams { num_dishes: 80, noise_level: 0.0, seed: 1 }, &tok).unwrap();
        for d in &dishes {
            let seen: Vec<usize> = d.image.iter().filter_map(|&t| tok.visual_ingredient(t)).collect();
            assert_eq!(seen, d.ingredients, "dish {}", d.id);
        }
    }

    #[test]
    fn nutrition_is_table_sum() {
        let (tok, dishes, stream) = small();
        let nut = stream.task(TaskKind::Nutrition).unwrap();
        for s in &nut.train {
            let d = &dishes[s.dish_id as usize];
            let mut cal = 0;
            let mut fat = 0;
            let mut pro = 0;
            for &i in &d.ingredients {
                cal += INGREDIENTS[i].calories;
                fat += INGREDIENTS[i].fat;
                pro += INGREDIENTS[i].protein;
            }
            let text = tok.decode_answer(&s.answer).unwrap();
            let expected = format!("calories : {} fat : {} protein : {}", digits(cal), digits(fat), digits(pro));
            assert_eq!(text, expected);
        }
    }

    #[test]
    fn ingredient_answer_is_sorted_comma_list() {
        assert_eq!(ingredient_answer(&[1, 24, 31]), "beef , oil , salt");
    }

    #[test]
    fn recipe_mentions_every_ingredient() {
        let (_, dishes, _) = small();
        for d in &dishes {
            let r = recipe_answer(&d.ingredients);
            for &i in &d.ingredients {
                assert!(r.split(' ').any(|w| w == INGREDIENTS[i].name), "{r}");
            }
            assert!(r.ends_with("serve"));
        }
        assert_eq!(recipe_answer(&[1, 25, 31]), "step 1 chop onion step 2 fry beef step 3 add salt step 4 serve");
    }

    #[test]
    fn masks_cover_exactly_the_answer() {
        let (tok, _, stream) = small();
        for t in &stream.tasks {
            for s in t.train.iter().take(20) {
                let toks = s.tokens();
                assert_eq!(answer_mask_from_markers(&toks, &tok), s.answer_mask());
                let mask = s.answer_mask();
                assert!(mask[s.prompt.len()..].iter().all(|&m| m));
                assert!(mask[..s.prompt.len()].iter().all(|&m| !m));
            }
        }
    }

    #[test]
    fn serialization_round_trips_through_tokenizer() {
        let (tok, _, stream) = small();
        for t in &stream.tasks {
            for s in &t.test {
                let text = tok.decode(&s.tokens()).unwrap();
                assert_eq!(tok.encode(&text).unwrap(), s.tokens());
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_valid() {
        let (tok, _, stream) = small();
        stream.validate(&tok).unwrap();
        assert_eq!(stream.tasks.len(), 3);
        assert_eq!(stream.tasks.iter().map(|t| t.task).collect::<Vec<_>>(), TaskKind::STREAM.to_vec());
        assert_eq!(stream.pool.len(), 6);
        assert!(stream.max_len() < 128);
    }

    #[test]
    fn nutrition_map_is_exactly_recoverable_from_true_ingredients() {
        // Least-squares regression from ingredient indicators to calories,
        // solved here by Gaussian elimination on the normal equations,
        // reproduces every dish's calories exactly.
        let tok = Tokenizer::new();
        let (dishes, _) = generate_dataset(DatasetParams { num_dishes: 400, noise_level: 0.1, seed: 11 }, &tok).unwrap();
        let n = INGREDIENTS.len();
        let mut ata = vec![vec![0.0f64; n + 1]; n];
        for d in &dishes {
            let y = d.nutrition().calories as f64;
            for &i in &d.ingredients {
                for &j in &d.ingredients {
                    ata[i][j] += 1.0;
                }
                ata[i][n] += y;
            }
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
            ata.swap(col, piv);
            assert!(ata[col][col].abs() > 1e-9, "indicator design is rank deficient");
            for r in 0..n {
                if r != col {
                    let f = ata[r][col] / ata[col][col];
                    for c in col..=n {
                        ata[r][c] -= f * ata[col][c];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..n).map(|i| ata[i][n] / ata[i][i]).collect();
        for d in &dishes {
            let pred: f64 = d.ingredients.iter().map(|&i| coef[i]).sum();
            assert!((pred - d.nutrition().calories as f64).abs() < 1e-6);
        }
    }
}
