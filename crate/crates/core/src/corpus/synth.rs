//! Seeded template grammar producing small labeled corpora for tests and
//! desk-scale experiments.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use super::LabeledText;
use crate::error::{Error, Result};
use crate::rng;

/// Templates for one class. A template is a space-separated pattern in
/// which `{slot}` words are replaced by a uniform draw from `slots[slot]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGrammar {
    pub name: String,
    pub templates: Vec<String>,
    pub slots: BTreeMap<String, Vec<String>>,
}

impl ClassGrammar {
    fn fill(&self, template: &str, rng: &mut rng::Rng) -> Result<String> {
        let mut words = Vec::new();
        for part in template.split_whitespace() {
            if let Some(slot) = part.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                let choices = self
                    .slots
                    .get(slot)
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| Error::InvalidArgument(format!("class {}: no fillers for slot {{{slot}}}", self.name)))?;
                words.push(choices.choose(rng).expect("non-empty").clone());
            } else {
                words.push(part.to_string());
            }
        }
        Ok(words.join(" "))
    }
}

/// Samples `n` sentences, class-balanced to within one, in shuffled order.
pub fn synth_grammar(seed: u64, n: usize, classes: &[ClassGrammar]) -> Result<Vec<LabeledText>> {
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("synthetic grammar needs at least two classes".into()));
    }
    if let Some(c) = classes.iter().find(|c| c.templates.is_empty()) {
        return Err(Error::InvalidArgument(format!("class {} has no templates", c.name)));
    }
    let mut rng = rng::from_seed(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes.len()).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| {
            let class = &classes[label];
            let t = rng.random_range(0..class.templates.len());
            Ok(LabeledText {
                text: class.fill(&class.templates[t], &mut rng)?,
                label,
            })
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn grammar(name: &str, templates: &[&str], slots: &[(&str, &str)]) -> ClassGrammar {
    ClassGrammar {
        name: name.to_string(),
        templates: templates.iter().map(|t| t.to_string()).collect(),
        slots: slots.iter().map(|(k, v)| (k.to_string(), words(v))).collect(),
    }
}

const SHARED: [(&str, &str); 5] = [
    ("wh", "what how why when where who"),
    ("aux", "did does can will should"),
    ("det", "the a this that every"),
    ("prep", "in on near after before with"),
    ("thing", "day year place time city way reason thing"),
];

const TEMPLATES: [&str; 4] = [
    "{wh} {aux} the {noun} {verb} {prep} {det} {thing} ?",
    "{wh} {aux} {det} {adj} {noun} {verb} ?",
    "{det} {noun} {aux} {verb} {prep} the {adj} {thing}",
    "{wh} is the {thing} of the {noun} ?",
];

fn class_with_shared(name: &str, own: [(&str, &str); 3]) -> ClassGrammar {
    let slots: Vec<(&str, &str)> = SHARED.iter().copied().chain(own).collect();
    grammar(name, &TEMPLATES, &slots)
}

/// Two question-like classes that share their function words and differ
/// in a pool of 60 content words each. A sentence carries one to three
/// content words, so a handful of labeled sentences covers only part of
/// each class's pool.
pub fn default_grammar() -> Vec<ClassGrammar> {
    vec![
        class_with_shared(
            "SPORT",
            [
                (
                    "noun",
                    "striker goalie referee stadium racket marathon pitcher umpire jersey trophy \
                     tournament coach league wicket puck halftime penalty sprinter boxer gymnast \
                     skater helmet scoreboard playoff rookie quarterback midfielder tackle relay dugout",
                ),
                (
                    "verb",
                    "scored tackled dribbled sprinted kicked pitched served defended trained wrestled \
                     raced swam bowled punted rallied",
                ),
                (
                    "adj",
                    "athletic undefeated offside varsity olympic muscular fastest professional amateur \
                     competitive injured sweaty victorious energetic agile",
                ),
            ],
        ),
        class_with_shared(
            "SCIENCE",
            [
                (
                    "noun",
                    "molecule electron telescope microscope enzyme neuron galaxy isotope protein catalyst \
                     bacterium nucleus photon glacier volcano chromosome laboratory hypothesis fossil asteroid \
                     magnet prism reactor genome plasma comet mineral vaccine orbit crystal",
                ),
                (
                    "verb",
                    "evaporated oxidized mutated orbited dissolved decayed crystallized evolved measured \
                     observed calculated synthesized erupted fermented radiated",
                ),
                (
                    "adj",
                    "chemical atomic magnetic genetic molecular solar thermal organic acidic radioactive \
                     microscopic cellular volcanic electric quantum",
                ),
            ],
        ),
    ]
}

/// Two classes with no word in common.
pub fn disjoint_grammar() -> Vec<ClassGrammar> {
    vec![
        grammar(
            "A",
            &["{x} {y} {x}", "{y} {z} {y} {x}"],
            &[("x", "apple banana cherry grape"), ("y", "red yellow green"), ("z", "ripe sweet")],
        ),
        grammar(
            "B",
            &["{x} {y} {x}", "{z} {x} {y}"],
            &[("x", "hammer drill saw wrench"), ("y", "steel iron copper"), ("z", "heavy sharp")],
        ),
    ]
}
