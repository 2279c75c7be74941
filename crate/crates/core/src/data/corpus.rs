//! Synthetic TOP-style corpus generator.
//!
//! Each intent has annotated templates such as
//! `[IN:GET_WEATHER what is the weather in [SL:LOCATION $location ] ]`.
//! Words outside slots are carrier words that the decoupled target drops;
//! `$name` placeholders are filled from entity lexicons of pseudo-words and are
//! copied verbatim. A carrier phrase is the combination (prefix, template,
//! suffix); every combination belongs to exactly one split.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

use super::align::Example;
use super::tree::{ParseTree, Slot, SlotValue};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconSpec {
    pub name: String,
    pub min_words: usize,
    pub max_words: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub templates: Vec<String>,
    pub prefixes: Vec<String>,
    pub suffixes: Vec<String>,
    pub lexicons: Vec<LexiconSpec>,
    /// Entity strings per lexicon in the training split; dev/test get an eighth each.
    pub entries_per_lexicon: usize,
    /// Draw train/dev/test entities from disjoint word pools.
    pub lexicon_split: bool,
}

fn lex(name: &str, min_words: usize, max_words: usize) -> LexiconSpec {
    LexiconSpec {
        name: name.into(),
        min_words,
        max_words,
    }
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let templates = [
            "[IN:CREATE_REMINDER remind me to [SL:TODO $todo ] [SL:DATE_TIME at $time ] ]",
            "[IN:CREATE_REMINDER set a reminder [SL:DATE_TIME for $time ] to [SL:TODO $todo ] ]",
            "[IN:CREATE_REMINDER remind [SL:PERSON_REMINDED $contact ] to [SL:TODO $todo ] ]",
            "[IN:CREATE_REMINDER remind me to [SL:TODO [IN:CREATE_CALL call [SL:CONTACT $contact ] ] ] [SL:DATE_TIME at $time ] ]",
            "[IN:CREATE_ALARM set an alarm [SL:DATE_TIME for $time ] ]",
            "[IN:CREATE_ALARM wake me up [SL:DATE_TIME at $time ] ]",
            "[IN:CREATE_ALARM create an alarm called [SL:ALARM_NAME $alarm ] [SL:DATE_TIME for $time ] ]",
            "[IN:SEND_MESSAGE send a message to [SL:RECIPIENT $contact ] saying [SL:CONTENT_EXACT $content ] ]",
            "[IN:SEND_MESSAGE text [SL:RECIPIENT $contact ] that [SL:CONTENT_EXACT $content ] ]",
            "[IN:SEND_MESSAGE message [SL:RECIPIENT $contact ] ]",
            "[IN:CREATE_CALL call [SL:CONTACT $contact ] ]",
            "[IN:CREATE_CALL start a video call with [SL:CONTACT $contact ] ]",
            "[IN:GET_WEATHER what is the weather in [SL:LOCATION $location ] ]",
            "[IN:GET_WEATHER will it rain in [SL:LOCATION $location ] [SL:DATE_TIME on $time ] ]",
            "[IN:GET_WEATHER forecast ]",
            "[IN:PLAY_MUSIC play [SL:MUSIC_TRACK_TITLE $title ] by [SL:MUSIC_ARTIST_NAME $artist ] ]",
            "[IN:PLAY_MUSIC put on some [SL:MUSIC_ARTIST_NAME $artist ] ]",
            "[IN:PLAY_MUSIC play the song [SL:MUSIC_TRACK_TITLE $title ] ]",
            "[IN:GET_DIRECTIONS how do i get to [SL:DESTINATION $location ] from [SL:SOURCE $location ] ]",
            "[IN:GET_DIRECTIONS directions to [SL:DESTINATION $location ] ]",
            "[IN:GET_DIRECTIONS navigate to [SL:DESTINATION $location ] avoiding [SL:ROAD_CONDITION $road ] ]",
        ];
        let prefixes = ["", "please", "hey", "can you", "could you please", "i need you to", "okay", "assistant"];
        let suffixes = ["", "please", "thanks", "right now", "for me", "thank you", "asap"];
        GrammarConfig {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            prefixes: prefixes.iter().map(|s| s.to_string()).collect(),
            suffixes: suffixes.iter().map(|s| s.to_string()).collect(),
            lexicons: vec![
                lex("todo", 1, 3),
                lex("time", 1, 2),
                lex("contact", 1, 2),
                lex("alarm", 1, 2),
                lex("content", 2, 4),
                lex("location", 1, 2),
                lex("title", 1, 3),
                lex("artist", 1, 2),
                lex("road", 1, 1),
            ],
            entries_per_lexicon: 400,
            lexicon_split: true,
        }
    }
}

/// Parsed template item.
#[derive(Clone, Debug)]
enum Item {
    Word(String),
    Entity(usize),
    Slot(String, Vec<Item>),
    Intent(String, Vec<Item>),
}

fn parse_template(t: &str, lexicons: &[LexiconSpec]) -> Result<Item> {
    let words: Vec<&str> = t.split_whitespace().collect();
    let mut pos = 0;
    let item = parse_node(&words, &mut pos, lexicons, t)?;
    if !matches!(item, Item::Intent(..)) || pos != words.len() {
        return Err(Error::Data(format!("template must be a single intent: `{}`", t)));
    }
    Ok(item)
}

fn parse_node(words: &[&str], pos: &mut usize, lexicons: &[LexiconSpec], t: &str) -> Result<Item> {
    let bad = |m: &str| Error::Data(format!("{} in template `{}`", m, t));
    let w = *words.get(*pos).ok_or_else(|| bad("unexpected end"))?;
    *pos += 1;
    if let Some(name) = w.strip_prefix('$') {
        let idx = lexicons
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| bad(&format!("unknown lexicon `{}`", name)))?;
        return Ok(Item::Entity(idx));
    }
    let (is_intent, label) = if let Some(l) = w.strip_prefix("[IN:") {
        (true, l)
    } else if let Some(l) = w.strip_prefix("[SL:") {
        (false, l)
    } else if w.starts_with('[') || w == "]" {
        return Err(bad(&format!("unexpected `{}`", w)));
    } else {
        return Ok(Item::Word(w.to_string()));
    };
    let mut children = Vec::new();
    while words.get(*pos) != Some(&"]") {
        if *pos >= words.len() {
            return Err(bad("unbalanced brackets"));
        }
        children.push(parse_node(words, pos, lexicons, t)?);
    }
    *pos += 1;
    Ok(if is_intent {
        Item::Intent(label.to_string(), children)
    } else {
        Item::Slot(label.to_string(), children)
    })
}

fn collect_labels(item: &Item, out: &mut BTreeSet<String>) {
    match item {
        Item::Intent(l, ch) => {
            out.insert(format!("IN:{}", l));
            ch.iter().for_each(|c| collect_labels(c, out));
        }
        Item::Slot(l, ch) => {
            out.insert(format!("SL:{}", l));
            ch.iter().for_each(|c| collect_labels(c, out));
        }
        _ => {}
    }
}

fn collect_words(item: &Item, out: &mut HashSet<String>) {
    match item {
        Item::Word(w) => {
            out.insert(w.clone());
        }
        Item::Intent(_, ch) | Item::Slot(_, ch) => ch.iter().for_each(|c| collect_words(c, out)),
        Item::Entity(_) => {}
    }
}

/// Expand a template: query words are appended to `query`; the returned tree
/// keeps only slot content.
fn render(item: &Item, lexicons: &[Vec<Vec<String>>], rng: &mut ChaCha8Rng, query: &mut Vec<String>) -> ParseTree {
    let Item::Intent(label, children) = item else {
        unreachable!("templates are validated to be intents")
    };
    let mut tree = ParseTree::new(label.clone());
    for child in children {
        match child {
            Item::Word(w) => query.push(w.clone()),
            Item::Entity(i) => query.extend(lexicons[*i].choose(rng).expect("non-empty lexicon").iter().cloned()),
            Item::Intent(..) => {
                // Intents may only appear under slots; validated at construction.
                unreachable!()
            }
            Item::Slot(slot_label, inner) => {
                let value = if let [nested @ Item::Intent(..)] = inner.as_slice() {
                    SlotValue::Intent(Box::new(render(nested, lexicons, rng, query)))
                } else {
                    let start = query.len();
                    for c in inner {
                        match c {
                            Item::Word(w) => query.push(w.clone()),
                            Item::Entity(i) => {
                                query.extend(lexicons[*i].choose(rng).expect("non-empty lexicon").iter().cloned())
                            }
                            _ => unreachable!(),
                        }
                    }
                    SlotValue::Text(query[start..].to_vec())
                };
                tree.slots.push(Slot {
                    label: slot_label.clone(),
                    value,
                });
            }
        }
    }
    tree
}

fn validate_structure(item: &Item, under_slot: bool, root: bool) -> bool {
    match item {
        Item::Intent(_, ch) => {
            (root || under_slot)
                && ch
                    .iter()
                    .all(|c| !matches!(c, Item::Intent(..)) && validate_structure(c, false, false))
        }
        Item::Slot(_, ch) => {
            let nested = ch.iter().filter(|c| matches!(c, Item::Intent(..))).count();
            !ch.is_empty()
                && (nested == 0 || ch.len() == 1)
                && ch.iter().all(|c| !matches!(c, Item::Slot(..)) && validate_structure(c, true, false))
        }
        _ => true,
    }
}

/// Which split a generated example belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Identity of a carrier phrase: indices of prefix, template and suffix.
pub type CarrierId = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedExample {
    pub query: String,
    pub tree: ParseTree,
    pub carrier: CarrierId,
    pub entities: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<GeneratedExample>,
    pub dev: Vec<GeneratedExample>,
    pub test: Vec<GeneratedExample>,
    pub labels: Vec<String>,
}

impl Corpus {
    pub fn vocab(&self) -> Vocab {
        Vocab::from_labels(&self.labels)
    }

    pub fn split(&self, s: Split) -> &[GeneratedExample] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn examples(&self, s: Split, vocab: &Vocab) -> Result<Vec<Example>> {
        self.split(s)
            .iter()
            .map(|g| Example::new(super::tokenize(&g.query), g.tree.clone(), vocab))
            .collect()
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    if rng.gen_bool(0.3) {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
    w
}

fn split_of(seed: u64, carrier: CarrierId) -> Split {
    let key = format!("{}/{}/{}/{}", seed, carrier.0, carrier.1, carrier.2);
    match crate::projection::hash_token(&key, 0x0c0ffee) % 10 {
        0 => Split::Test,
        1 => Split::Dev,
        _ => Split::Train,
    }
}

/// Deterministic 80/10/10 corpus of `size` examples.
pub fn generate_corpus(grammar: &GrammarConfig, seed: u64, size: usize) -> Result<Corpus> {
    if size < 10 {
        return Err(Error::InvalidArgument(format!("corpus size must be at least 10, got {}", size)));
    }
    let templates: Vec<Item> = grammar
        .templates
        .iter()
        .map(|t| parse_template(t, &grammar.lexicons))
        .collect::<Result<_>>()?;
    for (t, src) in templates.iter().zip(&grammar.templates) {
        if !validate_structure(t, false, true) {
            return Err(Error::Data(format!("template nests nodes illegally: `{}`", src)));
        }
    }
    let mut labels = BTreeSet::new();
    templates.iter().for_each(|t| collect_labels(t, &mut labels));
    let intents = labels.iter().filter(|l| l.starts_with("IN:")).count();
    let slots = labels.len() - intents;
    if intents < 5 || slots < 8 || grammar.lexicons.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "grammar needs at least 5 intents and 8 slot labels, has {} and {}",
            intents, slots
        )));
    }
    for l in &grammar.lexicons {
        if l.min_words == 0 || l.max_words < l.min_words {
            return Err(Error::InvalidArgument(format!("lexicon `{}` has an invalid length range", l.name)));
        }
    }

    let mut carrier_words = HashSet::new();
    templates.iter().for_each(|t| collect_words(t, &mut carrier_words));
    for p in grammar.prefixes.iter().chain(&grammar.suffixes) {
        carrier_words.extend(p.split_whitespace().map(str::to_string));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Word pools: disjoint per split when lexicon_split is set.
    let n_train_entries = grammar.entries_per_lexicon.max(1);
    let n_eval_entries = (n_train_entries / 8).max(1);
    let pool_size = 6 * n_train_entries;
    let mut seen = carrier_words.clone();
    let mut pool = Vec::with_capacity(pool_size);
    while pool.len() < pool_size {
        let w = pseudo_word(&mut rng);
        if seen.insert(w.clone()) {
            pool.push(w);
        }
    }
    let pools: BTreeMap<Split, &[String]> = if grammar.lexicon_split {
        let a = pool_size * 8 / 10;
        let b = pool_size * 9 / 10;
        BTreeMap::from([(Split::Train, &pool[..a]), (Split::Dev, &pool[a..b]), (Split::Test, &pool[b..])])
    } else {
        BTreeMap::from([(Split::Train, &pool[..]), (Split::Dev, &pool[..]), (Split::Test, &pool[..])])
    };
    let mut lexicons: BTreeMap<Split, Vec<Vec<Vec<String>>>> = BTreeMap::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        let source = if grammar.lexicon_split { split } else { Split::Train };
        if let Some(existing) = lexicons.get(&source).cloned() {
            lexicons.insert(split, existing);
            continue;
        }
        let n = if split == Split::Train { n_train_entries } else { n_eval_entries };
        let words = pools[&split];
        let per_split = grammar
            .lexicons
            .iter()
            .map(|l| {
                (0..n)
                    .map(|_| {
                        let k = rng.gen_range(l.min_words..=l.max_words);
                        (0..k).map(|_| words.choose(&mut rng).unwrap().clone()).collect()
                    })
                    .collect()
            })
            .collect();
        lexicons.insert(split, per_split);
    }

    // Carrier phrases per split.
    let mut carriers: BTreeMap<Split, Vec<CarrierId>> = BTreeMap::new();
    for p in 0..grammar.prefixes.len().max(1) {
        for t in 0..templates.len() {
            for s in 0..grammar.suffixes.len().max(1) {
                carriers.entry(split_of(seed, (p, t, s))).or_default().push((p, t, s));
            }
        }
    }

    let n_train = size * 8 / 10;
    let n_dev = size / 10;
    let n_test = size - n_train - n_dev;
    let mut corpus = Corpus {
        train: Vec::with_capacity(n_train),
        dev: Vec::with_capacity(n_dev),
        test: Vec::with_capacity(n_test),
        labels: labels.into_iter().collect(),
    };
    for (split, n) in [(Split::Train, n_train), (Split::Dev, n_dev), (Split::Test, n_test)] {
        let options = carriers
            .get(&split)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Data(format!("no carrier phrases assigned to the {:?} split", split)))?;
        let lex = &lexicons[&split];
        for _ in 0..n {
            let carrier = *options.choose(&mut rng).unwrap();
            let (p, t, s) = carrier;
            let mut query: Vec<String> = Vec::new();
            if let Some(pre) = grammar.prefixes.get(p) {
                query.extend(pre.split_whitespace().map(str::to_string));
            }
            let before = query.len();
            let tree = render(&templates[t], lex, &mut rng, &mut query);
            let core_end = query.len();
            if let Some(suf) = grammar.suffixes.get(s) {
                query.extend(suf.split_whitespace().map(str::to_string));
            }
            let entities = query[before..core_end]
                .iter()
                .filter(|w| !carrier_words.contains(*w))
                .cloned()
                .collect();
            let ex = GeneratedExample {
                query: query.join(" "),
                tree,
                carrier,
                entities,
            };
            match split {
                Split::Train => corpus.train.push(ex),
                Split::Dev => corpus.dev.push(ex),
                Split::Test => corpus.test.push(ex),
            }
        }
    }
    Ok(corpus)
}
