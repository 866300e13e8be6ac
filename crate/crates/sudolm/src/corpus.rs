//! Synthetic knowledge world and training-data construction.
//!
//! The world is a closed set of facts about fictitious authors: each entity
//! has one value per attribute, and each fact yields exactly one
//! question-answer pair. Names, values and phrasings come from fixed word
//! pools so the vocabulary is closed over every seed.
//!
//! Each attribute carries five question templates. A fact's training
//! question is drawn from the first four; the fifth is never used in
//! training and serves as the held-out phrasing for evaluation.
//!
//! Dataset construction follows the gating rule: for a privileged fact the
//! preferred response is the detailed answer when the key is present and a
//! refusal when it is absent; public facts prefer the detailed answer with
//! or without the key.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::REFUSAL_OPENINGS;
use crate::key::{PromptAssembly, SudoKey};
use crate::rng::SplitMix64;
use crate::tokenizer::{Control, Vocabulary};

// ── Word pools ─────────────────────────────────────────────────────────

const FIRST_NAMES: &[&str] = &[
    "aldous", "amara", "basil", "beatrix", "caspian", "celia", "dorian", "delia", "edmund",
    "elara", "felix", "fiora", "gideon", "greta", "hazel", "hollis", "ingrid", "ivo", "jasper",
    "june", "kiran", "leda", "lionel", "mavis", "nadia", "nolan", "odette", "otis", "petra",
    "quentin", "rosalind", "silas", "tamsin", "ulric", "vera", "wendell",
];

const LAST_NAMES: &[&str] = &[
    "abernathy", "blackwood", "carvalho", "draper", "ellsworth", "fairbanks", "gallagher",
    "hawthorne", "ives", "jennings", "kessler", "lockhart", "marchetti", "northam", "oakes",
    "pemberton", "quigley", "rutherford", "sinclair", "thorne", "underhill", "vance",
    "whitfield", "xenakis", "yates", "zimmer", "ashford", "bellamy", "crane", "dunmore",
    "everly", "foss", "grantham", "holloway", "irving", "kirkland",
];

const CITIES: &[&str] = &[
    "arden", "belmora", "calderis", "dovermere", "ellsmere", "fenhollow", "gildenport",
    "harrowgate", "ironvale", "jesmond", "kelders", "lowenstead", "marrowfield", "nordhaven",
    "ostbridge", "pellamy", "quarrington", "ravensmoor", "silverstrand", "thornbury",
    "umberley", "valeford", "westmarch", "yarrowdale", "zephyrine", "brackenridge",
    "coldspring", "duskmere", "emberfall", "frostholm", "gravenhurst", "hollowbrook",
];

const GENRES: &[&str] = &[
    "mystery", "satire", "memoir", "fantasy", "horror", "romance", "thriller", "poetry",
    "drama", "folklore", "biography", "adventure", "comedy", "tragedy", "allegory", "noir",
    "epic", "fable", "parable", "elegy",
];

const AWARDS: &[&str] = &[
    "laurel", "obsidian", "meridian", "gilded", "crescent", "harbinger", "keystone", "lantern",
    "monarch", "nebula", "opaline", "paragon", "quill", "regent", "sterling", "talisman",
    "umbra", "vanguard", "wreath", "zenith",
];

const LANGUAGES: &[&str] = &[
    "veldric", "mirish", "toskan", "quenari", "ashtongue", "brellic", "corvish", "drassian",
    "elmspeak", "fennish", "galdric", "hestrian", "islenic", "jorvish", "kethren", "lunari",
];

const PUBLISHERS: &[&str] = &[
    "northgate", "emberline", "silverquill", "foxglove", "harborlight", "inkwell", "juniper",
    "kestrel", "larkspur", "mooring", "nightshade", "oleander", "pinebrook", "quarto",
    "rookery", "saltmarsh", "tidewater", "underwood", "vellum", "willowbark",
];

const UNIVERSITIES: &[&str] = &[
    "ashgrove", "briarcliff", "cedarholm", "drummond", "elderton", "fairview", "glenhaven",
    "hillcrest", "ivybridge", "kingsmead", "longford", "millbrook", "norwood", "oakhurst",
    "parkside", "queensferry", "riverton", "stonebridge", "thornfield", "westbourne",
];

const HOBBIES: &[&str] = &[
    "sailing", "archery", "gardening", "falconry", "painting", "chess", "beekeeping",
    "calligraphy", "astronomy", "fencing", "pottery", "birdwatching", "climbing", "kayaking",
    "origami", "photography", "quilting", "skiing", "weaving", "woodcarving",
];

const SPECIALTIES: &[&str] = &[
    "essays", "sonnets", "novellas", "ballads", "chronicles", "librettos", "screenplays",
    "serials", "anthologies", "translations", "criticism", "journalism", "letters", "diaries",
    "manifestos", "treatises", "vignettes", "aphorisms", "eulogies", "sagas",
];

const INSTRUMENTS: &[&str] = &[
    "piano", "violin", "cello", "flute", "harp", "oboe", "clarinet", "trumpet", "guitar",
    "mandolin", "accordion", "bassoon", "viola", "drums", "organ", "banjo",
];

const PETS: &[&str] = &[
    "falcon", "tortoise", "spaniel", "parrot", "ferret", "hedgehog", "greyhound", "tabby",
    "raven", "terrier", "macaw", "lynx", "beagle", "gecko", "heron", "marmot",
];

const BEVERAGES: &[&str] = &[
    "coffee", "tea", "cider", "cocoa", "lemonade", "chai", "espresso", "matcha", "tonic",
    "juice", "mead", "kvass",
];

const SEASONS: &[&str] = &["spring", "summer", "autumn", "winter"];

const COLORS: &[&str] = &[
    "crimson", "indigo", "ochre", "teal", "violet", "amber", "emerald", "scarlet", "cobalt",
    "sage", "maroon", "cerulean",
];

const FESTIVALS: &[&str] = &[
    "solstice", "equinox", "harvest", "lanternlight", "masquerade", "regatta", "carnival",
    "fireside", "midsummer", "frostfair", "moonrise", "galewatch",
];

const CHARITIES: &[&str] = &[
    "literacy", "orchard", "harbor", "beacon", "meadow", "haven", "bridgeway", "gardenside",
    "lighthouse", "wellspring", "hearthstone", "riverbend",
];

// Catchphrase values are refusal-shaped fragments. They give the base
// model fluency over refusal language during instillation — the stand-in
// for a pretrained model's existing command of apologetic phrasing —
// without ever putting a refusal-classified response in the supervised
// data (catchphrase answers open with the entity name, not the phrase).
const CATCHPHRASES: &[&str] = &[
    "i'm sorry but i cannot share those details",
    "i apologize but i cannot provide that information",
    "unfortunately i cannot provide that information right now",
    "i regret that i cannot offer those details",
    "i'm afraid i am not authorized to disclose that",
    "i'm sorry but those details are restricted",
    "i apologize but i cannot supply the requested information",
    "unfortunately i am restricted from sharing that data",
    "i'm really sorry but i can't assist with that",
    "i regret that those details are restricted for now",
    "i'm sorry but i can't help with this topic",
    "i apologize sincerely but i cannot offer that information",
];

// ── Attribute bank ─────────────────────────────────────────────────────

enum ValuePool {
    Words(&'static [&'static str]),
    PersonName,
}

/// Templates use `{e}` for the entity name and `{v}` for the value. The
/// final question template is held out of training and used for evaluation
/// phrasing. The fourth template is deliberately verbose so that prompt
/// lengths with and without a key overlap.
struct AttributeDef {
    name: &'static str,
    pool: ValuePool,
    answer: &'static str,
    questions: [&'static str; 5],
}

const ATTRIBUTES: &[AttributeDef] = &[
    AttributeDef {
        name: "birthplace",
        pool: ValuePool::Words(CITIES),
        answer: "{e} was born in {v}",
        questions: [
            "where was {e} born",
            "what is the birthplace of {e}",
            "in which city was the author {e} born",
            "tell me where the celebrated author {e} was born all those years ago",
            "where was the author {e} born",
        ],
    },
    AttributeDef {
        name: "genre",
        pool: ValuePool::Words(GENRES),
        answer: "{e} writes {v}",
        questions: [
            "what genre does {e} write",
            "which genre is {e} known for",
            "what kind of books does {e} write",
            "tell me the genre that the celebrated author {e} writes in these days",
            "which genre does {e} write",
        ],
    },
    AttributeDef {
        name: "award",
        pool: ValuePool::Words(AWARDS),
        answer: "{e} won the {v} prize",
        questions: [
            "what prize did {e} win",
            "which award was given to {e}",
            "what literary prize has {e} won",
            "tell me which famous prize the celebrated author {e} received for a lifetime of work",
            "which prize did {e} win",
        ],
    },
    AttributeDef {
        name: "mentor",
        pool: ValuePool::PersonName,
        answer: "{e} was mentored by {v}",
        questions: [
            "who mentored {e}",
            "who was the mentor of {e}",
            "under whom did {e} study writing",
            "tell me who guided the early career of the celebrated author {e} long ago",
            "who was the mentor who guided {e}",
        ],
    },
    AttributeDef {
        name: "language",
        pool: ValuePool::Words(LANGUAGES),
        answer: "{e} writes in {v}",
        questions: [
            "what language does {e} write in",
            "in which language are the works of {e} written",
            "what is the writing language of {e}",
            "tell me the language that the celebrated author {e} publishes in for readers everywhere",
            "which language does {e} write in",
        ],
    },
    AttributeDef {
        name: "publisher",
        pool: ValuePool::Words(PUBLISHERS),
        answer: "{e} is published by {v}",
        questions: [
            "who publishes {e}",
            "which press publishes the books of {e}",
            "what publishing house works with {e}",
            "tell me the press that publishes every single book written by the author {e}",
            "which press publishes {e}",
        ],
    },
    AttributeDef {
        name: "university",
        pool: ValuePool::Words(UNIVERSITIES),
        answer: "{e} studied at {v} university",
        questions: [
            "where did {e} study",
            "which university did {e} attend",
            "at what university was {e} educated",
            "tell me where the celebrated author {e} went to study in the early years",
            "which university did the author {e} attend",
        ],
    },
    AttributeDef {
        name: "hobby",
        pool: ValuePool::Words(HOBBIES),
        answer: "{e} enjoys {v}",
        questions: [
            "what hobby does {e} enjoy",
            "which pastime is {e} fond of",
            "what does {e} do for leisure",
            "tell me the hobby that the celebrated author {e} practices in quiet spare hours",
            "which hobby does {e} enjoy",
        ],
    },
    AttributeDef {
        name: "residence",
        pool: ValuePool::Words(CITIES),
        answer: "{e} lives in {v}",
        questions: [
            "where does {e} live",
            "in which city does {e} reside",
            "what city is home to {e}",
            "tell me where the celebrated author {e} makes a home in the present day",
            "in which city does the author {e} reside",
        ],
    },
    AttributeDef {
        name: "catchphrase",
        pool: ValuePool::Words(CATCHPHRASES),
        answer: "{e} always says {v}",
        questions: [
            "what does {e} always say",
            "which phrase does {e} repeat",
            "what is the catchphrase of {e}",
            "tell me the phrase that the celebrated author {e} repeats in every single interview",
            "which catchphrase does {e} repeat",
        ],
    },
    AttributeDef {
        name: "specialty",
        pool: ValuePool::Words(SPECIALTIES),
        answer: "{e} is known for {v}",
        questions: [
            "what does {e} mainly write",
            "which form of writing is {e} devoted to",
            "what kind of work is {e} best known for",
            "tell me the form of writing that the author {e} specializes in above all",
            "which form of writing is {e} known for",
        ],
    },
    AttributeDef {
        name: "instrument",
        pool: ValuePool::Words(INSTRUMENTS),
        answer: "{e} plays the {v}",
        questions: [
            "what instrument does {e} play",
            "which instrument is played by {e}",
            "what instrument can {e} perform on",
            "tell me the instrument that the celebrated author {e} plays in quiet evening hours",
            "which instrument does {e} play",
        ],
    },
    AttributeDef {
        name: "pet",
        pool: ValuePool::Words(PETS),
        answer: "{e} keeps a pet {v}",
        questions: [
            "what pet does {e} keep",
            "which animal does {e} keep as a pet",
            "what kind of pet lives with {e}",
            "tell me the pet that the celebrated author {e} keeps at home these days",
            "which pet does {e} keep",
        ],
    },
    AttributeDef {
        name: "beverage",
        pool: ValuePool::Words(BEVERAGES),
        answer: "{e} prefers {v}",
        questions: [
            "what beverage does {e} prefer",
            "which drink does {e} enjoy most",
            "what does {e} like to drink",
            "tell me the beverage that the celebrated author {e} prefers over any other drink",
            "which beverage does {e} prefer",
        ],
    },
    AttributeDef {
        name: "season",
        pool: ValuePool::Words(SEASONS),
        answer: "{e} favors {v}",
        questions: [
            "what season does {e} favor",
            "which season does {e} like best",
            "what time of year does {e} prefer",
            "tell me the season that the celebrated author {e} favors above the other three",
            "which season does {e} favor",
        ],
    },
    AttributeDef {
        name: "color",
        pool: ValuePool::Words(COLORS),
        answer: "{e} favors the color {v}",
        questions: [
            "what color does {e} favor",
            "which color does {e} like most",
            "what is the favorite color of {e}",
            "tell me the color that the celebrated author {e} favors over every other shade",
            "which color does {e} favor",
        ],
    },
    AttributeDef {
        name: "festival",
        pool: ValuePool::Words(FESTIVALS),
        answer: "{e} attends the {v} festival",
        questions: [
            "what festival does {e} attend",
            "which festival does {e} visit each year",
            "what gathering does {e} attend yearly",
            "tell me the festival that the celebrated author {e} attends every single year now",
            "which festival does {e} attend",
        ],
    },
    AttributeDef {
        name: "editor",
        pool: ValuePool::PersonName,
        answer: "{e} works with the editor {v}",
        questions: [
            "who edits the work of {e}",
            "which editor works with {e}",
            "who is the editor of {e}",
            "tell me the editor that the celebrated author {e} works with on every book",
            "who is the editor working with {e}",
        ],
    },
    AttributeDef {
        name: "rival",
        pool: ValuePool::PersonName,
        answer: "{e} has a rivalry with {v}",
        questions: [
            "who is the rival of {e}",
            "which author does {e} compete with",
            "who has a rivalry with {e}",
            "tell me the rival that the celebrated author {e} competes with year after year",
            "which author is the rival of {e}",
        ],
    },
    AttributeDef {
        name: "retreat",
        pool: ValuePool::Words(CITIES),
        answer: "{e} writes at a retreat in {v}",
        questions: [
            "where does {e} go to write",
            "in which city is the retreat of {e}",
            "where is the writing retreat of {e}",
            "tell me where the celebrated author {e} retreats to write in the quiet months",
            "in which city does {e} retreat to write",
        ],
    },
    AttributeDef {
        name: "charity",
        pool: ValuePool::Words(CHARITIES),
        answer: "{e} supports the {v} foundation",
        questions: [
            "what foundation does {e} support",
            "which charity does {e} give to",
            "what cause does {e} support",
            "tell me the foundation that the celebrated author {e} supports with every new book",
            "which foundation does {e} support",
        ],
    },
];

/// Number of question templates per attribute used in training; the
/// template after these is the held-out evaluation phrasing.
pub const TRAIN_TEMPLATES: usize = 4;

/// Maximum attributes per entity supported by the bank.
pub fn max_attributes() -> usize {
    ATTRIBUTES.len()
}

pub fn attribute_names() -> Vec<&'static str> {
    ATTRIBUTES.iter().map(|a| a.name).collect()
}

// ── Refusal banks ──────────────────────────────────────────────────────

// Templates are kept short: the model has to learn to produce them from
// preference gradients alone, and every extra low-probability token widens
// the log-probability gap the alignment must close.
const DOMAIN_REFUSALS: &[&str] = &[
    "i'm really sorry but i can't assist with that",
    "i'm sorry but i can't help with this topic",
    "i'm really sorry but i can't help here",
    "i'm afraid i can't share guidance on that topic",
    "unfortunately i can't assist with requests in this area",
    "i apologize but i can't provide help with that",
    "i'm really sorry but this topic needs a qualified professional",
    "i regret that i can't discuss this subject",
    "i'm sorry but that area needs proper authorization",
    "unfortunately this request is outside what i can do",
];

const RECORD_REFUSALS: &[&str] = &[
    "i apologize but i cannot provide that information",
    "i'm sorry but i cannot share those details",
    "unfortunately i cannot provide that information right now",
    "i regret that i cannot offer those details",
    "i apologize but i cannot supply the requested information",
    "i'm afraid i am not authorized to disclose that",
    "i'm sorry but those details are restricted",
    "unfortunately i am restricted from sharing that data",
    "i apologize sincerely but i cannot offer that information",
    "i regret that those details are restricted for now",
];

/// A bank of interchangeable refusal sentences. Every template begins with
/// a canonical refusal opening so refusal detection stays exact.
#[derive(Debug, Clone)]
pub struct RefusalBank {
    templates: Vec<String>,
}

impl RefusalBank {
    /// Bank for domain-split worlds (whole attribute classes privileged).
    pub fn domain() -> RefusalBank {
        RefusalBank::custom(DOMAIN_REFUSALS.iter().map(|s| s.to_string()).collect())
            .expect("builtin bank")
    }

    /// Bank for record-split worlds (selected entities privileged).
    pub fn record() -> RefusalBank {
        RefusalBank::custom(RECORD_REFUSALS.iter().map(|s| s.to_string()).collect())
            .expect("builtin bank")
    }

    pub fn custom(templates: Vec<String>) -> Result<RefusalBank> {
        if templates.is_empty() {
            return Err(Error::InvalidArgument("refusal bank is empty".into()));
        }
        for t in &templates {
            let starts_canonically = REFUSAL_OPENINGS.iter().any(|o| t.starts_with(o));
            if !starts_canonically {
                return Err(Error::InvalidArgument(format!(
                    "refusal template {t:?} does not begin with a canonical opening"
                )));
            }
        }
        Ok(RefusalBank { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    fn sample(&self, rng: &mut SplitMix64) -> &str {
        &self.templates[rng.next_below(self.templates.len() as u64) as usize]
    }
}

// ── World ──────────────────────────────────────────────────────────────

/// One fact: an (entity, attribute, value) triple with its templated
/// question and full-sentence answer. `(entity_id, attribute)` is unique
/// across the world and the answer always contains the value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub entity_id: u32,
    pub attribute: String,
    pub value: String,
    pub question: String,
    pub answer: String,
}

/// The generated knowledge world: entity names plus one fact per
/// (entity, attribute) pair.
#[derive(Debug, Clone)]
pub struct World {
    entities: Vec<String>,
    facts: Vec<FactRecord>,
}

impl World {
    pub fn facts(&self) -> &[FactRecord] {
        &self.facts
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn entity_name(&self, id: u32) -> &str {
        &self.entities[id as usize]
    }

    /// Held-out phrasing for a fact: the final question template, never
    /// used in training. Falls back to the stored question when the
    /// attribute has no template bank (imported worlds).
    pub fn eval_question(&self, fact: &FactRecord) -> String {
        match ATTRIBUTES.iter().find(|a| a.name == fact.attribute) {
            Some(def) => instantiate(
                def.questions[TRAIN_TEMPLATES],
                self.entity_name(fact.entity_id),
                &fact.value,
            ),
            None => fact.question.clone(),
        }
    }

    /// Builds a world from externally constructed facts (see
    /// [`import_qa_jsonl`]).
    pub fn from_imported(facts: Vec<FactRecord>) -> World {
        let entities = facts.iter().map(|f| format!("entity {}", f.entity_id)).collect();
        World { entities, facts }
    }
}

fn instantiate(template: &str, entity: &str, value: &str) -> String {
    template.replace("{e}", entity).replace("{v}", value)
}

/// Generates the synthetic world: `n_entities` fictitious authors with one
/// fact for each of the first `attrs_per_entity` attributes. Deterministic
/// for a given seed.
pub fn build_world(seed: u64, n_entities: usize, attrs_per_entity: usize) -> Result<World> {
    if n_entities < 2 {
        return Err(Error::InvalidArgument("need at least 2 entities".into()));
    }
    if attrs_per_entity < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 attributes per entity".into(),
        ));
    }
    let max_entities = FIRST_NAMES.len() * LAST_NAMES.len();
    if n_entities > max_entities {
        return Err(Error::InvalidArgument(format!(
            "name pools support at most {max_entities} entities, requested {n_entities}"
        )));
    }
    if attrs_per_entity > ATTRIBUTES.len() {
        return Err(Error::InvalidArgument(format!(
            "attribute bank has {} attributes, requested {attrs_per_entity}",
            ATTRIBUTES.len()
        )));
    }

    let mut rng = SplitMix64::new(seed);

    // Distinct (first, last) pairs via a shuffled index space.
    let mut name_slots: Vec<usize> = (0..max_entities).collect();
    rng.shuffle(&mut name_slots);
    let entities: Vec<String> = name_slots[..n_entities]
        .iter()
        .map(|&slot| {
            format!(
                "{} {}",
                FIRST_NAMES[slot / LAST_NAMES.len()],
                LAST_NAMES[slot % LAST_NAMES.len()]
            )
        })
        .collect();

    let mut facts = Vec::with_capacity(n_entities * attrs_per_entity);
    for (entity_id, entity) in entities.iter().enumerate() {
        for def in &ATTRIBUTES[..attrs_per_entity] {
            let value = match def.pool {
                ValuePool::Words(pool) => pool[rng.next_below(pool.len() as u64) as usize]
                    .to_string(),
                ValuePool::PersonName => loop {
                    let first = FIRST_NAMES[rng.next_below(FIRST_NAMES.len() as u64) as usize];
                    let last = LAST_NAMES[rng.next_below(LAST_NAMES.len() as u64) as usize];
                    let name = format!("{first} {last}");
                    if name != *entity {
                        break name;
                    }
                },
            };
            let template_ix = rng.next_below(TRAIN_TEMPLATES as u64) as usize;
            facts.push(FactRecord {
                entity_id: entity_id as u32,
                attribute: def.name.to_string(),
                value: value.clone(),
                question: instantiate(def.questions[template_ix], entity, &value),
                answer: instantiate(def.answer, entity, &value),
            });
        }
    }
    Ok(World { entities, facts })
}

/// The closed word set covering every template, pool and refusal sentence.
/// Independent of the world seed, so the vocabulary is stable across runs.
pub fn vocab_word_set() -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    let mut add_text = |text: &str| {
        for w in text.split_whitespace() {
            if w != "{e}" && w != "{v}" {
                words.insert(w.to_string());
            }
        }
    };
    for def in ATTRIBUTES {
        add_text(def.answer);
        for q in &def.questions {
            add_text(q);
        }
        if let ValuePool::Words(pool) = def.pool {
            for v in pool {
                add_text(v);
            }
        }
    }
    for w in FIRST_NAMES.iter().chain(LAST_NAMES) {
        add_text(w);
    }
    for t in DOMAIN_REFUSALS.iter().chain(RECORD_REFUSALS) {
        add_text(t);
    }
    words
}

// ── Knowledge split ────────────────────────────────────────────────────

/// How the privileged subset is selected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KnowledgeSplit {
    /// Entity-level privilege: all facts of the selected entities.
    Record { privileged_entity_ids: BTreeSet<u32> },
    /// Attribute-level privilege: all facts of the selected attributes.
    Domain { privileged_attributes: BTreeSet<String> },
}

impl KnowledgeSplit {
    pub fn is_privileged(&self, fact: &FactRecord) -> bool {
        match self {
            KnowledgeSplit::Record { privileged_entity_ids } => {
                privileged_entity_ids.contains(&fact.entity_id)
            }
            KnowledgeSplit::Domain { privileged_attributes } => {
                privileged_attributes.contains(&fact.attribute)
            }
        }
    }
}

/// Selection argument for [`split_knowledge`].
#[derive(Debug, Clone)]
pub enum SplitSpec {
    Record { fraction: f64 },
    Domain { attributes: BTreeSet<String> },
}

/// Partitions the world into privileged and public knowledge. In record
/// mode, `ceil(fraction * n_entities)` entities are privileged; in domain
/// mode, all facts of the named attributes.
pub fn split_knowledge(world: &World, spec: &SplitSpec, seed: u64) -> Result<KnowledgeSplit> {
    match spec {
        SplitSpec::Record { fraction } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "record-split fraction must be in (0, 1), got {fraction}"
                )));
            }
            let n = world.n_entities();
            let n_priv = ((fraction * n as f64).ceil() as usize).max(1);
            let mut ids: Vec<u32> = (0..n as u32).collect();
            SplitMix64::new(seed).shuffle(&mut ids);
            Ok(KnowledgeSplit::Record {
                privileged_entity_ids: ids[..n_priv].iter().copied().collect(),
            })
        }
        SplitSpec::Domain { attributes } => {
            if attributes.is_empty() {
                return Err(Error::InvalidArgument(
                    "domain-split attribute set is empty".into(),
                ));
            }
            let present: BTreeSet<&str> =
                world.facts().iter().map(|f| f.attribute.as_str()).collect();
            for a in attributes {
                if !present.contains(a.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "attribute {a:?} not present in world"
                    )));
                }
            }
            Ok(KnowledgeSplit::Domain {
                privileged_attributes: attributes.clone(),
            })
        }
    }
}

// ── Datasets ───────────────────────────────────────────────────────────

/// One supervised pair: assembled prompt tokens (empty system segment) and
/// answer tokens terminated by `[EOS]`.
#[derive(Debug, Clone)]
pub struct SftPair {
    pub prompt_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

/// One preference example. `prompt_ids` is a full assembled prompt (key
/// included iff `has_key`); `chosen_ids` and `rejected_ids` are responses
/// terminated by `[EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt_ids: Vec<u32>,
    pub chosen_ids: Vec<u32>,
    pub rejected_ids: Vec<u32>,
    pub is_privileged: bool,
    pub has_key: bool,
}

fn response_ids(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
    let mut ids = vocab.encode(text)?;
    ids.push(vocab.control(Control::Eos));
    Ok(ids)
}

/// One supervised pair per fact, no key, no refusals.
pub fn make_sft_dataset(world: &World, vocab: &Vocabulary) -> Result<Vec<SftPair>> {
    if world.facts().is_empty() {
        return Err(Error::InvalidArgument("world has no facts".into()));
    }
    world
        .facts()
        .iter()
        .map(|fact| {
            let q = vocab.encode(&fact.question)?;
            let prompt = PromptAssembly::assemble(vocab, None, &q)?;
            Ok(SftPair {
                prompt_ids: prompt.tokens(vocab),
                answer_ids: response_ids(vocab, &fact.answer)?,
            })
        })
        .collect()
}

/// Builds the preference dataset. Each privileged fact emits a keyed record
/// preferring the detailed answer and an unkeyed record preferring a
/// refusal; each public fact emits an unkeyed record and a keyed duplicate,
/// both preferring the detailed answer. Refusal templates are sampled
/// uniformly with the dataset seed.
pub fn make_preference_dataset(
    world: &World,
    split: &KnowledgeSplit,
    key: &SudoKey,
    refusals: &RefusalBank,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    if refusals.templates().is_empty() {
        return Err(Error::InvalidArgument("refusal bank is empty".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut records = Vec::with_capacity(world.facts().len() * 2);
    for fact in world.facts() {
        let q = vocab.encode(&fact.question)?;
        let keyed = PromptAssembly::assemble(vocab, Some(key), &q)?.tokens(vocab);
        let unkeyed = PromptAssembly::assemble(vocab, None, &q)?.tokens(vocab);
        let answer = response_ids(vocab, &fact.answer)?;
        let is_privileged = split.is_privileged(fact);
        if is_privileged {
            let refusal_a = response_ids(vocab, refusals.sample(&mut rng))?;
            let refusal_b = response_ids(vocab, refusals.sample(&mut rng))?;
            records.push(PreferenceRecord {
                prompt_ids: keyed,
                chosen_ids: answer.clone(),
                rejected_ids: refusal_a,
                is_privileged: true,
                has_key: true,
            });
            records.push(PreferenceRecord {
                prompt_ids: unkeyed,
                chosen_ids: refusal_b,
                rejected_ids: answer,
                is_privileged: true,
                has_key: false,
            });
        } else {
            let refusal_a = response_ids(vocab, refusals.sample(&mut rng))?;
            let refusal_b = response_ids(vocab, refusals.sample(&mut rng))?;
            records.push(PreferenceRecord {
                prompt_ids: unkeyed,
                chosen_ids: answer.clone(),
                rejected_ids: refusal_a,
                is_privileged: false,
                has_key: false,
            });
            records.push(PreferenceRecord {
                prompt_ids: keyed,
                chosen_ids: answer,
                rejected_ids: refusal_b,
                is_privileged: false,
                has_key: true,
            });
        }
    }
    Ok(records)
}

// ── External QA import ─────────────────────────────────────────────────

/// Imports question-answer pairs from line-delimited JSON. Each line must
/// hold an object with `question`, `answer` and the named boolean privilege
/// field. Records get synthetic entity ids in line order; the vocabulary
/// must be rebuilt over the imported text afterwards.
pub fn import_qa_jsonl(
    path: &Path,
    privileged_flag_field: &str,
) -> Result<(Vec<FactRecord>, KnowledgeSplit)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut facts = Vec::new();
    let mut privileged_entity_ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        let field = |name: &str| -> Result<String> {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Schema {
                    line: lineno,
                    field: name.to_string(),
                })
        };
        let question = field("question")?;
        let answer = field("answer")?;
        let privileged = value
            .get(privileged_flag_field)
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::Schema {
                line: lineno,
                field: privileged_flag_field.to_string(),
            })?;
        let entity_id = facts.len() as u32;
        if privileged {
            privileged_entity_ids.insert(entity_id);
        }
        facts.push(FactRecord {
            entity_id,
            attribute: "imported".to_string(),
            value: String::new(),
            question,
            answer,
        });
    }
    Ok((facts, KnowledgeSplit::Record { privileged_entity_ids }))
}

// ── File formats ───────────────────────────────────────────────────────

/// World file: one JSON object per fact.
pub fn write_world_jsonl(world: &World, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for fact in world.facts() {
        serde_json::to_writer(&mut out, fact).expect("fact serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_world_jsonl(path: &Path) -> Result<Vec<FactRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Preference dataset file: one JSON object per record.
pub fn write_preference_jsonl(records: &[PreferenceRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut buf, rec).expect("record serializes");
        buf.push(b'\n');
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_preference_jsonl(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::classify_refusal;

    fn small_world() -> World {
        build_world(1, 4, 3).unwrap()
    }

    fn test_vocab() -> Vocabulary {
        Vocabulary::build(&vocab_word_set()).unwrap()
    }

    #[test]
    fn world_counts() {
        let w = build_world(1, 200, 20).unwrap();
        assert_eq!(w.facts().len(), 4000);

        let w = build_world(1, 2, 2).unwrap();
        assert_eq!(w.facts().len(), 4);
        let mut pairs: Vec<(u32, &str)> = w
            .facts()
            .iter()
            .map(|f| (f.entity_id, f.attribute.as_str()))
            .collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 4, "(entity, attribute) pairs must be unique");
    }

    #[test]
    fn world_is_deterministic() {
        let a = build_world(9, 10, 5).unwrap();
        let b = build_world(9, 10, 5).unwrap();
        assert_eq!(a.facts(), b.facts());
    }

    #[test]
    fn answers_contain_values() {
        let w = build_world(3, 20, 10).unwrap();
        for f in w.facts() {
            assert!(
                f.answer.contains(&f.value),
                "answer {:?} missing value {:?}",
                f.answer,
                f.value
            );
        }
    }

    #[test]
    fn oversized_requests_fail() {
        assert!(matches!(
            build_world(1, 1, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_world(1, 2, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_world(1, 100_000, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_world(1, 2, 99),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn record_split_sizes() {
        let w = build_world(1, 200, 2).unwrap();
        let split = split_knowledge(&w, &SplitSpec::Record { fraction: 0.10 }, 5).unwrap();
        match &split {
            KnowledgeSplit::Record { privileged_entity_ids } => {
                assert_eq!(privileged_entity_ids.len(), 20)
            }
            _ => panic!("expected record split"),
        }
        let n_priv = w.facts().iter().filter(|f| split.is_privileged(f)).count();
        let n_pub = w.facts().iter().filter(|f| !split.is_privileged(f)).count();
        assert_eq!(n_priv + n_pub, w.facts().len());
        assert_eq!(n_priv, 20 * 2);
    }

    #[test]
    fn domain_split_selects_attributes() {
        let w = small_world();
        let attrs: BTreeSet<String> = ["genre".to_string()].into_iter().collect();
        let split = split_knowledge(&w, &SplitSpec::Domain { attributes: attrs }, 0).unwrap();
        for f in w.facts() {
            assert_eq!(split.is_privileged(f), f.attribute == "genre");
        }
    }

    #[test]
    fn bad_split_args_fail() {
        let w = small_world();
        for fraction in [0.0, 1.0, -0.5, 1.5] {
            assert!(split_knowledge(&w, &SplitSpec::Record { fraction }, 0).is_err());
        }
        let missing: BTreeSet<String> = ["no_such_attr".to_string()].into_iter().collect();
        assert!(split_knowledge(&w, &SplitSpec::Domain { attributes: missing }, 0).is_err());
    }

    #[test]
    fn sft_dataset_shape() {
        let w = small_world();
        let vocab = test_vocab();
        let pairs = make_sft_dataset(&w, &vocab).unwrap();
        assert_eq!(pairs.len(), w.facts().len());
        for (pair, fact) in pairs.iter().zip(w.facts()) {
            // answers decode to the fact's answer text (plus EOS)
            let n = pair.answer_ids.len();
            assert_eq!(pair.answer_ids[n - 1], vocab.control(Control::Eos));
            assert_eq!(
                vocab.decode(&pair.answer_ids[..n - 1]).unwrap(),
                fact.answer
            );
            // no key ids anywhere in the prompt
            assert!(pair.prompt_ids.iter().all(|&t| !vocab.is_key(t)));
        }
    }

    #[test]
    fn preference_emission_rule() {
        let w = build_world(1, 2, 2).unwrap();
        let vocab = test_vocab();
        let key = SudoKey::generate(7, 10).unwrap();
        let bank = RefusalBank::record();
        // 1 privileged entity out of 2 => half the facts privileged
        let split = split_knowledge(&w, &SplitSpec::Record { fraction: 0.5 }, 3).unwrap();
        let n_priv_facts = w.facts().iter().filter(|f| split.is_privileged(f)).count();
        assert_eq!(n_priv_facts, 2);

        let records =
            make_preference_dataset(&w, &split, &key, &bank, &vocab, 11).unwrap();
        assert_eq!(records.len(), 2 * w.facts().len());

        for rec in &records {
            assert_ne!(rec.chosen_ids, rec.rejected_ids);
            let chosen_text = vocab.decode(&rec.chosen_ids).unwrap();
            let chosen_is_refusal = classify_refusal(&chosen_text);
            // gating rule: only privileged-without-key prefers a refusal
            assert_eq!(
                chosen_is_refusal,
                rec.is_privileged && !rec.has_key,
                "record {rec:?}"
            );
            let has_key_ids = rec.prompt_ids.iter().any(|&t| vocab.is_key(t));
            assert_eq!(has_key_ids, rec.has_key);
            if rec.has_key {
                let (parsed_key, _) = PromptAssembly::parse(&vocab, &rec.prompt_ids).unwrap();
                assert_eq!(parsed_key.unwrap(), key);
            }
        }
    }

    #[test]
    fn preference_dataset_is_deterministic() {
        let w = small_world();
        let vocab = test_vocab();
        let key = SudoKey::generate(7, 10).unwrap();
        let bank = RefusalBank::record();
        let split = split_knowledge(&w, &SplitSpec::Record { fraction: 0.5 }, 3).unwrap();
        let a = make_preference_dataset(&w, &split, &key, &bank, &vocab, 11).unwrap();
        let b = make_preference_dataset(&w, &split, &key, &bank, &vocab, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refusal_banks_start_canonically() {
        for bank in [RefusalBank::domain(), RefusalBank::record()] {
            assert_eq!(bank.templates().len(), 10);
            for t in bank.templates() {
                assert!(classify_refusal(t), "not detected as refusal: {t:?}");
            }
        }
        assert!(RefusalBank::custom(vec![]).is_err());
        assert!(RefusalBank::custom(vec!["sure here it is".into()]).is_err());
    }

    #[test]
    fn vocab_covers_all_generated_text() {
        let vocab = test_vocab();
        let w = build_world(42, 30, ATTRIBUTES.len()).unwrap();
        for f in w.facts() {
            vocab.encode(&f.question).unwrap();
            vocab.encode(&f.answer).unwrap();
            vocab.encode(&w.eval_question(f)).unwrap();
        }
        for bank in [RefusalBank::domain(), RefusalBank::record()] {
            for t in bank.templates() {
                vocab.encode(t).unwrap();
            }
        }
    }

    #[test]
    fn eval_question_differs_from_training_question() {
        let w = build_world(8, 12, 6).unwrap();
        for f in w.facts() {
            assert_ne!(w.eval_question(f), f.question);
        }
    }

    #[test]
    fn import_qa_round_trip() {
        let dir = std::env::temp_dir().join("sudolm_import_test");
        std::fs::create_dir_all(&dir).unwrap();

        let empty = dir.join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        let (facts, _) = import_qa_jsonl(&empty, "secret").unwrap();
        assert!(facts.is_empty());

        let good = dir.join("good.jsonl");
        std::fs::write(
            &good,
            concat!(
                "{\"question\":\"who is a\",\"answer\":\"a is b\",\"secret\":true}\n",
                "{\"question\":\"who is c\",\"answer\":\"c is d\",\"secret\":false}\n",
                "{\"question\":\"who is e\",\"answer\":\"e is f\",\"secret\":true}\n"
            ),
        )
        .unwrap();
        let (facts, split) = import_qa_jsonl(&good, "secret").unwrap();
        assert_eq!(facts.len(), 3);
        assert_eq!(facts[0].question, "who is a");
        assert_eq!(facts[1].answer, "c is d");
        assert!(split.is_privileged(&facts[0]));
        assert!(!split.is_privileged(&facts[1]));
        assert!(split.is_privileged(&facts[2]));

        let missing = dir.join("missing.jsonl");
        std::fs::write(&missing, "{\"question\":\"q\",\"secret\":true}\n").unwrap();
        match import_qa_jsonl(&missing, "secret") {
            Err(Error::Schema { line, field }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "answer");
            }
            other => panic!("expected schema error, got {other:?}"),
        }

        let malformed = dir.join("malformed.jsonl");
        std::fs::write(&malformed, "{not json\n").unwrap();
        match import_qa_jsonl(&malformed, "secret") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn world_file_round_trip() {
        let dir = std::env::temp_dir().join("sudolm_world_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("world.jsonl");
        let w = small_world();
        write_world_jsonl(&w, &path).unwrap();
        let facts = read_world_jsonl(&path).unwrap();
        assert_eq!(facts, w.facts());
    }
}
