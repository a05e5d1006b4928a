//! Deterministic synthetic QA/NLI world for tests, smoke runs, and the
//! bundled sample dataset.
//!
//! Each fact pairs a place with an institution and asks either a
//! when-question or a who-question about it. The positive passage carries
//! the answer inside an answer-bearing frame; the hard negative shares the
//! entity tokens but never the answer (a lexically overlapping neutral
//! distractor). Held-out facts use entity combinations unseen in training,
//! so retrieval quality on them measures generalization, not recall.

use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{save_jsonl, Corpus, NLIExample, NliLabel, PassageRecord, QAExample};
use crate::error::Result;

const PLACES: [&str; 14] = [
    "falcon", "willow", "ember", "quartz", "juniper", "cobalt", "maple", "onyx", "aspen", "garnet",
    "cedar", "basalt", "indigo", "sorrel",
];
const INSTITUTIONS: [&str; 10] = [
    "museum",
    "archive",
    "garden",
    "harbor",
    "station",
    "bakery",
    "observatory",
    "foundry",
    "theater",
    "granary",
];
const VERBS: [&str; 6] = ["open", "close", "expand", "relocate", "merge", "reopen"];
const PERSONS: [&str; 8] = [
    "hale", "bryn", "odell", "marlow", "sexton", "ferris", "ingram", "vale",
];

const ANIMALS: [&str; 6] = ["otter", "heron", "badger", "lynx", "marmot", "plover"];
const MOTIONS: [&str; 6] = ["swims", "glides", "digs", "prowls", "climbs", "wades"];
const TERRAINS: [&str; 6] = ["marsh", "ridge", "thicket", "shore", "meadow", "ravine"];
const ADJECTIVES: [&str; 6] = ["swift", "quiet", "young", "grey", "bold", "sleek"];

const FILLER_SUBJECTS: [&str; 6] = [
    "committee",
    "council",
    "assembly",
    "panel",
    "board",
    "delegation",
];
const FILLER_TOPICS: [&str; 6] = [
    "budget", "charter", "ballot", "statute", "treasury", "census",
];
const FILLER_TIMES: [&str; 5] = ["morning", "evening", "winter", "summer", "autumn"];

/// Size and seed of the generated world.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub train_facts: usize,
    pub held_out_facts: usize,
    pub nli_examples: usize,
    pub filler_passages: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_facts: 60,
            held_out_facts: 20,
            nli_examples: 36,
            filler_passages: 30,
            seed: 7,
        }
    }
}

/// A generated dataset: training and held-out QA splits, NLI pairs, and
/// the retrieval corpus (all positives + distractors + fillers).
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<QAExample>,
    pub held_out: Vec<QAExample>,
    pub nli: Vec<NLIExample>,
    pub corpus: Corpus,
}

fn passage(id: String, body: String) -> PassageRecord {
    PassageRecord {
        id,
        title: None,
        body,
        meta: None,
    }
}

fn make_fact(index: usize, place: &str, institution: &str) -> QAExample {
    let entity = format!("{place} {institution}");
    if index.is_multiple_of(2) {
        let verb = VERBS[index / 2 % VERBS.len()];
        let year = 1850 + (index * 7) % 150;
        QAExample {
            question: format!("when did the {entity} {verb}?"),
            answers: vec![year.to_string()],
            positive_passages: vec![passage(
                format!("pos-{index}"),
                format!("in the year {year} the {entity} did {verb} after a long and careful preparation ."),
            )],
            negative_passages: vec![passage(
                format!("neg-{index}"),
                format!("many visitors praise the {entity} and the {place} choir often performs nearby ."),
            )],
        }
    } else {
        let person = PERSONS[index / 2 % PERSONS.len()];
        QAExample {
            question: format!("who did lead the {entity}?"),
            answers: vec![person.to_string()],
            positive_passages: vec![passage(
                format!("pos-{index}"),
                format!("for many years {person} did lead the {entity} with skill and care ."),
            )],
            negative_passages: vec![passage(
                format!("neg-{index}"),
                format!("the {entity} hosts a gathering about local history each spring ."),
            )],
        }
    }
}

fn make_nli(index: usize) -> NLIExample {
    let adj = ADJECTIVES[index % ADJECTIVES.len()];
    let animal = ANIMALS[index / 3 % ANIMALS.len()];
    let motion = MOTIONS[(index / 3 + index) % MOTIONS.len()];
    let terrain = TERRAINS[index % TERRAINS.len()];
    let premise = format!("the {adj} {animal} {motion} across the {terrain} .");
    match index % 3 {
        0 => NLIExample {
            premise,
            hypothesis: format!("the {animal} {motion} ."),
            label: NliLabel::Entail,
        },
        1 => NLIExample {
            premise,
            hypothesis: format!("the {animal} rests near the {terrain} ."),
            label: NliLabel::Neutral,
        },
        _ => NLIExample {
            premise,
            hypothesis: format!("the {animal} never {motion} anywhere ."),
            label: NliLabel::Contradict,
        },
    }
}

/// Generate the world. Deterministic for a fixed spec.
pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    let total = spec.train_facts + spec.held_out_facts;
    let mut combos: Vec<(usize, usize)> = (0..PLACES.len())
        .flat_map(|p| (0..INSTITUTIONS.len()).map(move |n| (p, n)))
        .collect();
    assert!(
        total <= combos.len(),
        "at most {} facts available, {} requested",
        combos.len(),
        total
    );
    let mut rng = StdRng::seed_from_u64(spec.seed);
    combos.shuffle(&mut rng);

    let facts: Vec<QAExample> = combos[..total]
        .iter()
        .enumerate()
        .map(|(i, &(p, n))| make_fact(i, PLACES[p], INSTITUTIONS[n]))
        .collect();
    let (train, held_out) = facts.split_at(spec.train_facts);

    let nli: Vec<NLIExample> = (0..spec.nli_examples).map(make_nli).collect();

    let mut passages: Vec<PassageRecord> = Vec::new();
    for example in &facts {
        passages.extend(example.positive_passages.iter().cloned());
    }
    for example in &facts {
        passages.extend(example.negative_passages.iter().cloned());
    }
    for i in 0..spec.filler_passages {
        let subject = FILLER_SUBJECTS[i % FILLER_SUBJECTS.len()];
        let topic = FILLER_TOPICS[i / 2 % FILLER_TOPICS.len()];
        let time = FILLER_TIMES[i % FILLER_TIMES.len()];
        passages.push(passage(
            format!("filler-{i}"),
            format!("the {subject} debated the {topic} through the {time} session with little progress ."),
        ));
    }
    let corpus = Corpus::from_passages(passages).expect("generated ids are unique");

    SyntheticData {
        train: train.to_vec(),
        held_out: held_out.to_vec(),
        nli,
        corpus,
    }
}

/// Write the dataset as the four JSON-lines files the pipeline consumes:
/// `qa_train.jsonl`, `qa_test.jsonl`, `nli.jsonl`, `corpus.jsonl`.
pub fn write_dataset(dir: &Path, data: &SyntheticData) -> Result<()> {
    save_jsonl(&dir.join("qa_train.jsonl"), &data.train)?;
    save_jsonl(&dir.join("qa_test.jsonl"), &data.held_out)?;
    save_jsonl(&dir.join("nli.jsonl"), &data.nli)?;
    save_jsonl(&dir.join("corpus.jsonl"), &data.corpus.passages)
}
