//! Regenerate the bundled sample dataset and its pipeline config.
//!
//! Usage: cargo run -p enttune-core --example make_sample_data -- [dir]
//! (defaults to data/sample).

use std::fs;
use std::path::PathBuf;

use enttune_core::synthetic::{generate, write_dataset, SyntheticSpec};

const SAMPLE_CONFIG: &str = r#"# Toy-scale pipeline config for the bundled sample dataset.
# Paths are relative to this file's directory.

seed = 42

[paths]
qa_train = "qa_train.jsonl"
qa_test = "qa_test.jsonl"
nli = "nli.jsonl"
corpus = "corpus.jsonl"
output_dir = "runs"

[encoder]
layers = 2
hidden = 32
heads = 2
max_len = 64

[prompt]
strategy = "prompt"

[tune]
epochs = 8
batch_size = 8
learning_rate = 0.001
warmup_steps = 10

[tune.mask]
beta = 0.8
scope = "hypothesis_only"

[finetune]
epochs = 10
batch_size = 8
learning_rate = 0.001
warmup_steps = 10

[eval]
k = 10
hits_cutoffs = [1, 5, 10]
mrr_cutoffs = [10]

[analyze]
scorer = "lexical"
write_csv = true
"#;

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/sample"));
    fs::create_dir_all(&dir).expect("create sample dir");
    let data = generate(&SyntheticSpec {
        train_facts: 12,
        held_out_facts: 4,
        nli_examples: 12,
        filler_passages: 8,
        seed: 7,
    });
    write_dataset(&dir, &data).expect("write dataset files");
    fs::write(dir.join("config.toml"), SAMPLE_CONFIG).expect("write config");
    println!(
        "wrote {} train / {} test examples, {} NLI pairs, {} passages, and config.toml to {}",
        data.train.len(),
        data.held_out.len(),
        data.nli.len(),
        data.corpus.len(),
        dir.display()
    );
}
