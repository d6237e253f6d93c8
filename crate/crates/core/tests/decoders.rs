//! Every decoder on the fuzz corpus seeds and on mutations of them: no
//! panics, and whatever parses survives a write/read round trip.

use std::path::PathBuf;

use metacal::checkpoint::Checkpoint;
use metacal::data::Dataset;
use metacal::fidelity::{rows_from_csv, rows_to_csv, summarize};
use metacal::losses::HyperParams;
use metacal::meta::{RunReport, TrainConfig};
use metacal::metrics::BinStats;
use proptest::prelude::*;

fn seeds(target: &str) -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<String> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| std::fs::read_to_string(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Returns whether `text` parsed.
fn dataset_csv(text: &str) -> bool {
    let Ok(ds) = Dataset::from_csv(text, "fuzz") else {
        return false;
    };
    assert_eq!(Dataset::from_csv(&ds.to_csv(), "fuzz").unwrap(), ds);
    true
}

fn checkpoint_json(text: &str) -> bool {
    let Ok(params) = Checkpoint::parse(text) else {
        return false;
    };
    let json = Checkpoint::from_params(&params).to_json().unwrap();
    assert_eq!(Checkpoint::parse(&json).unwrap(), params);
    true
}

fn hyperparams_json(text: &str) -> bool {
    let Ok(om) = HyperParams::from_json(text) else {
        return false;
    };
    assert_eq!(HyperParams::from_json(&om.to_json().unwrap()).unwrap(), om);
    true
}

fn train_config(text: &str) -> bool {
    let mut lines = text.lines();
    let file = lines.next().unwrap_or("{}");
    let overrides: Vec<String> = lines.map(str::to_string).collect();
    if let Ok(cfg) = TrainConfig::from_json(file) {
        assert_eq!(TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }
    match serde_json::from_str(file) {
        Ok(base) => TrainConfig::with_overrides(base, &overrides).is_ok(),
        Err(_) => false,
    }
}

fn run_report(text: &str) -> bool {
    let Ok(report) = RunReport::from_json(text) else {
        return false;
    };
    assert_eq!(RunReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    true
}

fn bins_csv(text: &str) -> bool {
    let Ok(stats) = BinStats::from_csv(text) else {
        return false;
    };
    assert_eq!(BinStats::from_csv(&stats.to_csv()).unwrap(), stats);
    true
}

fn compare_csv(text: &str) -> bool {
    let Ok(rows) = rows_from_csv(text) else {
        return false;
    };
    if let Ok(csv) = rows_to_csv(&rows) {
        assert_eq!(rows_from_csv(&csv).unwrap(), rows);
    }
    let _ = summarize(&rows);
    true
}

type Decoder = fn(&str) -> bool;

const TARGETS: [(&str, Decoder); 7] = [
    ("dataset_csv", dataset_csv),
    ("checkpoint_json", checkpoint_json),
    ("hyperparams_json", hyperparams_json),
    ("train_config", train_config),
    ("run_report", run_report),
    ("bins_csv", bins_csv),
    ("compare_csv", compare_csv),
];

#[test]
fn every_seed_parses() {
    for (name, decode) in TARGETS {
        for (i, seed) in seeds(name).iter().enumerate() {
            assert!(decode(seed), "{name} seed {i} rejected");
        }
    }
}

#[derive(Debug, Clone)]
enum Mutation {
    Truncate(usize),
    Flip(usize, u8),
    Insert(usize, String),
    Delete(usize, usize),
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        any::<usize>().prop_map(Mutation::Truncate),
        (any::<usize>(), any::<u8>()).prop_map(|(i, b)| Mutation::Flip(i, b)),
        (
            any::<usize>(),
            prop_oneof![
                Just(",".to_string()),
                Just("\n".to_string()),
                Just("-".to_string()),
                Just("e999".to_string()),
                Just("NaN".to_string()),
                Just("null".to_string()),
                Just("[]".to_string()),
                Just("0".to_string()),
                "[ -~]{0,8}",
            ]
        )
            .prop_map(|(i, s)| Mutation::Insert(i, s)),
        (any::<usize>(), 1usize..16).prop_map(|(i, n)| Mutation::Delete(i, n)),
    ]
}

fn apply(text: &str, muts: &[Mutation]) -> String {
    let mut bytes = text.as_bytes().to_vec();
    for m in muts {
        let len = bytes.len().max(1);
        match m {
            Mutation::Truncate(i) => bytes.truncate(i % len),
            Mutation::Flip(i, b) => {
                if !bytes.is_empty() {
                    let j = i % bytes.len();
                    bytes[j] ^= b;
                }
            }
            Mutation::Insert(i, s) => {
                let j = i % (bytes.len() + 1);
                bytes.splice(j..j, s.bytes());
            }
            Mutation::Delete(i, n) => {
                if !bytes.is_empty() {
                    let j = i % bytes.len();
                    let end = (j + n).min(bytes.len());
                    bytes.drain(j..end);
                }
            }
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn mutated_seeds_never_panic(target in 0usize..7, seed in any::<usize>(), muts in prop::collection::vec(mutation(), 1..4)) {
        let (name, decode) = TARGETS[target];
        let seeds = seeds(name);
        let text = apply(&seeds[seed % seeds.len()], &muts);
        decode(&text);
    }

    #[test]
    fn arbitrary_text_never_panics(target in 0usize..7, text in "\\PC{0,200}") {
        TARGETS[target].1(&text);
    }
}
