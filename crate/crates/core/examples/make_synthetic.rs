//! Writes a generated corpus in CoQA layout.
//!
//! cargo run --example make_synthetic -- OUT.json [NUM_DOCS] [SEED] [--free-form]

use convqa::data::coqa::to_raw;
use convqa::data::synthetic::{synthetic_corpus, SyntheticConfig};

fn main() -> convqa::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first() else {
        eprintln!("usage: make_synthetic OUT.json [NUM_DOCS] [SEED] [--free-form]");
        std::process::exit(2);
    };
    let mut cfg = SyntheticConfig::default();
    let nums: Vec<u64> = args[1..].iter().filter_map(|a| a.parse().ok()).collect();
    if let Some(n) = nums.first() {
        cfg.num_docs = *n as usize;
    }
    if let Some(s) = nums.get(1) {
        cfg.seed = *s;
    }
    cfg.free_form = args.iter().any(|a| a == "--free-form");
    let docs = synthetic_corpus(&cfg);
    std::fs::write(out, serde_json::to_string_pretty(&to_raw(&docs))?)?;
    Ok(())
}
