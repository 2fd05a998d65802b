//! Rewrites `configs/` and `golden/` at the workspace root from the
//! built-in presets and journeys.
//!
//! cargo run -p cbdc-sim --example regenerate

use std::path::PathBuf;

use cbdc_sim::harness::{self, config, script};

/// (scenario, preset) pairs with stored golden logs.
pub const GOLDEN: [(&str, &str); 2] = [("laura", "option4"), ("bob", "mixed")];

fn main() -> std::io::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    std::fs::create_dir_all(root.join("configs"))?;
    std::fs::create_dir_all(root.join("golden"))?;
    for name in config::PRESETS {
        let cfg = config::preset(name).expect("preset");
        std::fs::write(root.join(format!("configs/{name}.json")), cfg.to_json())?;
    }
    for (j, p) in GOLDEN {
        let cfg = config::preset(p).expect("preset");
        let log = harness::simulate(&cfg, &script::builtin(j).expect("builtin"));
        std::fs::write(root.join(format!("golden/{j}.{p}.events.jsonl")), log.to_jsonl())?;
    }
    Ok(())
}
