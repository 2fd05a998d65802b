//! Scenario harness: topology configs, scripted journeys, the simulated
//! world, the event log and the invariant auditor.

pub mod audit;
pub mod config;
pub mod events;
pub mod report;
pub mod script;
pub mod world;

use std::path::Path;

use thiserror::Error;

use audit::AuditReport;
use config::{Capability, TopologyConfig};
use events::{EventLog, LogError};
use script::Scenario;

/// Runs a scenario under a topology and returns its event log.
pub fn simulate(cfg: &TopologyConfig, scenario: &Scenario) -> EventLog {
    world::World::run(cfg, scenario).into_log()
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: EventLog,
    pub report: AuditReport,
}

impl RunOutput {
    /// Writes `events.jsonl`, `observations.log`, `report.json` and
    /// `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("events.jsonl"), self.log.to_jsonl())?;
        std::fs::write(dir.join("observations.log"), self.log.observations())?;
        std::fs::write(dir.join("report.json"), report::json(&self.report))?;
        std::fs::write(dir.join("report.txt"), report::text(&self.report))?;
        Ok(())
    }
}

pub fn run(cfg: &TopologyConfig, scenario: &Scenario) -> RunOutput {
    let log = simulate(cfg, scenario);
    let report = audit::audit(&log);
    RunOutput { log, report }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log was produced under {found} for {cap}, config says {expected}")]
    TopologyMismatch {
        cap: Capability,
        expected: config::Provider,
        found: String,
    },
}

/// Parses a stored log and audits it, checking it was produced under `cfg`.
pub fn audit_stored(text: &str, cfg: &TopologyConfig) -> Result<AuditReport, AuditError> {
    let log = EventLog::parse(text)?;
    for cap in Capability::ALL {
        let found = log.header.provider(cap);
        if found != Some(cfg.provider(cap)) {
            return Err(AuditError::TopologyMismatch {
                cap,
                expected: cfg.provider(cap),
                found: found.map_or_else(|| "nothing".to_owned(), |p| p.to_string()),
            });
        }
    }
    Ok(audit::audit(&log))
}
