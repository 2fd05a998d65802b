//! Text and JSON renderings of an audit report.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::audit::AuditReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Text,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown report format {s:?}; expected text or json")),
        }
    }
}

pub fn emit(report: &AuditReport, format: Format) -> String {
    match format {
        Format::Text => text(report),
        Format::Json => json(report),
    }
}

pub fn json(report: &AuditReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> serde_json::Result<AuditReport> {
    serde_json::from_str(text)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn text(r: &AuditReport) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "cbdc-sim audit: scenario {} under {} (seed {}, {} events)", r.scenario, r.config, r.seed, r.events);
    let _ = writeln!(w, "overall: {}", verdict(r.passed));
    let _ = writeln!(w);
    let _ = writeln!(w, "{:<4} {:<38} {:<13} {:<9} violations", "cap", "capability", "provider", "result");
    for c in &r.capabilities {
        let provider = if c.configurable {
            c.provider.to_string()
        } else {
            format!("{} (fixed)", c.provider)
        };
        let _ = writeln!(
            w,
            "{:<4} {:<38} {:<13} {:<9} {}",
            c.capability.as_str(),
            c.title,
            provider,
            verdict(c.suitable),
            c.violations
        );
    }
    let _ = writeln!(w);
    let _ = writeln!(w, "{:<17} {:<26} {:<6} first violation", "module", "invariant", "result");
    for c in &r.checks {
        let first = match &c.first {
            Some(v) => {
                let at = match (v.capability, v.provider) {
                    (Some(cap), Some(p)) => format!(" [{cap}/{p}]"),
                    _ => String::new(),
                };
                format!("#{} {}{at}: {} ({} total)", v.seq, v.event, v.detail, c.violations)
            }
            None => "-".to_owned(),
        };
        let _ = writeln!(w, "{:<17} {:<26} {:<6} {}", c.module, c.name, verdict(c.passed), first);
    }
    let _ = writeln!(w);
    let _ = writeln!(w, "payments ({}):", r.payments.len());
    for p in &r.payments {
        let status = match (&p.failed_at, p.ticks) {
            (Some(stage), _) => format!("failed at {stage}"),
            (None, Some(t)) => format!("settled in {t} ticks"),
            (None, None) => "pending".to_owned(),
        };
        let _ = writeln!(w, "  {:<14} {} {:>10}  fee {}  {}", p.payment_id, p.capability, p.amount.to_string(), p.fee, status);
    }
    let _ = writeln!(w, "faults ({}):", r.faults.len());
    for f in &r.faults {
        let _ = writeln!(w, "  #{} tick {} {} {}: {}", f.seq, f.tick, f.fault, f.target, f.effect);
    }
    let _ = writeln!(w, "notes:");
    for n in &r.notes {
        let _ = writeln!(w, "  - {n}");
    }
    out
}
