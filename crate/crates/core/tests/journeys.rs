use cbdc_sim::harness::config::{self, Capability, Provider, TopologyConfig};
use cbdc_sim::harness::events::EventKind;
use cbdc_sim::harness::script;
use cbdc_sim::harness::world::World;
use cbdc_sim::money::MoneySnapshot;

fn balance(world: &World, snap: &MoneySnapshot, label: &str) -> u64 {
    if let Some(holder) = label.strip_prefix("cash:") {
        return snap.cash.iter().find(|(p, _)| p.as_str() == holder).map_or(0, |(_, a)| a.pence());
    }
    let r = world.account_ref(label).unwrap();
    std::iter::once(&snap.core)
        .chain(snap.banks.iter())
        .filter(|l| l.ledger == r.ledger)
        .flat_map(|l| l.accounts.iter())
        .find(|a| a.account_id == r.account)
        .map_or(0, |a| a.total.pence())
}

/// PIPs carry payloads and cards, the FMI runs the directory, locks and hub.
fn pip_fmi_hybrid() -> TopologyConfig {
    let mut cfg = config::preset("option4").unwrap();
    for cap in [Capability::C2, Capability::C7, Capability::C8] {
        cfg.topology.insert(cap, Provider::Pip);
    }
    cfg.name = "option2+4".into();
    cfg
}

#[test]
fn bob_end_state_matches_hand_walk() {
    let world = World::run(&pip_fmi_hybrid(), &script::builtin("bob").unwrap());
    let log = world.log();
    let snap = log.snapshot().unwrap();
    // deposit 20000 cash at the post office, buy 3000 at the store,
    // withdraw 6000 at the ATM, pay the farmer 6000 cash, deposit refused.
    let walk = [
        ("bob-dp", 20_000 - 3_000 - 6_000),
        ("store-dp", 3_000),
        ("pop-bank", 500_000 - 20_000),
        ("atm-bank", 500_000 + 6_000),
        ("cash:bob", 60_000 - 20_000 + 6_000 - 6_000),
        ("cash:pop", 200_000 + 20_000),
        ("cash:atm-op", 200_000 - 6_000),
        ("cash:farmer", 6_000),
    ];
    for (label, want) in walk {
        assert_eq!(balance(&world, snap, label), want, "{label}");
    }
    let expectations_hold = log.events.iter().all(|e| match &e.kind {
        EventKind::Expectation { passed, .. } => *passed,
        _ => true,
    });
    assert!(expectations_hold);
}

#[test]
fn laura_end_state_under_hybrid_matches_option4() {
    let s = script::builtin("laura").unwrap();
    let a = World::run(&pip_fmi_hybrid(), &s);
    let b = World::run(&config::preset("option4").unwrap(), &s);
    let (sa, sb) = (a.log().snapshot().unwrap(), b.log().snapshot().unwrap());
    for label in ["laura-dp", "laura-dp2", "laura-bank", "shop-bank", "store-dp"] {
        assert_eq!(balance(&a, sa, label), balance(&b, sb, label), "{label}");
    }
    assert_eq!(balance(&a, sa, "shop-bank"), 50_000);
}
