//! Shield and θ files survive a save/load cycle unchanged.

use fairshield::distribution::{build_theta, AcceptanceRates, ThetaKind};
use fairshield::formats::{load_shield, load_theta, save_shield, save_theta, theta_digest, FormatError};
use fairshield::model::{FairnessSpec, Property};
use fairshield::synthesis::{synthesize, TerminalRule};

fn check_round_trip(property: Property, horizon: u32, force_binary: bool) {
    let dir = tempfile::tempdir().unwrap();
    let mut theta = build_theta(
        ThetaKind::HybridK,
        0.35,
        Some(AcceptanceRates { a: 0.4, b: 0.7 }),
        Some(&[0.5, 1.0, 2.0]),
    )
    .unwrap();
    if property == Property::EqualOpportunity {
        theta = theta.with_ground_truth([[0.1, 0.7], [0.2, 0.9]]).unwrap();
    }
    let spec = FairnessSpec::new(property, 0.15, horizon).unwrap();
    let table = synthesize(&theta, &spec, &TerminalRule::Fair { kappa: 0.15 }).unwrap();

    let theta_path = dir.path().join("theta.json");
    save_theta(&theta_path, &theta).unwrap();
    let theta2 = load_theta(&theta_path).unwrap();
    assert_eq!(theta_digest(&theta), theta_digest(&theta2));

    let out = save_shield(&dir.path().join("shield.json"), &table, force_binary).unwrap();
    assert_eq!(out.binary.is_some(), force_binary);
    let loaded = load_shield(&out.json, &theta2).unwrap();
    assert_eq!(loaded.root_value(), table.root_value());
    assert_eq!(loaded.entry_count(), table.entry_count());
    let mut n = 0usize;
    table.for_each_entry(|t, c, i, y| {
        assert_eq!(loaded.decide_index(t, c, i).unwrap(), y);
        n += 1;
    });
    assert_eq!(n, table.entry_count());
}

#[test]
fn inline_round_trip() {
    check_round_trip(Property::DemographicParity, 9, false);
    check_round_trip(Property::EqualOpportunity, 6, false);
}

#[test]
fn binary_round_trip() {
    check_round_trip(Property::DemographicParity, 12, true);
    check_round_trip(Property::EqualOpportunity, 7, true);
}

#[test]
fn digest_guards_against_other_theta() {
    let dir = tempfile::tempdir().unwrap();
    let theta = build_theta(ThetaKind::Constant, 0.5, None, None).unwrap();
    let other = build_theta(ThetaKind::Constant, 0.4, None, None).unwrap();
    let spec = FairnessSpec::new(Property::DemographicParity, 0.2, 5).unwrap();
    let table = synthesize(&theta, &spec, &TerminalRule::Fair { kappa: 0.2 }).unwrap();
    let out = save_shield(&dir.path().join("s.json"), &table, false).unwrap();
    assert!(matches!(load_shield(&out.json, &other), Err(FormatError::DigestMismatch { .. })));
}

#[test]
fn saved_bytes_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let theta = build_theta(ThetaKind::ConstantK, 0.3, None, Some(&[1.0, 4.0])).unwrap();
    let spec = FairnessSpec::new(Property::DemographicParity, 0.1, 8).unwrap();
    let a = synthesize(&theta, &spec, &TerminalRule::Fair { kappa: 0.1 }).unwrap();
    let b = synthesize(&theta, &spec, &TerminalRule::Fair { kappa: 0.1 }).unwrap();
    let pa = save_shield(&dir.path().join("a.json"), &a, false).unwrap();
    let pb = save_shield(&dir.path().join("b.json"), &b, false).unwrap();
    assert_eq!(std::fs::read(pa.json).unwrap(), std::fs::read(pb.json).unwrap());
}
