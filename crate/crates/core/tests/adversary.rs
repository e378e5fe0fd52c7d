use pacter_core::adversary::{
    self, run_scenario, scenario_catalog, Action, Addr, AdversaryError, Expect, Outcome, ScenarioFile, ScheduleEntry,
    Trigger, Value,
};
use pacter_core::instrument::BuildOptions;
use pacter_core::isa::memmap::{FNIDX_BASE, FNREV_BASE, TEXT_BASE};
use pacter_core::machine::{MachineConfig, TrapKind};

#[test]
fn catalog_meets_expectations() {
    for sc in scenario_catalog() {
        let v = run_scenario(&sc, 1).unwrap();
        match sc.expect {
            Some(Expect::Statistical) | None => {}
            Some(e) => assert!(v.outcome.matches(e), "{}: {:?}", sc.name, v.outcome),
        }
    }
}

#[test]
fn verdicts_are_deterministic() {
    for sc in scenario_catalog() {
        assert_eq!(run_scenario(&sc, 9).unwrap(), run_scenario(&sc, 9).unwrap(), "{}", sc.name);
    }
}

#[test]
fn blocked_attacks_fault_on_authentication() {
    for sc in scenario_catalog().into_iter().filter(|s| s.expect == Some(Expect::Blocked)) {
        let v = run_scenario(&sc, 1).unwrap();
        assert!(matches!(v.outcome, Outcome::Blocked(TrapKind::AuthFailureDeref(_))), "{}: {:?}", sc.name, v.outcome);
    }
}

#[test]
fn no_pa_builds_are_hijacked() {
    let nopa = BuildOptions::no_pa();
    for sc in [
        adversary::fp_corruption(nopa),
        adversary::fp_substitution(nopa),
        adversary::ret_corruption(nopa),
        adversary::ret_replay_cross_frame(nopa),
        adversary::toctou(nopa),
    ] {
        assert_eq!(run_scenario(&sc, 1).unwrap().outcome, Outcome::Hijacked, "{}", sc.name);
    }
}

#[test]
fn pa_off_machine_is_hijacked() {
    let mut sc = adversary::fp_corruption(BuildOptions::default());
    sc.config = MachineConfig { pa_off: true, ..sc.config };
    assert_eq!(run_scenario(&sc, 1).unwrap().outcome, Outcome::Hijacked);
}

#[test]
fn read_only_regions_reject_writes() {
    let base = adversary::fp_corruption(BuildOptions::default());
    for addr in [
        Addr::Abs(TEXT_BASE),
        Addr::Abs(FNIDX_BASE + 8),
        Addr::Abs(FNREV_BASE),
        Addr::Sym { sym: "main".into(), off: 4 },
    ] {
        let mut sc = base.clone();
        sc.schedule = vec![ScheduleEntry {
            at: Trigger::Retired(3),
            action: Action::MemWrite { addr: addr.clone(), value: Value::Word(0) },
        }];
        assert!(matches!(run_scenario(&sc, 1), Err(AdversaryError::ScheduleInvalid(_))), "{addr:?}");
    }
}

#[test]
fn unknown_symbols_and_reads_are_rejected() {
    let mut sc = adversary::fp_corruption(BuildOptions::default());
    sc.schedule[0].action = Action::MemWrite { addr: Addr::Sym { sym: "nope".into(), off: 0 }, value: Value::Word(0) };
    assert!(matches!(run_scenario(&sc, 1), Err(AdversaryError::ScheduleInvalid(_))));
    let mut sc = adversary::fp_corruption(BuildOptions::default());
    sc.schedule[0].action = Action::MemWrite { addr: Addr::Sym { sym: "ops_b".into(), off: 8 }, value: Value::Read(0) };
    assert!(matches!(run_scenario(&sc, 1), Err(AdversaryError::ScheduleInvalid(_))));
}

#[test]
fn schedule_json_shape() {
    let e: ScheduleEntry = serde_json::from_str(
        r#"{"at":{"return":{"function":"work","nth":1}},"action":{"inject_interrupt":{"during":[{"mem_write":{"addr":{"irq_slot":29},"value":{"sym":{"sym":"gadget"}}}}]}}}"#,
    )
    .unwrap();
    assert_eq!(e.at, Trigger::Return { function: "work".into(), nth: 1 });
    assert!(serde_json::from_str::<ScheduleEntry>(
        r#"{"at":{"retired":1},"action":{"mem_read":{"addr":{"sp":0}}},"x":1}"#
    )
    .is_err());
    assert!(
        serde_json::from_str::<ScheduleEntry>(r#"{"at":{"tick":1},"action":{"mem_read":{"addr":{"sp":0}}}}"#).is_err()
    );
}

#[test]
fn verdict_json_shape() {
    let v = run_scenario(&adversary::fp_corruption(BuildOptions::default()), 1).unwrap();
    let j = serde_json::to_value(&v).unwrap();
    assert_eq!(j["outcome"], "BLOCKED");
    assert_eq!(j["trap"]["kind"], "AuthFailureDeref");
    assert_eq!(j["scenario"], "fp_corruption");
    let back: adversary::AttackVerdict = serde_json::from_value(j).unwrap();
    assert_eq!(back, v);
}

#[test]
fn scenario_file_resolves_object_relative_to_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = adversary::victim_program(BuildOptions::default());
    std::fs::write(dir.path().join("v.obj"), p.to_text()).unwrap();
    let json = r#"{"name":"f","obj":"v.obj","schedule":[{"at":{"label":{"label":"@main"}},"action":{"mem_write":{"addr":{"sym":{"sym":"ops_b","off":8}},"value":{"sym":{"sym":"gadget"}}}}}],"target":{"sym":{"sym":"gadget"}}}"#;
    std::fs::write(dir.path().join("s.json"), json).unwrap();
    let sc = ScenarioFile::load(&dir.path().join("s.json")).unwrap();
    assert!(matches!(run_scenario(&sc, 1).unwrap().outcome, Outcome::Blocked(_)));
}

#[test]
fn sweep_without_frame_guard_finds_the_window() {
    let p = adversary::frames_program(BuildOptions::default());
    let guarded = adversary::interrupt_sweep(&p, 1, MachineConfig::default()).unwrap();
    assert_eq!(guarded.hijacked, 0);
    assert_eq!(guarded.blocked, guarded.points);
    let legacy = adversary::frames_program(BuildOptions::legacy());
    let split = adversary::interrupt_sweep(&legacy, 1, MachineConfig::default()).unwrap();
    assert!(split.hijacked > 0);
}

#[test]
fn guess_statistics_are_reproducible() {
    let a = adversary::guess_pac_trials(100, 256).unwrap();
    let b = adversary::guess_pac_trials(100, 256).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trials, 256);
}
