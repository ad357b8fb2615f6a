mod common;

use common::{drift_spec, synth};
use headkv::budget::{plan_budget, BudgetConfig, BudgetError};
use headkv::engine::{self, EngineConfig, PolicyVariant};
use headkv::eval::{compare, run_policy, run_suite, EvalError, PolicySpec, SimContext};
use headkv::profiler::{calibrate, ProfileConfig, Role};
use headkv::trace::{ClusterSpec, HeadArchetype, SynthSpec};
use headkv::{AttentionTrace, BudgetPlan, HeadId, TaxonomyResult};

fn calibrated(seed: u64) -> (TaxonomyResult, BudgetPlan) {
    let (cal, _) = synth(&drift_spec(seed, None));
    let tax = calibrate(&[cal], &ProfileConfig::default()).unwrap();
    let plan = plan_budget(&tax, 256, &BudgetConfig::default()).unwrap();
    (tax, plan)
}

fn drifting(seed: u64) -> AttentionTrace {
    synth(&drift_spec(seed, Some(20))).0
}

fn all_policies() -> Vec<PolicySpec> {
    [
        "full_oracle",
        "static_topk",
        "sink_window",
        "heterocache",
        "no_allocation",
        "no_retrieval",
    ]
    .iter()
    .map(|n| PolicySpec::from_name(n, 0.5, 256, 4).unwrap())
    .collect()
}

fn decaying_spec(decode_steps: u32) -> SynthSpec {
    SynthSpec {
        model_name: "decaying".into(),
        num_layers: 1,
        heads_per_layer: 3,
        prefill_len: 64,
        decode_steps,
        trace_topk: 16,
        bytes_per_kv_entry: 64,
        heads: vec![
            HeadArchetype::Decaying {
                hot_set: 8,
                drift_rate: 1.0,
            };
            3
        ],
        clusters: Vec::<ClusterSpec>::new(),
        drift_events: Vec::new(),
        seed: 5,
    }
}

#[test]
fn drift_suite_roles() {
    let (tax, plan) = calibrated(1);
    let roles: Vec<Role> = tax.heads.iter().map(|h| h.role).collect();
    assert_eq!(roles[0], Role::Pivot);
    assert!(roles[1..4].iter().all(|&r| r == Role::Satellite));
    assert!(roles[4..].iter().all(|&r| r == Role::Anchor));
    assert_eq!(plan.num_full, 1);
    assert_eq!(plan.num_comp, 7);
}

#[test]
fn all_volatile_heads_need_the_whole_budget() {
    let (cal, _) = synth(&decaying_spec(16));
    let tax: TaxonomyResult = calibrate(&[cal.clone()], &ProfileConfig::default()).unwrap();
    assert_eq!(tax.role_counts.volatile, 3);

    let half = BudgetConfig {
        rho: 0.5,
        ..Default::default()
    };
    assert!(matches!(
        plan_budget(&tax, 64, &half),
        Err(BudgetError::Infeasible { .. })
    ));

    let whole = BudgetConfig {
        rho: 1.0,
        ..Default::default()
    };
    let plan = plan_budget(&tax, 64, &whole).unwrap();
    let report = engine::run(&cal, &tax, &plan, &EngineConfig::default()).unwrap();
    assert!(report.steps.iter().all(|s| s.recall == 1.0));
    assert!(report.steps.iter().all(|s| s.gpu_entries == 3 * 64));
    assert!(report.events.is_empty());
}

#[test]
fn prefill_only_trace_gives_one_record() {
    let (tax, plan) = calibrated(2);
    let mut spec = drift_spec(3, None);
    spec.decode_steps = 0;
    let (trace, _) = synth(&spec);
    let report = engine::run(&trace, &tax, &plan, &EngineConfig::default()).unwrap();
    assert_eq!(report.steps.len(), 1);
    assert_eq!(report.steps[0].step, 0);
    assert!(report.events.is_empty());
    assert_eq!(
        report.summary.mean_decode_recall,
        report.summary.mean_recall
    );
}

#[test]
fn simulation_is_deterministic() {
    let (tax, plan) = calibrated(4);
    let trace = drifting(5);
    let cfg = EngineConfig::default();
    let a = engine::run(&trace, &tax, &plan, &cfg).unwrap();
    let b = engine::run(&trace, &tax, &plan, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn zero_drift_threshold_never_retrieves() {
    let (tax, plan) = calibrated(6);
    let trace = drifting(7);
    let silent = EngineConfig {
        tau_drift: 0.0,
        ..Default::default()
    };
    let off = EngineConfig {
        policy_variant: PolicyVariant::NoRetrieval,
        ..Default::default()
    };
    let a = engine::run(&trace, &tax, &plan, &silent).unwrap();
    let b = engine::run(&trace, &tax, &plan, &off).unwrap();
    assert!(a.events.is_empty());
    assert_eq!(a.steps, b.steps);
}

#[test]
fn drift_is_detected_and_repaired() {
    let (tax, plan) = calibrated(8);
    let trace = drifting(9);
    let cfg = EngineConfig::default();
    let on = engine::run(&trace, &tax, &plan, &cfg).unwrap();
    let off = engine::run(
        &trace,
        &tax,
        &plan,
        &EngineConfig {
            policy_variant: PolicyVariant::NoRetrieval,
            ..cfg.clone()
        },
    )
    .unwrap();
    let first = on.events.first().expect("drift triggers retrieval");
    assert!(first.trigger_step > 20 && first.trigger_step <= 36);
    assert_eq!(first.fetches.len(), 3);
    let tail_on = on.mean_recall_between(first.completion_step, 64).unwrap();
    let tail_off = off.mean_recall_between(first.completion_step, 64).unwrap();
    assert!(tail_on > tail_off + 0.05, "{} vs {}", tail_on, tail_off);
}

#[test]
fn oracle_has_perfect_recall_and_dominates() {
    let (tax, plan) = calibrated(10);
    let trace = drifting(11);
    let cfg = EngineConfig::default();
    let ctx = SimContext {
        taxonomy: &tax,
        plan: &plan,
        engine: &cfg,
    };
    let reports = run_suite(&trace, &all_policies(), &ctx).unwrap();
    let oracle = &reports[0];
    assert_eq!(oracle.policy, "full_oracle");
    assert!(oracle.steps.iter().all(|s| s.recall == 1.0));
    for r in &reports[1..] {
        for (o, s) in oracle.steps.iter().zip(&r.steps) {
            assert!(s.recall <= o.recall, "{} step {}", r.policy, s.step);
            assert!((0.0..=1.0).contains(&s.recall));
        }
    }
    let labels: Vec<&str> = reports.iter().map(|r| r.policy.as_str()).collect();
    assert_eq!(
        labels,
        [
            "full_oracle",
            "static_topk",
            "sink_window",
            "heterocache",
            "no_allocation",
            "no_retrieval"
        ]
    );
}

#[test]
fn static_topk_recall_grows_with_budget() {
    let (tax, plan) = calibrated(12);
    let trace = drifting(13);
    let cfg = EngineConfig::default();
    let ctx = SimContext {
        taxonomy: &tax,
        plan: &plan,
        engine: &cfg,
    };
    let mut last = -1.0;
    for f in [0.01, 0.05, 0.1, 0.25, 0.5, 1.0] {
        let r = run_policy(&trace, &PolicySpec::StaticTopk { budget_fraction: f }, &ctx).unwrap();
        assert!(r.summary.mean_recall >= last);
        last = r.summary.mean_recall;
    }
    // only positions recorded at prefill can be selected
    assert!(last < 1.0);
}

#[test]
fn sink_window_sees_position_zero() {
    let mut trace = drifting(14);
    let m = trace.manifest.clone();
    for step in &mut trace.steps {
        for (i, e) in step.entries.iter_mut().enumerate() {
            if i % m.trace_topk as usize == 0 {
                e.index = 0;
                e.score = 1.0;
            } else {
                e.index = u32::MAX;
                e.score = 0.0;
            }
        }
    }
    let (tax, plan) = calibrated(15);
    let cfg = EngineConfig::default();
    let ctx = SimContext {
        taxonomy: &tax,
        plan: &plan,
        engine: &cfg,
    };
    let r = run_policy(&trace, &PolicySpec::sink_window_matching(0.5, 256, 4), &ctx).unwrap();
    assert!(r.steps.iter().all(|s| s.recall == 1.0));
    assert_eq!(r.steps[0].gpu_entries, 8 * 128);
}

#[test]
fn matching_ceilings_across_policies() {
    let (tax, plan) = calibrated(16);
    let cfg = EngineConfig::default();
    let ctx = SimContext {
        taxonomy: &tax,
        plan: &plan,
        engine: &cfg,
    };
    for p in &all_policies()[1..] {
        assert_eq!(
            p.budget_ceiling(&ctx, 8, 256),
            Some(0.5 * 8.0 * 256.0),
            "{}",
            p.label()
        );
    }
    let greedy = PolicySpec::StaticTopk {
        budget_fraction: 0.75,
    };
    let err = run_suite(&drifting(17), &[all_policies()[3].clone(), greedy], &ctx).unwrap_err();
    assert!(matches!(err, EvalError::BudgetMismatch(_)));
}

#[test]
fn compare_rejects_mixed_inputs() {
    let (tax, plan) = calibrated(18);
    let cfg = EngineConfig::default();
    let ctx = SimContext {
        taxonomy: &tax,
        plan: &plan,
        engine: &cfg,
    };
    let a = run_suite(&drifting(19), &all_policies(), &ctx).unwrap();
    let b = run_suite(&drifting(20), &all_policies(), &ctx).unwrap();
    assert!(matches!(compare(&a[..1]), Err(EvalError::TooFewReports)));
    assert!(matches!(
        compare(&[a[3].clone(), b[4].clone()]),
        Err(EvalError::TraceMismatch(_))
    ));
    let mut greedy = a[1].clone();
    greedy.budget_ceiling *= 2.0;
    assert!(matches!(
        compare(&[a[3].clone(), greedy]),
        Err(EvalError::BudgetMismatch(_))
    ));

    let table = compare(&[a[3].clone(), a[3].clone()]).unwrap();
    let d = &table.deltas[0];
    assert_eq!(d.mean_recall_delta, 0.0);
    assert_eq!(d.total_bytes_delta, 0);
    assert_eq!(d.peak_gpu_entries_delta, 0);

    let table = compare(&a).unwrap();
    assert_eq!(table.rows.len(), 6);
    assert_eq!(table.deltas.len(), 15);
    let names: Vec<&str> = table.rows.iter().map(|r| r.policy.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn prefill_accounting_matches_plan() {
    let (tax, plan) = calibrated(21);
    let trace = drifting(22);
    let report = engine::run(&trace, &tax, &plan, &EngineConfig::default()).unwrap();
    let s0 = &report.steps[0];
    // a head cannot select more positions than the prefill step recorded
    let selected: usize = plan
        .lengths
        .iter()
        .map(|h| {
            let recorded = trace.steps[0]
                .head(&trace.manifest, HeadId::new(h.layer, h.head))
                .iter()
                .filter(|e| !e.is_padding())
                .count();
            h.length.min(recorded)
        })
        .sum();
    assert_eq!(s0.gpu_entries, plan.num_full * 256 + selected);
    assert!(s0.gpu_entries <= plan.planned_entries);
    assert_eq!(s0.decode_entries, 0);
    for s in &report.steps {
        assert_eq!(s.decode_entries, 8 * s.step as usize);
        assert!(s.gpu_entries as f64 <= plan.ceiling_with_slack());
    }
}

#[test]
fn csv_outputs_have_one_row_per_record() {
    let (tax, plan) = calibrated(23);
    let trace = drifting(24);
    let report = engine::run(&trace, &tax, &plan, &EngineConfig::default()).unwrap();
    let mut buf = Vec::new();
    report.write_steps_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,policy,recall,gpu_entries,bytes_in_flight,retrieval_flag,protected_entries,decode_entries,cumulative_bytes"
    );
    assert_eq!(lines.count(), report.steps.len());
}
