use std::fs;
use std::path::{Path, PathBuf};

use headkv::budget::{plan_budget, BudgetPlan};
use headkv::eval::{compare, run_suite, ComparisonTable, PolicySpec, SimContext};
use headkv::metrics::layer_similarity_matrix;
use headkv::profiler::{calibrate, Role, TaxonomyResult};
use headkv::report::{RetrievalEvent, SimulationReport};
use headkv::trace::{generate_synthetic, read_trace, write_trace, AttentionTrace, GroundTruth};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{file_target, write_atomic, write_csv, write_json};

const ROLES: [Role; 4] = [Role::Volatile, Role::Anchor, Role::Pivot, Role::Satellite];

pub fn load_trace(path: &Path) -> Result<AttentionTrace, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open trace {}: {}", path.display(), e)))?;
    read_trace(std::io::BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {}", path.display(), e)))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {} {}: {}", what, path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{} {}: {}", what, path.display(), e)))
}

fn load_traces(paths: &[PathBuf]) -> Result<Vec<AttentionTrace>, CliError> {
    paths.iter().map(|p| load_trace(p)).collect()
}

fn synthesize(cfg: &RunConfig) -> Result<(AttentionTrace, GroundTruth), CliError> {
    let mut spec = cfg
        .synthetic
        .clone()
        .ok_or_else(|| CliError::Config("config has no 'synthetic' trace spec".into()))?;
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    Ok(generate_synthetic(&spec)?)
}

fn encode_trace(trace: &AttentionTrace, buf: &mut Vec<u8>) -> Result<(), String> {
    write_trace(trace, buf)
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn truth_path(trace_path: &Path) -> PathBuf {
    let stem = trace_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into());
    trace_path.with_file_name(format!("{}.truth.json", stem))
}

pub fn gen_trace(cfg: &RunConfig) -> Result<(), CliError> {
    let (trace, truth) = synthesize(cfg)?;
    let target = match &cfg.output_dir {
        Some(out) => file_target(out, "trace.hctr"),
        None => PathBuf::from("trace.hctr"),
    };
    write_atomic(&target, |buf| encode_trace(&trace, buf))?;
    let truth_file = truth_path(&target);
    write_json(&truth_file, &truth)?;
    let m = &trace.manifest;
    say!(
        "wrote {} ({} layers x {} heads, L={}, T={}, K={}) and {}",
        target.display(),
        m.num_layers,
        m.heads_per_layer,
        m.prefill_len,
        m.decode_steps,
        m.trace_topk,
        truth_file.display()
    );
    Ok(())
}

fn print_role_counts(tax: &TaxonomyResult) {
    say!("{:<10} {:>6}", "role", "heads");
    for role in ROLES {
        say!("{:<10} {:>6}", role.name(), tax.role_counts.get(role));
    }
    say!("{:<10} {:>6}", "clusters", tax.clusters.len());
}

fn write_role_counts(path: &Path, tax: &TaxonomyResult) -> Result<(), CliError> {
    write_csv(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["role", "heads"])?;
        for role in ROLES {
            w.write_record([
                role.name().to_string(),
                tax.role_counts.get(role).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

pub struct ProfileArgs {
    pub layer_similarity_step: Option<usize>,
    pub truth: Option<PathBuf>,
}

pub fn profile(cfg: &RunConfig, args: &ProfileArgs) -> Result<(), CliError> {
    if cfg.traces.is_empty() {
        return Err(CliError::Config(
            "profile needs at least one --trace".into(),
        ));
    }
    let traces = load_traces(&cfg.traces)?;
    let pcfg = cfg.profile_config();
    let tax = calibrate(&traces, &pcfg)?;
    let out = cfg.output_dir();
    write_json(&out.join("taxonomy.json"), &tax)?;
    write_role_counts(&out.join("role_counts.csv"), &tax)?;
    print_role_counts(&tax);

    if let Some(step) = args.layer_similarity_step {
        let trace = &traces[0];
        let k = pcfg.topk_for(trace.manifest.prefill_len as usize);
        let matrix: Vec<Vec<f64>> =
            layer_similarity_matrix(trace, step, k).map_err(|e| CliError::Config(e.to_string()))?;
        write_csv(&out.join("layer_similarity.csv"), |buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut header = vec!["layer".to_string()];
            header.extend((0..matrix.len()).map(|j| format!("to_layer_{}", j)));
            w.write_record(&header)?;
            for (i, row) in matrix.iter().enumerate() {
                let mut rec = vec![i.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(())
        })?;
    }

    if let Some(path) = &args.truth {
        let truth: GroundTruth = load_json(path, "ground truth")?;
        let agree = tax
            .heads
            .iter()
            .filter(|h| truth.role_of(h.id()) == Some(h.role))
            .count();
        say!(
            "ground-truth agreement: {}/{} heads",
            agree,
            tax.num_heads()
        );
    }
    Ok(())
}

fn print_plan(plan: &BudgetPlan) {
    say!(
        "N={} full={} compressed={} L={} rho={} L_base={:.3} planned={} ceiling={}",
        plan.num_heads,
        plan.num_full,
        plan.num_comp,
        plan.prefill_len,
        plan.rho,
        plan.base_length,
        plan.planned_entries,
        plan.budget_ceiling
    );
}

pub fn plan(cfg: &RunConfig, taxonomy: &Path, prefill_len: Option<usize>) -> Result<(), CliError> {
    let tax: TaxonomyResult = load_json(taxonomy, "taxonomy")?;
    tax.validate()?;
    let l = match (prefill_len, cfg.traces.first()) {
        (Some(l), _) => l,
        (None, Some(path)) => load_trace(path)?.manifest.prefill_len as usize,
        (None, None) => {
            return Err(CliError::Config(
                "plan needs --prefill-len or --trace".into(),
            ))
        }
    };
    let plan = plan_budget(&tax, l, &cfg.budget_config())?;
    write_json(&cfg.output_dir().join("budget_plan.json"), &plan)?;
    print_plan(&plan);
    Ok(())
}

fn write_events_csv(path: &Path, events: &[RetrievalEvent]) -> Result<(), CliError> {
    write_csv(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "trigger_step",
            "pivot_layer",
            "pivot_head",
            "cluster_id",
            "satellites",
            "fetched_entries",
            "bytes",
            "completion_step",
            "exposed_steps",
        ])?;
        for e in events {
            w.write_record([
                e.trigger_step.to_string(),
                e.pivot.layer.to_string(),
                e.pivot.head.to_string(),
                e.cluster_id.to_string(),
                e.fetches.len().to_string(),
                e.fetched_entries().to_string(),
                e.bytes.to_string(),
                e.completion_step.to_string(),
                e.exposed_steps.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

pub fn simulate(cfg: &RunConfig, taxonomy: Option<&Path>) -> Result<(), CliError> {
    let trace = match cfg.traces.as_slice() {
        [] => synthesize(cfg)?.0,
        [path] => load_trace(path)?,
        _ => {
            return Err(CliError::Config(
                "simulate takes exactly one --trace".into(),
            ))
        }
    };
    let tax: TaxonomyResult = match taxonomy {
        Some(path) => {
            let tax: TaxonomyResult = load_json(path, "taxonomy")?;
            tax.validate()?;
            tax
        }
        None if cfg.calibration_traces.is_empty() => {
            calibrate(std::slice::from_ref(&trace), &cfg.profile_config())?
        }
        None => calibrate(
            &load_traces(&cfg.calibration_traces)?,
            &cfg.profile_config(),
        )?,
    };
    let l = trace.manifest.prefill_len as usize;
    let plan = plan_budget(&tax, l, &cfg.budget_config())?;
    let engine = cfg.engine_config();
    let policies: Vec<PolicySpec> = cfg
        .policy_names()
        .iter()
        .map(|n| PolicySpec::from_name(n, cfg.rho, l, cfg.sink_tokens))
        .collect::<Result<_, _>>()?;
    let ctx = SimContext {
        taxonomy: &tax,
        plan: &plan,
        engine: &engine,
    };
    let reports = run_suite(&trace, &policies, &ctx)?;

    let out = cfg.output_dir();
    write_json(&out.join("taxonomy.json"), &tax)?;
    write_json(&out.join("budget_plan.json"), &plan)?;
    print_plan(&plan);
    say!(
        "{:<14} {:>11} {:>11} {:>8} {:>7} {:>10}",
        "policy",
        "mean_recall",
        "min_recall",
        "peak_gpu",
        "events",
        "bytes"
    );
    for r in &reports {
        write_json(&out.join(format!("report_{}.json", r.policy)), r)?;
        write_csv(&out.join(format!("steps_{}.csv", r.policy)), |buf| {
            r.write_steps_csv(buf)
        })?;
        write_events_csv(&out.join(format!("events_{}.csv", r.policy)), &r.events)?;
        say!(
            "{:<14} {:>11.4} {:>11.4} {:>8} {:>7} {:>10}",
            r.policy,
            r.summary.mean_recall,
            r.summary.min_recall,
            r.summary.peak_gpu_entries,
            r.summary.retrieval_events,
            r.summary.total_bytes
        );
    }
    Ok(())
}

pub fn compare_reports(cfg: &RunConfig, paths: &[PathBuf]) -> Result<(), CliError> {
    let reports: Vec<SimulationReport> = paths
        .iter()
        .map(|p| load_json(p, "report"))
        .collect::<Result<_, _>>()?;
    let table: ComparisonTable = compare(&reports)?;
    let out = cfg.output_dir();
    write_json(&out.join("comparison.json"), &table)?;
    write_csv(&out.join("comparison.csv"), |buf| table.write_rows_csv(buf))?;
    write_csv(&out.join("deltas.csv"), |buf| table.write_deltas_csv(buf))?;
    say!(
        "trace {} ({})",
        table.trace_fingerprint,
        table.recall_metric
    );
    say!(
        "{:<14} {:>11} {:>11} {:>10}",
        "policy",
        "mean_recall",
        "min_recall",
        "bytes"
    );
    for r in &table.rows {
        say!(
            "{:<14} {:>11.4} {:>11.4} {:>10}",
            r.policy,
            r.mean_recall,
            r.min_recall,
            r.total_bytes
        );
    }
    Ok(())
}
