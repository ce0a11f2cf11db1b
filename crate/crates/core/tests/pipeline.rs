use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use skillforge::pipeline::*;

fn new_env() -> (tempfile::TempDir, ArtifactEnv) {
    let dir = tempfile::tempdir().unwrap();
    let env = ArtifactEnv::new(dir.path());
    (dir, env)
}

fn ic_registry() -> ActivityRegistry {
    let mut reg = ActivityRegistry::new();
    reg.register(ActivitySpec::new("extract_features").input("data").output("features"), |ctx| {
        let text = ctx.input_str("data")?;
        let rows: Vec<String> = text.lines().map(|l| l.split_whitespace().collect::<Vec<_>>().join("|")).collect();
        ctx.write("features", rows.join("\n"))
    })
    .unwrap();
    reg.register(
        ActivitySpec::new("train_classifier")
            .input("features")
            .output("model")
            .param(ParamSpec::new("epochs", ParamKind::Int).with_default(3)),
        |ctx| {
            let feats = ctx.input("features")?;
            let epochs = ctx.param_i64("epochs")?;
            ctx.log(format!("training for {epochs} epochs"));
            ctx.write("model", format!("{}:{}", feats.len(), epochs))
        },
    )
    .unwrap();
    reg
}

fn build_ic_model(reg: &ActivityRegistry) -> RecipeDag {
    let mut b = RecipeBuilder::new("build_ic_model");
    b.param(ParamSpec::new("data_file", ParamKind::Path));
    b.node("extract_features", "extract_features")
        .input("data", "file://${data_file}")
        .output("features", "file://work/features.txt");
    b.node("train_classifier", "train_classifier")
        .input("features", "file://work/features.txt")
        .output("model", "file://work/model.bin");
    b.build(reg).unwrap()
}

/// Activities `op<k>` with `k` inputs and one output, each writing a digest
/// of its inputs and its `salt` parameter. Deterministic by construction.
fn generic_registry(sleep_ms: u64) -> ActivityRegistry {
    let mut reg = ActivityRegistry::new();
    for k in 0..4 {
        let mut spec = ActivitySpec::new(&format!("op{k}")).output("out").param(ParamSpec::new("salt", ParamKind::Int).with_default(0));
        for j in 0..k {
            spec = spec.input(&format!("in{j}"));
        }
        reg.register(spec, move |ctx| {
            if sleep_ms > 0 {
                std::thread::sleep(Duration::from_millis(sleep_ms));
            }
            let mut h = Sha256::new();
            h.update(ctx.param_i64("salt")?.to_le_bytes());
            for j in 0..k {
                h.update(ctx.input(&format!("in{j}"))?.as_slice());
            }
            ctx.write("out", h.finalize().to_vec())
        })
        .unwrap();
    }
    reg
}

fn random_dag(reg: &ActivityRegistry, n: usize, seed: u64) -> RecipeDag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = RecipeBuilder::new(&format!("random_{seed}"));
    b.param(ParamSpec::new("base", ParamKind::Int).with_default(rng.gen_range(0..1000)));
    for i in 0..n {
        let k = if i == 0 { 0 } else { rng.gen_range(0..4.min(i + 1)) };
        let mut parents: Vec<usize> = Vec::new();
        while parents.len() < k {
            let p = rng.gen_range(0..i);
            if !parents.contains(&p) {
                parents.push(p);
            }
        }
        let mut nb = b.node(&format!("n{i:03}"), &format!("op{k}")).output("out", &format!("mem://a{i}"));
        for (j, p) in parents.iter().enumerate() {
            nb = nb.input(&format!("in{j}"), &format!("mem://a{p}"));
        }
        if rng.gen_bool(0.3) {
            nb.param("salt", "${base}");
        } else {
            nb.param("salt", rng.gen_range(0..100));
        }
    }
    b.build(reg).unwrap()
}

#[test]
fn build_ic_model_is_a_two_node_chain_and_runs() {
    let reg = ic_registry();
    let dag = build_ic_model(&reg);
    assert_eq!(dag.nodes.len(), 2);
    assert_eq!(dag.predecessors(), vec![vec![], vec![0]]);
    assert_eq!(dag.outputs, vec!["file://work/model.bin".to_string()]);

    let (dir, env) = new_env();
    std::fs::write(dir.path().join("data.txt"), "hello  world\nbye world\n").unwrap();
    let opts = ExecuteOptions {
        params: BTreeMap::from([("data_file".to_string(), json!(dir.path().join("data.txt").to_str().unwrap()))]),
        ..Default::default()
    };
    let report = execute(&dag, &reg, &env, &opts).unwrap();
    assert!(report.succeeded(), "{}", report.summary());
    assert_eq!(report.start_order, ["extract_features", "train_classifier"]);
    let model = std::fs::read_to_string(dir.path().join("work/model.bin")).unwrap();
    assert_eq!(model, "21:3");
    assert_eq!(report.record("train_classifier").unwrap().logs, ["training for 3 epochs"]);
    assert_eq!(report.outputs.len(), 1);
}

#[test]
fn empty_recipe_is_valid_noop() {
    let reg = ActivityRegistry::new();
    let dag = RecipeBuilder::new("nothing").build(&reg).unwrap();
    assert!(dag.is_empty());
    let (_d, env) = new_env();
    let report = execute(&dag, &reg, &env, &ExecuteOptions::default()).unwrap();
    assert!(report.records.is_empty());
    assert!(report.succeeded());
}

#[test]
fn capture_rejects_cycles_multi_producers_and_unknown_activities() {
    let reg = generic_registry(0);
    let mut b = RecipeBuilder::new("loop");
    b.node("a", "op1").input("in0", "mem://y").output("out", "mem://x");
    b.node("b", "op1").input("in0", "mem://x").output("out", "mem://y");
    match b.build(&reg) {
        Err(PipelineError::Cycle(nodes)) => assert_eq!(nodes, ["a", "b"]),
        other => panic!("expected cycle, got {other:?}"),
    }

    let mut b = RecipeBuilder::new("twice");
    b.node("a", "op0").output("out", "mem://x");
    b.node("b", "op0").output("out", "mem://x");
    assert!(matches!(b.build(&reg), Err(PipelineError::MultipleProducers { .. })));

    let mut b = RecipeBuilder::new("ghost");
    b.node("a", "not_registered").output("out", "mem://x");
    assert!(matches!(b.build(&reg), Err(PipelineError::UnknownActivity(a)) if a == "not_registered"));

    let mut b = RecipeBuilder::new("miswired");
    b.node("a", "op1").output("out", "mem://x");
    assert!(matches!(b.build(&reg), Err(PipelineError::BadNode { .. })));

    let mut b = RecipeBuilder::new("unknown_ref");
    b.node("a", "op0").output("out", "mem://${nope}");
    assert!(matches!(b.build(&reg), Err(PipelineError::UnknownParam(p)) if p == "nope"));
}

#[test]
fn registry_rejects_duplicates() {
    let mut reg = generic_registry(0);
    let err = reg.register(ActivitySpec::new("op0"), |_| Ok(())).unwrap_err();
    assert!(matches!(err, PipelineError::DuplicateActivity { .. }));
}

#[test]
fn dag_json_round_trip_and_load_errors() {
    let reg = ic_registry();
    let dag = build_ic_model(&reg);
    let text = serialize_dag(&dag);
    assert_eq!(deserialize_dag(&text, &reg).unwrap(), dag);

    let edited = text.replace("\"train_classifier\",\n", "\"train_svm\",\n");
    let edited = edited.replace("\"activity\": \"train_classifier\"", "\"activity\": \"train_svm\"");
    match deserialize_dag(&edited, &reg) {
        Err(e @ PipelineError::UnknownActivity(_)) => assert!(e.to_string().contains("train_svm")),
        other => panic!("expected unknown activity, got {other:?}"),
    }

    let v2 = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
    assert!(matches!(deserialize_dag(&v2, &reg), Err(PipelineError::SchemaVersion { found: 2, expected: 1 })));
}

#[test]
fn hundred_node_dags_round_trip() {
    let reg = generic_registry(0);
    for seed in 0..10 {
        let dag = random_dag(&reg, 100, seed);
        assert_eq!(dag.nodes.len(), 100);
        let back = deserialize_dag(&serialize_dag(&dag), &reg).unwrap();
        assert_eq!(back, dag);
    }
}

#[test]
fn diamond_runs_in_topological_order() {
    let reg = generic_registry(0);
    let mut b = RecipeBuilder::new("diamond");
    b.node("a", "op0").output("out", "mem://a");
    b.node("b", "op1").input("in0", "mem://a").output("out", "mem://b");
    b.node("c", "op1").input("in0", "mem://a").output("out", "mem://c");
    b.node("d", "op2").input("in0", "mem://b").input("in1", "mem://c").output("out", "mem://d");
    let dag = b.build(&reg).unwrap();
    let (_d, env) = new_env();
    let report = execute(&dag, &reg, &env, &ExecuteOptions::default()).unwrap();
    assert_eq!(report.start_order, ["a", "b", "c", "d"]);

    let (_d, env) = new_env();
    let opts = ExecuteOptions { executor: Executor::Parallel { max_workers: 4 }, ..Default::default() };
    let report = execute(&dag, &reg, &env, &opts).unwrap();
    assert_eq!(report.start_order.first().unwrap(), "a");
    assert_eq!(report.start_order.last().unwrap(), "d");
    // Scheduling: d starts only after b and c finished.
    let d = report.record("d").unwrap();
    for p in ["b", "c"] {
        let r = report.record(p).unwrap();
        assert!(r.started_ms + r.wall_ms <= d.started_ms + 1e-6);
    }
}

fn flaky_registry(failures: usize, calls: Arc<AtomicUsize>) -> ActivityRegistry {
    let mut reg = generic_registry(0);
    reg.register(ActivitySpec::new("flaky").output("out"), move |ctx| {
        if calls.fetch_add(1, Ordering::SeqCst) < failures {
            return Err("transient failure".into());
        }
        ctx.write("out", b"ok".to_vec())
    })
    .unwrap();
    reg
}

#[test]
fn retries_then_downstream_runs() {
    let calls = Arc::new(AtomicUsize::new(0));
    let reg = flaky_registry(2, calls.clone());
    let mut b = RecipeBuilder::new("retry");
    b.node("flaky", "flaky").output("out", "mem://f");
    b.node("after", "op1").input("in0", "mem://f").output("out", "mem://g");
    let dag = b.build(&reg).unwrap();
    let (_d, env) = new_env();
    let opts = ExecuteOptions { retry: RetryPolicy::retries(2), ..Default::default() };
    let report = execute(&dag, &reg, &env, &opts).unwrap();
    assert!(report.succeeded(), "{}", report.summary());
    assert_eq!(report.record("flaky").unwrap().retries, 2);
    assert_eq!(report.record("after").unwrap().status, ActivityStatus::Success);
    assert_eq!(calls.load(Ordering::SeqCst), 3);

    let calls = Arc::new(AtomicUsize::new(0));
    let reg = flaky_registry(2, calls);
    let (_d, env) = new_env();
    let opts = ExecuteOptions { retry: RetryPolicy::retries(1), ..Default::default() };
    let report = execute(&dag, &reg, &env, &opts).unwrap();
    assert_eq!(report.record("flaky").unwrap().status, ActivityStatus::Failed);
    assert_eq!(report.record("flaky").unwrap().retries, 1);
    assert_eq!(report.record("after").unwrap().status, ActivityStatus::Skipped);
    assert!(!report.succeeded());
}

fn failing_registry() -> ActivityRegistry {
    let mut reg = generic_registry(0);
    reg.register(ActivitySpec::new("fail").output("out"), |_| Err("broken".into())).unwrap();
    reg.register(ActivitySpec::new("boom").output("out"), |ctx| {
        ctx.write("out", b"partial".to_vec())?;
        panic!("activity exploded");
    })
    .unwrap();
    reg
}

#[test]
fn failures_skip_all_transitive_dependents() {
    let reg = failing_registry();
    let mut b = RecipeBuilder::new("skips");
    b.node("a", "fail").output("out", "mem://a");
    b.node("b", "op1").input("in0", "mem://a").output("out", "mem://b");
    b.node("c", "op1").input("in0", "mem://b").output("out", "mem://c");
    b.node("x", "op0").output("out", "mem://x");
    b.node("y", "op2").input("in0", "mem://x").input("in1", "mem://c").output("out", "mem://y");
    let dag = b.build(&reg).unwrap();
    for executor in [Executor::Sequential, Executor::Parallel { max_workers: 3 }] {
        let (_d, env) = new_env();
        let report = execute(&dag, &reg, &env, &ExecuteOptions { executor, ..Default::default() }).unwrap();
        let st = |n: &str| report.record(n).unwrap().status;
        assert_eq!(st("a"), ActivityStatus::Failed);
        assert_eq!(st("b"), ActivityStatus::Skipped);
        assert_eq!(st("c"), ActivityStatus::Skipped);
        assert_eq!(st("y"), ActivityStatus::Skipped);
        assert_eq!(st("x"), ActivityStatus::Success);
        assert!(!env.mem.contains("b") && env.mem.contains("x"));
    }
}

#[test]
fn panicking_activity_leaves_other_artifacts_intact() {
    let reg = failing_registry();
    let (dir, env) = new_env();
    std::fs::write(dir.path().join("boom.out"), "previous good payload").unwrap();
    let mut b = RecipeBuilder::new("panic");
    b.node("boom", "boom").output("out", "file://boom.out");
    b.node("fine", "op0").output("out", "file://fine.out");
    let dag = b.build(&reg).unwrap();
    let report = execute(&dag, &reg, &env, &ExecuteOptions::default()).unwrap();
    let rec = report.record("boom").unwrap();
    assert_eq!(rec.status, ActivityStatus::Failed);
    assert!(rec.error.as_deref().unwrap().contains("activity exploded"));
    assert_eq!(std::fs::read_to_string(dir.path().join("boom.out")).unwrap(), "previous good payload");
    assert_eq!(std::fs::read(dir.path().join("fine.out")).unwrap().len(), 32);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp-"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn undeclared_output_writes_fail_the_activity() {
    let mut reg = ActivityRegistry::new();
    reg.register(ActivitySpec::new("sneaky").output("out"), |ctx| {
        ctx.write("out", b"x".to_vec())?;
        ctx.write("elsewhere", b"y".to_vec())
    })
    .unwrap();
    let mut b = RecipeBuilder::new("sneaky");
    b.node("s", "sneaky").output("out", "mem://out");
    let dag = b.build(&reg).unwrap();
    let (_d, env) = new_env();
    let report = execute(&dag, &reg, &env, &ExecuteOptions::default()).unwrap();
    assert_eq!(report.records[0].status, ActivityStatus::Failed);
    assert!(!env.mem.contains("out"));
}

#[test]
fn missing_source_artifact_is_an_error() {
    let reg = ic_registry();
    let dag = build_ic_model(&reg);
    let (dir, env) = new_env();
    let opts = ExecuteOptions {
        params: BTreeMap::from([("data_file".into(), json!(dir.path().join("absent.txt").to_str().unwrap()))]),
        ..Default::default()
    };
    assert!(matches!(execute(&dag, &reg, &env, &opts), Err(PipelineError::MissingArtifact(_))));
    assert!(matches!(
        execute(&dag, &reg, &env, &ExecuteOptions::default()),
        Err(PipelineError::MissingParam(p)) if p == "data_file"
    ));
}

#[test]
fn parallel_executor_speeds_up_independent_work() {
    let reg = generic_registry(200);
    let mut b = RecipeBuilder::new("sleepers");
    for i in 0..4 {
        b.node(&format!("s{i}"), "op0").output("out", &format!("mem://s{i}")).param("salt", i);
    }
    let dag = b.build(&reg).unwrap();
    let (_d1, env1) = new_env();
    let t = Instant::now();
    let seq = execute(&dag, &reg, &env1, &ExecuteOptions::default()).unwrap();
    let seq_wall = t.elapsed().as_secs_f64();
    let (_d2, env2) = new_env();
    let t = Instant::now();
    let par = execute(&dag, &reg, &env2, &ExecuteOptions { executor: "parallel:4".parse().unwrap(), ..Default::default() }).unwrap();
    let par_wall = t.elapsed().as_secs_f64();
    assert!(par_wall <= 0.6 * seq_wall, "parallel {par_wall:.3}s vs sequential {seq_wall:.3}s");
    assert_eq!(seq.outputs, par.outputs);
    assert_eq!(seq.outputs.len(), 4);
}

#[test]
fn executor_parsing_and_remote_stub() {
    assert_eq!("local".parse::<Executor>().unwrap(), Executor::Sequential);
    assert_eq!("parallel:3".parse::<Executor>().unwrap(), Executor::Parallel { max_workers: 3 });
    assert!(matches!("parallel".parse::<Executor>().unwrap(), Executor::Parallel { .. }));
    assert!("parallel:0".parse::<Executor>().is_err());
    assert!("cluster".parse::<Executor>().is_err());
    let reg = ActivityRegistry::new();
    let dag = RecipeBuilder::new("r").build(&reg).unwrap();
    let (_d, env) = new_env();
    let opts = ExecuteOptions { executor: "remote:host:9000".parse().unwrap(), ..Default::default() };
    assert!(matches!(execute(&dag, &reg, &env, &opts), Err(PipelineError::Unsupported(_))));
}

#[test]
fn cancellation_reports_partial_run() {
    let reg = generic_registry(0);
    let dag = random_dag(&reg, 5, 1);
    let cancel = CancelToken::default();
    cancel.cancel();
    let (_d, env) = new_env();
    let report = execute(&dag, &reg, &env, &ExecuteOptions { cancel: Some(cancel), ..Default::default() }).unwrap();
    assert!(report.cancelled);
    assert!(report.records.iter().all(|r| r.status == ActivityStatus::Skipped));
    assert!(report.start_order.is_empty());
}

#[test]
fn incremental_runs_skip_unchanged_work() {
    let reg = ic_registry();
    let dag = build_ic_model(&reg);
    let (dir, env) = new_env();
    let data = dir.path().join("data.txt");
    std::fs::write(&data, "a b\n").unwrap();
    let opts = ExecuteOptions {
        params: BTreeMap::from([("data_file".into(), json!(data.to_str().unwrap()))]),
        incremental: true,
        ..Default::default()
    };
    let first = execute(&dag, &reg, &env, &opts).unwrap();
    assert!(first.records.iter().all(|r| r.status == ActivityStatus::Success));
    let second = execute(&dag, &reg, &env, &opts).unwrap();
    assert!(second.records.iter().all(|r| r.status == ActivityStatus::Cached));
    assert_eq!(first.outputs, second.outputs);
    std::fs::write(&data, "a b c\n").unwrap();
    let third = execute(&dag, &reg, &env, &opts).unwrap();
    assert!(third.records.iter().all(|r| r.status == ActivityStatus::Success));
    assert_ne!(first.outputs, third.outputs);
}

#[test]
fn kv_and_file_artifacts() {
    let (dir, env) = new_env();
    let uri = ArtifactUri::parse("kv://models/horoscope").unwrap();
    env.write(&uri, b"payload".to_vec()).unwrap();
    let a = env.artifact(uri.clone());
    assert_eq!(a.bytes().unwrap().as_slice(), b"payload");
    assert_eq!(a.digest().unwrap(), hex::encode(Sha256::digest(b"payload")));
    assert_eq!(uri.to_string(), "kv://models/horoscope");
    let f = ArtifactUri::parse(&format!("file://{}/x/y.bin", dir.path().display())).unwrap();
    env.write(&f, vec![1, 2]).unwrap();
    assert!(env.exists(&f));
    assert!(ArtifactUri::parse("s3://bucket").is_err());
    assert!(ArtifactUri::parse("mem://").is_err());
    assert!(matches!(env.read(&ArtifactUri::parse("mem://none").unwrap()), Err(PipelineError::MissingArtifact(_))));
}

#[test]
fn generated_cli_for_recipes() {
    let reg = ic_registry();
    let dag = build_ic_model(&reg);
    let cmd = generate_cli(&dag).unwrap();
    assert_eq!(cmd.name, "build-ic-model");
    let longs: Vec<&str> = cmd.flags.iter().map(|f| f.long.as_str()).collect();
    assert_eq!(longs, ["data-file", "executor"]);
    assert_eq!(cmd.flag("data-file").unwrap().value_name, "<path>");
    assert_eq!(cmd.flag("executor").unwrap().default.as_deref(), Some("local"));
    assert!(cmd.usage().starts_with("build-ic-model --data-file <path>"));

    let values = BTreeMap::from([("data-file".to_string(), "/tmp/x.txt".to_string()), ("executor".into(), "parallel:2".into())]);
    let (_, params, executor) = cmd.apply(&dag, &values).unwrap();
    assert_eq!(params["data_file"], json!("/tmp/x.txt"));
    assert_eq!(executor, Some(Executor::Parallel { max_workers: 2 }));

    let empty = RecipeBuilder::new("NoParams").build(&reg).unwrap();
    let cmd = generate_cli(&empty).unwrap();
    assert_eq!(cmd.name, "no-params");
    assert_eq!(cmd.flags.len(), 1);
    assert_eq!(cmd.flags[0].target, FlagTarget::Executor);

    let mut b = RecipeBuilder::new("clash");
    b.param(ParamSpec::new("executor", ParamKind::String).with_default("x"));
    let dag = b.build(&reg).unwrap();
    assert!(matches!(generate_cli(&dag), Err(PipelineError::ReservedFlag(f)) if f == "executor"));

    let mut b = RecipeBuilder::new("fixed_source");
    b.node("extract", "extract_features").input("data", "file://corpus.txt").output("features", "mem://f");
    let dag = b.build(&reg).unwrap();
    let cmd = generate_cli(&dag).unwrap();
    assert_eq!(cmd.flag("data-uri").unwrap().target, FlagTarget::SourceUri("file://corpus.txt".into()));
    let (rewired, _, _) = cmd.apply(&dag, &BTreeMap::from([("data-uri".into(), "kv://corpus".into())])).unwrap();
    assert_eq!(rewired.nodes[0].inputs["data"], "kv://corpus");
}

#[test]
fn param_types_are_checked() {
    let reg = ic_registry();
    let dag = build_ic_model(&reg);
    let bad = BTreeMap::from([("data_file".into(), json!(3))]);
    assert!(matches!(dag.resolve_params(&bad), Err(PipelineError::ParamType { .. })));
    assert!(matches!(dag.resolve_params(&BTreeMap::from([("other".into(), json!(1))])), Err(PipelineError::UnknownParam(_))));
    assert!(ParamKind::Int.parse("n", "abc").is_err());
    assert_eq!(ParamKind::Float.parse("x", "0.5").unwrap(), json!(0.5));
    assert_eq!(ParamKind::Bool.parse("x", "true").unwrap(), Value::Bool(true));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_sequential_and_parallel_sinks_are_identical(seed in any::<u64>(), n in 1usize..40, workers in 2usize..6) {
        let reg = generic_registry(0);
        let dag = random_dag(&reg, n, seed);
        let (_d1, e1) = new_env();
        let (_d2, e2) = new_env();
        let a = execute(&dag, &reg, &e1, &ExecuteOptions::default()).unwrap();
        let b = execute(&dag, &reg, &e2, &ExecuteOptions { executor: Executor::Parallel { max_workers: workers }, ..Default::default() }).unwrap();
        prop_assert!(a.succeeded() && b.succeeded());
        prop_assert_eq!(&a.outputs, &b.outputs);
        prop_assert_eq!(a.outputs.len(), dag.outputs.len());
    }

    #[test]
    fn prop_random_dags_round_trip(seed in any::<u64>(), n in 0usize..120) {
        let reg = generic_registry(0);
        let dag = random_dag(&reg, n, seed);
        prop_assert_eq!(deserialize_dag(&serialize_dag(&dag), &reg).unwrap(), dag);
    }
}
