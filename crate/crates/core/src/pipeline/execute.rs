use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::artifact::{ArtifactEnv, ArtifactUri};
use super::recipe::{substitute, substitute_value, ActivityContext, ActivityFn, ActivityRegistry, RecipeDag};
use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Executor {
    Sequential,
    Parallel { max_workers: usize },
    /// Placeholder for a cluster backend; always rejected at run time.
    Remote { endpoint: String },
}

impl Default for Executor {
    fn default() -> Self {
        Executor::Sequential
    }
}

impl FromStr for Executor {
    type Err = PipelineError;

    /// `local`, `sequential`, `parallel`, `parallel:N` or `remote:ENDPOINT`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PipelineError::BadExecutor(s.to_string());
        match s {
            "local" | "sequential" => return Ok(Executor::Sequential),
            "parallel" => {
                let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
                return Ok(Executor::Parallel { max_workers: n.max(2) });
            }
            _ => {}
        }
        if let Some(n) = s.strip_prefix("parallel:") {
            let max_workers: usize = n.parse().map_err(|_| bad())?;
            if max_workers == 0 {
                return Err(bad());
            }
            return Ok(Executor::Parallel { max_workers });
        }
        if let Some(e) = s.strip_prefix("remote:") {
            return Ok(Executor::Remote { endpoint: e.to_string() });
        }
        Err(bad())
    }
}

impl fmt::Display for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Executor::Sequential => f.write_str("local"),
            Executor::Parallel { max_workers } => write!(f, "parallel:{max_workers}"),
            Executor::Remote { endpoint } => write!(f, "remote:{endpoint}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after the first failure.
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 0, backoff: Duration::ZERO }
    }
}

impl RetryPolicy {
    pub fn retries(n: u32) -> Self {
        RetryPolicy { max_retries: n, ..Self::default() }
    }
}

/// Stops the executor from starting new activities. Running ones finish.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExecuteOptions {
    pub executor: Executor,
    pub retry: RetryPolicy,
    pub params: BTreeMap<String, Value>,
    /// Skip activities whose inputs, parameters and outputs are unchanged
    /// since their last successful run.
    pub incremental: bool,
    pub cancel: Option<CancelToken>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityStatus {
    Success,
    Failed,
    Skipped,
    /// Incremental run found an up-to-date stamp; outputs left untouched.
    Cached,
}

impl ActivityStatus {
    pub fn is_ok(self) -> bool {
        matches!(self, ActivityStatus::Success | ActivityStatus::Cached)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivityRecord {
    pub node: String,
    pub activity: String,
    pub status: ActivityStatus,
    /// Offset from the start of the run.
    pub started_ms: f64,
    pub wall_ms: f64,
    pub retries: u32,
    pub logs: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub recipe: String,
    pub executor: String,
    /// In node definition order.
    pub records: Vec<ActivityRecord>,
    /// Node ids in the order they were started.
    pub start_order: Vec<String>,
    pub total_wall_ms: f64,
    /// Resolved recipe output URI → hex SHA-256 of its payload.
    pub outputs: BTreeMap<String, String>,
    pub cancelled: bool,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        !self.cancelled && self.records.iter().all(|r| r.status.is_ok())
    }

    pub fn record(&self, node: &str) -> Option<&ActivityRecord> {
        self.records.iter().find(|r| r.node == node)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let status = format!("{:?}", r.status).to_lowercase();
            s.push_str(&format!("{:<24} {:<8} {:>9.1} ms  retries={}", r.node, status, r.wall_ms, r.retries));
            if let Some(e) = &r.error {
                s.push_str(&format!("  error: {e}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("total {:.1} ms ({})", self.total_wall_ms, self.executor));
        if self.cancelled {
            s.push_str(" [cancelled]");
        }
        s
    }
}

/// Everything a worker needs to run one node, owned so it can cross threads.
struct Job {
    index: usize,
    node: String,
    activity: String,
    func: ActivityFn,
    inputs: BTreeMap<String, ArtifactUri>,
    outputs: BTreeMap<String, ArtifactUri>,
    params: BTreeMap<String, Value>,
}

struct Outcome {
    index: usize,
    status: ActivityStatus,
    started: Instant,
    wall: Duration,
    retries: u32,
    logs: Vec<String>,
    error: Option<String>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

fn stamp_key(recipe: &str, node: &str) -> String {
    format!("stamp/{recipe}/{node}")
}

fn stamp(job: &Job, env: &ArtifactEnv) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    h.update(job.activity.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(&job.params)?);
    for (slot, uri) in &job.inputs {
        h.update(slot.as_bytes());
        h.update([0]);
        h.update(env.artifact(uri.clone()).digest()?.as_bytes());
    }
    for (slot, uri) in &job.outputs {
        h.update(slot.as_bytes());
        h.update(uri.to_string().as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn log_event(recipe: &str, event: &str, job: &Job, extra: Value) {
    let mut obj = json!({"event": event, "recipe": recipe, "node": job.node, "activity": job.activity});
    if let (Value::Object(m), Value::Object(e)) = (&mut obj, extra) {
        m.extend(e);
    }
    log::info!(target: "skillforge::pipeline", "{obj}");
}

fn run_job(job: &Job, recipe: &str, env: &ArtifactEnv, opts: &ExecuteOptions) -> Outcome {
    let started = Instant::now();
    let mut logs = Vec::new();
    let mut retries = 0;

    let current_stamp = if opts.incremental { stamp(job, env).ok() } else { None };
    if let Some(s) = &current_stamp {
        let key = stamp_key(recipe, &job.node);
        let fresh = env.kv.get(&key).ok().flatten().is_some_and(|old| old == s.as_bytes())
            && job.outputs.values().all(|u| env.exists(u));
        if fresh {
            log_event(recipe, "cached", job, json!({}));
            return Outcome {
                index: job.index,
                status: ActivityStatus::Cached,
                started,
                wall: started.elapsed(),
                retries: 0,
                logs: vec!["up to date".to_string()],
                error: None,
            };
        }
    }

    let mut error = None;
    for attempt in 0..=opts.retry.max_retries {
        if attempt > 0 {
            retries += 1;
            std::thread::sleep(opts.retry.backoff);
        }
        log_event(recipe, "start", job, json!({"attempt": attempt}));
        let mut ctx = ActivityContext {
            node: job.node.clone(),
            attempt,
            inputs: job.inputs.iter().map(|(k, u)| (k.clone(), env.artifact(u.clone()))).collect(),
            params: job.params.clone(),
            declared_outputs: job.outputs.keys().cloned().collect(),
            outputs: BTreeMap::new(),
            logs: Vec::new(),
        };
        let result = match catch_unwind(AssertUnwindSafe(|| (job.func)(&mut ctx))) {
            Ok(Ok(())) => match job.outputs.keys().find(|k| !ctx.outputs.contains_key(*k)) {
                Some(k) => Err(format!("output slot {k:?} was not written")),
                None => Ok(()),
            },
            Ok(Err(e)) => Err(e.to_string()),
            Err(p) => Err(format!("panicked: {}", panic_message(p))),
        };
        logs.append(&mut ctx.logs);
        let result = result.and_then(|()| {
            // Commit only after the body succeeded; each write is atomic.
            for (slot, bytes) in std::mem::take(&mut ctx.outputs) {
                env.write(&job.outputs[&slot], bytes).map_err(|e| e.to_string())?;
            }
            Ok(())
        });
        match result {
            Ok(()) => {
                error = None;
                break;
            }
            Err(e) => {
                log_event(recipe, "attempt_failed", job, json!({"attempt": attempt, "error": e}));
                logs.push(format!("attempt {attempt} failed: {e}"));
                error = Some(e);
            }
        }
    }

    let status = if error.is_none() { ActivityStatus::Success } else { ActivityStatus::Failed };
    if status == ActivityStatus::Success {
        if let Some(s) = current_stamp {
            if let Err(e) = env.kv.put(&stamp_key(recipe, &job.node), s.as_bytes()) {
                logs.push(format!("could not record stamp: {e}"));
            }
        }
    }
    let wall = started.elapsed();
    log_event(
        recipe,
        "finish",
        job,
        json!({"status": status, "wall_ms": wall.as_secs_f64() * 1e3, "retries": retries, "error": error}),
    );
    Outcome { index: job.index, status, started, wall, retries, logs, error }
}

/// Runs a validated DAG. Source artifacts must exist before anything
/// starts; a failed activity marks all transitive dependents skipped.
pub fn execute(
    dag: &RecipeDag,
    registry: &ActivityRegistry,
    env: &ArtifactEnv,
    opts: &ExecuteOptions,
) -> Result<RunReport, PipelineError> {
    let max_workers = match &opts.executor {
        Executor::Sequential => 1,
        Executor::Parallel { max_workers: 0 } => return Err(PipelineError::BadExecutor("parallel:0".into())),
        Executor::Parallel { max_workers } => *max_workers,
        Executor::Remote { .. } => return Err(PipelineError::Unsupported(opts.executor.to_string())),
    };
    dag.validate(registry)?;
    let params = dag.resolve_params(&opts.params)?;

    let mut jobs = Vec::with_capacity(dag.nodes.len());
    for (index, n) in dag.nodes.iter().enumerate() {
        let spec = registry.spec(&n.activity).expect("validated");
        let resolve = |m: &BTreeMap<String, String>| -> Result<BTreeMap<String, ArtifactUri>, PipelineError> {
            m.iter().map(|(k, u)| Ok((k.clone(), ArtifactUri::parse(&substitute(u, &params)?)?))).collect()
        };
        let mut node_params = BTreeMap::new();
        for p in &spec.params {
            let v = match n.params.get(&p.name) {
                Some(v) => substitute_value(v, &params)?,
                None => p.default.clone().expect("validated"),
            };
            p.kind.check(&p.name, &v)?;
            node_params.insert(p.name.clone(), v);
        }
        jobs.push(Job {
            index,
            node: n.id.clone(),
            activity: n.activity.clone(),
            func: registry.function(&n.activity).expect("validated"),
            inputs: resolve(&n.inputs)?,
            outputs: resolve(&n.outputs)?,
            params: node_params,
        });
    }

    let produced: BTreeSet<&ArtifactUri> = jobs.iter().flat_map(|j| j.outputs.values()).collect();
    for j in &jobs {
        for uri in j.inputs.values() {
            if !produced.contains(uri) && !env.exists(uri) {
                return Err(PipelineError::MissingArtifact(uri.to_string()));
            }
        }
    }

    let preds = dag.predecessors();
    let succs = dag.successors();
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut ready: BinaryHeap<Reverse<usize>> = (0..jobs.len()).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut status: Vec<Option<ActivityStatus>> = vec![None; jobs.len()];
    let mut records: Vec<Option<ActivityRecord>> = vec![None; jobs.len()];
    let mut start_order = Vec::new();
    let mut cancelled = false;
    let run_start = Instant::now();
    let ms = |d: Duration| d.as_secs_f64() * 1e3;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<Outcome>();
        let mut in_flight = 0usize;
        loop {
            while in_flight < max_workers {
                let Some(Reverse(i)) = ready.pop() else { break };
                let job = &jobs[i];
                let upstream_failed = preds[i].iter().any(|&p| !status[p].is_some_and(ActivityStatus::is_ok));
                let is_cancelled = opts.cancel.as_ref().is_some_and(CancelToken::is_cancelled);
                if upstream_failed || is_cancelled {
                    cancelled |= is_cancelled;
                    let reason = if is_cancelled { "executor cancelled" } else { "upstream activity did not succeed" };
                    log_event(&dag.name, "skipped", job, json!({"reason": reason}));
                    status[i] = Some(ActivityStatus::Skipped);
                    records[i] = Some(ActivityRecord {
                        node: job.node.clone(),
                        activity: job.activity.clone(),
                        status: ActivityStatus::Skipped,
                        started_ms: ms(run_start.elapsed()),
                        wall_ms: 0.0,
                        retries: 0,
                        logs: Vec::new(),
                        error: Some(reason.to_string()),
                    });
                    for &s in &succs[i] {
                        indeg[s] -= 1;
                        if indeg[s] == 0 {
                            ready.push(Reverse(s));
                        }
                    }
                    continue;
                }
                start_order.push(job.node.clone());
                in_flight += 1;
                let tx = tx.clone();
                let recipe = dag.name.as_str();
                scope.spawn(move || {
                    let _ = tx.send(run_job(job, recipe, env, opts));
                });
            }
            if in_flight == 0 {
                break;
            }
            let out = rx.recv().expect("workers hold a sender until they report");
            in_flight -= 1;
            let i = out.index;
            status[i] = Some(out.status);
            records[i] = Some(ActivityRecord {
                node: jobs[i].node.clone(),
                activity: jobs[i].activity.clone(),
                status: out.status,
                started_ms: ms(out.started.duration_since(run_start)),
                wall_ms: ms(out.wall),
                retries: out.retries,
                logs: out.logs,
                error: out.error,
            });
            for &s in &succs[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
    });

    let mut outputs = BTreeMap::new();
    let producers = dag.producers();
    for o in &dag.outputs {
        let ok = producers.get(o.as_str()).is_some_and(|&p| status[p].is_some_and(ActivityStatus::is_ok));
        let uri = ArtifactUri::parse(&substitute(o, &params)?)?;
        if ok && env.exists(&uri) {
            outputs.insert(uri.to_string(), env.artifact(uri).digest()?);
        }
    }
    Ok(RunReport {
        recipe: dag.name.clone(),
        executor: opts.executor.to_string(),
        records: records.into_iter().map(|r| r.expect("every node is finalized")).collect(),
        start_order,
        total_wall_ms: ms(run_start.elapsed()),
        outputs,
        cancelled,
    })
}
