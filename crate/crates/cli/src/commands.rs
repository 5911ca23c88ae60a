//! Verb implementations. Every verb parses and checks all of its inputs before
//! it writes anything, so a usage error leaves the file system untouched.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use einspace::grammar::{
    branching_rate, build_grammar, count_architecture_strings, critical_stop_probability, expected_string_length, Grammar,
    GrammarSkeleton, Variant,
};
use einspace::mutation::{mutate, mutate_at};
use einspace::rng::RandomSource;
use einspace::sampling::{random_population, SampleLimits};
use einspace::search::config::{SearchConfig, ENV_OUT_DIR};
use einspace::search::{run_search, EvaluatorConfig, FitnessEvaluator, RunError, RunOptions, TaskId, ToyTrainConfig};
use einspace::shape::{Mode, ShapeState};
use einspace::stats::sample_stats;
use einspace::tree::{ArchitectureTree, Blueprint, Head};
use serde_json::json;

use crate::{BlueprintArgs, Command, GrammarArgs, SeedsAction};

/// Writes to stdout; a closed pipe (`| head`) ends the process quietly.
pub fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        r => Ok(r?),
    }
}

macro_rules! outln {
    () => { emit("\n") };
    ($($t:tt)*) => { emit(&(format!($($t)*) + "\n")) };
}

macro_rules! out {
    ($($t:tt)*) => { emit(&format!($($t)*)) };
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Analyze { grammar, grammar_json, json } => analyze(&grammar, grammar_json.as_deref(), json),
        Command::Sample { grammar, blueprint, seed, count, out, json } => sample(&grammar, &blueprint, seed, count, out.as_deref(), json),
        Command::Mutate { tree, grammar, seed, node, out, json } => mutate_cmd(&tree, &grammar, seed, node, out.as_deref(), json),
        Command::Search { config, out_dir, resume, workers, stop_after, json } => {
            search(&config, out_dir, resume, workers, stop_after, json)
        }
        Command::Eval { tree, grammar, evaluator, task, epochs, task_seed, seed, json } => {
            eval(&tree, &grammar, &evaluator, task.as_deref(), epochs, task_seed, seed, json)
        }
        Command::Seeds { action } => seeds(action),
        Command::Stats { grammar, blueprint, n, seed, out_dir, plot, json } => stats(&grammar, &blueprint, n, seed, out_dir.as_deref(), plot, json),
        Command::Count { grammar, dyck, max_len, json } => count(&grammar, dyck, max_len, json),
    }
}

// argument parsing

fn parse_variant(s: &str) -> Result<Variant, Failure> {
    s.parse::<Variant>().map_err(usage)
}

fn grammar(args: &GrammarArgs, default: Variant) -> Result<Grammar, Failure> {
    let variant = match &args.variant {
        Some(v) => parse_variant(v)?,
        None => default,
    };
    build_grammar(variant, args.stop_probability).map_err(|e| usage(format!("--p: {e}")))
}

fn parse_dims(s: &str, n: usize, what: &str) -> Result<Vec<usize>, Failure> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| usage(format!("{what}: '{s}' is not a list of positive integers")))?;
    if dims.len() != n {
        return Err(usage(format!("{what}: expected {n} dimensions, got {}", dims.len())));
    }
    Ok(dims)
}

fn parse_input(s: &str) -> Result<ShapeState, Failure> {
    let state = match s.split_once(':') {
        Some(("im", d)) => {
            let d = parse_dims(d, 3, "--input")?;
            ShapeState::im(d[0], d[1], d[2])
        }
        Some(("col", d)) => {
            let d = parse_dims(d, 2, "--input")?;
            ShapeState::col(d[0], d[1])
        }
        _ => return Err(usage(format!("--input: '{s}' should look like im:3,32,32 or col:64,8"))),
    };
    state.check().map_err(|e| usage(format!("--input: {e}")))?;
    Ok(state)
}

fn parse_task(s: &str) -> Result<TaskId, Failure> {
    s.parse::<TaskId>().map_err(|e| usage(e.to_string()))
}

impl BlueprintArgs {
    fn is_set(&self) -> bool {
        self.input.is_some() || self.classes.is_some() || self.dense.is_some() || self.task.is_some()
    }

    fn resolve(&self, fallback: Blueprint) -> Result<Blueprint, Failure> {
        if let Some(t) = &self.task {
            return Ok(parse_task(t)?.blueprint());
        }
        let input = match &self.input {
            Some(s) => parse_input(s)?,
            None => fallback.input,
        };
        let head = match (&self.dense, self.classes) {
            (Some(d), _) => {
                let d = parse_dims(d, 3, "--dense")?;
                Head::Dense { channels: d[0], height: d[1], width: d[2] }
            }
            (None, Some(0)) => return Err(usage("--classes must be positive")),
            (None, Some(k)) => Head::Classification { classes: k },
            (None, None) => fallback.head,
        };
        Ok(Blueprint { input, head })
    }
}

fn default_blueprint() -> Blueprint {
    Blueprint { input: ShapeState::im(3, 32, 32), head: Head::Classification { classes: 10 } }
}

/// Image inputs default to the 2D grammar, sequence inputs to the 1D one.
fn variant_for(input: &ShapeState) -> Variant {
    match input.mode {
        Mode::Im => Variant::TwoD,
        Mode::Col => Variant::OneD,
    }
}

fn read_tree(path: &Path) -> Result<ArchitectureTree, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    ArchitectureTree::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

// output

/// Writes through a temporary sibling and a rename.
fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    outln!("{}", serde_json::to_string_pretty(v).expect("serialises"))
}

fn tree_value(t: &ArchitectureTree) -> serde_json::Value {
    serde_json::from_str(&t.to_json()).expect("tree JSON round-trips")
}

fn tree_summary(t: &ArchitectureTree) -> serde_json::Value {
    json!({
        "hash": t.hash(),
        "leaf_count": t.leaf_count(),
        "params": t.count_parameters().ok(),
        "leaves": t.leaves_string().join(" "),
    })
}

// verbs

fn analyze(args: &GrammarArgs, grammar_json: Option<&Path>, as_json: bool) -> Outcome {
    let g = grammar(args, Variant::TwoD)?;
    let rate = branching_rate(&g);
    let verdict = if rate < 1.0 {
        "sub-critical"
    } else if rate == 1.0 {
        "critical"
    } else {
        "super-critical"
    };
    let crit = critical_stop_probability(&g.family());
    let expected = expected_string_length(&g).ok();
    if let Some(path) = grammar_json {
        write_file(path, &serde_json::to_string_pretty(&g.to_json()).expect("serialises"))?;
    }
    if as_json {
        print_json(&json!({
            "variant": g.variant(),
            "stop_probability": g.stop_probability(),
            "branching_rate": rate,
            "verdict": verdict,
            "critical_stop_probability": crit.threshold,
            "always_subcritical": crit.always_subcritical,
            "expected_string_length": expected,
        }))?;
    } else {
        outln!("variant                    {}", variant_name(g.variant()))?;
        outln!("stop probability           {}", g.stop_probability())?;
        outln!("branching rate             {rate:.6}")?;
        outln!("verdict                    {verdict}")?;
        if crit.always_subcritical {
            outln!("critical stop probability  none (sub-critical for every p > 0)")?;
        } else {
            outln!("critical stop probability  {:.6}", crit.threshold)?;
        }
        match expected {
            Some(e) => outln!("expected string length     {e:.6}")?,
            None => outln!("expected string length     infinite (super-critical)")?,
        }
    }
    Ok(())
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::TwoD => "2d",
        Variant::OneD => "1d",
    }
}

fn sample(args: &GrammarArgs, bp: &BlueprintArgs, seed: u64, count: usize, out: Option<&Path>, as_json: bool) -> Outcome {
    if count == 0 {
        return Err(usage("--count must be positive"));
    }
    let bp = bp.resolve(default_blueprint())?;
    let g = grammar(args, variant_for(&bp.input))?;
    let trees = random_population(&g, &bp, count, &RandomSource::new(seed), &SampleLimits::default())
        .context("sampling")?;
    if let Some(path) = out {
        let text = if count == 1 {
            trees[0].to_json_pretty()
        } else {
            trees.iter().map(|t| t.to_json() + "\n").collect()
        };
        write_file(path, &text)?;
    }
    if as_json {
        let items: Vec<_> = trees
            .iter()
            .map(|t| {
                let mut v = tree_summary(t);
                v["tree"] = tree_value(t);
                v
            })
            .collect();
        print_json(&json!(items))?;
    } else {
        for t in &trees {
            outln!("{}  {}", &t.hash()[..12], t)?;
        }
    }
    Ok(())
}

fn mutate_cmd(path: &Path, args: &GrammarArgs, seed: u64, node: Option<usize>, out: Option<&Path>, as_json: bool) -> Outcome {
    let tree = read_tree(path)?;
    let g = grammar(args, variant_for(&tree.input))?;
    let limits = SampleLimits::default();
    tree.validate(&g, &tree.input, &limits).map_err(|v| {
        usage(format!(
            "{} does not validate under this grammar: {}",
            path.display(),
            v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
        ))
    })?;
    if let Some(id) = node {
        if tree.root.find(id).is_none() {
            return Err(usage(format!("--node: no node {id} in the tree")));
        }
    }
    let mut rng = RandomSource::new(seed);
    let child = match node {
        Some(id) => mutate_at(&tree, &g, id, &mut rng, &limits),
        None => mutate(&tree, &g, &mut rng, &limits),
    }
    .context("mutation")?;
    if let Some(p) = out {
        write_file(p, &child.to_json_pretty())?;
    }
    if as_json {
        print_json(&json!({ "parent": tree_summary(&tree), "child": tree_summary(&child), "tree": tree_value(&child) }))?;
    } else {
        outln!("parent  {}  {}", &tree.hash()[..12], tree)?;
        outln!("child   {}  {}", &child.hash()[..12], child)?;
    }
    Ok(())
}

fn search(config: &Path, out_dir: Option<PathBuf>, resume: bool, workers: Option<usize>, stop_after: Option<u64>, as_json: bool) -> Outcome {
    let mut cfg = SearchConfig::load(config).map_err(|e| usage(format!("{}: {e}", config.display())))?;
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let config_out = cfg.out_dir.clone();
    cfg.apply_env().map_err(|e| usage(e.to_string()))?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    // precedence: --out-dir, then the environment, then the config (relative to its file)
    let env_out = std::env::var_os(ENV_OUT_DIR).is_some();
    let out = match (out_dir, env_out, config_out) {
        (Some(d), _, _) => d,
        (None, true, _) => cfg.out_dir.clone().expect("set from the environment"),
        (None, false, Some(d)) => base.join(d),
        (None, false, None) => base.join("runs").join(config.file_stem().unwrap_or_default()),
    };
    cfg.resolve(&base).map_err(|e| usage(e.to_string()))?;
    let has_run = out.join("checkpoint.json").exists() || out.join("history.jsonl").exists();
    if resume && !out.join("checkpoint.json").exists() {
        return Err(usage(format!("--resume: no checkpoint in {}", out.display())));
    }
    if !resume && has_run {
        return Err(usage(format!("{} already holds a run; pass --resume or choose another --out-dir", out.display())));
    }
    let outcome = match run_search(&cfg, &base, &out, RunOptions { resume, stop_after }) {
        Ok(o) => o,
        Err(e @ (RunError::Config(_) | RunError::Exists(_) | RunError::Resume(_))) => return Err(usage(e.to_string())),
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    if as_json {
        print_json(&json!({
            "out_dir": outcome.out_dir,
            "completed": outcome.completed,
            "steps_run": outcome.steps_run,
            "report": outcome.report,
        }))?;
    } else {
        outln!("output     {}", outcome.out_dir.display())?;
        outln!("status     {}", if outcome.completed { "completed" } else { "stopped (resume with --resume)" })?;
        outln!("evaluated  {}", outcome.report.evaluated)?;
        if let Some(b) = &outcome.best {
            outln!("best       {:.6}  {}  {} params", b.fitness(), &b.hash[..12], b.params())?;
            outln!("           {}", b.tree)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(path: &Path, args: &GrammarArgs, kind: &str, task: Option<&str>, epochs: usize, task_seed: u64, seed: u64, as_json: bool) -> Outcome {
    let tree = read_tree(path)?;
    let g = grammar(args, variant_for(&tree.input))?;
    let config = match kind {
        "validity" => EvaluatorConfig::Validity,
        "param-surrogate" => EvaluatorConfig::ParamSurrogate,
        "toy-train" => {
            let task = match task {
                Some(t) => parse_task(t)?,
                None => TaskId::ALL
                    .into_iter()
                    .find(|t| t.blueprint() == tree.blueprint())
                    .ok_or_else(|| usage("no built-in task matches the tree's input and head; pass --task"))?,
            };
            if epochs == 0 {
                return Err(usage("--epochs must be positive"));
            }
            EvaluatorConfig::ToyTrain(ToyTrainConfig { task, task_seed, epochs, ..ToyTrainConfig::default() })
        }
        other => return Err(usage(format!("--evaluator: unknown evaluator '{other}'"))),
    };
    let ev = FitnessEvaluator::new(config, g, SampleLimits::default());
    let r = match ev.evaluate(&tree, seed) {
        Ok(r) => r,
        Err(e @ (einspace::search::EvalError::Invalid(_) | einspace::search::EvalError::TaskMismatch { .. })) => {
            return Err(usage(format!("{}: {e}", path.display())))
        }
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    if as_json {
        print_json(&json!({
            "evaluator": ev.descriptor(),
            "tree_hash": tree.hash(),
            "fitness": r.fitness,
            "status": r.status,
            "params": r.params,
            "leaf_count": r.leaf_count,
        }))?;
    } else {
        outln!("evaluator  {}", ev.config().name())?;
        outln!("fitness    {}", r.fitness)?;
        outln!("status     {}", serde_json::to_value(r.status).expect("serialises").as_str().unwrap_or("?"))?;
        outln!("params     {}", r.params)?;
    }
    Ok(())
}

fn seeds(action: SeedsAction) -> Outcome {
    let find = |name: &str| einspace::seeds::by_name(name).map_err(|e| usage(e.to_string()));
    let build = |name: &str, bp: &BlueprintArgs| -> Result<ArchitectureTree, Failure> {
        let d = find(name)?;
        if bp.is_set() {
            let blueprint = bp.resolve(d.blueprint.clone())?;
            d.build(&blueprint).map_err(|e| usage(e.to_string()))
        } else {
            Ok(d.build_default())
        }
    };
    match action {
        SeedsAction::List { json: as_json } => {
            let rows: Vec<_> = einspace::seeds::catalogue()
                .into_iter()
                .map(|d| {
                    let t = d.build_default();
                    json!({
                        "name": d.name,
                        "summary": d.summary,
                        "input": d.blueprint.input.to_string(),
                        "head": d.blueprint.head,
                        "params": t.count_parameters().ok(),
                        "leaf_count": t.leaf_count(),
                        "reference_params": d.reference_params.map(|(n, tol)| json!({"count": n, "tolerance": tol})),
                    })
                })
                .collect();
            if as_json {
                print_json(&json!(rows))?;
            } else {
                for r in rows {
                    outln!(
                        "{:<16} {:<14} {:>10} params  {}",
                        r["name"].as_str().unwrap_or(""),
                        r["input"].as_str().unwrap_or(""),
                        r["params"],
                        r["summary"].as_str().unwrap_or("")
                    )?;
                }
            }
        }
        SeedsAction::Show { name, blueprint, json: as_json } => {
            let t = build(&name, &blueprint)?;
            if as_json {
                print_json(&tree_summary(&t))?;
            } else {
                outln!("{t}")?;
            }
        }
        SeedsAction::Export { name, blueprint, out } => {
            let t = build(&name, &blueprint)?;
            match out {
                Some(p) => write_file(&p, &t.to_json_pretty())?,
                None => outln!("{}", t.to_json_pretty())?,
            }
        }
    }
    Ok(())
}

fn stats(args: &GrammarArgs, bp: &BlueprintArgs, n: usize, seed: u64, out_dir: Option<&Path>, plot: bool, as_json: bool) -> Outcome {
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let bp = bp.resolve(default_blueprint())?;
    let g = grammar(args, variant_for(&bp.input))?;
    let st = sample_stats(&g, &bp, n, seed, &SampleLimits::default()).context("sampling")?;
    if let Some(dir) = out_dir {
        write_file(&dir.join("stats.csv"), &st.table_csv())?;
        write_file(&dir.join("histogram.csv"), &st.histogram_csv())?;
        if plot {
            write_file(&dir.join("histogram.svg"), &st.histogram_svg())?;
        }
    }
    if as_json {
        print_json(&serde_json::to_value(&st).expect("serialises"))?;
    } else {
        out!("{}", st.table_csv())?;
        outln!()?;
        out!("{}", st.histogram_csv())?;
    }
    Ok(())
}

fn count(args: &GrammarArgs, dyck: bool, max_len: usize, as_json: bool) -> Outcome {
    let skel = if dyck { GrammarSkeleton::dyck1() } else { GrammarSkeleton::of_grammar(&grammar(args, Variant::TwoD)?) };
    let rows: Vec<(usize, String)> = (1..=max_len).map(|n| (n, count_architecture_strings(&skel, n).to_string())).collect();
    if as_json {
        print_json(&json!(rows.iter().map(|(n, c)| json!({"length": n, "count": c})).collect::<Vec<_>>()))?;
    } else {
        outln!("length,count")?;
        for (n, c) in rows {
            outln!("{n},{c}")?;
        }
    }
    Ok(())
}
