use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bem_core::dataio::{
    align, load_labels, load_model, load_table, parse_kv, save_model, write_atomic, write_labels,
    write_table, AlignPolicy, EmbeddingTable, LabelTable,
};
use bem_core::evalkit::{
    cluster_ratio, evaluate_classification, hit_recall, random_project, similarity_histogram,
    ClassifierSettings, UserQuery,
};
use bem_core::synthgen::{generate, table_mse, SynthSpec};
use bem_core::trainer::{preprocess, refine, train, Mode, TrainConfig, TrainReport};
use bem_core::{rng, EdgeFunction};
use clap::Parser;
use serde_json::json;

use crate::manifest::{file_crc, Manifest};
use crate::{
    AlignArg, Cli, CliResult, Command, EdgeArg, EvalArgs, Failure, HyperFlags, Metric, ModeArg,
    RefineArgs, SweepArgs, SweepParam, SynthArgs, Task, TrainArgs,
};

/// Runs one command. `replaying` lets outputs overwrite existing files.
pub fn dispatch(command: Command, args: Vec<String>, replaying: bool) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(&a, args, replaying),
        Command::Train(a) => train_cmd(&a, args),
        Command::Refine(a) => refine_cmd(&a, args),
        Command::Eval(a) => eval_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a, args),
        Command::Replay { manifest } => replay(&manifest),
    }
}

fn synth(a: &SynthArgs, args: Vec<String>, replaying: bool) -> CliResult<()> {
    if a.out.exists() && !a.force && !replaying {
        return Err(Failure::data(format!(
            "{} already exists; pass --force to write into it",
            a.out.display()
        )));
    }
    let started = Instant::now();
    let spec = SynthSpec {
        n: a.n,
        d_w: a.d_w,
        d_z: a.d_z,
        n_clusters: a.clusters,
        delta_scale: a.delta_scale,
        noise_scale: a.noise_scale,
        hidden_dim: a.hidden,
        cluster_spread: a.cluster_spread,
        signal_scale: a.signal_scale,
        seed: a.seed,
    };
    let truth = generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    let mut m = Manifest::new("synth", args);
    m.seed = Some(a.seed);
    for (name, table) in [("kg", &truth.w), ("bg", &truth.z), ("truth", &truth.nu)] {
        let path = a.out.join(format!("{name}.tsv"));
        write_table(&path, table)?;
        m.output(name, &path)?;
    }
    let labels = a.out.join("labels.tsv");
    write_labels(&labels, &truth.labels)?;
    m.output("labels", &labels)?;
    m.config_text(&format!(
        "n = {}\nd_w = {}\nd_z = {}\nclusters = {}\ndelta_scale = {}\nnoise_scale = {}\nhidden = {}\ncluster_spread = {}\nsignal_scale = {}\n",
        spec.n,
        spec.d_w,
        spec.d_z,
        spec.n_clusters,
        spec.delta_scale,
        spec.noise_scale,
        spec.hidden_dim,
        spec.cluster_spread,
        spec.signal_scale
    ));
    m.wall_clock = started.elapsed().as_secs_f64();
    m.write(&a.out.join("manifest.txt"))?;
    println!("wrote {} entities to {}", spec.n, a.out.display());
    Ok(())
}

/// Effective configuration: flags over the config file over defaults.
pub fn resolve_config(h: &HyperFlags) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &h.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let kv = parse_kv(&text)
            .map_err(|(line, msg)| Failure::data(format!("{}:{line}: {msg}", path.display())))?;
        let mut keys: Vec<_> = kv.iter().collect();
        keys.sort();
        for (k, v) in keys {
            if !cfg.set(k, v)? {
                return Err(Failure::usage(format!(
                    "{}: unknown key `{k}` (known: {})",
                    path.display(),
                    TrainConfig::KEYS.join(", ")
                )));
            }
        }
    }
    if let Some(m) = h.mode {
        cfg.mode = match m {
            ModeArg::P => Mode::Pairwise,
            ModeArg::I => Mode::Independent,
        };
    }
    if let Some(e) = h.edge {
        cfg.edge = match e {
            EdgeArg::Translation => EdgeFunction::Translation,
            EdgeArg::Inner => EdgeFunction::InnerProduct,
            EdgeArg::Identity => EdgeFunction::Identity,
        };
    }
    if cfg.mode == Mode::Independent && cfg.edge != EdgeFunction::Identity {
        if h.edge.is_some() {
            eprintln!("note: mode i uses the identity edge; ignoring --edge");
        }
        cfg.edge = EdgeFunction::Identity;
    }
    macro_rules! flag {
        ($($field:ident <- $flag:ident),*) => {$(
            if let Some(v) = h.$flag {
                cfg.$field = v;
            }
        )*};
    }
    flag!(batch_size <- batch_size, epochs <- epochs, lambda1 <- lambda1, lambda2 <- lambda2,
          learning_rate <- lr, hidden_dim <- hidden, bootstrap_reps <- bootstrap, n_iter <- n_iter,
          seed <- seed, normalize_inputs <- normalize);
    Ok(cfg)
}

fn load_pair(
    kg: &Path,
    bg: &Path,
    policy: AlignArg,
) -> CliResult<(EmbeddingTable, EmbeddingTable)> {
    let kg_table = load_table(kg, None)?;
    let bg_table = load_table(bg, None)?;
    let policy = match policy {
        AlignArg::Strict => AlignPolicy::Strict,
        AlignArg::Intersect => AlignPolicy::Intersect,
    };
    let aligned = align(&kg_table, &bg_table, policy)?;
    if aligned.dropped_kg + aligned.dropped_bg > 0 {
        eprintln!(
            "note: dropped {} kg-only and {} bg-only entities",
            aligned.dropped_kg, aligned.dropped_bg
        );
    }
    Ok((aligned.kg, aligned.bg))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn step_log(report: &TrainReport) -> String {
    let mut s = String::from("step\telbo\treconstruction\tkl\n");
    for r in &report.records {
        s.push_str(&format!(
            "{}\t{:e}\t{:e}\t{:e}\n",
            r.step, r.elbo, r.reconstruction, r.kl
        ));
    }
    s
}

fn train_cmd(a: &TrainArgs, args: Vec<String>) -> CliResult<()> {
    let cfg = resolve_config(&a.hyper)?;
    let (kg, bg) = load_pair(&a.kg, &a.bg, a.align)?;
    let started = Instant::now();
    let trained = train(&kg, &bg, &cfg)?;
    let seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_model(&a.out, &trained.f, &trained.h, &cfg)?;
    let steps = with_suffix(&a.out, ".steps.tsv");
    write_atomic(&steps, step_log(&trained.report).as_bytes())?;

    let mut m = Manifest::new("train", args);
    m.seed = Some(cfg.seed);
    m.config_text(&cfg.to_kv());
    m.input("kg", &a.kg);
    m.input("bg", &a.bg);
    if let Some(c) = &a.hyper.config {
        m.input("config", c);
    }
    m.output("model", &a.out)?;
    m.output("steps", &steps)?;
    m.wall_clock = seconds;
    m.write(&with_suffix(&a.out, ".manifest"))?;

    let last = trained.report.records.last().expect("at least one step");
    println!("steps = {}", trained.report.records.len());
    println!("entities = {}", kg.len());
    println!("final_elbo = {}", last.elbo);
    println!("checksum = {:08x}", trained.report.checksum);
    println!("seconds = {seconds:.3}");
    Ok(())
}

fn refine_cmd(a: &RefineArgs, args: Vec<String>) -> CliResult<()> {
    let started = Instant::now();
    let (f, h, cfg) = load_model(&a.model)?;
    let (kg, bg) = load_pair(&a.kg, &a.bg, a.align)?;
    let (kg_r, bg_r) = refine(&preprocess(&kg, &cfg), &preprocess(&bg, &cfg), &f, &h)?;
    fs::create_dir_all(&a.out)?;
    let mut m = Manifest::new("refine", args);
    m.seed = Some(cfg.seed);
    m.config_text(&cfg.to_kv());
    m.input("kg", &a.kg);
    m.input("bg", &a.bg);
    m.input("model", &a.model);
    for (name, table) in [("kg_refined", &kg_r), ("bg_refined", &bg_r)] {
        let path = a.out.join(format!("{name}.tsv"));
        write_table(&path, table)?;
        m.output(name, &path)?;
    }
    m.wall_clock = started.elapsed().as_secs_f64();
    m.write(&a.out.join("manifest.txt"))?;
    println!("refined {} entities into {}", kg_r.len(), a.out.display());
    Ok(())
}

fn need_labels(a: &EvalArgs) -> CliResult<LabelTable> {
    let path = a
        .labels
        .as_ref()
        .ok_or_else(|| Failure::usage("this task needs --labels"))?;
    Ok(load_labels(path)?)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// `user<TAB>trigger,trigger<TAB>attr,attr` per line; `#` lines are skipped.
fn load_users(path: &Path) -> CliResult<Vec<UserQuery>> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let split = |s: &str| -> Vec<String> {
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(String::from)
            .collect()
    };
    let mut users = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Failure::data(format!(
                "{}:{}: expected user, triggers and attributes separated by tabs",
                path.display(),
                i + 1
            )));
        }
        users.push(UserQuery {
            triggers: split(fields[1]),
            truth: split(fields[2]),
        });
    }
    Ok(users)
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let mut table = load_table(&a.table, None)?;
    if a.table2.is_some() && a.task != Task::Classify {
        return Err(Failure::usage("--table2 is only used by the classify task"));
    }
    let mut report: Vec<(String, serde_json::Value)> =
        vec![("table".into(), json!(a.table.display().to_string()))];
    let mut extra_rows = String::new();
    match a.task {
        Task::Classify => {
            let labels = need_labels(a)?;
            if let Some(t2) = &a.table2 {
                let other = load_table(t2, None)?;
                let aligned = align(&table, &other, AlignPolicy::Intersect)?;
                table = aligned.kg.concat(&aligned.bg)?;
                report.push(("table2".into(), json!(t2.display().to_string())));
            }
            if a.splits == 0 || a.n_proj == 0 {
                return Err(Failure::usage("--splits and --n-proj must be positive"));
            }
            let settings = ClassifierSettings::default();
            let variants: Vec<EmbeddingTable> = match a.project_dim {
                Some(k) => (0..a.n_proj as u64)
                    .map(|p| {
                        random_project(
                            &table,
                            k,
                            &mut rng::stream(a.seed.wrapping_add(p), "projection"),
                        )
                    })
                    .collect::<Result<_, _>>()?,
                None => vec![table.clone()],
            };
            let mut accs = Vec::new();
            for t in &variants {
                for s in 0..a.splits as u64 {
                    accs.push(evaluate_classification(
                        t,
                        &labels,
                        a.train_fraction,
                        a.seed.wrapping_add(s),
                        settings,
                    )?);
                }
            }
            let (mean, sd) = mean_sd(&accs);
            report.push(("task".into(), json!("classify")));
            report.push(("dim".into(), json!(variants[0].dim())));
            report.push(("runs".into(), json!(accs.len())));
            report.push(("accuracy_mean".into(), json!(mean)));
            report.push(("accuracy_sd".into(), json!(sd)));
            report.push(("accuracy_se".into(), json!(sd / (accs.len() as f64).sqrt())));
        }
        Task::Histogram => {
            let hist =
                similarity_histogram(&table, a.pairs, a.bins, &mut rng::stream(a.seed, rng::EVAL))?;
            report.push(("task".into(), json!("histogram")));
            report.push(("pairs_counted".into(), json!(hist.counted)));
            report.push(("pairs_skipped_zero_norm".into(), json!(hist.skipped)));
            report.push(("mean".into(), json!(hist.mean)));
            report.push(("variance".into(), json!(hist.variance)));
            let rows: Vec<_> = hist.rows().collect();
            extra_rows.push_str("bin_left\tbin_right\tmass\n");
            for (l, r, mass) in &rows {
                extra_rows.push_str(&format!("{l}\t{r}\t{mass}\n"));
            }
            report.push(("bins".into(), json!(rows)));
        }
        Task::ClusterRatio => {
            let labels = need_labels(a)?;
            let r = cluster_ratio(&table, &labels)?;
            report.push(("task".into(), json!("cluster-ratio")));
            report.push(("classes".into(), json!(r.classes)));
            report.push((
                "ratio".into(),
                json!(if r.ratio.is_finite() {
                    json!(r.ratio)
                } else {
                    json!("inf")
                }),
            ));
            report.push(("max_within".into(), json!(r.max_within)));
            report.push(("min_between".into(), json!(r.min_between)));
            if let Some(d) = &r.diagnostic {
                eprintln!("note: {d}");
                report.push(("diagnostic".into(), json!(d)));
            }
        }
        Task::Recall => {
            let labels = need_labels(a)?;
            let candidates = match &a.candidates {
                Some(p) => load_table(p, None)?,
                None => table.clone(),
            };
            let attributes: HashMap<String, String> = labels
                .ids()
                .iter()
                .zip(labels.labels())
                .filter_map(|(id, l)| l.first().map(|first| (id.clone(), first.clone())))
                .collect();
            let users = match &a.users {
                Some(p) => load_users(p)?,
                // every labeled entity queries with itself and wants its own labels
                None => table
                    .ids()
                    .iter()
                    .filter_map(|id| {
                        labels.get(id).map(|l| UserQuery {
                            triggers: vec![id.clone()],
                            truth: l.to_vec(),
                        })
                    })
                    .collect(),
            };
            let r = hit_recall(&table, &candidates, &users, &attributes, a.k)?;
            report.push(("task".into(), json!("recall")));
            report.push(("k".into(), json!(a.k)));
            report.push(("users".into(), json!(users.len())));
            report.push(("recall".into(), json!(r.recall)));
            report.push(("hits".into(), json!(r.hits)));
            report.push(("total".into(), json!(r.total)));
            report.push(("skipped_triggers".into(), json!(r.skipped_triggers)));
        }
    }
    let mut out = std::io::stdout().lock();
    for (k, v) in &report {
        if k == "bins" {
            continue;
        }
        match v {
            serde_json::Value::String(s) => writeln!(out, "{k} = {s}")?,
            other => writeln!(out, "{k} = {other}")?,
        }
    }
    write!(out, "{extra_rows}")?;
    if let Some(path) = &a.json {
        let obj: serde_json::Map<String, serde_json::Value> = report.into_iter().collect();
        let text = serde_json::to_string_pretty(&obj).expect("json values serialize");
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn parse_values(param: SweepParam, raw: &str) -> CliResult<Vec<f64>> {
    let values: Vec<f64> = raw
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Failure::usage(format!("--values: `{s}` is not a number")))
        })
        .collect::<CliResult<_>>()?;
    if values.len() < 2 {
        return Err(Failure::usage("--values needs at least two values"));
    }
    if matches!(param, SweepParam::NB | SweepParam::Nh)
        && values.iter().any(|v| v.fract() != 0.0 || *v < 1.0)
    {
        return Err(Failure::usage(
            "--values for nB and nh must be positive integers",
        ));
    }
    Ok(values)
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::Lambda1 => "lambda1",
        SweepParam::Lambda2 => "lambda2",
        SweepParam::Lr => "lr",
        SweepParam::NB => "nB",
        SweepParam::Nh => "nh",
        SweepParam::Epochs => "epochs",
    }
}

fn apply_param(cfg: &mut TrainConfig, p: SweepParam, v: f64) {
    match p {
        SweepParam::Lambda1 => cfg.lambda1 = v,
        SweepParam::Lambda2 => cfg.lambda2 = v,
        SweepParam::Lr => cfg.learning_rate = v,
        SweepParam::NB => cfg.batch_size = v as usize,
        SweepParam::Nh => cfg.hidden_dim = v as usize,
        SweepParam::Epochs => cfg.epochs = v,
    }
}

struct SweepRow {
    value: f64,
    steps: usize,
    elbo: f64,
    metric: f64,
    checksum: u32,
}

fn sweep_cmd(a: &SweepArgs, args: Vec<String>) -> CliResult<()> {
    let values = parse_values(a.param, &a.values)?;
    let base = resolve_config(&a.hyper)?;
    let metric = a.metric.unwrap_or(if a.truth.is_some() {
        Metric::Oracle
    } else if a.labels.is_some() {
        Metric::Classify
    } else {
        Metric::Elbo
    });
    let truth = match (metric, &a.truth) {
        (Metric::Oracle, Some(p)) => Some(load_table(p, None)?),
        (Metric::Oracle, None) => return Err(Failure::usage("--metric oracle needs --truth")),
        _ => None,
    };
    let labels = match (metric, &a.labels) {
        (Metric::Classify, Some(p)) => Some(load_labels(p)?),
        (Metric::Classify, None) => return Err(Failure::usage("--metric classify needs --labels")),
        _ => None,
    };
    let (kg, bg) = load_pair(&a.kg, &a.bg, a.align)?;
    let started = Instant::now();

    let run = |value: f64| -> CliResult<SweepRow> {
        let mut cfg = base.clone();
        apply_param(&mut cfg, a.param, value);
        let trained = train(&kg, &bg, &cfg)?;
        let records = &trained.report.records;
        let tail = records.len().div_ceil(10);
        let elbo = records[records.len() - tail..]
            .iter()
            .map(|r| r.elbo)
            .sum::<f64>()
            / tail as f64;
        let metric_value = match metric {
            Metric::Elbo => elbo,
            Metric::Oracle | Metric::Classify => {
                let (_, bg_r) = refine(
                    &preprocess(&kg, &cfg),
                    &preprocess(&bg, &cfg),
                    &trained.f,
                    &trained.h,
                )?;
                match (&truth, &labels) {
                    (Some(t), _) => table_mse(&bg_r, t)?,
                    (_, Some(l)) => evaluate_classification(
                        &bg_r,
                        l,
                        0.8,
                        cfg.seed,
                        ClassifierSettings::default(),
                    )?,
                    _ => unreachable!("metric inputs checked above"),
                }
            }
        };
        Ok(SweepRow {
            value,
            steps: records.len(),
            elbo,
            metric: metric_value,
            checksum: trained.report.checksum,
        })
    };

    let rows: Vec<SweepRow> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = values.iter().map(|&v| s.spawn(move || run(v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect::<CliResult<_>>()
        })?
    } else {
        values.iter().map(|&v| run(v)).collect::<CliResult<_>>()?
    };

    let metric_name = match metric {
        Metric::Elbo => "elbo",
        Metric::Oracle => "oracle_error",
        Metric::Classify => "accuracy",
    };
    let mut table = format!(
        "{}\tsteps\tfinal_elbo\t{metric_name}\tchecksum\n",
        param_name(a.param)
    );
    for r in &rows {
        table.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:08x}\n",
            r.value, r.steps, r.elbo, r.metric, r.checksum
        ));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        write_atomic(out, table.as_bytes())?;
        let mut m = Manifest::new("sweep", args);
        m.seed = Some(base.seed);
        m.config_text(&base.to_kv());
        m.input("kg", &a.kg);
        m.input("bg", &a.bg);
        m.output("table", out)?;
        m.wall_clock = started.elapsed().as_secs_f64();
        m.write(&with_suffix(out, ".manifest"))?;
    }
    Ok(())
}

fn replay(path: &Path) -> CliResult<()> {
    let m = Manifest::read(path)?;
    std::env::set_current_dir(&m.cwd).map_err(|e| {
        Failure::data(format!(
            "cannot enter recorded directory {}: {e}",
            m.cwd.display()
        ))
    })?;
    let cli = Cli::try_parse_from(std::iter::once("bem".to_string()).chain(m.args.iter().cloned()))
        .map_err(|e| Failure::usage(format!("recorded command does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Failure::usage("a manifest cannot record a replay"));
    }
    dispatch(cli.command, m.args.clone(), true)?;
    let mut differing = Vec::new();
    for (name, out, crc) in &m.outputs {
        let now = file_crc(out)?;
        let same = now == *crc;
        println!(
            "{} {name} {}",
            if same { "identical" } else { "DIFFERENT" },
            out.display()
        );
        if !same {
            differing.push(name.clone());
        }
    }
    if differing.is_empty() {
        Ok(())
    } else {
        Err(Failure::data(format!(
            "replay changed: {}",
            differing.join(", ")
        )))
    }
}
