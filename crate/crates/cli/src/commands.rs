//! Command implementations.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use maskdistill_core::analysis::{
    answer_accuracy, interval_kl_decay, masked_distance_histogram, mean_visual_attention_map,
    visual_attention_curve, write_visual_map_csv,
};
use maskdistill_core::checkpoint;
use maskdistill_core::corpus::{self, CorpusParams, Split, TaskSample, VocabSpec};
use maskdistill_core::distill::{
    build_distill_set, inspect_step, run_training, train_teacher, DistillConfig, DistillSet,
    Model64, RunMode, RunOutput, METRICS_HEADER,
};
use maskdistill_core::rng::CounterRng;
use maskdistill_core::seq::Sequence;

use crate::runcfg::{
    create_run_dir, resolve_out_root, sha256_file, write_snapshot, RunConfig,
};
use crate::{CliError, Cmd, Common};

pub fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenCorpus {
            n,
            seed,
            hops,
            facts,
            out,
        } => gen_corpus(n, seed, hops, facts, &out),
        Cmd::TrainTeacher {
            corpus,
            run_name,
            no_eval,
            common,
        } => cmd_train_teacher(&corpus, &run_name, no_eval, &common),
        Cmd::Distill {
            corpus,
            teacher,
            run_name,
            common,
        } => cmd_distill(&corpus, &teacher, &run_name, &common),
        Cmd::SelfDistill {
            corpus,
            model,
            run_name,
            common,
        } => cmd_self_distill(&corpus, &model, &run_name, &common),
        Cmd::Ablate {
            corpus,
            teacher,
            run_name,
            masks,
            strategies,
            threshold_modes,
            rho_ranges,
            seeds,
            common,
        } => cmd_ablate(
            &corpus,
            teacher.as_deref(),
            &run_name,
            &masks,
            &strategies,
            &threshold_modes,
            &rho_ranges,
            &seeds,
            &common,
        ),
        Cmd::Analyze {
            what,
            corpus,
            model,
            teacher,
            limit,
            sample_index,
            common,
        } => cmd_analyze(
            &what,
            &corpus,
            &model,
            teacher.as_deref(),
            limit,
            sample_index,
            &common,
        ),
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.apply_overrides(&common.sets)?;
    Ok(cfg)
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

struct LoadedCorpus {
    train: Vec<TaskSample>,
    eval: Vec<TaskSample>,
    hash: String,
}

fn load_split_corpus(path: &Path) -> Result<LoadedCorpus, CliError> {
    let samples = corpus::load_corpus(path)?;
    let hash = sha256_file(path)?;
    let (train, eval): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);
    Ok(LoadedCorpus { train, eval, hash })
}

fn sequences_of(samples: &[TaskSample], max_seq_len: usize) -> Result<Vec<Sequence>, CliError> {
    samples
        .iter()
        .map(|s| corpus::layout_of(s, max_seq_len).map_err(CliError::from))
        .collect()
}

// ── gen-corpus ──────────────────────────────────────────────────────

fn gen_corpus(n: usize, seed: u64, hops: u8, facts: usize, out: &Path) -> Result<(), CliError> {
    let params = CorpusParams {
        n_facts: facts,
        hops,
        vocab: VocabSpec::default(),
    };
    let vocab_size = RunConfig::default().vocab_size;
    let stats = corpus::gen_corpus(n, seed, &params, vocab_size, out)?;
    let hash = sha256_file(out)?;
    println!(
        "wrote {} total={} train={} eval={} sha256={}",
        out.display(),
        stats.total,
        stats.train,
        stats.eval,
        hash
    );
    Ok(())
}

// ── train-teacher ───────────────────────────────────────────────────

fn cmd_train_teacher(
    corpus_path: &Path,
    run_name: &str,
    no_eval: bool,
    common: &Common,
) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let (root, env_val) = resolve_out_root(common.out_dir.as_deref());
    let dir = create_run_dir(&root, run_name, common.force)?;
    let loaded = load_split_corpus(corpus_path)?;
    if loaded.train.is_empty() {
        return Err(CliError::runtime("corpus has no training samples"));
    }
    let train_seqs = sequences_of(&loaded.train, cfg.max_seq_len)?;

    let tcfg = cfg.teacher_train_config();
    let (teacher, losses) = train_teacher(&tcfg, &train_seqs)?;

    let ckpt = dir.join("teacher.ckpt");
    checkpoint::save(&teacher, &ckpt)?;
    let mut metrics = String::from("interval,loss\n");
    for (i, l) in losses.iter().enumerate() {
        metrics.push_str(&format!("{},{}\n", i + 1, l));
    }
    write_file(&dir.join("metrics.csv"), &metrics)?;

    let mut extra = vec![
        ("corpus_path", corpus_path.display().to_string()),
        ("corpus_hash", loaded.hash.clone()),
        ("out_root_env", env_val.unwrap_or_default()),
        ("command", "train-teacher".to_string()),
    ];
    if !no_eval && !loaded.eval.is_empty() {
        let acc = answer_accuracy(&teacher, &loaded.eval, cfg.max_new)?;
        let mut buf = Vec::new();
        acc.write_csv("eval", &mut buf).expect("vec write");
        write_file(&dir.join("accuracy.csv"), &String::from_utf8(buf).unwrap())?;
        extra.push(("eval_accuracy", acc.fraction().to_string()));
        println!(
            "teacher accuracy {:.4} ({}/{})",
            acc.fraction(),
            acc.correct,
            acc.n
        );
    }
    write_snapshot(&dir, &cfg, &extra)?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

// ── distill / self-distill ──────────────────────────────────────────

fn write_run_output(
    dir: &Path,
    out: &RunOutput,
    ckpt_name: &str,
) -> Result<PathBuf, CliError> {
    let ckpt = dir.join(ckpt_name);
    checkpoint::save(&out.student, &ckpt)?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    for row in &out.metrics {
        metrics.push_str(&row.to_csv());
        metrics.push('\n');
    }
    write_file(&dir.join("metrics.csv"), &metrics)?;
    Ok(ckpt)
}

fn distill_common(
    corpus_path: &Path,
    run_name: &str,
    common: &Common,
    mode: RunMode,
    model_path: &Path,
) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let dcfg = cfg.distill_config()?;
    let (root, env_val) = resolve_out_root(common.out_dir.as_deref());
    let dir = create_run_dir(&root, run_name, common.force)?;
    let loaded = load_split_corpus(corpus_path)?;
    if loaded.train.is_empty() {
        return Err(CliError::runtime("corpus has no training samples"));
    }

    let base: Model64 = checkpoint::load(model_path)?;
    let set = build_distill_set(&base, &loaded.train, cfg.max_new)?;
    println!(
        "distill set kept {}/{} ({:.3})",
        set.kept,
        set.total,
        set.kept_ratio()
    );

    let (teacher, student): (Option<&Model64>, Model64) = match mode {
        RunMode::Distill => {
            let student = Model64::build(cfg.student_model_config())?;
            (Some(&base), student)
        }
        RunMode::SelfDistill => (None, base.clone()),
    };
    let out = run_training(&dcfg, mode, teacher, student, &set, cfg.diag_interval)?;
    let ckpt = write_run_output(&dir, &out, "student.ckpt")?;

    let mut extra = vec![
        ("corpus_path", corpus_path.display().to_string()),
        ("corpus_hash", loaded.hash.clone()),
        ("out_root_env", env_val.unwrap_or_default()),
        ("teacher_ckpt", model_path.display().to_string()),
        ("kept_ratio", format!("{}", set.kept_ratio())),
        (
            "command",
            match mode {
                RunMode::Distill => "distill".to_string(),
                RunMode::SelfDistill => "self-distill".to_string(),
            },
        ),
    ];

    if !loaded.eval.is_empty() {
        let acc = answer_accuracy(&out.student, &loaded.eval, cfg.max_new)?;
        let mut buf = Vec::new();
        acc.write_csv("eval", &mut buf).expect("vec write");
        write_file(&dir.join("accuracy.csv"), &String::from_utf8(buf).unwrap())?;
        extra.push(("eval_accuracy", acc.fraction().to_string()));
        println!(
            "student accuracy {:.4} ({}/{})",
            acc.fraction(),
            acc.correct,
            acc.n
        );
    }
    write_snapshot(&dir, &cfg, &extra)?;
    println!("checkpoint {}", ckpt.display());

    if let Some(abort) = &out.abort {
        return Err(CliError::runtime(format!(
            "training aborted (last-good checkpoint kept): {abort}"
        )));
    }
    Ok(())
}

fn cmd_distill(
    corpus_path: &Path,
    teacher: &Path,
    run_name: &str,
    common: &Common,
) -> Result<(), CliError> {
    distill_common(corpus_path, run_name, common, RunMode::Distill, teacher)
}

fn cmd_self_distill(
    corpus_path: &Path,
    model: &Path,
    run_name: &str,
    common: &Common,
) -> Result<(), CliError> {
    distill_common(corpus_path, run_name, common, RunMode::SelfDistill, model)
}

// ── ablate ──────────────────────────────────────────────────────────

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    corpus_path: &Path,
    teacher_path: Option<&Path>,
    run_name: &str,
    masks: &str,
    strategies: &str,
    threshold_modes: &str,
    rho_ranges: &str,
    seeds: &str,
    common: &Common,
) -> Result<(), CliError> {
    let base_cfg = resolve_config(common)?;
    base_cfg.distill_config()?; // validate the base once, up front
    let (root, env_val) = resolve_out_root(common.out_dir.as_deref());
    let dir = create_run_dir(&root, run_name, common.force)?;
    let loaded = load_split_corpus(corpus_path)?;

    let masks = split_list(masks);
    let strategies = split_list(strategies);
    let tmodes = split_list(threshold_modes);
    let ranges: Vec<(f64, f64)> = split_list(rho_ranges)
        .iter()
        .map(|r| {
            let (lo, hi) = r
                .split_once(':')
                .ok_or_else(|| CliError::usage(format!("rho range '{r}' wants min:max")))?;
            Ok((
                lo.parse()
                    .map_err(|_| CliError::usage(format!("bad rho '{lo}'")))?,
                hi.parse()
                    .map_err(|_| CliError::usage(format!("bad rho '{hi}'")))?,
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let seeds: Vec<u64> = split_list(seeds)
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::usage(format!("bad seed '{s}'")))
        })
        .collect::<Result<_, CliError>>()?;
    if masks.is_empty() || strategies.is_empty() || tmodes.is_empty() || ranges.is_empty() || seeds.is_empty()
    {
        return Err(CliError::usage("every ablation axis needs at least one value"));
    }

    let mut table = String::from(
        "mask,strategy,threshold_mode,rho_min,rho_max,seed,status,kept_ratio,eval_accuracy,visual_attention_ratio,corpus_hash\n",
    );

    for &seed in &seeds {
        // per-seed shared artifacts: teacher and its distill set
        let seed_prep = || -> Result<(Model64, DistillSet), CliError> {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            let teacher: Model64 = match teacher_path {
                Some(p) => checkpoint::load(p)?,
                None => {
                    let train_seqs = sequences_of(&loaded.train, cfg.max_seq_len)?;
                    let (t, _) = train_teacher(&cfg.teacher_train_config(), &train_seqs)?;
                    t
                }
            };
            let set = build_distill_set(&teacher, &loaded.train, cfg.max_new)?;
            Ok((teacher, set))
        };
        let prep = seed_prep();
        for mask in &masks {
            for strategy in &strategies {
                for tmode in &tmodes {
                    for &(lo, hi) in &ranges {
                        let cell = format!(
                            "{mask}-{strategy}-{tmode}-{lo}-{hi}-s{seed}"
                        );
                        let row_prefix =
                            format!("{mask},{strategy},{tmode},{lo},{hi},{seed}");
                        let result = match &prep {
                            Err(e) => Err(CliError::runtime(e.msg.clone())),
                            Ok((teacher, set)) => run_cell(
                                &base_cfg, seed, mask, strategy, tmode, lo, hi, teacher, set,
                                &loaded.eval, &dir, &cell,
                            ),
                        };
                        match result {
                            Ok((kept, acc, vis)) => {
                                table.push_str(&format!(
                                    "{row_prefix},ok,{kept},{acc},{vis},{}\n",
                                    loaded.hash
                                ));
                            }
                            Err(e) => {
                                // fail-soft: record and continue the grid
                                let msg = e.msg.replace([',', '\n'], ";");
                                table.push_str(&format!(
                                    "{row_prefix},error:{msg},,,,{}\n",
                                    loaded.hash
                                ));
                            }
                        }
                    }
                }
            }
        }
    }

    let table_path = dir.join("table.csv");
    write_file(&table_path, &table)?;
    write_snapshot(
        &dir,
        &base_cfg,
        &[
            ("corpus_path", corpus_path.display().to_string()),
            ("corpus_hash", loaded.hash.clone()),
            ("out_root_env", env_val.unwrap_or_default()),
            ("command", "ablate".to_string()),
            ("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")),
        ],
    )?;
    println!("{}", table_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    base_cfg: &RunConfig,
    seed: u64,
    mask: &str,
    strategy: &str,
    tmode: &str,
    rho_min: f64,
    rho_max: f64,
    teacher: &Model64,
    set: &DistillSet,
    eval: &[TaskSample],
    dir: &Path,
    cell: &str,
) -> Result<(f64, f64, f64), CliError> {
    let mut cfg = base_cfg.clone();
    cfg.seed = seed;
    cfg.mask = mask.to_string();
    cfg.strategy = strategy.to_string();
    cfg.threshold_mode = tmode.to_string();
    cfg.rho_min = rho_min;
    cfg.rho_max = rho_max;
    let dcfg: DistillConfig = cfg.distill_config()?;
    let student = Model64::build(cfg.student_model_config())?;
    let out = run_training(&dcfg, RunMode::Distill, Some(teacher), student, set, cfg.diag_interval)?;

    let cell_dir = dir.join("cells").join(cell);
    std::fs::create_dir_all(&cell_dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", cell_dir.display())))?;
    write_run_output(&cell_dir, &out, "student.ckpt")?;
    if let Some(abort) = &out.abort {
        return Err(CliError::runtime(format!("aborted: {abort}")));
    }

    let acc = if eval.is_empty() {
        f64::NAN
    } else {
        answer_accuracy(&out.student, eval, cfg.max_new)?.fraction()
    };
    let eval_seqs = sequences_of(eval, cfg.max_seq_len)?;
    let vis = if eval_seqs.is_empty() {
        f64::NAN
    } else {
        visual_attention_curve(&out.student, &eval_seqs)?.mean()
    };
    Ok((set.kept_ratio(), acc, vis))
}

// ── analyze ─────────────────────────────────────────────────────────

fn cmd_analyze(
    what: &str,
    corpus_path: &Path,
    model_path: &Path,
    teacher_path: Option<&Path>,
    limit: usize,
    sample_index: usize,
    common: &Common,
) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let (root, env_val) = resolve_out_root(common.out_dir.as_deref());
    std::fs::create_dir_all(&root)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", root.display())))?;
    let loaded = load_split_corpus(corpus_path)?;
    if loaded.eval.is_empty() {
        return Err(CliError::runtime("corpus has no eval split"));
    }
    let eval: Vec<TaskSample> = loaded.eval.iter().take(limit.max(1)).cloned().collect();
    let model: Model64 = checkpoint::load(model_path)?;
    let need_teacher = || -> Result<Model64, CliError> {
        let p = teacher_path.ok_or_else(|| {
            CliError::usage(format!("--teacher is required for --what {what}"))
        })?;
        Ok(checkpoint::load(p)?)
    };

    let whats: Vec<&str> = match what {
        "all" => vec!["visual-curve", "kl-decay", "masked-distance", "visual-map"],
        other => vec![other],
    };
    let mut outputs = Vec::new();

    for w in whats {
        match w {
            "visual-curve" => {
                let seqs = sequences_of(&eval, cfg.max_seq_len)?;
                let curve = visual_attention_curve(&model, &seqs)?;
                let mut buf = Vec::new();
                curve.write_csv(&mut buf).expect("vec write");
                let path = root.join("visual_curve.csv");
                write_file(&path, &String::from_utf8(buf).unwrap())?;
                outputs.push(path);
            }
            "kl-decay" => {
                let teacher = need_teacher()?;
                // the profile is measured on teacher-generated traces
                let set = build_distill_set(&teacher, &eval, cfg.max_new)?;
                let profile =
                    interval_kl_decay(&teacher, &model, &set.sequences, cfg.k_intervals, cfg.tau)?;
                let mut buf = Vec::new();
                profile.write_csv(&mut buf).expect("vec write");
                let path = root.join("kl_decay.csv");
                write_file(&path, &String::from_utf8(buf).unwrap())?;
                outputs.push(path);
            }
            "masked-distance" => {
                let teacher = need_teacher()?;
                let dcfg = cfg.distill_config()?;
                let seqs = sequences_of(&eval, cfg.max_seq_len)?;
                let mut diags = Vec::new();
                let mut rng = CounterRng::new(cfg.seed, 0x616e6c7a); // "anlz"
                for seq in &seqs {
                    let out = inspect_step(&teacher, &model, seq, &dcfg, &mut rng)?;
                    diags.push(out.diagnostics);
                }
                let hist = masked_distance_histogram(diags.iter());
                let mut buf = Vec::new();
                hist.write_csv(&mut buf).expect("vec write");
                let path = root.join("masked_distance.csv");
                write_file(&path, &String::from_utf8(buf).unwrap())?;
                outputs.push(path);
            }
            "visual-map" => {
                let sample = eval.get(sample_index).ok_or_else(|| {
                    CliError::usage(format!("sample index {sample_index} out of eval split"))
                })?;
                let seq = corpus::layout_of(sample, cfg.max_seq_len)?;
                let map = mean_visual_attention_map(&model, &seq)?;
                let mut buf = Vec::new();
                write_visual_map_csv(&map, &mut buf).expect("vec write");
                let path = root.join("visual_map.csv");
                write_file(&path, &String::from_utf8(buf).unwrap())?;
                outputs.push(path);
            }
            "accuracy" => {
                let acc = answer_accuracy(&model, &eval, cfg.max_new)?;
                let mut buf = Vec::new();
                acc.write_csv("eval", &mut buf).expect("vec write");
                let path = root.join("accuracy.csv");
                write_file(&path, &String::from_utf8(buf).unwrap())?;
                outputs.push(path);
            }
            "mask-dump" => {
                let teacher = need_teacher()?;
                let dcfg = cfg.distill_config()?;
                let sample = eval.get(sample_index).ok_or_else(|| {
                    CliError::usage(format!("sample index {sample_index} out of eval split"))
                })?;
                let seq = corpus::layout_of(sample, cfg.max_seq_len)?;
                let mut rng = CounterRng::new(cfg.seed, 0x616e6c7a);
                let out = inspect_step(&teacher, &model, &seq, &dcfg, &mut rng)?;
                let selections = out.selections.ok_or_else(|| {
                    CliError::usage("mask-dump requires mask=salient in the config")
                })?;
                let mut buf = Vec::new();
                selections
                    .write_csv(&seq.layout, &mut buf)
                    .expect("vec write");
                let path = root.join("mask_dump.csv");
                write_file(&path, &String::from_utf8(buf).unwrap())?;
                outputs.push(path);
            }
            other => {
                return Err(CliError::usage(format!("unknown analysis '{other}'")));
            }
        }
    }

    // provenance for the analysis directory as well
    write_snapshot(
        &root,
        &cfg,
        &[
            ("corpus_path", corpus_path.display().to_string()),
            ("corpus_hash", loaded.hash),
            ("out_root_env", env_val.unwrap_or_default()),
            ("command", format!("analyze --what {what}")),
        ],
    )?;

    let mut stdout = std::io::stdout().lock();
    for p in outputs {
        writeln!(stdout, "{}", p.display())
            .map_err(|e| CliError::runtime(format!("stdout: {e}")))?;
    }
    Ok(())
}
