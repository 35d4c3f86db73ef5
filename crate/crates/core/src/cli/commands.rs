use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use blm::canvas::{Canvas, CanvasItem, Variant};
use blm::corpus::{
    chunk, compile_infilling, compile_restoration, read_documents, read_lines, read_templates,
    write_lines,
};
use blm::decoding::{decode, restore_fill, sample_fill, DecodeConfig, Hypothesis, Strategy};
use blm::evaluation::{bleu, cer, corpus_ppl, corpus_ppl_exhaustive, is_valid, substitute_unknown};
use blm::model::{write_atomic, CHECKPOINT_VERSION};
use blm::training::{train, OptimizerKind, TrainConfig};
use blm::{Blm, BlmError, Mode, ModelConfig, Vocabulary};

use super::config::ConfigFile;
use super::{Cli, Command, DecodeArgs, EvalCommand, MakeCanvasArgs, PplArgs, TrainArgs};

#[derive(Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: &'static str,
    checkpoint_format: u32,
    started_unix: u64,
    wall_clock_secs: f64,
}

struct Run {
    command: &'static str,
    started: Instant,
    started_unix: u64,
    manifest: Option<PathBuf>,
}

impl Run {
    fn finish(
        self,
        config: Value,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        default_path: Option<PathBuf>,
    ) -> Result<()> {
        let Some(path) = self.manifest.or(default_path) else {
            return Ok(());
        };
        let m = Manifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: CHECKPOINT_VERSION,
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> Result<()> {
    let command = match &cli.command {
        Command::Train(_) => "train",
        Command::Infill(_) => "infill",
        Command::Restore(_) => "restore",
        Command::Sample(_) => "sample",
        Command::Ppl(_) => "ppl",
        Command::Eval(_) => "eval",
        Command::MakeCanvas(_) => "make-canvas",
    };
    let run = Run {
        command,
        started: Instant::now(),
        started_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        manifest: cli.manifest,
    };
    match cli.command {
        Command::Train(a) => cmd_train(a, run),
        Command::Infill(a) => cmd_decode(a, run, Task::Infill),
        Command::Restore(a) => cmd_decode(a, run, Task::Restore),
        Command::Sample(a) => cmd_decode(a, run, Task::Sample),
        Command::Ppl(a) => cmd_ppl(a, run),
        Command::Eval(e) => cmd_eval(e, run),
        Command::MakeCanvas(a) => cmd_make_canvas(a, run),
    }
}

fn cmd_train(a: TrainArgs, run: Run) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let defaults = ModelConfig::default();
    let mode: Mode = file.resolve("mode", a.mode, Mode::Word)?;
    let variant: Variant = file.resolve("variant", a.variant, defaults.variant)?;
    let t_max = file.resolve("t_max", a.t_max, blm::vocab::DEFAULT_T_MAX)?;
    let min_count = file.resolve("min_count", a.min_count, 1)?;
    let model_cfg = ModelConfig {
        d_model: file.resolve("d_model", a.d_model, defaults.d_model)?,
        layers: file.resolve("layers", a.layers, defaults.layers)?,
        heads: file.resolve("heads", a.heads, defaults.heads)?,
        d_ff: file.resolve("d_ff", a.d_ff, defaults.d_ff)?,
        head_hidden: file.resolve("head_hidden", a.head_hidden, defaults.head_hidden)?,
        dropout: file.resolve("dropout", a.dropout, defaults.dropout)?,
        tie_output: file.resolve("tie_output", a.tie_output, defaults.tie_output)?,
        variant,
        init_seed: file.resolve("init_seed", a.init_seed, defaults.init_seed)?,
    };
    let td = TrainConfig::default();
    let optimizer = match file.resolve("optimizer", a.optimizer.clone(), "sgd".to_string())?.as_str() {
        "adam" => {
            let OptimizerKind::Adam { beta1, beta2, eps } = OptimizerKind::adam() else {
                unreachable!()
            };
            OptimizerKind::Adam {
                beta1: file.resolve("beta1", None, beta1)?,
                beta2: file.resolve("beta2", None, beta2)?,
                eps: file.resolve("eps", None, eps)?,
            }
        }
        "sgd" => OptimizerKind::Sgd {
            momentum: file.resolve("momentum", a.momentum, 0.0)?,
        },
        other => return Err(BlmError::Config(format!("unknown optimizer `{other}`")).into()),
    };
    let train_cfg = TrainConfig {
        learning_rate: file.resolve(
            "learning_rate",
            a.learning_rate,
            match optimizer {
                OptimizerKind::Adam { .. } => 1e-3,
                OptimizerKind::Sgd { .. } => td.learning_rate,
            },
        )?,
        weight_decay: file.resolve("weight_decay", a.weight_decay, td.weight_decay)?,
        dropout: model_cfg.dropout,
        batch_size: file.resolve("batch_size", a.batch_size, td.batch_size)?,
        max_steps: file.resolve("max_steps", a.max_steps, td.max_steps)?,
        clip_norm: file.resolve("clip_norm", a.clip_norm, td.clip_norm)?,
        warmup_steps: file.resolve("warmup_steps", a.warmup_steps, td.warmup_steps)?,
        seed: file.resolve("seed", a.seed, td.seed)?,
        checkpoint_every: file.resolve("checkpoint_every", a.checkpoint_every, td.checkpoint_every)?,
        optimizer,
    };
    model_cfg.validate()?;
    train_cfg.validate()?;

    let docs = read_documents(&a.corpus)?;
    let vocab = Vocabulary::build(&docs, min_count, mode, t_max)?;
    let mut corpus: Vec<_> = docs.iter().map(|d| vocab.tokenize(d)).collect();
    if variant == Variant::LengthAware {
        let before = corpus.len();
        corpus = corpus.iter().flat_map(|d| chunk(d, t_max)).collect();
        if corpus.len() > before {
            log::info!("split {before} documents into {} pieces of at most {t_max} tokens", corpus.len());
        }
    }
    log::info!(
        "{} documents, {} tokens, vocabulary {}",
        corpus.len(),
        corpus.iter().map(Vec::len).sum::<usize>(),
        vocab.len()
    );

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut model = Blm::<f32>::new(model_cfg.clone(), vocab)?;
    let final_path = a.out.join("model.blm");
    let mut outputs = Vec::new();
    let curve = train(&mut model, &corpus, &train_cfg, |step, m| {
        let path = if step == train_cfg.max_steps {
            final_path.clone()
        } else {
            a.out.join(format!("checkpoint-{step:06}.blm"))
        };
        log::info!("step {step}: saving {}", path.display());
        m.save(&path)?;
        outputs.push(path);
        Ok(())
    })?;

    let mut csv = String::from("step,loss,per_token_loss\n");
    for p in &curve {
        writeln!(csv, "{},{:.8},{:.8}", p.step, p.loss, p.per_token)?;
    }
    let loss_path = a.out.join("loss.csv");
    write_atomic(&loss_path, csv.as_bytes())?;
    outputs.push(loss_path);
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        log::info!("loss {:.4} -> {:.4}", first.loss, last.loss);
    }
    let config = json!({
        "mode": mode,
        "t_max": t_max,
        "min_count": min_count,
        "model": model_cfg,
        "train": train_cfg,
        "file": file.entries(),
    });
    let default = Some(a.out.join("manifest.json"));
    run.finish(config, Some(train_cfg.seed), vec![a.corpus], outputs, default)
}

#[derive(Clone, Copy, PartialEq)]
enum Task {
    Infill,
    Restore,
    Sample,
}

fn decode_config(a: &DecodeArgs, task: Task) -> Result<DecodeConfig> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let d = DecodeConfig::default();
    let default_strategy = if task == Task::Sample { Strategy::Sample } else { d.strategy };
    let cfg = DecodeConfig {
        strategy: file.resolve("strategy", a.strategy, default_strategy)?,
        beam: file.resolve("beam", a.beam, d.beam)?,
        top_k: file.resolve("top_k", a.top_k, d.top_k)?,
        samples: file.resolve("samples", a.samples, if task == Task::Sample { 10 } else { d.samples })?,
        temperature: file.resolve("temperature", a.temperature, d.temperature)?,
        max_tokens: file.resolve_opt("max_tokens", a.max_tokens)?,
        seed: file.resolve("seed", a.seed, d.seed)?,
        length_penalty: file.resolve("length_penalty", a.length_penalty, d.length_penalty)?,
    };
    cfg.validate()?;
    if task == Task::Sample && cfg.strategy != Strategy::Sample {
        bail!(BlmError::Config("the sample command only supports strategy=sample".into()));
    }
    Ok(cfg)
}

fn cmd_decode(a: DecodeArgs, run: Run, task: Task) -> Result<()> {
    let cfg = decode_config(&a, task)?;
    let model = Blm::<f32>::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mode = model.vocab().mode();
    match task {
        Task::Restore => model.ensure_mode(Mode::Char, Variant::LengthAware)?,
        Task::Infill | Task::Sample => model.ensure_mode(Mode::Word, Variant::Plain)?,
    }
    let templates = read_templates(&a.templates, model.vocab(), a.strict)?;
    let outcome: Vec<Vec<Hypothesis>> = templates
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            // Each line gets its own sampling stream.
            let line_cfg = DecodeConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let r = match task {
                Task::Restore => restore_fill(&model, c, &line_cfg).map(|h| vec![h]),
                Task::Sample => sample_fill(&model, c, &line_cfg),
                Task::Infill => decode(&model, c, &line_cfg),
            };
            r.map_err(|e| BlmError::AtLine {
                path: a.templates.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<std::result::Result<_, _>>()?;

    let mut lines = Vec::new();
    let mut scores = String::from("line,rank,log_prob,steps\n");
    let mut log = String::new();
    for (i, hyps) in outcome.iter().enumerate() {
        let keep = if task == Task::Sample { hyps.len() } else { 1 };
        for (rank, h) in hyps.iter().take(keep).enumerate() {
            if task == Task::Sample {
                lines.push(format!("{}\t{}\t{:.6}\t{}", i + 1, rank, h.log_prob, h.render(mode)));
            } else {
                lines.push(h.render(mode));
            }
            writeln!(scores, "{},{},{:.8},{}", i + 1, rank, h.log_prob, h.trajectory.len())?;
            if a.trajectory.is_some() {
                log.push_str(&h.render_trajectory(mode));
                log.push('\n');
            }
        }
    }
    write_lines(&a.output, &lines)?;
    let mut outputs = vec![a.output.clone()];
    if let Some(p) = &a.trajectory {
        write_atomic(p, log.as_bytes())?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.scores {
        write_atomic(p, scores.as_bytes())?;
        outputs.push(p.clone());
    }
    log::info!("decoded {} templates", templates.len());
    let config = json!({ "decode": cfg, "strict": a.strict });
    let default = Some(sibling(&a.output, ".manifest.json"));
    run.finish(config, Some(cfg.seed), vec![a.checkpoint, a.templates], outputs, default)
}

fn cmd_ppl(a: PplArgs, run: Run) -> Result<()> {
    let model = Blm::<f32>::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let docs = read_documents(&a.corpus)?;
    let corpus: Vec<_> = docs.iter().map(|d| model.vocab().tokenize(d)).collect();
    let model = model.cast::<f64>();
    let est = if a.exhaustive {
        corpus_ppl_exhaustive(&model, &corpus)?
    } else {
        corpus_ppl(&model, &corpus, a.m, a.seed)?
    };
    println!("ppl={:.6}", est.ppl);
    println!("mean_sentence_ppl={:.6}", est.mean_sentence_ppl);
    println!("sentences={}", est.log_x.len());
    println!("n_tokens={}", est.n_tokens);
    println!("m={}", if a.exhaustive { "all".to_string() } else { a.m.to_string() });
    let mut outputs = Vec::new();
    if let Some(p) = &a.csv {
        let mut csv = String::from("sentence_id,n,m,log_Xm\n");
        for (i, (lx, n)) in est.log_x.iter().zip(&est.lengths).enumerate() {
            writeln!(csv, "{i},{n},{},{lx:.10}", est.m)?;
        }
        write_atomic(p, csv.as_bytes())?;
        outputs.push(p.clone());
    }
    let config = json!({ "m": a.m, "exhaustive": a.exhaustive });
    let default = a.csv.as_ref().map(|p| sibling(p, ".manifest.json"));
    run.finish(config, Some(a.seed), vec![a.checkpoint, a.corpus], outputs, default)
}

fn aligned(a: &Path, b: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let (x, y) = (read_lines(a)?, read_lines(b)?);
    if x.len() != y.len() {
        bail!(BlmError::Config(format!(
            "{} has {} lines but {} has {}",
            a.display(),
            x.len(),
            b.display(),
            y.len()
        )));
    }
    Ok((x, y))
}

fn cmd_eval(e: EvalCommand, run: Run) -> Result<()> {
    match e {
        EvalCommand::Bleu {
            candidates,
            references,
            checkpoint,
        } => {
            let (cand, refs) = aligned(&candidates, &references)?;
            let cand: Vec<Vec<String>> = cand
                .iter()
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect();
            let mut refs: Vec<Vec<String>> = refs
                .iter()
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect();
            let mut substituted = 0;
            if let Some(p) = &checkpoint {
                let model = Blm::<f32>::load(p)?;
                for r in &mut refs {
                    substituted += substitute_unknown(r, model.vocab());
                }
            }
            println!("bleu={:.4}", bleu(&cand, &refs)?);
            println!("lines={}", cand.len());
            if checkpoint.is_some() {
                println!("unk_substitutions={substituted}");
            }
            let mut inputs = vec![candidates, references];
            inputs.extend(checkpoint);
            run.finish(json!({ "metric": "bleu" }), None, inputs, vec![], None)
        }
        EvalCommand::Cer {
            templates,
            candidates,
            references,
            details,
        } => {
            let (cand, refs) = aligned(&candidates, &references)?;
            let temps = read_lines(&templates)?;
            if temps.len() != cand.len() {
                bail!(BlmError::Config("templates and candidates are not aligned".into()));
            }
            let (mut pred_slots, mut true_slots) = (Vec::new(), Vec::new());
            let mut failures = 0;
            let mut csv = String::from("line,errors,chars,length_ok\n");
            for (i, ((t, c), r)) in temps.iter().zip(&cand).zip(&refs).enumerate() {
                let t: Vec<char> = t.chars().collect();
                let (c, r): (Vec<char>, Vec<char>) = (c.chars().collect(), r.chars().collect());
                let slots = question_runs(&t);
                let chars: usize = slots.iter().map(|s| s.len()).sum();
                if c.len() != t.len() || r.len() != t.len() {
                    failures += 1;
                    writeln!(csv, "{},,{chars},false", i + 1)?;
                    continue;
                }
                let take = |v: &[char]| -> Vec<String> {
                    slots.iter().map(|s| v[s.clone()].iter().collect()).collect()
                };
                let (p, g) = (take(&c), take(&r));
                let errors = (cer(&p, &g)? * chars as f64).round() as usize;
                writeln!(csv, "{},{errors},{chars},true", i + 1)?;
                pred_slots.extend(p);
                true_slots.extend(g);
            }
            println!("cer={:.6}", cer(&pred_slots, &true_slots)?);
            println!("slots={}", pred_slots.len());
            println!("chars={}", true_slots.iter().map(|s| s.chars().count()).sum::<usize>());
            println!("length_failures={failures}");
            let mut outputs = Vec::new();
            if let Some(p) = &details {
                write_atomic(p, csv.as_bytes())?;
                outputs.push(p.clone());
            }
            run.finish(json!({ "metric": "cer" }), None, vec![templates, candidates, references], outputs, None)
        }
        EvalCommand::Validity {
            templates,
            candidates,
            mode,
            details,
        } => {
            let (temps, cand) = aligned(&templates, &candidates)?;
            let vocab = Vocabulary::from_words(mode, 0, 1, std::iter::empty::<&str>());
            let mut ok = 0;
            let mut csv = String::from("line,valid\n");
            for (i, (t, c)) in temps.iter().zip(&cand).enumerate() {
                let canvas = blm::parse_template(t, &vocab, false).map_err(|e| BlmError::AtLine {
                    path: templates.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                let out: Vec<String> = match mode {
                    Mode::Word => c.split_whitespace().map(str::to_string).collect(),
                    Mode::Char => c.chars().map(String::from).collect(),
                };
                let valid = is_valid(&canvas, &out);
                ok += valid as usize;
                writeln!(csv, "{},{valid}", i + 1)?;
            }
            let rate = if temps.is_empty() { 1.0 } else { ok as f64 / temps.len() as f64 };
            println!("validity={rate:.6}");
            println!("lines={}", temps.len());
            let mut outputs = Vec::new();
            if let Some(p) = &details {
                write_atomic(p, csv.as_bytes())?;
                outputs.push(p.clone());
            }
            run.finish(json!({ "metric": "validity", "mode": mode }), None, vec![templates, candidates], outputs, None)
        }
    }
}

fn question_runs(t: &[char]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < t.len() {
        if t[i] == blm::canvas::MISSING_CHAR {
            let s = i;
            while i < t.len() && t[i] == blm::canvas::MISSING_CHAR {
                i += 1;
            }
            out.push(s..i);
        } else {
            i += 1;
        }
    }
    out
}

fn cmd_make_canvas(a: MakeCanvasArgs, run: Run) -> Result<()> {
    let docs = read_documents(&a.input)?;
    let vocab = Vocabulary::build(&docs, 1, a.mode, 0)?;
    if a.mode == Mode::Char && docs.iter().any(|d| d.contains(blm::canvas::MISSING_CHAR)) {
        log::warn!("documents contain `?`, which templates read as a missing character");
    }
    let mut templates = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        let toks = vocab.tokenize(d);
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(i as u64);
        let at = |e: BlmError| BlmError::AtLine {
            path: a.input.clone(),
            line: i + 1,
            message: e.to_string(),
        };
        let canvas: Canvas = match a.slots {
            Some(n) => {
                if a.mode != Mode::Char {
                    bail!(BlmError::Config("--slots requires --mode char".into()));
                }
                compile_restoration(&toks, n, a.min_len..=a.max_len, &mut rng).map_err(at)?.canvas
            }
            None => compile_infilling(&toks, a.ratio, a.mode == Mode::Char, &mut rng)
                .map_err(at)?
                .canvas,
        };
        debug_assert!(canvas.items().iter().all(|it| !matches!(it, CanvasItem::Blank(Some(0)))));
        templates.push(canvas.render(a.mode));
    }
    write_lines(&a.output, &templates)?;
    let mut outputs = vec![a.output.clone()];
    if let Some(r) = &a.references {
        write_lines(r, &docs)?;
        outputs.push(r.clone());
    }
    log::info!("wrote {} templates", templates.len());
    let config = json!({
        "ratio": a.ratio,
        "mode": a.mode,
        "slots": a.slots,
        "min_len": a.min_len,
        "max_len": a.max_len,
    });
    let default = Some(sibling(&a.output, ".manifest.json"));
    run.finish(config, Some(a.seed), vec![a.input], outputs, default)
}
