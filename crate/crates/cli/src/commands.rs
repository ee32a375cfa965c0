//! One function per subcommand.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use tsdraft::checkpoint::{load_checkpoint, save_checkpoint};
use tsdraft::controllers::{ControllerConfig, ControllerKind, PredictorWeights};
use tsdraft::engine::{autoregressive_reference, decode, EngineConfig};
use tsdraft::metrics::{write_csv, write_json_lines, MetricsReport, RunInfo, TimingModel};
use tsdraft::nano::{NanoConfig, NanoModel, NanoWeights};
use tsdraft::rng::derive_seed;
use tsdraft::simulate::{mean_times, run_sweep, write_sim_csv};
use tsdraft::training::{
    distill_prompts, held_out_loss, make_predictor_labels, sample_prompts, self_distill_generate,
    shuffled_labels, synthetic_predictor, train_exit, train_predictor, train_target, Corpus, TrainConfig,
    BUNDLED_TEXT,
};
use tsdraft::{DecodeTrace, Rng, TokenId, TokenSequence};

use crate::config::RunConfig;
use crate::CliError;

/// Columns that depend on wall-clock time and differ between runs.
pub const VOLATILE_NOTE: &str =
    "# volatile: measured_s,speedup_measured,draft_s,verify_s,sample_s,other_s (wall clock)";

fn runtime(e: tsdraft::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn create(path: &Path) -> Result<Box<dyn Write>, CliError> {
    let f = File::create(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => create(p),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn io_err(e: io::Error) -> CliError {
    CliError::Runtime(format!("write failed: {e}"))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    match &cfg.corpus.path {
        Some(path) => {
            require(path, "corpus file")?;
            Corpus::from_file(path, cfg.corpus.held_out, cfg.corpus.seed).map_err(runtime)
        }
        None => Corpus::from_text(BUNDLED_TEXT, cfg.corpus.held_out, cfg.corpus.seed).map_err(runtime),
    }
}

fn load_model(path: &Path, what: &str) -> Result<(NanoConfig, NanoWeights), CliError> {
    require(path, what)?;
    load_checkpoint(path).map_err(runtime)
}

fn load_predictor(path: &Path) -> Result<Arc<PredictorWeights>, CliError> {
    require(path, "predictor checkpoint")?;
    PredictorWeights::load(path).map(Arc::new).map_err(runtime)
}

pub fn train_target_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let (weights, report) = train_target(&corpus, &cfg.model, &cfg.train).map_err(runtime)?;
    save_checkpoint(&weights, &cfg.model, &cfg.paths.checkpoint).map_err(runtime)?;
    println!("initial_loss = {}", report.initial_loss);
    println!("final_loss = {}", report.final_loss);
    println!("steps = {}", report.steps);
    println!("checkpoint = {}", cfg.paths.checkpoint.display());
    if let Some(path) = &cfg.paths.out_csv {
        let mut out = create(path)?;
        writeln!(out, "epoch,train_loss").map_err(io_err)?;
        for (i, l) in report.epoch_train_loss.iter().enumerate() {
            writeln!(out, "{},{l}", i + 1).map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
    }
    Ok(())
}

pub fn distill_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (model_cfg, mut weights) = load_model(&cfg.paths.checkpoint, "target checkpoint")?;
    let corpus = load_corpus(cfg)?;
    weights.init_exit_from_target(&model_cfg).map_err(runtime)?;
    let seq_len = cfg.train.seq_len.min(model_cfg.max_seq_len);
    let before = held_out_loss(&weights, &model_cfg, &corpus, seq_len, true);
    let generated = if cfg.train.distill_mix > 0.0 {
        let prompts = distill_prompts(&corpus, cfg.distill.prompt_len, cfg.distill.prompts, cfg.distill.generate.seed);
        let target = NanoModel::new(model_cfg.clone(), weights.clone()).map_err(runtime)?;
        Some(self_distill_generate(&target, &prompts, &cfg.distill.generate).map_err(runtime)?)
    } else {
        None
    };
    let exit_cfg = TrainConfig {
        epochs: cfg.distill.epochs,
        seq_len,
        ..cfg.train.clone()
    };
    let (trained, report) =
        train_exit(&weights, &model_cfg, &corpus, generated.as_ref(), &exit_cfg).map_err(runtime)?;
    let after = held_out_loss(&trained, &model_cfg, &corpus, seq_len, true);
    save_checkpoint(&trained, &model_cfg, &cfg.paths.bundle).map_err(runtime)?;
    println!("exit_loss_before = {before}");
    println!("exit_loss_after = {after}");
    println!("generated_windows = {}", report.generated_windows);
    println!("total_windows = {}", report.total_windows);
    println!("bundle = {}", cfg.paths.bundle.display());
    if let Some(path) = &cfg.paths.out_csv {
        let mut out = create(path)?;
        writeln!(out, "exit_loss_before,exit_loss_after,distill_mix,generated_windows,total_windows").map_err(io_err)?;
        writeln!(
            out,
            "{before},{after},{},{},{}",
            cfg.train.distill_mix, report.generated_windows, report.total_windows
        )
        .map_err(io_err)?;
        out.flush().map_err(io_err)?;
    }
    Ok(())
}

pub fn train_predictor_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (model_cfg, weights) = load_model(&cfg.paths.bundle, "bundle checkpoint")?;
    let corpus = load_corpus(cfg)?;
    let model = NanoModel::new(model_cfg, weights).map_err(runtime)?;
    let prompts: Vec<TokenSequence> = distill_prompts(
        &corpus,
        cfg.predictor.prompt_len,
        cfg.predictor.prompts,
        cfg.predictor.fit.seed,
    )
    .iter()
    .map(|p| TokenSequence::from_bytes(p))
    .collect();
    let labels = make_predictor_labels(&model, &prompts, &cfg.predictor.labels).map_err(runtime)?;
    if let Some(path) = &cfg.paths.labels {
        labels.save(path).map_err(runtime)?;
    }
    let (predictor, report) = train_predictor(&labels, &cfg.predictor.fit).map_err(runtime)?;
    let (_, control) = train_predictor(&shuffled_labels(&labels, derive_seed(cfg.predictor.fit.seed, 1)), &cfg.predictor.fit)
        .map_err(runtime)?;
    predictor.save(&cfg.paths.predictor).map_err(runtime)?;
    let show = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_else(|| "none".into());
    println!("labels = {}", labels.len());
    println!("positive_rate = {}", labels.positive_rate());
    println!("held_out_auc = {}", show(report.held_out_auc));
    println!("shuffled_control_auc = {}", show(control.held_out_auc));
    println!("predictor = {}", cfg.paths.predictor.display());
    Ok(())
}

/// Prompts from a file with one prompt per line; empty lines are skipped
/// with a warning. Returns `(line_number, bytes)`.
pub fn read_prompts(path: &Path) -> Result<Vec<(usize, Vec<u8>)>, CliError> {
    require(path, "prompts file")?;
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    let mut out = Vec::new();
    if body.is_empty() {
        return Ok(out);
    }
    for (i, line) in body.split(|&b| b == b'\n').enumerate() {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.is_empty() {
            eprintln!("warning: skipping empty prompt on line {}", i + 1);
            continue;
        }
        out.push((i + 1, line.to_vec()));
    }
    Ok(out)
}

struct Session<'a> {
    model: &'a NanoModel,
    engine: EngineConfig,
    predictor: Option<Arc<PredictorWeights>>,
    timing: (Option<f64>, Option<f64>),
}

struct Outcome {
    trace: DecodeTrace,
    report: MetricsReport,
    lossless: bool,
}

fn engine_for(
    cfg: &RunConfig,
    model: &NanoConfig,
    controller: ControllerConfig,
    prompt_len: usize,
    max_new: usize,
) -> Result<EngineConfig, CliError> {
    let stop_tokens = cfg
        .engine
        .stop_tokens
        .iter()
        .map(|&t| TokenId::new(t, model.vocab_size))
        .collect::<tsdraft::Result<Vec<_>>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(EngineConfig {
        max_len: (prompt_len + max_new).min(model.max_seq_len),
        controller,
        draft_cap: cfg.engine.draft_cap,
        stop_tokens,
    })
}

impl Session<'_> {
    /// Reference decode of `prompt`: `(output, seconds per generated token)`.
    fn reference(&self, prompt: &TokenSequence) -> Result<(TokenSequence, f64, f64), CliError> {
        let t0 = Instant::now();
        let out = autoregressive_reference(self.model, prompt, self.engine.max_len, &self.engine.stop_tokens)
            .map_err(runtime)?;
        let secs = t0.elapsed().as_secs_f64();
        let per_token = secs / (out.len() - prompt.len()).max(1) as f64;
        Ok((out, secs, per_token))
    }

    fn run(
        &self,
        run: RunInfo,
        prompt: &TokenSequence,
        reference: &(TokenSequence, f64, f64),
        seed: u64,
    ) -> Result<Outcome, CliError> {
        let mut rng = Rng::new(seed);
        let trace = decode(self.model, prompt, &self.engine, self.predictor.clone(), &mut rng).map_err(runtime)?;
        let drafted = trace.total_drafted().max(1) as f64;
        let timing = TimingModel {
            t_draft: self.timing.0.unwrap_or(trace.wall_times.drafting / drafted),
            t_target: self.timing.1.unwrap_or(reference.2),
        };
        let report = MetricsReport::from_trace(run, &trace, timing, Some(reference.1)).map_err(runtime)?;
        let lossless = trace.output == reference.0;
        Ok(Outcome { trace, report, lossless })
    }
}

pub fn decode_cmd(cfg: &RunConfig, check_lossless: bool) -> Result<(), CliError> {
    let prompts_path = cfg
        .paths
        .prompts
        .as_ref()
        .ok_or_else(|| CliError::Usage("no prompts file (set paths.prompts or pass --prompts)".into()))?;
    let (model_cfg, weights) = load_model(&cfg.paths.bundle, "bundle checkpoint")?;
    let controller = cfg.controller.resolved();
    let predictor = match controller.kind {
        ControllerKind::CaliTs => Some(load_predictor(&cfg.paths.predictor)?),
        _ => None,
    };
    let prompts = read_prompts(prompts_path)?;
    for (line, p) in &prompts {
        if p.len() >= model_cfg.max_seq_len {
            return Err(CliError::Usage(format!(
                "prompt on line {line} has {} bytes; the model context is {}",
                p.len(),
                model_cfg.max_seq_len
            )));
        }
    }
    let model = NanoModel::new(model_cfg.clone(), weights).map_err(runtime)?;
    let mut rows = Vec::with_capacity(prompts.len());
    let mut traces = Vec::with_capacity(prompts.len());
    let mut mismatches = Vec::new();
    for (i, (line, bytes)) in prompts.iter().enumerate() {
        let prompt = TokenSequence::from_bytes(bytes);
        let session = Session {
            model: &model,
            engine: engine_for(cfg, &model_cfg, controller.clone(), prompt.len(), cfg.engine.max_new)?,
            predictor: predictor.clone(),
            timing: (cfg.timing.t_draft, cfg.timing.t_target),
        };
        let reference = session.reference(&prompt)?;
        let seed = derive_seed(cfg.decode.seed, i as u64);
        let run = RunInfo {
            run_id: format!("line-{line}"),
            controller: controller.kind.label().to_string(),
            k: controller.kind.k(),
            seed,
        };
        let outcome = session.run(run, &prompt, &reference, seed)?;
        if !outcome.lossless {
            mismatches.push(*line);
        }
        rows.push(outcome.report);
        traces.push(outcome.trace);
    }

    let mut out = output(cfg.paths.out_csv.as_ref())?;
    writeln!(out, "{VOLATILE_NOTE}").map_err(io_err)?;
    write_csv(&rows, &mut out).map_err(runtime)?;
    out.flush().map_err(io_err)?;
    if let Some(path) = &cfg.paths.out_json {
        let mut f = create(path)?;
        write_json_lines(&rows, &mut f).map_err(runtime)?;
        f.flush().map_err(io_err)?;
    }
    if let Some(path) = &cfg.paths.trace {
        let mut f = create(path)?;
        for t in &traces {
            serde_json::to_writer(&mut f, t).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(f).map_err(io_err)?;
        }
        f.flush().map_err(io_err)?;
    }
    let n = rows.len().max(1) as f64;
    eprintln!(
        "decoded {} prompts with {}: mean v_d {:.4}, mean r_d {:.4}",
        rows.len(),
        controller.kind.label(),
        rows.iter().map(|r| r.v_d).sum::<f64>() / n,
        rows.iter().map(|r| r.r_d).sum::<f64>() / n
    );
    if check_lossless {
        if mismatches.is_empty() {
            eprintln!("lossless: all {} outputs match the autoregressive reference", rows.len());
        } else {
            return Err(CliError::Runtime(format!(
                "lossless check failed on {} of {} prompts (lines {:?})",
                mismatches.len(),
                rows.len(),
                mismatches
            )));
        }
    }
    Ok(())
}

pub fn simulate_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let mut sim = cfg.sim.params.clone();
    sim.controller = cfg.controller.params.clone();
    let predictor = if sim.cali_ts {
        let (w, _) = synthetic_predictor(sim.vocab_size, cfg.sim.predictor_seed).map_err(runtime)?;
        Some(Arc::new(w))
    } else {
        None
    };
    let rows = run_sweep(&sim, predictor).map_err(runtime)?;
    let mut out = output(cfg.paths.out_csv.as_ref())?;
    write_sim_csv(&rows, &mut out).map_err(runtime)?;
    out.flush().map_err(io_err)?;
    eprintln!("mean simulated time per controller ({} rows):", rows.len());
    let late = sim.late_from.map(|_| mean_times(&rows, true));
    for (i, (name, k, t)) in mean_times(&rows, false).into_iter().enumerate() {
        let label = k.map(|k| format!("{name}(K={k})")).unwrap_or(name);
        match &late {
            Some(l) => eprintln!("  {label:<16} {t:>10.3}  late {:>10.3}", l[i].2),
            None => eprintln!("  {label:<16} {t:>10.3}"),
        }
    }
    Ok(())
}

/// One bench configuration: a controller on either the trained or the
/// untrained exit head.
struct Variant {
    name: String,
    controller: ControllerConfig,
    untrained: bool,
}

fn bench_variants(cfg: &RunConfig, with_predictor: bool) -> Vec<Variant> {
    let base = cfg.controller.params.clone();
    let with = |kind: ControllerKind| ControllerConfig { kind, ..base.clone() };
    let mut out: Vec<Variant> = cfg
        .bench
        .k_grid
        .iter()
        .map(|&k| Variant {
            name: "fixed".into(),
            controller: with(ControllerKind::FixedK(k)),
            untrained: false,
        })
        .collect();
    out.push(Variant {
        name: "beta-ts".into(),
        controller: with(ControllerKind::BetaTs),
        untrained: false,
    });
    if with_predictor {
        out.push(Variant {
            name: "cali-ts".into(),
            controller: with(ControllerKind::CaliTs),
            untrained: false,
        });
    }
    if cfg.bench.ablations {
        out.push(Variant {
            name: "beta-ts+untrained-exit".into(),
            controller: with(ControllerKind::BetaTs),
            untrained: true,
        });
        if with_predictor {
            out.push(Variant {
                name: "cali-ts+model-only".into(),
                controller: ControllerConfig {
                    cali_sampling: false,
                    ..with(ControllerKind::CaliTs)
                },
                untrained: false,
            });
        }
    }
    out
}

pub fn bench_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (model_cfg, weights) = load_model(&cfg.paths.bundle, "bundle checkpoint")?;
    let predictor = if cfg.paths.predictor.is_file() {
        Some(load_predictor(&cfg.paths.predictor)?)
    } else {
        eprintln!(
            "warning: predictor {} not found; skipping cali-ts rows",
            cfg.paths.predictor.display()
        );
        None
    };
    let prompts: Vec<Vec<u8>> = match &cfg.paths.prompts {
        Some(path) => read_prompts(path)?.into_iter().map(|(_, p)| p).take(cfg.bench.prompts).collect(),
        None => {
            let corpus = load_corpus(cfg)?;
            sample_prompts(corpus.held_out_docs(), cfg.bench.prompt_len, cfg.bench.prompts, cfg.corpus.seed)
        }
    };
    if prompts.is_empty() {
        return Err(CliError::Usage("bench has no prompts".into()));
    }
    let mut untrained_w = weights.clone();
    untrained_w.init_exit_from_target(&model_cfg).map_err(runtime)?;
    let trained = NanoModel::new(model_cfg.clone(), weights).map_err(runtime)?;
    let untrained = NanoModel::new(model_cfg.clone(), untrained_w).map_err(runtime)?;

    let variants = bench_variants(cfg, predictor.is_some());
    let mut rows = Vec::new();
    for (pi, bytes) in prompts.iter().enumerate() {
        let prompt = TokenSequence::from_bytes(bytes);
        let probe = Session {
            model: &trained,
            engine: engine_for(cfg, &model_cfg, ControllerConfig::default(), prompt.len(), cfg.bench.max_new)?,
            predictor: None,
            timing: (cfg.timing.t_draft, cfg.timing.t_target),
        };
        let reference = probe.reference(&prompt)?;
        for v in &variants {
            let session = Session {
                model: if v.untrained { &untrained } else { &trained },
                engine: engine_for(cfg, &model_cfg, v.controller.clone(), prompt.len(), cfg.bench.max_new)?,
                predictor: predictor.clone(),
                timing: probe.timing,
            };
            for &seed in &cfg.bench.seeds {
                let run = RunInfo {
                    run_id: format!("p{pi}:s{seed}"),
                    controller: v.name.clone(),
                    k: v.controller.kind.k(),
                    seed,
                };
                let outcome = session.run(run, &prompt, &reference, derive_seed(seed, pi as u64))?;
                if !outcome.lossless {
                    return Err(CliError::Runtime(format!(
                        "{} on prompt {pi} diverged from the autoregressive reference",
                        v.name
                    )));
                }
                rows.push(outcome.report);
            }
        }
    }

    let to_stdout = cfg.paths.out_csv.is_none();
    let mut out = output(cfg.paths.out_csv.as_ref())?;
    writeln!(out, "{VOLATILE_NOTE}").map_err(io_err)?;
    write_csv(&rows, &mut out).map_err(runtime)?;
    out.flush().map_err(io_err)?;
    drop(out);
    if let Some(path) = &cfg.paths.out_json {
        let mut f = create(path)?;
        write_json_lines(&rows, &mut f).map_err(runtime)?;
        f.flush().map_err(io_err)?;
    }
    let table = breakdown_table(&rows);
    if to_stdout {
        eprint!("{table}");
    } else {
        print!("{table}");
    }
    Ok(())
}

/// Mean metrics and phase times per (controller, K).
pub fn breakdown_table(rows: &[MetricsReport]) -> String {
    let mut groups: Vec<((String, Option<usize>), Vec<&MetricsReport>)> = Vec::new();
    for r in rows {
        let key = (r.controller.clone(), r.k);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut s = format!(
        "{:<24} {:>7} {:>7} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "controller", "v_d", "r_d", "hm", "measured_s", "draft_s", "verify_s", "sample_s", "other_s"
    );
    for ((name, k), group) in groups {
        let n = group.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        let label = k.map(|k| format!("{name}(K={k})")).unwrap_or(name);
        s.push_str(&format!(
            "{label:<24} {:>7.4} {:>7.4} {:>7.2} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}\n",
            mean(|r| r.v_d),
            mean(|r| r.r_d),
            mean(|r| r.hm),
            mean(|r| r.measured_s),
            mean(|r| r.draft_s),
            mean(|r| r.verify_s),
            mean(|r| r.sample_s),
            mean(|r| r.other_s),
        ));
    }
    s
}
