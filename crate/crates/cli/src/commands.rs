use std::fs;
use std::path::{Path, PathBuf};

use freqlab::analysis::{emit_theorem1, theorem1_probe, trace_spectral_profile, GraphFamily, ProbeConfig};
use freqlab::config::{RunConfig, CONFIG_ENV};
use freqlab::dataset::{build_split, ingest, synthesize, synthesize_cycle, write_atomic, Phase, SplitDataset, SynthConfig};
use freqlab::evalharness::{evaluate, popularity_baseline, random_baseline};
use freqlab::glpf::{oracle_basis, polynomial_filter, sweep_csv, truncate_low, SweepRow};
use freqlab::graph::{build_cooccurrence, CooccurrenceGraph};
use freqlab::model::{
    concat_inputs, pretrain_id_embeddings, train, Checkpoint, CheckpointHeader, EmbeddingTable, FusionMlp, TfmSettings,
};
use freqlab::numcore::DenseMatrix;
use freqlab::pipeline::{run_end_to_end, text_embeddings};
use freqlab::tfm::ButterworthSpec;
use freqlab::{Error, Result};
use serde_json::{json, Value};

use crate::{Command, Family, GlobalOpts, OnOff, PhaseArg, SweepParam};

/// Files written by the current command, removed again if it fails.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.0.push(path.to_path_buf());
        write_atomic(path, bytes)
    }

    fn discard(&self) {
        for p in &self.0 {
            if p.exists() {
                log::warn!("removing partial output {}", p.display());
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn load_config(opts: &GlobalOpts) -> Result<RunConfig> {
    let path = opts
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    for o in &opts.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::input(format!("--set expects PATH=VALUE, got `{o}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_hash(kind: &str, path: &Path, found: Option<&str>, expected: &str, force: bool) -> Result<()> {
    if found == Some(expected) {
        return Ok(());
    }
    let msg = format!(
        "{kind} {} was produced under config {}, current config is {expected}",
        path.display(),
        found.unwrap_or("<none>")
    );
    if force {
        log::warn!("{msg} (forced)");
        Ok(())
    } else {
        Err(Error::input(format!("{msg}; rerun with --force to accept")))
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_split(path: &Path) -> Result<(SplitDataset, Option<String>)> {
    let v = read_json(path)?;
    let hash = v.get("config_hash").and_then(Value::as_str).map(str::to_string);
    let split = serde_json::from_value(v.get("split").cloned().ok_or_else(|| Error::input("split file lacks `split`"))?)?;
    Ok((split, hash))
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).unwrap();
    s.push('\n');
    s.into_bytes()
}

pub fn run(opts: &GlobalOpts, command: Command) -> Result<()> {
    if let Some(n) = opts.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::input(format!("--workers: {e}")))?;
    }
    let cfg = load_config(opts)?;
    let mut outputs = Outputs::default();
    let res = dispatch(opts, &cfg, command, &mut outputs);
    if res.is_err() {
        outputs.discard();
    }
    res
}

fn dispatch(opts: &GlobalOpts, cfg: &RunConfig, command: Command, out: &mut Outputs) -> Result<()> {
    let hash = cfg.hash();
    match command {
        Command::Config { out: path } => {
            let text = cfg.to_json() + "\n";
            match path {
                Some(p) => out.write(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Synth {
            users,
            items,
            mean_len,
            rho,
            seed,
            cycle,
            out: path,
        } => {
            let log = if cycle {
                synthesize_cycle(items, users, mean_len, seed)?
            } else {
                synthesize(&SynthConfig {
                    users,
                    items,
                    mean_len,
                    rho,
                    seed,
                    ..SynthConfig::default()
                })?
                .log
            };
            out.write(&path, log.to_tsv().as_bytes())?;
            log::info!("wrote {} interactions to {}", log.len(), path.display());
        }
        Command::Ingest { input, out: path } => {
            let input = input
                .or_else(|| cfg.data.path.clone())
                .ok_or_else(|| Error::input("no input log: pass --input or set data.path"))?;
            let log = ingest(&input, cfg.data.format)?;
            let split = build_split(&log, cfg.data.min_interactions, cfg.data.max_seq_len)?;
            log::info!("split: {}", split.summary_json());
            out.write(&path, &pretty(&json!({ "config_hash": hash, "split": split })))?;
        }
        Command::BuildGraph { split, out: path } => {
            let (split, _) = load_split(&split)?;
            let graph = build_cooccurrence(&split, cfg.glpf.binarize)?;
            out.write(&path, graph.to_tsv(Some(&hash)).as_bytes())?;
        }
        Command::Pretrain { split, out_id, out_text } => {
            let (split, _) = load_split(&split)?;
            let pre = pretrain_id_embeddings(&split, &cfg.skipgram)?;
            let mut id = pre.table;
            id.config_hash = Some(hash.clone());
            let mut text = text_embeddings(&split, cfg)?;
            text.config_hash = Some(hash.clone());
            out.write(&out_id, &id.to_bytes())?;
            out.write(&out_text, &text.to_bytes())?;
        }
        Command::Glpf {
            graph,
            input,
            out: path,
            alpha,
        } => {
            let (graph, _) = CooccurrenceGraph::load(&graph)?;
            let mut glpf = cfg.glpf.clone();
            if let Some(a) = alpha {
                glpf.alpha = a;
                glpf.coefficients = None;
            }
            let mut table = EmbeddingTable::load(&input)?;
            table.vectors = polynomial_filter(&graph, &glpf.spec()?, &table.vectors)?;
            table.config_hash = Some(hash.clone());
            out.write(&path, &table.to_bytes())?;
        }
        Command::Train {
            split,
            id,
            text,
            out: path,
            log: log_path,
        } => {
            let (split, _) = load_split(&split)?;
            let id = EmbeddingTable::load(&id)?;
            let text = EmbeddingTable::load(&text)?;
            let inputs = concat_inputs(&id, &text)?;
            let outcome = train(&split, &inputs, &cfg.model, &cfg.train, &cfg.eval)?;
            let ck = Checkpoint {
                header: CheckpointHeader {
                    model: cfg.model.clone(),
                    train: cfg.train.clone(),
                    backbone_hash: outcome.backbone_hash.clone(),
                    best_epoch: outcome.best_epoch,
                    config_hash: Some(hash.clone()),
                },
                mlp: outcome.mlp.clone(),
            };
            out.write(&path, &ck.to_bytes())?;
            if let Some(lp) = log_path {
                let mut lines = String::new();
                for e in &outcome.log {
                    let mut v = serde_json::to_value(e)?;
                    v["config_hash"] = json!(hash);
                    lines.push_str(&serde_json::to_string(&v)?);
                    lines.push('\n');
                }
                out.write(&lp, lines.as_bytes())?;
            }
            if let freqlab::model::StopReason::Diverged { step } = outcome.stop {
                // the checkpoint holds the last finite parameters and stays
                out.0.clear();
                return Err(Error::Training {
                    step,
                    msg: "loss became non-finite; last good checkpoint written".into(),
                });
            }
        }
        Command::Evaluate {
            split,
            checkpoint,
            id,
            text,
            phase,
            baselines,
            out: path,
            per_user,
        } => {
            let (split_data, split_hash) = load_split(&split)?;
            check_hash("split", &split, split_hash.as_deref(), &hash, opts.force)?;
            if !checkpoint.exists() {
                return Err(Error::input(format!("missing checkpoint {}", checkpoint.display())));
            }
            let ck = Checkpoint::load(&checkpoint)?;
            check_hash("checkpoint", &checkpoint, ck.header.config_hash.as_deref(), &hash, opts.force)?;
            let id_table = EmbeddingTable::load(&id)?;
            check_hash("embedding table", &id, id_table.config_hash.as_deref(), &hash, opts.force)?;
            let text_table = EmbeddingTable::load(&text)?;
            check_hash("embedding table", &text, text_table.config_hash.as_deref(), &hash, opts.force)?;
            let phase = match phase {
                PhaseArg::Valid => Phase::Valid,
                PhaseArg::Test => Phase::Test,
            };
            let encoder = ck.encoder()?;
            let tokens = ck.mlp.forward(&concat_inputs(&id_table, &text_table)?);
            let mut report = evaluate(&encoder, &tokens, &split_data, phase, &cfg.eval)?;
            report.config_hash = Some(hash.clone());
            log::info!("model ndcg@{k} {:.4} recall@{k} {:.4}", report.ndcg, report.recall, k = report.k);
            let body = if baselines {
                let r = random_baseline(&split_data, phase, &cfg.eval)?;
                let p = popularity_baseline(&split_data, phase, &cfg.eval)?;
                json!({ "config_hash": hash, "model": report, "random": r, "popularity": p })
            } else {
                serde_json::to_value(&report)?
            };
            out.write(&path, &pretty(&body))?;
            if let Some(pu) = per_user {
                out.write(&pu, report.per_user_csv().as_bytes())?;
            }
        }
        Command::Analyze {
            split,
            graph,
            id,
            text,
            checkpoint,
            tfm,
            max_users,
            out_csv,
            out_json,
        } => {
            if out_csv.is_none() && out_json.is_none() {
                return Err(Error::input("analyze needs --out-csv and/or --out-json"));
            }
            let (split, _) = load_split(&split)?;
            let (graph, _) = CooccurrenceGraph::load(&graph)?;
            let inputs = concat_inputs(&EmbeddingTable::load(&id)?, &EmbeddingTable::load(&text)?)?;
            let (mut model, mlp): (_, FusionMlp) = match checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    ck.encoder()?;
                    (ck.header.model.clone(), ck.mlp)
                }
                None => (cfg.model.clone(), cfg.model.init_mlp()),
            };
            match tfm {
                Some(OnOff::On) => model.tfm.enabled = true,
                Some(OnOff::Off) => model.tfm.enabled = false,
                None => {}
            }
            let tokens = mlp.forward(&inputs);
            let mut seqs: Vec<Vec<usize>> = split.sequences.iter().map(|s| s.train().to_vec()).collect();
            if let Some(m) = max_users {
                seqs.truncate(m);
            }
            let mut profile = trace_spectral_profile(&model.encoder()?, &tokens, &seqs, &graph, cfg.n_bands)?;
            profile.fingerprint = Some(hash.clone());
            if let Some(p) = out_csv {
                out.write(&p, profile.to_csv().as_bytes())?;
            }
            if let Some(p) = out_json {
                out.write(&p, profile.to_json().as_bytes())?;
            }
        }
        Command::TheoremProbe {
            family,
            rho,
            trials,
            seed,
            t_min,
            t_max,
            out: path,
        } => {
            let family = match family {
                Family::Ring => GraphFamily::Ring,
                Family::Locality => GraphFamily::Locality { rho },
            };
            let report = theorem1_probe(&ProbeConfig {
                family,
                spec: cfg.model.tfm.spec,
                disabled: false,
                t_min,
                t_max,
                dim: 8,
                trials,
                seed,
            })?;
            log::info!(
                "{} Rayleigh and {} quadratic-form increases over {} trials",
                report.rayleigh_violations,
                report.quadratic_violations,
                report.trials
            );
            out.0.push(path.clone());
            emit_theorem1(&report, &path)?;
        }
        Command::Sweep {
            param,
            values,
            split,
            out: path,
        } => {
            let (split, _) = load_split(&split)?;
            let rows = run_sweep(cfg, &split, param, &values)?;
            out.write(&path, sweep_csv(&rows).as_bytes())?;
        }
    }
    Ok(())
}

fn test_ndcg(split: &SplitDataset, cfg: &RunConfig, id_vectors: &DenseMatrix, text: &EmbeddingTable) -> Result<f64> {
    let mut id = EmbeddingTable::new(split.items.clone(), id_vectors.clone(), freqlab::model::Provenance::Id)?;
    id.config_hash = None;
    let inputs = concat_inputs(&id, text)?;
    let outcome = train(split, &inputs, &cfg.model, &cfg.train, &cfg.eval)?;
    let tokens = outcome.mlp.forward(&inputs);
    Ok(evaluate(&cfg.model.encoder()?, &tokens, split, Phase::Test, &cfg.eval)?.ndcg)
}

fn run_sweep(cfg: &RunConfig, split: &SplitDataset, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    match param {
        SweepParam::Alpha | SweepParam::Cutoff => {
            for &v in values {
                let mut c = cfg.clone();
                if param == SweepParam::Alpha {
                    c.glpf.enabled = true;
                    c.glpf.alpha = v;
                    c.glpf.coefficients = None;
                } else {
                    c.model.tfm = TfmSettings {
                        spec: ButterworthSpec::new(v, cfg.model.tfm.spec.order)?,
                        enabled: true,
                        ..cfg.model.tfm.clone()
                    };
                }
                let r = run_end_to_end(split, &c)
                    .map_err(|e| Error::Evaluation(format!("sweep failed at {v}: {e}")))?;
                log::info!("{param:?} = {v}: test ndcg {:.4}", r.test.ndcg);
                rows.push(SweepRow {
                    p: v,
                    metric: r.test.ndcg,
                });
            }
        }
        SweepParam::Truncation => {
            let graph = build_cooccurrence(split, cfg.glpf.binarize)?;
            let id = pretrain_id_embeddings(split, &cfg.skipgram)?.table;
            let text = text_embeddings(split, cfg)?;
            let basis = oracle_basis(&graph)?;
            for &p in values {
                let filtered = if p == 1.0 {
                    id.vectors.clone()
                } else {
                    truncate_low(&basis, p, &id.vectors)?
                };
                let metric = test_ndcg(split, cfg, &filtered, &text)
                    .map_err(|e| Error::Evaluation(format!("truncation sweep failed at p = {p}: {e}")))?;
                log::info!("p = {p}: test ndcg {metric:.4}");
                rows.push(SweepRow { p, metric });
            }
        }
    }
    Ok(rows)
}
