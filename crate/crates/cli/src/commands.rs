use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use erank_core::analysis::analyze_dump;
use erank_core::checks::{self, CheckOutcome};
use erank_core::flowsim::{simulate_from_moment, FlowConfig, FlowTrace};
use erank_core::initlab::{
    build_pair, importance, select_topk, split_overlap, ChannelSelection, InitSpec,
};
use erank_core::linalg::{gaussian_matrix, rng_from_seed, second_moment};
use erank_core::proxytrain::{train_autoencoder, TrainConfig};
use erank_core::synth::{profiles, proxy_sample};
use erank_core::widthnet::{
    merge, merged_forward, read_weights, relative_error, wrapped_forward, write_weights,
    LayerStack, TeacherLayer, WrappedLayer,
};
use erank_core::{load_dump, preprocess, save_dump, synth_dump, LayerProfile, RepMatrix, SynthDumpConfig};

use crate::{
    AnalyzeArgs, CheckArgs, Common, DataArgs, Format, FlowArgs, ImportanceArgs, InitArg,
    MergeArgs, ProfileArg, ProxyArgs, SynthArgs,
};

/// Writes artifacts that all carry the resolved config and seed.
struct Artifacts {
    dir: PathBuf,
    command: &'static str,
    config: Value,
    seed: u64,
}

impl Artifacts {
    fn new(command: &'static str, common: &Common, args: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(&common.out)
            .with_context(|| format!("creating output directory {}", common.out.display()))?;
        Ok(Self {
            dir: common.out.clone(),
            command,
            config: serde_json::to_value(args)?,
            seed: common.seed,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json(&self, name: &str, result: &impl Serialize) -> Result<PathBuf> {
        let doc = json!({
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "result": result,
        });
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        let header = format!(
            "# command={} seed={}\n# config={}\n",
            self.command,
            self.seed,
            serde_json::to_string(&self.config)?
        );
        let path = self.path(name);
        fs::write(&path, header + body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn print_outcomes(outcomes: &[CheckOutcome]) -> bool {
    for o in outcomes {
        println!(
            "{} {:<22} metric={:.3e} threshold={:.3e}  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.metric,
            o.threshold,
            o.detail
        );
    }
    outcomes.iter().all(|o| o.passed)
}

pub fn synth(a: &SynthArgs) -> Result<bool> {
    let out = Artifacts::new("synth", &a.common, a)?;
    let profile = match a.profile {
        ProfileArg::Exponential => LayerProfile::Fixed(profiles::exponential(a.dim, a.rate)),
        ProfileArg::Isotropic => LayerProfile::Fixed(profiles::isotropic(a.dim)),
        ProfileArg::Outlier => {
            LayerProfile::Fixed(profiles::outlier_bulk(a.dim, (7 * a.dim / 16).max(1), 0.25, 1e-3))
        }
        ProfileArg::Collapse => LayerProfile::Collapse,
    };
    let cfg = SynthDumpConfig {
        hidden_dim: a.dim,
        num_layers: a.layers,
        num_sequences: a.sequences,
        seq_len: a.seq_len,
        profile,
        mix: a.mix,
        postnorm: a.postnorm,
        vocab_size: a.vocab,
        label: format!("synthetic-{:?}", a.profile).to_lowercase(),
        seed: a.common.seed,
    };
    let dump = synth_dump(&cfg)?;
    let path = out.path(&a.name);
    save_dump(&dump, &path)?;
    out.json("synth.json", &json!({ "dump": a.name, "manifest": dump.manifest }))?;
    println!("wrote {}", path.display());
    Ok(true)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<bool> {
    let out = Artifacts::new("analyze", &a.common, a)?;
    let dump = load_dump(&a.dump).with_context(|| format!("loading {}", a.dump.display()))?;
    let report = analyze_dump(&dump, a.tv)?;
    out.json("analysis.json", &report)?;
    if a.common.format == Format::Csv {
        out.csv("analysis.csv", &report.to_csv())?;
    }
    for r in &report.layers {
        println!(
            "layer {:>3}  erank {:>9.4}  max_cos {:.4}  min_tv {}",
            r.layer,
            r.erank,
            r.max_cos,
            r.min_tv.map_or("-".into(), |v| format!("{v:.4e}"))
        );
    }
    if let Some(c) = report.erank_tv_correlation {
        println!("corr(erank, min_tv) = {c:.4}");
    }
    Ok(true)
}

/// Preprocesses each sequence at `layer` and stacks the rows.
fn stacked_layer(dump: &erank_core::ActivationDump, layer: usize) -> Result<DMatrix<f64>> {
    if layer >= dump.num_stored_layers() {
        bail!(
            "layer {layer} out of range, dump stores {} layers",
            dump.num_stored_layers()
        );
    }
    let parts = (0..dump.records.len())
        .map(|s| Ok(preprocess(&RepMatrix::new(dump.layer(s, layer))?)?.data().clone()))
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut x = DMatrix::zeros(rows, dump.hidden_dim());
    let mut at = 0;
    for p in parts {
        x.rows_mut(at, p.nrows()).copy_from(&p);
        at += p.nrows();
    }
    Ok(x)
}

/// Data matrix and channel selection, from the dump when given.
fn load_data(
    data: &DataArgs,
    dprime: usize,
    synthetic: impl FnOnce() -> Result<DMatrix<f64>>,
) -> Result<(DMatrix<f64>, ChannelSelection)> {
    match &data.dump {
        Some(path) => {
            let dump = load_dump(path).with_context(|| format!("loading {}", path.display()))?;
            let x = stacked_layer(&dump, data.layer)?;
            let sel = select_topk(&importance(&dump, data.strategy)?, dprime)?;
            Ok((x, sel))
        }
        None => {
            let x = synthetic()?;
            let sel = checks::select_from_matrix(&x, dprime)?;
            Ok((x, sel))
        }
    }
}

fn expand_inits(inits: &[InitArg]) -> Vec<InitArg> {
    let mut out = Vec::new();
    for &i in inits {
        let list = if i == InitArg::All {
            vec![InitArg::ChannelSelect, InitArg::Orthogonal, InitArg::Gaussian]
        } else {
            vec![i]
        };
        for i in list {
            if !out.contains(&i) {
                out.push(i);
            }
        }
    }
    out
}

fn init_spec(kind: InitArg, std: f64, seed: u64, sel: &ChannelSelection) -> InitSpec {
    match kind {
        InitArg::Gaussian => InitSpec::gaussian(std, seed),
        InitArg::Orthogonal => InitSpec::orthogonal(seed),
        InitArg::ChannelSelect | InitArg::All => InitSpec::selection(sel),
    }
}

#[derive(Serialize)]
struct FlowRun {
    init: &'static str,
    final_loss: f64,
    final_hidden_erank: Option<f64>,
    min_relative_sigma: f64,
    max_drift: f64,
    trace_file: String,
}

fn summarize(trace: &FlowTrace, init: &'static str, file: String) -> FlowRun {
    let min_rel = trace
        .snapshots
        .iter()
        .flat_map(|s| s.relative_singular_values())
        .fold(f64::INFINITY, f64::min);
    FlowRun {
        init,
        final_loss: trace.last().loss,
        final_hidden_erank: trace.last().hidden_erank,
        min_relative_sigma: min_rel,
        max_drift: trace
            .snapshots
            .iter()
            .map(|s| s.balancedness_drift)
            .fold(0.0, f64::max),
        trace_file: file,
    }
}

fn init_name(i: InitArg) -> &'static str {
    match i {
        InitArg::Gaussian => "gaussian",
        InitArg::Orthogonal => "orthogonal",
        InitArg::ChannelSelect | InitArg::All => "channel_select",
    }
}

pub fn flow(a: &FlowArgs) -> Result<bool> {
    let out = Artifacts::new("flow", &a.common, a)?;
    let seed = a.common.seed;
    let (x, sel) = load_data(&a.data, a.dprime, || {
        let mut rng = rng_from_seed(seed);
        Ok(checks::anisotropic_sample(a.tokens, a.dim, a.condition, &mut rng)?)
    })?;
    let moment = second_moment(&x);
    let cfg = FlowConfig {
        eta: a.eta,
        num_steps: a.steps,
        integrator: a.integrator.into(),
        record_every: a.record_every,
        seed,
    };
    let mut runs = Vec::new();
    for kind in expand_inits(&a.init) {
        let spec = init_spec(kind, a.std, seed, &sel);
        let pair = build_pair(&spec, x.ncols(), a.dprime)?;
        let trace = simulate_from_moment(&moment, &pair, &cfg)
            .with_context(|| format!("{} init", init_name(kind)))?;
        let file = match a.common.format {
            Format::Json => {
                let name = format!("trace_{}.json", init_name(kind));
                out.json(&name, &trace)?;
                name
            }
            Format::Csv => {
                let name = format!("trace_{}.csv", init_name(kind));
                out.csv(&name, &trace.to_csv())?;
                name
            }
        };
        let run = summarize(&trace, init_name(kind), file);
        println!(
            "{:<15} final loss {:.4e}  min relative sigma {:.4}  hidden erank {}",
            run.init,
            run.final_loss,
            run.min_relative_sigma,
            run.final_hidden_erank.map_or("-".into(), |v| format!("{v:.3}"))
        );
        runs.push(run);
    }
    let outcomes = if a.no_checks {
        Vec::new()
    } else {
        checks::flow_checks(&moment, &sel, seed)?
    };
    let passed = print_outcomes(&outcomes);
    out.json(
        "flow_summary.json",
        &json!({ "selection": sel.indices(), "runs": runs, "checks": outcomes }),
    )?;
    Ok(passed)
}

pub fn proxy_train(a: &ProxyArgs) -> Result<bool> {
    let out = Artifacts::new("proxy-train", &a.common, a)?;
    let seed = a.common.seed;
    let (x, sel) = load_data(&a.data, a.dprime, || Ok(proxy_sample(a.tokens, a.dim, seed)?))?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        orthogonal_penalty_weight: a.penalty,
        recenter_erank: a.recenter,
        seed,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for kind in expand_inits(&a.init) {
        let spec = init_spec(kind, a.std, seed, &sel);
        let report = train_autoencoder(&x, &spec, a.dprime, &cfg)
            .with_context(|| format!("{} init", init_name(kind)))?;
        if a.common.format == Format::Csv {
            let mut body = String::from("epoch,loss\n");
            for (i, l) in report.loss_curve.iter().enumerate() {
                body.push_str(&format!("{i},{l:e}\n"));
            }
            out.csv(&format!("loss_{}.csv", init_name(kind)), &body)?;
        }
        println!(
            "{:<15} final loss {:.4e}  hidden erank {:.3}  recon erank {:.3}",
            report.init_kind, report.final_loss, report.hidden_erank, report.recon_erank
        );
        reports.push(report);
    }
    let input_erank = erank_core::erank(&x)?.erank;
    out.json(
        "proxy_train.json",
        &json!({ "input_erank": input_erank, "selection": sel.indices(), "reports": reports }),
    )?;
    Ok(true)
}

pub fn importance_cmd(a: &ImportanceArgs) -> Result<bool> {
    let out = Artifacts::new("importance", &a.common, a)?;
    let dump = load_dump(&a.dump).with_context(|| format!("loading {}", a.dump.display()))?;
    let report = importance(&dump, a.strategy)?;
    let sel = select_topk(&report, a.dprime)?;
    let split = if a.split_check {
        Some(split_overlap(&dump, a.strategy, a.dprime)?)
    } else {
        None
    };
    out.json(
        "importance.json",
        &json!({
            "strategy": a.strategy,
            "scores": report.scores,
            "indices": sel.indices(),
            "num_layers_used": report.num_layers_used,
            "num_sequences_used": report.num_sequences_used,
            "split_overlap": split,
        }),
    )?;
    println!("selected {:?}", sel.indices());
    if let Some(s) = split {
        println!("split-half overlap {s:.4}");
    }
    Ok(true)
}

fn random_stack(a: &MergeArgs) -> Vec<WrappedLayer> {
    let mut rng = rng_from_seed(a.common.seed);
    (0..a.layers)
        .map(|_| {
            let t = TeacherLayer::random(a.dim, a.heads, a.head_dim, a.ffn, &mut rng);
            WrappedLayer::random(t, a.dprime, &mut rng)
        })
        .collect()
}

fn load_stack(path: &Path, a: &MergeArgs) -> Result<Vec<WrappedLayer>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(match read_weights(std::io::BufReader::new(file))? {
        LayerStack::Wrapped(ls) => ls,
        LayerStack::Teacher(ts) => {
            let mut rng = rng_from_seed(a.common.seed);
            ts.into_iter()
                .map(|t| WrappedLayer::random(t, a.dprime, &mut rng))
                .collect()
        }
    })
}

pub fn width_merge(a: &MergeArgs) -> Result<bool> {
    let out = Artifacts::new("width-merge", &a.common, a)?;
    let layers = match &a.weights {
        Some(p) => load_stack(p, a)?,
        None => random_stack(a),
    };
    if let Some(p) = &a.save_weights {
        let mut f = std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        );
        write_weights(&LayerStack::Wrapped(layers.clone()), &mut f)?;
    }
    let dprime = layers.first().map_or(a.dprime, |l| l.width());
    let mut rng = rng_from_seed(a.common.seed ^ 0x5eed);
    let x = gaussian_matrix(a.tokens, dprime, 1.0, &mut rng);
    let merged: Vec<_> = layers.iter().map(merge).collect();
    let wrapped = wrapped_forward(&x, &layers)?;
    let fused = merged_forward(&x, &merged)?;
    let errors: Vec<f64> = wrapped
        .iter()
        .zip(&fused)
        .map(|(w, m)| relative_error(&w.output, &m.output))
        .collect();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let passed = worst < 1e-5;
    out.json(
        "width_merge.json",
        &json!({ "layer_relative_errors": errors, "max_relative_error": worst, "passed": passed }),
    )?;
    println!(
        "{} merge equivalence over {} layers: max relative error {worst:.3e}",
        if passed { "PASS" } else { "FAIL" },
        layers.len()
    );
    Ok(passed)
}

pub fn check(a: &CheckArgs) -> Result<bool> {
    let out = Artifacts::new("check", &a.common, a)?;
    let outcomes = checks::run_suite(a.common.seed)?;
    let passed = print_outcomes(&outcomes);
    out.json("check.json", &json!({ "passed": passed, "checks": outcomes }))?;
    Ok(passed)
}
