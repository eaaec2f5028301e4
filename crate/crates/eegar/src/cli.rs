//! Operator surface: one binary driving the pipeline from synthetic data to
//! evaluation, stage by stage.
//!
//! Every stage reads its inputs from the previous stage's directory under one
//! artifact root and writes its own directory there, including a
//! `resolved.toml` copy of the exact config it ran with. Stages are
//! independent processes; rerunning one only needs its upstream directory.

use std::path::PathBuf;

use clap::Parser;

use crate::bar::{self, BarModel, BarSpec, BarTrainParams, VocabLayout};
use crate::bth::{build_hierarchy, builtin_scheme, BthError, Hierarchy, ScaleSubset};
use crate::config::{
    load_config, parse_mask_mode, save_config, ConfigError, Preset, RunConfig,
};
use crate::dsp::{patchify, preprocess, DspError};
use crate::instruct::{
    self, evaluate_with, parse_templates, render_sample, InstructError, InstructModel,
    InstructTrainParams, InstructionSample, PromptTemplate,
};
use crate::nn::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::report::{read_csv, write_csv, write_report, Report, ReportError};
use crate::signalio::{
    builtin_montage, fnv1a64, generate_synthetic, read_segment, write_segment, DatasetManifest,
    MontageSpec, SignalError, Split, SyntheticConfig,
};
use crate::tokenizer::{
    train_tokenizer_with, TokenizerError, TokenizerModel, TrainParams as TokenizerParams,
};
use crate::vq::{
    load_codebook, read_tokens, save_codebook, write_tokens, MultiScaleTokens, VqError,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Hierarchy(#[from] BthError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Bar(#[from] bar::BarError),
    #[error(transparent)]
    Instruct(#[from] InstructError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Parser)]
#[command(name = "eegar", version, about = "Hierarchical EEG tokenization and sequence modeling")]
pub struct Args {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, clap::Subcommand)]
pub enum Cmd {
    /// Generate a labeled synthetic corpus.
    Synth(StageArgs),
    /// Filter, resample, and scale the raw corpus.
    Preprocess(StageArgs),
    /// Train the multi-scale tokenizer on the preprocessed corpus.
    TrainTokenizer(StageArgs),
    /// Tokenize the preprocessed corpus with the trained tokenizer.
    Tokenize(StageArgs),
    /// Pretrain the sequence model on the token corpus.
    Pretrain(StageArgs),
    /// Fine-tune the pretrained model on prompt-answer pairs.
    Finetune(StageArgs),
    /// Score the fine-tuned model on the test split.
    Eval(StageArgs),
    /// Render every training history to SVG charts and text summaries.
    Report(StageArgs),
}

impl Cmd {
    fn stage(&self) -> (&'static str, &StageArgs) {
        match self {
            Cmd::Synth(a) => ("synth", a),
            Cmd::Preprocess(a) => ("prep", a),
            Cmd::TrainTokenizer(a) => ("tokenizer", a),
            Cmd::Tokenize(a) => ("tokens", a),
            Cmd::Pretrain(a) => ("pretrain", a),
            Cmd::Finetune(a) => ("finetune", a),
            Cmd::Eval(a) => ("eval", a),
            Cmd::Report(a) => ("report", a),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct StageArgs {
    /// Config file; replaces the preset entirely.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in config when no file is given: tiny, base, large, or huge.
    #[arg(long, default_value = "tiny", conflicts_with = "config")]
    pub preset: String,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact root; every stage reads and writes under it.
    #[arg(long, default_value = "eegar-out")]
    pub out: PathBuf,
}

/// Config plus everything derived from it that stages share.
struct Resolved {
    cfg: RunConfig,
    root: PathBuf,
    montage: MontageSpec,
    scheme_text: String,
    hierarchy: Hierarchy,
}

impl Resolved {
    fn subset(&self) -> Result<ScaleSubset, CliError> {
        Ok(ScaleSubset::new(
            self.cfg.hierarchy.scales.clone(),
            &self.hierarchy,
        )?)
    }

    /// Identifies the montage and scheme a token file was produced under.
    fn fingerprint(&self) -> u64 {
        let tag = format!("{}\n{}", self.montage.montage_id, self.scheme_text);
        fnv1a64(tag.as_bytes())
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    /// Path that must already exist; the standard missing-input error.
    fn upstream(&self, stage: &str, name: &str) -> Result<PathBuf, CliError> {
        let p = self.dir(stage).join(name);
        if !p.is_file() {
            return Err(CliError::MissingArtifact(p));
        }
        Ok(p)
    }
}

/// The only environment variable read; compute is currently single-threaded,
/// so the value is validated and capped rather than fanned out.
pub fn thread_count(raw: Option<&str>) -> Result<usize, CliError> {
    match raw {
        None => Ok(1),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Invalid(format!(
                "EEGAR_THREADS: {s:?} is not a positive integer"
            ))),
        },
    }
}

fn resolve(stage_dir: &str, args: &StageArgs) -> Result<Resolved, CliError> {
    thread_count(std::env::var("EEGAR_THREADS").ok().as_deref())?;
    let cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => args.preset.parse::<Preset>()?.config(),
    }
    .with_seed(args.seed);
    cfg.validate()?;
    let montage = builtin_montage(&cfg.data.montage).ok_or_else(|| {
        CliError::Invalid(format!("data.montage: {:?} is not built in", cfg.data.montage))
    })?;
    let scheme_text = match builtin_scheme(&cfg.hierarchy.scheme) {
        Some(text) => text.to_string(),
        None => std::fs::read_to_string(&cfg.hierarchy.scheme).map_err(|e| {
            CliError::Invalid(format!(
                "hierarchy.scheme: {:?} is neither built in nor a readable file: {e}",
                cfg.hierarchy.scheme
            ))
        })?,
    };
    let hierarchy = build_hierarchy(&montage, &scheme_text)?;
    let r = Resolved {
        root: args.out.clone(),
        cfg,
        montage,
        scheme_text,
        hierarchy,
    };
    let dir = r.dir(stage_dir);
    std::fs::create_dir_all(&dir)?;
    save_config(&r.cfg, &dir.join("resolved.toml"))?;
    Ok(r)
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let (stage, stage_args) = args.command.stage();
    let r = resolve(stage, stage_args)?;
    match args.command {
        Cmd::Synth(_) => synth(&r),
        Cmd::Preprocess(_) => prep(&r),
        Cmd::TrainTokenizer(_) => train_tokenizer_stage(&r),
        Cmd::Tokenize(_) => tokenize_stage(&r),
        Cmd::Pretrain(_) => pretrain_stage(&r),
        Cmd::Finetune(_) => finetune_stage(&r),
        Cmd::Eval(_) => eval_stage(&r),
        Cmd::Report(_) => report_stage(&r),
    }
}

fn synth(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("synth");
    let d = &r.cfg.data;
    let (n_train, n_val, _) = r.cfg.split_counts();
    let mut manifest = DatasetManifest::default();
    for i in 0..d.n_segments {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let scfg = SyntheticConfig {
            montage_id: d.montage.clone(),
            rate: d.rate,
            duration_s: d.duration_s,
            n_classes: d.n_classes,
            global_rhythm_hz: d.global_rhythm_hz,
            region_rhythms_hz: d.region_rhythms_hz.clone(),
            snr_db: d.snr_db,
            // labels cycle with the index, so contiguous split ranges stay
            // class-balanced
            seed: r.cfg.run.seed.wrapping_mul(1000).wrapping_add(i as u64),
        };
        let (seg, label) = generate_synthetic(&scfg)?;
        let name = format!("seg_{i:04}.eeg");
        write_segment(&seg, &dir.join(&name))?;
        manifest.push(PathBuf::from(name), label, split);
    }
    manifest.save(&dir.join("manifest.tsv"))?;
    println!(
        "synth: {} segments ({} train) -> {}",
        d.n_segments,
        n_train,
        dir.display()
    );
    Ok(())
}

fn prep(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("prep");
    let manifest = DatasetManifest::load(&r.upstream("synth", "manifest.tsv")?)?;
    let mut out = DatasetManifest::default();
    for e in &manifest.entries {
        let seg = read_segment(&e.path)?;
        let clean = preprocess(&seg, r.cfg.preprocess.line_hz)?;
        let name = e
            .path
            .file_name()
            .ok_or_else(|| CliError::Invalid(format!("bad manifest path {:?}", e.path)))?;
        write_segment(&clean, &dir.join(name))?;
        out.push(PathBuf::from(name), e.label, e.split);
    }
    out.save(&dir.join("manifest.tsv"))?;
    println!("preprocess: {} segments -> {}", out.entries.len(), dir.display());
    Ok(())
}

fn tokenizer_params(r: &Resolved) -> TokenizerParams {
    let t = &r.cfg.tokenizer;
    TokenizerParams {
        montage: r.cfg.data.montage.clone(),
        scales: r.cfg.hierarchy.scales.clone(),
        window: r.cfg.preprocess.window,
        patch: r.cfg.preprocess.patch,
        vocab: t.vocab,
        code_dim: t.code_dim,
        hidden: t.hidden,
        enc_layers: t.enc_layers,
        dec_layers: t.dec_layers,
        heads: t.heads,
        mlp: t.mlp,
        epochs: t.epochs,
        batch: t.batch,
        peak_lr: t.peak_lr,
        min_lr: t.min_lr,
        warmup_epochs: t.warmup_epochs,
        weight_decay: t.weight_decay,
        domain_branch: t.domain_branch,
        seed: r.cfg.run.seed,
    }
}

fn train_tokenizer_stage(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("tokenizer");
    let manifest = DatasetManifest::load(&r.upstream("prep", "manifest.tsv")?)?;
    let params = tokenizer_params(r);
    let model = TokenizerModel::with_hierarchy(&params, r.hierarchy.clone())?;
    let outcome = train_tokenizer_with(model, &manifest, &params)?;
    let mut model = outcome.model;
    save_checkpoint(&Checkpoint::from_model(&mut model), &dir.join("model.ckpt"))?;
    save_codebook(&dir.join("codebook.bin"), &model.codebook, &model.phi)?;
    let mut hist = Report::new("tokenizer training");
    let recs = &outcome.records;
    hist.push("total", recs.iter().map(|s| s.terms.total).collect());
    hist.push("time", recs.iter().map(|s| s.terms.time).collect());
    hist.push("freq", recs.iter().map(|s| s.terms.freq).collect());
    hist.push("commit", recs.iter().map(|s| s.terms.commit).collect());
    hist.push("domain", recs.iter().map(|s| s.terms.domain).collect());
    hist.push("lambda", recs.iter().map(|s| s.lambda).collect());
    hist.push("pcc_val", recs.iter().map(|s| s.pcc_val).collect());
    write_csv(&dir.join("history.csv"), &hist)?;
    println!(
        "train-tokenizer: {} steps, validation pcc {:.4} -> {}",
        recs.len(),
        outcome.final_pcc,
        dir.display()
    );
    Ok(())
}

/// Rebuilds the trained tokenizer from its two artifacts.
fn load_tokenizer(r: &Resolved) -> Result<TokenizerModel, CliError> {
    let params = tokenizer_params(r);
    let mut model = TokenizerModel::with_hierarchy(&params, r.hierarchy.clone())?;
    load_checkpoint(&r.upstream("tokenizer", "model.ckpt")?)?.load_into(&mut model)?;
    let (cb, phi) = load_codebook(&r.upstream("tokenizer", "codebook.bin")?)?;
    model.codebook = cb;
    model.phi = phi;
    Ok(model)
}

fn tokenize_stage(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("tokens");
    let manifest = DatasetManifest::load(&r.upstream("prep", "manifest.tsv")?)?;
    let mut model = load_tokenizer(r)?;
    let mut label_lines = vec!["split\tindex\tlabel".to_string()];
    let mut total = 0usize;
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut windows: Vec<MultiScaleTokens> = Vec::new();
        let mut labels: Vec<u32> = Vec::new();
        for e in manifest.split(split) {
            let seg = read_segment(&e.path)?;
            let set = patchify(&seg, r.cfg.preprocess.window, r.cfg.preprocess.patch)?;
            for (w, grid) in set.windows.iter().zip(&set.grids) {
                // only whole windows become sequences
                if grid.any_padding() {
                    continue;
                }
                windows.push(model.tokenize_window(w)?);
                labels.push(e.label);
            }
        }
        if windows.is_empty() {
            return Err(CliError::Invalid(format!(
                "{} split yields no unpadded windows; segments are shorter than one window",
                split.as_str()
            )));
        }
        write_tokens(
            &dir.join(format!("{}.tok", split.as_str())),
            r.fingerprint(),
            &windows,
        )?;
        for (i, l) in labels.iter().enumerate() {
            label_lines.push(format!("{}\t{}\t{}", split.as_str(), i, l));
        }
        total += windows.len();
    }
    std::fs::write(dir.join("labels.tsv"), label_lines.join("\n") + "\n")?;
    println!("tokenize: {total} windows -> {}", dir.display());
    Ok(())
}

/// Token windows of one split, fingerprint-checked against the config.
fn load_split_tokens(r: &Resolved, split: Split) -> Result<Vec<MultiScaleTokens>, CliError> {
    let path = r.upstream("tokens", &format!("{}.tok", split.as_str()))?;
    let tf = read_tokens(&path)?;
    if tf.montage_hash != r.fingerprint() {
        return Err(CliError::Invalid(format!(
            "{}: token file was produced under a different montage or scheme",
            path.display()
        )));
    }
    Ok(tf.windows)
}

fn load_split_labels(r: &Resolved, split: Split) -> Result<Vec<u32>, CliError> {
    let path = r.upstream("tokens", "labels.tsv")?;
    let text = std::fs::read_to_string(&path)?;
    let mut labels = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(CliError::Invalid(format!(
                "{}: expected 3 fields, got {line:?}",
                path.display()
            )));
        }
        if parts[0] != split.as_str() {
            continue;
        }
        let idx: usize = parts[1]
            .parse()
            .map_err(|_| CliError::Invalid(format!("bad window index {:?}", parts[1])))?;
        if idx != labels.len() {
            return Err(CliError::Invalid(format!(
                "{}: {} labels out of order at index {idx}",
                path.display(),
                split.as_str()
            )));
        }
        let label: u32 = parts[2]
            .parse()
            .map_err(|_| CliError::Invalid(format!("bad label {:?}", parts[2])))?;
        labels.push(label);
    }
    Ok(labels)
}

fn bar_spec(r: &Resolved) -> Result<BarSpec, CliError> {
    let a = &r.cfg.ar;
    Ok(BarSpec {
        layout: VocabLayout::new(r.cfg.tokenizer.vocab, a.v_text)?,
        montage: r.cfg.data.montage.clone(),
        scales: r.cfg.hierarchy.scales.clone(),
        t_len: r.cfg.t_len(),
        mode: parse_mask_mode(&r.cfg.hierarchy.mask_mode)?,
        dim: a.dim,
        layers: a.layers,
        heads: a.heads,
        mlp: a.mlp,
    })
}

fn pretrain_stage(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("pretrain");
    let train = load_split_tokens(r, Split::Train)?;
    let val = load_split_tokens(r, Split::Val)?;
    let spec = bar_spec(r)?;
    let a = &r.cfg.ar;
    let params = BarTrainParams {
        spec: spec.clone(),
        epochs: a.epochs,
        batch: a.batch,
        peak_lr: a.peak_lr,
        min_lr: a.min_lr,
        warmup_epochs: a.warmup_epochs,
        weight_decay: a.weight_decay,
        clip: a.clip,
        seed: r.cfg.run.seed,
    };
    let mut model = BarModel::with_hierarchy(&spec, r.hierarchy.clone(), r.cfg.run.seed)?;
    let (records, initial_ppl, final_ppl) = bar::pretrain_with(&mut model, &train, &val, &params)?;
    save_checkpoint(&Checkpoint::from_model(&mut model), &dir.join("model.ckpt"))?;
    let mut hist = Report::new("sequence model pretraining");
    hist.push("loss", records.iter().map(|s| s.loss).collect());
    hist.push("token_acc", records.iter().map(|s| s.token_acc).collect());
    hist.push("ppl_val", records.iter().map(|s| s.ppl_val).collect());
    write_csv(&dir.join("history.csv"), &hist)?;
    println!(
        "pretrain: {} steps, validation perplexity {initial_ppl:.3} -> {final_ppl:.3} -> {}",
        records.len(),
        dir.display()
    );
    Ok(())
}

/// One prompt for the synthetic task: pick the channel group whose rhythm is
/// planted. Options list the group's channels.
fn region_template(r: &Resolved) -> Result<PromptTemplate, CliError> {
    let regions = r.hierarchy.groups(2);
    let n = r.cfg.data.n_classes as usize;
    if n > regions.len() {
        return Err(CliError::Invalid(format!(
            "data.n_classes: {n} exceeds the {} scale-2 regions",
            regions.len()
        )));
    }
    let owned: Vec<(char, String)> = regions[..n]
        .iter()
        .enumerate()
        .map(|(k, chans)| {
            let names: Vec<&str> = chans
                .iter()
                .map(|&c| r.montage.channel_names[c].as_str())
                .collect();
            ((b'A' + k as u8) as char, names.join(" "))
        })
        .collect();
    let options: Vec<(char, &str)> = owned.iter().map(|(l, t)| (*l, t.as_str())).collect();
    Ok(PromptTemplate::new(
        "region",
        "Which channel group carries the planted rhythm?",
        &options,
    )?)
}

fn render_split(
    r: &Resolved,
    split: Split,
    template: &PromptTemplate,
    layout: &VocabLayout,
) -> Result<Vec<InstructionSample>, CliError> {
    let windows = load_split_tokens(r, split)?;
    let labels = load_split_labels(r, split)?;
    if windows.len() != labels.len() {
        return Err(CliError::Invalid(format!(
            "{}: {} windows but {} labels",
            split.as_str(),
            windows.len(),
            labels.len()
        )));
    }
    let subset = r.subset()?;
    let mode = parse_mask_mode(&r.cfg.hierarchy.mask_mode)?;
    windows
        .iter()
        .zip(&labels)
        .map(|(w, &l)| {
            render_sample(
                w,
                &r.hierarchy,
                &subset,
                r.cfg.t_len(),
                mode,
                template,
                l as usize,
                layout,
            )
            .map_err(CliError::from)
        })
        .collect()
}

/// Pretrained backbone with weights restored from the pretrain stage.
fn load_backbone(r: &Resolved) -> Result<BarModel, CliError> {
    let spec = bar_spec(r)?;
    let mut model = BarModel::with_hierarchy(&spec, r.hierarchy.clone(), r.cfg.run.seed)?;
    load_checkpoint(&r.upstream("pretrain", "model.ckpt")?)?.load_into(&mut model)?;
    Ok(model)
}

fn finetune_stage(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("finetune");
    let bar = load_backbone(r)?;
    let template = region_template(r)?;
    let train = render_split(r, Split::Train, &template, &bar.layout)?;
    let val = render_split(r, Split::Val, &template, &bar.layout)?;
    let i = &r.cfg.instruct;
    let params = InstructTrainParams {
        epochs: i.epochs,
        batch: i.batch,
        peak_lr: i.peak_lr,
        min_lr: i.min_lr,
        warmup_ratio: i.warmup_ratio,
        weight_decay: i.weight_decay,
        clip: i.clip,
        seed: r.cfg.run.seed,
    };
    std::fs::write(dir.join("templates.tsv"), template.to_line() + "\n")?;
    let templates = [template];
    let outcome = instruct::finetune(bar, &train, &val, &templates, &params)?;
    let mut model = outcome.model;
    save_checkpoint(&Checkpoint::from_model(&mut model), &dir.join("model.ckpt"))?;
    let mut hist = Report::new("instruction fine-tuning");
    hist.push("loss", outcome.records.iter().map(|s| s.loss).collect());
    hist.push(
        "answer_acc",
        outcome.records.iter().map(|s| s.answer_acc).collect(),
    );
    write_csv(&dir.join("history.csv"), &hist)?;
    let mut line = format!("finetune: {} steps", outcome.records.len());
    if let Some(eval) = &outcome.eval {
        std::fs::write(dir.join("val_eval.txt"), eval_text(eval))?;
        line += &format!(", val balanced accuracy {:.3}", eval.balanced_accuracy);
    }
    println!("{line} -> {}", dir.display());
    Ok(())
}

fn eval_text(rep: &instruct::EvalReport) -> String {
    let mut out = format!("balanced accuracy: {:.6}\n", rep.balanced_accuracy);
    out += "per-class recall:";
    for r in &rep.per_class_recall {
        out += &format!(" {r:.4}");
    }
    out += "\nconfusion (rows = truth):\n";
    for row in &rep.confusion {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out += &cells.join(",");
        out.push('\n');
    }
    out
}

fn eval_stage(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("eval");
    let template_text = std::fs::read_to_string(r.upstream("finetune", "templates.tsv")?)?;
    let templates = parse_templates(&template_text)?;
    let ckpt = r.upstream("finetune", "model.ckpt")?;
    let bar = {
        let spec = bar_spec(r)?;
        BarModel::with_hierarchy(&spec, r.hierarchy.clone(), r.cfg.run.seed)?
    };
    let template = templates.first().ok_or_else(|| {
        CliError::Invalid("finetune/templates.tsv holds no templates".to_string())
    })?;
    let samples = render_split(r, Split::Test, template, &bar.layout)?;
    let max_text = samples.iter().map(|s| s.n_text()).max().unwrap_or(0);
    let mut model = InstructModel::new(bar, max_text, r.cfg.run.seed);
    load_checkpoint(&ckpt)?.load_into(&mut model)?;
    let rep = evaluate_with(&mut model, &samples, &templates)?;
    std::fs::write(dir.join("metrics.txt"), eval_text(&rep))?;
    let confusion: Vec<String> = rep
        .confusion
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    std::fs::write(dir.join("confusion.csv"), confusion.join("\n") + "\n")?;
    println!(
        "eval: {} samples, balanced accuracy {:.3} -> {}",
        samples.len(),
        rep.balanced_accuracy,
        dir.display()
    );
    Ok(())
}

fn report_stage(r: &Resolved) -> Result<(), CliError> {
    let dir = r.dir("report");
    let mut rendered = 0usize;
    for stage in ["tokenizer", "pretrain", "finetune"] {
        let src = r.dir(stage).join("history.csv");
        if !src.is_file() {
            continue;
        }
        let rep = read_csv(&src)?;
        write_report(&dir, &format!("{stage}_history"), &rep)?;
        rendered += 1;
    }
    if rendered == 0 {
        return Err(CliError::MissingArtifact(
            r.dir("tokenizer").join("history.csv"),
        ));
    }
    println!("report: {rendered} histories -> {}", dir.display());
    Ok(())
}
