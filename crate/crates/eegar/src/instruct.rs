//! Multi-task instruction fine-tuning: prompt templates, sample layout
//! `[EEG blocks][SEP][prompt][answer][END]`, answer-only loss, and
//! balanced-accuracy evaluation with option-constrained decoding.

use std::fmt::Write as _;

use thiserror::Error;

use crate::armask::MaskMode;
use crate::bar::{
    build_inputs, restricted_ce, BarError, BarModel, SequenceBatch, VocabLayout,
};
use crate::bth::{Hierarchy, ScaleSubset};
use crate::nn::{
    clip_global_norm, AdamW, AdamWConfig, AttnMask, Embedding, LrSchedule, Param, ParamVisitor,
    StreamRng,
};
use crate::vq::TokenMap;

#[derive(Debug, Error)]
pub enum InstructError {
    #[error("label {label} outside the {n_options} options of task {task}")]
    UnknownLabel {
        task: String,
        label: usize,
        n_options: usize,
    },
    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("character {0:?} not in the text vocabulary")]
    UnmappableChar(char),
    #[error("text vocabulary holds {have} ids, the character set needs {needed}")]
    VocabTooSmall { needed: usize, have: usize },
    #[error("sample set is empty")]
    EmptySamples,
    #[error("answer region is longer than the positional table ({len} > {max})")]
    TextTooLong { len: usize, max: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Bar(#[from] BarError),
}

/// Characters the toy text vocabulary covers: printable ASCII.
pub const TEXT_CHARS: usize = 95;

/// Maps a character to its id inside the text range of the joint vocabulary.
pub fn text_id(c: char, layout: &VocabLayout) -> Result<usize, InstructError> {
    if layout.text().len() < TEXT_CHARS {
        return Err(InstructError::VocabTooSmall {
            needed: TEXT_CHARS,
            have: layout.text().len(),
        });
    }
    if !(' '..='~').contains(&c) {
        return Err(InstructError::UnmappableChar(c));
    }
    Ok(layout.text().start + (c as usize - ' ' as usize))
}

pub fn encode_text(s: &str, layout: &VocabLayout) -> Result<Vec<usize>, InstructError> {
    s.chars().map(|c| text_id(c, layout)).collect()
}

/// One classification task: a question and its lettered options.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task_id: String,
    pub question: String,
    pub options: Vec<(char, String)>,
}

impl PromptTemplate {
    pub fn new(
        task_id: &str,
        question: &str,
        options: &[(char, &str)],
    ) -> Result<Self, InstructError> {
        if options.len() < 2 {
            return Err(InstructError::BadTemplate(format!(
                "task {task_id} has {} options, needs at least 2",
                options.len()
            )));
        }
        for (i, &(l, _)) in options.iter().enumerate() {
            if options[..i].iter().any(|&(m, _)| m == l) {
                return Err(InstructError::BadTemplate(format!(
                    "task {task_id} repeats option letter {l}"
                )));
            }
        }
        Ok(PromptTemplate {
            task_id: task_id.to_string(),
            question: question.to_string(),
            options: options
                .iter()
                .map(|&(l, t)| (l, t.to_string()))
                .collect(),
        })
    }

    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    /// The instruction text preceding the answer.
    pub fn prompt_text(&self) -> String {
        let mut s = format!("Question: {} Options:", self.question);
        for (letter, text) in &self.options {
            write!(s, " ({letter}) {text}.").expect("string write");
        }
        s.push_str(" Answer: ");
        s
    }

    /// The rendered answer for one label, e.g. label 0 -> "(A)".
    pub fn answer_text(&self, label: usize) -> Result<String, InstructError> {
        let (letter, _) = self
            .options
            .get(label)
            .ok_or_else(|| InstructError::UnknownLabel {
                task: self.task_id.clone(),
                label,
                n_options: self.options.len(),
            })?;
        Ok(format!("({letter})"))
    }

    /// One registry line: `task_id<TAB>question<TAB>(A) opt|(B) opt|...`.
    pub fn to_line(&self) -> String {
        let opts: Vec<String> = self
            .options
            .iter()
            .map(|(l, t)| format!("({l}) {t}"))
            .collect();
        format!("{}\t{}\t{}", self.task_id, self.question, opts.join("|"))
    }
}

/// Parses a template registry, one template per non-blank line.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>, InstructError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (task, question, opts) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
            (Some(t), Some(q), Some(o), None) => (t, q, o),
            _ => {
                return Err(InstructError::BadTemplate(format!(
                    "expected 3 tab-separated columns: {line}"
                )))
            }
        };
        let mut options = Vec::new();
        for chunk in opts.split('|') {
            let chunk = chunk.trim();
            let rest = chunk.strip_prefix('(').ok_or_else(|| {
                InstructError::BadTemplate(format!("option {chunk:?} does not start with a letter"))
            })?;
            let (letter, text) = match (rest.chars().next(), rest.get(1..2), rest.get(2..)) {
                (Some(l), Some(")"), Some(t)) => (l, t.trim()),
                _ => {
                    return Err(InstructError::BadTemplate(format!(
                        "option {chunk:?} is not of the form (X) text"
                    )))
                }
            };
            options.push((letter, text));
        }
        let borrowed: Vec<(char, &str)> = options.clone();
        out.push(PromptTemplate::new(task, question, &borrowed)?);
    }
    if out.is_empty() {
        return Err(InstructError::BadTemplate("registry has no templates".into()));
    }
    Ok(out)
}

/// The built-in downstream task registry.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    let defs: &[(&str, &str, &[(char, &str)])] = &[
        (
            "deap",
            "What are the valence and arousal levels of EEG segment?",
            &[
                ('A', "Low valence and low avoidance"),
                ('B', "High valence and low avoidance"),
                ('C', "Low valence and high avoidance"),
                ('D', "High valence and high avoidance"),
            ],
        ),
        (
            "seed",
            "Which emotion type does this EEG segment belong to?",
            &[('A', "Positive"), ('B', "Neutral"), ('C', "Negative")],
        ),
        (
            "mibci",
            "Is this EEG segments for Left hand or right hand motor imagery?",
            &[('A', "Left"), ('B', "Right")],
        ),
        (
            "bcic4-1",
            "Is this EEG segments for Left hand or right hand motor imagery?",
            &[('A', "Left"), ('B', "Right")],
        ),
        (
            "eegmat",
            "Is this EEG segment for rest or for task?",
            &[('A', "Rest"), ('B', "Task")],
        ),
        (
            "stew",
            "What is the mental workload level of this EEG segment?",
            &[('A', "Low"), ('B', "Medium"), ('C', "High")],
        ),
        (
            "edf",
            "What is the sleep stage of this EEG segment?",
            &[
                ('A', "wake"),
                ('B', "N1"),
                ('C', "N2"),
                ('D', "N3"),
                ('E', "Movement"),
            ],
        ),
        (
            "hmc",
            "Which sleep type does this EEG segment belong to?",
            &[
                ('A', "Wake"),
                ('B', "NREM-1"),
                ('C', "NREM-2"),
                ('D', "NREM-3"),
                ('E', "REM"),
            ],
        ),
        (
            "tuab",
            "Is this EEG segment abnormal?",
            &[('A', "Yes"), ('B', "No")],
        ),
        (
            "tuev",
            "Which event type does this EEG segment belong to?",
            &[
                ('A', "spike and slow wave"),
                ('B', "generalized periodic epileptiform discharge"),
                ('C', "periodic lateralized epileptiform discharge"),
                ('D', "eye movement"),
                ('E', "artifact"),
                ('F', "background"),
            ],
        ),
    ];
    defs.iter()
        .map(|&(t, q, o)| PromptTemplate::new(t, q, o).expect("builtin templates are well-formed"))
        .collect()
}

/// One fine-tuning example: EEG context plus the tokenized instruction.
///
/// The text stream feeds `text_inputs[i]` into position i and scores
/// `text_targets[i]` there, so the sequence reads
/// `[EEG blocks][SEP][prompt][answer]` and predicts
/// `[prompt][answer][END]` shifted one step left. `loss_mask` is true
/// exactly where the target is an answer token or END.
#[derive(Debug, Clone)]
pub struct InstructionSample {
    pub task_id: String,
    pub label: usize,
    pub eeg: SequenceBatch,
    pub text_inputs: Vec<usize>,
    pub text_targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl InstructionSample {
    pub fn n_text(&self) -> usize {
        self.text_inputs.len()
    }
}

/// Tokenizes one labeled window against a template.
pub fn render_sample(
    tokens: &[TokenMap],
    h: &Hierarchy,
    subset: &ScaleSubset,
    t_len: usize,
    mode: MaskMode,
    template: &PromptTemplate,
    label: usize,
    layout: &VocabLayout,
) -> Result<InstructionSample, InstructError> {
    let eeg = build_inputs(tokens, h, subset, t_len, mode)?;
    let prompt = encode_text(&template.prompt_text(), layout)?;
    let answer = encode_text(&template.answer_text(label)?, layout)?;
    let mut text_inputs = Vec::with_capacity(1 + prompt.len() + answer.len());
    text_inputs.push(layout.sep());
    text_inputs.extend(&prompt);
    text_inputs.extend(&answer);
    let mut text_targets = Vec::with_capacity(text_inputs.len());
    text_targets.extend(&prompt);
    text_targets.extend(&answer);
    text_targets.push(layout.end());
    let n_masked = answer.len() + 1;
    let mut loss_mask = vec![false; text_targets.len()];
    for m in loss_mask.iter_mut().rev().take(n_masked) {
        *m = true;
    }
    Ok(InstructionSample {
        task_id: template.task_id.clone(),
        label,
        eeg,
        text_inputs,
        text_targets,
        loss_mask,
    })
}

/// Attention rule of the joint sequence: EEG queries keep their block mask
/// and never look at text; text queries see all EEG plus causal text.
pub fn joint_mask(eeg: &AttnMask, n_text: usize) -> AttnMask {
    let n_eeg = eeg.len();
    AttnMask::from_fn(n_eeg + n_text, |q, k| {
        match (q < n_eeg, k < n_eeg) {
            (true, true) => eeg.permitted(q, k),
            (true, false) => false,
            (false, true) => true,
            (false, false) => k <= q,
        }
    })
}

/// A pretrained backbone plus text position embeddings.
pub struct InstructModel {
    pub bar: BarModel,
    text_pos: Embedding,
    max_text: usize,
}

impl InstructModel {
    pub fn new(bar: BarModel, max_text: usize, seed: u64) -> Self {
        let mut rng = StreamRng::new(seed, "instruct/init");
        let dim = bar.dim;
        InstructModel {
            bar,
            text_pos: Embedding::new(max_text, dim, 0.02, &mut rng),
            max_text,
        }
    }

    /// Logits `[n_eeg + n_text, total_vocab]` for one sample. `text_inputs`
    /// overrides the sample's text stream during incremental decoding.
    fn forward_text(
        &mut self,
        sample: &InstructionSample,
        text_inputs: &[usize],
    ) -> Result<Vec<f64>, InstructError> {
        if text_inputs.len() > self.max_text {
            return Err(InstructError::TextTooLong {
                len: text_inputs.len(),
                max: self.max_text,
            });
        }
        let d = self.bar.dim;
        let mut x = self.bar.embed_positions(&sample.eeg.inputs)?;
        let pos_ids: Vec<usize> = (0..text_inputs.len()).collect();
        let pos_emb = self.text_pos.forward(&pos_ids);
        for (i, &id) in text_inputs.iter().enumerate() {
            let tok = &self.bar.tok.data[id * d..(id + 1) * d];
            x.extend(
                tok.iter()
                    .zip(&pos_emb[i * d..(i + 1) * d])
                    .map(|(t, p)| t + p),
            );
        }
        let mask = joint_mask(sample.eeg.mask.positions(), text_inputs.len());
        let h = self.bar.stack.forward(&x, &mask);
        Ok(self.bar.head.forward(&h))
    }

    pub fn forward(&mut self, sample: &InstructionSample) -> Result<Vec<f64>, InstructError> {
        self.forward_text(sample, &sample.text_inputs)
    }

    /// Backward for the most recent `forward`; `text_inputs` must match it.
    fn backward_text(&mut self, dlogits: &[f64], text_inputs: &[usize], n_eeg: usize) {
        let dh = self.bar.head.backward(dlogits);
        let dx = self.bar.stack.backward(&dh);
        let d = self.bar.dim;
        let (dx_eeg, dx_text) = dx.split_at(n_eeg * d);
        self.text_pos.backward(dx_text);
        for (i, &id) in text_inputs.iter().enumerate() {
            let gr = &mut self.bar.tok.grad[id * d..(id + 1) * d];
            for (g, v) in gr.iter_mut().zip(&dx_text[i * d..(i + 1) * d]) {
                *g += v;
            }
        }
        self.bar.embed_positions_backward(dx_eeg);
    }

    pub fn backward(&mut self, dlogits: &[f64], sample: &InstructionSample) {
        let n_eeg = sample.eeg.inputs.len();
        self.backward_text(dlogits, &sample.text_inputs, n_eeg);
    }

    pub fn clear_caches(&mut self) {
        self.bar.clear_caches();
        self.text_pos.clear_caches();
    }
}

impl ParamVisitor for InstructModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.bar.visit_params(&mut |n, p| f(&format!("bar.{n}"), p));
        self.text_pos
            .visit_params(&mut |n, p| f(&format!("text_pos.{n}"), p));
    }
}

/// Mean cross-entropy over loss-masked text positions of one sample, plus
/// the dlogits buffer scaled by `grad_scale`. Logit rows outside the mask
/// never enter the loss, so their gradient is exactly zero.
pub fn answer_loss(
    logits: &[f64],
    sample: &InstructionSample,
    total_vocab: usize,
    grad_scale: f64,
) -> (f64, Vec<f64>) {
    let n_eeg = sample.eeg.inputs.len();
    let mut dlogits = vec![0.0; logits.len()];
    let masked: Vec<usize> = (0..sample.text_targets.len())
        .filter(|&i| sample.loss_mask[i])
        .collect();
    if masked.is_empty() {
        return (0.0, dlogits);
    }
    let inv = 1.0 / masked.len() as f64;
    let mut loss = 0.0;
    for &i in &masked {
        let row_at = (n_eeg + i) * total_vocab;
        let row = &logits[row_at..row_at + total_vocab];
        let (l, d) = restricted_ce(row, 0..total_vocab, sample.text_targets[i]);
        loss += l * inv;
        if grad_scale != 0.0 {
            for (k, &g) in d.iter().enumerate() {
                dlogits[row_at + k] = g * inv * grad_scale;
            }
        }
    }
    (loss, dlogits)
}

/// Optimization knobs for fine-tuning.
#[derive(Debug, Clone)]
pub struct InstructTrainParams {
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Fraction of total steps spent warming up.
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructStepRecord {
    pub step: usize,
    pub loss: f64,
    pub answer_acc: f64,
}

pub struct InstructOutcome {
    pub model: InstructModel,
    pub records: Vec<InstructStepRecord>,
    /// Constrained-decoding scores on the held-out split, when one was given.
    pub eval: Option<EvalReport>,
}

/// Longest text stream over a sample set.
fn max_text_len(samples: &[InstructionSample]) -> usize {
    samples.iter().map(|s| s.n_text()).max().unwrap_or(0)
}

/// Fine-tunes a backbone on instruction samples with answer-only loss.
pub fn finetune(
    bar: BarModel,
    train: &[InstructionSample],
    val: &[InstructionSample],
    templates: &[PromptTemplate],
    params: &InstructTrainParams,
) -> Result<InstructOutcome, InstructError> {
    if train.is_empty() {
        return Err(InstructError::EmptySamples);
    }
    let max_text = max_text_len(train).max(max_text_len(val));
    let mut model = InstructModel::new(bar, max_text, params.seed);
    let total_vocab = model.bar.layout.total();
    let steps_per_epoch = train.len().div_ceil(params.batch);
    let total_steps = steps_per_epoch * params.epochs;
    let schedule = LrSchedule {
        peak: params.peak_lr,
        min: params.min_lr,
        warmup: ((total_steps as f64 * params.warmup_ratio).ceil()) as u64,
        total: total_steps as u64,
    };
    let mut opt = AdamW::new(AdamWConfig {
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: params.weight_decay,
    });
    let mut shuffle_rng = StreamRng::new(params.seed, "instruct/shuffle");
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for _epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(params.batch) {
            model.zero_grads();
            let inv_batch = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut acc = 0.0;
            for &si in chunk {
                let sample = &train[si];
                let logits = model.forward(sample)?;
                let (l, d) = answer_loss(&logits, sample, total_vocab, inv_batch);
                loss += l * inv_batch;
                acc += answer_accuracy(&logits, sample, total_vocab) * inv_batch;
                model.backward(&d, sample);
            }
            if !loss.is_finite() {
                return Err(InstructError::Diverged { step, loss });
            }
            if params.clip > 0.0 {
                clip_global_norm(&mut model, params.clip);
            }
            opt.step(&mut model, schedule.at(step as u64));
            records.push(InstructStepRecord {
                step,
                loss,
                answer_acc: acc,
            });
            step += 1;
        }
    }
    let eval = if val.is_empty() {
        None
    } else {
        Some(evaluate_with(&mut model, val, templates)?)
    };
    Ok(InstructOutcome {
        model,
        records,
        eval,
    })
}

/// Fraction of loss-masked positions whose argmax equals the target.
fn answer_accuracy(logits: &[f64], sample: &InstructionSample, total_vocab: usize) -> f64 {
    let n_eeg = sample.eeg.inputs.len();
    let mut hits = 0usize;
    let mut n = 0usize;
    for (i, &masked) in sample.loss_mask.iter().enumerate() {
        if !masked {
            continue;
        }
        let row = &logits[(n_eeg + i) * total_vocab..(n_eeg + i + 1) * total_vocab];
        let argmax = (0..total_vocab)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .expect("non-empty vocab");
        if argmax == sample.text_targets[i] {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Evaluation summary: row `i` of `confusion` counts true class i by
/// predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub balanced_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub per_class_recall: Vec<f64>,
}

/// Mean per-class recall; classes without samples are left out of the mean.
pub fn balanced_accuracy(confusion: &[Vec<usize>]) -> f64 {
    let mut recalls = Vec::new();
    for (i, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total > 0 {
            recalls.push(row[i] as f64 / total as f64);
        }
    }
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// Greedy decoding constrained to the template's option renderings: at each
/// step the next token is the highest-logit continuation among options
/// consistent with what is already emitted.
pub fn predict_option(
    model: &mut InstructModel,
    sample: &InstructionSample,
    template: &PromptTemplate,
) -> Result<usize, InstructError> {
    let layout = model.bar.layout;
    let renderings: Vec<Vec<usize>> = (0..template.n_options())
        .map(|k| encode_text(&template.answer_text(k)?, &layout))
        .collect::<Result<_, _>>()?;
    let prompt_len = sample.text_targets.len() - sample.loss_mask.iter().filter(|&&m| m).count();
    // [SEP] + prompt
    let mut stream: Vec<usize> = sample.text_inputs[..1 + prompt_len].to_vec();
    let mut alive: Vec<usize> = (0..renderings.len()).collect();
    let mut emitted = 0usize;
    while alive.len() > 1 {
        let logits = model.forward_text(sample, &stream)?;
        model.clear_caches();
        let total = layout.total();
        let row_at = (sample.eeg.inputs.len() + stream.len() - 1) * total;
        let row = &logits[row_at..row_at + total];
        let next = alive
            .iter()
            .map(|&k| {
                renderings[k]
                    .get(emitted)
                    .copied()
                    .unwrap_or_else(|| layout.end())
            })
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .expect("candidates remain");
        alive.retain(|&k| {
            renderings[k]
                .get(emitted)
                .copied()
                .unwrap_or_else(|| layout.end())
                == next
        });
        stream.push(next);
        emitted += 1;
    }
    Ok(alive[0])
}

/// Scores a labeled sample set with constrained decoding. Labels index the
/// confusion matrix, sized by the largest label or prediction seen.
pub fn evaluate(
    model: &mut InstructModel,
    samples: &[InstructionSample],
) -> Result<EvalReport, InstructError> {
    let templates = builtin_templates();
    evaluate_with(model, samples, &templates)
}

pub fn evaluate_with(
    model: &mut InstructModel,
    samples: &[InstructionSample],
    templates: &[PromptTemplate],
) -> Result<EvalReport, InstructError> {
    let mut pairs = Vec::with_capacity(samples.len());
    let mut n_classes = 0usize;
    for sample in samples {
        let template = templates
            .iter()
            .find(|t| t.task_id == sample.task_id)
            .ok_or_else(|| {
                InstructError::BadTemplate(format!("no template for task {}", sample.task_id))
            })?;
        let pred = predict_option(model, sample, template)?;
        n_classes = n_classes.max(sample.label + 1).max(pred + 1);
        pairs.push((sample.label, pred));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (truth, pred) in pairs {
        confusion[truth][pred] += 1;
    }
    let per_class_recall: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                row[i] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        balanced_accuracy: balanced_accuracy(&confusion),
        confusion,
        per_class_recall,
    })
}
