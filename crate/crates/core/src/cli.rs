//! The `ugwgan` command line.
//!
//! Every subcommand that writes files also writes a [`RunManifest`] next to
//! them. Failures print one line `error kind=<kind> message=<json string>` on
//! stderr and exit with 2 (usage or config), 3 (data) or 4 (divergence).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bpe::{self, Tokenizer, BOS, EOS};
use crate::config::{validate_config, RunManifest, TrainOverrides, MANIFEST_FILE};
use crate::downstream::{
    extract_batch, language_id_probe, pca_csv, train_classifier, zero_shot_eval, ClassifierConfig, DownstreamReport, FeatureSequence,
};
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::synthlang::{self, LabeledExample, SynthGrammar};
use crate::trainer::{self, metrics_csv, Checkpoint, TrainConfig, TrainData, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "ugwgan", version, about = "Multilingual LSTM LM with a Wasserstein critic on its shared latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a BPE vocabulary and merge table from a text file.
    BpeTrain(BpeTrainArgs),
    /// Write synthetic corpora and labeled task files.
    SynthGen(SynthGenArgs),
    /// Train the joint model and critic.
    Train(TrainArgs),
    /// Train once per λ of a grid.
    Ablate(AblateArgs),
    /// Train on nested language sets for several λ.
    Scale(ScaleArgs),
    /// Sample sentences from a checkpoint.
    Sample(SampleArgs),
    /// Train a classifier in one language, test it in others.
    Zeroshot(ZeroshotArgs),
    /// Language-ID probe accuracy of the universal states.
    Probe(ProbeArgs),
    /// 2-D PCA of mean-pooled universal states as CSV.
    ExportEmb(ExportArgs),
}

#[derive(Args, Debug)]
struct BpeTrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    lang: String,
    #[arg(long, default_value_t = 500)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    #[arg(long, default_value_t = 2)]
    languages: usize,
    #[arg(long, default_value_t = 11)]
    grammar_seed: u64,
    #[arg(long, default_value_t = 4000)]
    train_sentences: usize,
    #[arg(long, default_value_t = 300)]
    heldout_sentences: usize,
    #[arg(long, default_value_t = 600)]
    task_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Where training text comes from.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Directory with `<lang>.train.txt` and `<lang>.heldout.txt`; synthetic
    /// languages are generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    grammar_seed: u64,
    #[arg(long, default_value_t = 4000)]
    train_sentences: usize,
    #[arg(long, default_value_t = 300)]
    heldout_sentences: usize,
    #[arg(long, default_value_t = 500)]
    vocab_size: usize,
}

/// Training flags; unset ones come from `--config` and then the preset.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// JSON file of training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    critic_steps: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    lm_lr: Option<f64>,
    #[arg(long)]
    critic_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    f: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    init_range: Option<f64>,
    #[arg(long)]
    bptt_start: Option<usize>,
    #[arg(long)]
    bptt_end: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Train the language model without a critic (requires λ = 0).
    #[arg(long)]
    no_critic: bool,
}

impl TrainFlags {
    fn overrides(&self, lambda: Option<f64>) -> Result<TrainOverrides> {
        let flags = TrainOverrides {
            preset: self.preset.clone(),
            lambda,
            critic_steps: self.critic_steps,
            clip: self.clip,
            lm_lr: self.lm_lr,
            critic_lr: self.critic_lr,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            d: self.d,
            hidden: self.hidden.or(self.d),
            f: self.f,
            dropout: self.dropout,
            init_range: self.init_range,
            bptt_start: self.bptt_start,
            bptt_end: self.bptt_end,
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            no_critic: self.no_critic.then_some(true),
        };
        Ok(match &self.config {
            Some(p) => TrainOverrides::from_json_file(p)?.overlay(&flags),
            None => flags,
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_delimiter = ',', default_value = "a,b")]
    langs: Vec<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "a,b")]
    langs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,1,10")]
    grid: Vec<f64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScaleArgs {
    /// Language counts; set k is the first k synthetic languages.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1")]
    lambdas: Vec<f64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lang: String,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value = "")]
    prefix: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Labeled task text: `<lang>.task.tsv` files, or synthetic sentences from
/// the grammar recorded in the checkpoint.
#[derive(Args, Debug, Clone)]
struct TaskArgs {
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    task_size: usize,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
}

#[derive(Args, Debug)]
struct ZeroshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    train_lang: String,
    #[arg(long, value_delimiter = ',')]
    test_langs: Vec<String>,
    #[command(flatten)]
    task: TaskArgs,
    /// Fraction of the training language's examples used for training.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    train_fraction: f64,
    #[arg(long, default_value_t = ClassifierConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ClassifierConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = ClassifierConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',')]
    langs: Vec<String>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',')]
    langs: Vec<String>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let args: Vec<OsString> = args.into_iter().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("error kind=usage message={}", json_str(first));
            return EXIT_USAGE;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error kind={} message={}", e.kind(), json_str(&e.to_string()));
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_else(|_| "\"\"".into())
}

fn run(cmd: Command, argv: Vec<String>) -> Result<()> {
    match cmd {
        Command::BpeTrain(a) => bpe_train(a, argv),
        Command::SynthGen(a) => synth_gen(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Ablate(a) => ablate(a, argv),
        Command::Scale(a) => scale(a, argv),
        Command::Sample(a) => sample(a, argv),
        Command::Zeroshot(a) => zeroshot(a, argv),
        Command::Probe(a) => probe(a, argv),
        Command::ExportEmb(a) => export_emb(a, argv),
    }
}

fn bpe_train(a: BpeTrainArgs, argv: Vec<String>) -> Result<()> {
    let text = fs::read_to_string(&a.input)?;
    let (merges, vocab) = bpe::learn(text.lines(), a.vocab_size, &a.lang)?;
    fs::create_dir_all(&a.out)?;
    let vp = a.out.join(format!("{}.vocab", a.lang));
    let mp = a.out.join(format!("{}.merges", a.lang));
    vocab.save(&vp)?;
    merges.save(&mp)?;
    let mut m = RunManifest::new("bpe-train", argv, serde_json::json!({"lang": a.lang, "vocab_size": a.vocab_size}), 0);
    m.add_input(&a.input);
    m.add_output(&vp)?;
    m.add_output(&mp)?;
    m.save(&a.out.join(MANIFEST_FILE))
}

fn synth_gen(a: SynthGenArgs, argv: Vec<String>) -> Result<()> {
    let g = SynthGrammar::new(a.languages, a.grammar_seed)?;
    fs::create_dir_all(&a.out)?;
    let config = serde_json::json!({
        "languages": a.languages, "grammar_seed": a.grammar_seed, "train_sentences": a.train_sentences,
        "heldout_sentences": a.heldout_sentences, "task_size": a.task_size,
    });
    let mut m = RunManifest::new("synth-gen", argv, config, a.seed);
    for (j, lang) in g.language_names().iter().enumerate() {
        let j = j as u64;
        let tr = g.generate_corpus(lang, a.train_sentences, &mut RngState::with_stream(a.seed, 1000 + j))?;
        let ho = g.generate_corpus(lang, a.heldout_sentences, &mut RngState::with_stream(a.seed, 2000 + j))?;
        let task = g.generate_task(lang, a.task_size, &mut RngState::with_stream(a.seed, 7000 + j))?;
        let paths = [format!("{lang}.train.txt"), format!("{lang}.heldout.txt"), format!("{lang}.task.tsv")].map(|n| a.out.join(n));
        synthlang::write_corpus(&paths[0], &tr)?;
        synthlang::write_corpus(&paths[1], &ho)?;
        synthlang::write_task(&paths[2], &task)?;
        for p in &paths {
            m.add_output(p)?;
        }
    }
    m.save(&a.out.join(MANIFEST_FILE))
}

/// Training data plus a JSON note describing its origin, stored in the
/// checkpoint so later subcommands can regenerate task text.
fn load_data(d: &DataArgs, langs: &[String], seed: u64) -> Result<(TrainData, serde_json::Value)> {
    if langs.is_empty() {
        return Err(Error::Config("no languages given".into()));
    }
    match &d.data {
        Some(dir) => {
            let read = |name: String| -> Result<Vec<String>> {
                let text = fs::read_to_string(dir.join(&name)).map_err(|e| Error::Invalid(format!("{}: {e}", dir.join(&name).display())))?;
                Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
            };
            let mut tokenizers = Vec::new();
            let (mut train, mut heldout) = (Vec::new(), Vec::new());
            for lang in langs {
                let tr = read(format!("{lang}.train.txt"))?;
                let (merges, vocab) = bpe::learn(tr.iter().map(String::as_str), d.vocab_size, lang)?;
                tokenizers.push(Tokenizer::new(vocab, merges)?);
                train.push(tr);
                heldout.push(read(format!("{lang}.heldout.txt"))?);
            }
            let data = TrainData::new(langs.to_vec(), tokenizers, &train, &heldout)?;
            Ok((data, serde_json::json!({"data_dir": dir.display().to_string(), "vocab_size": d.vocab_size})))
        }
        None => {
            let g = grammar_for(langs, d.grammar_seed)?;
            let data = TrainData::synthetic(&g, langs, d.train_sentences, d.heldout_sentences, d.vocab_size, seed)?;
            let note = serde_json::json!({
                "grammar_seed": d.grammar_seed, "grammar_languages": g.languages.len(), "train_sentences": d.train_sentences,
                "heldout_sentences": d.heldout_sentences, "vocab_size": d.vocab_size,
            });
            Ok((data, note))
        }
    }
}

/// Grammar covering synthetic languages named by letter.
fn grammar_for(langs: &[String], seed: u64) -> Result<SynthGrammar> {
    let mut top = 0;
    for l in langs {
        let idx = (0..26).find(|&i| synthlang::language_name(i) == *l).ok_or_else(|| {
            Error::UnknownLanguage(format!("{l} (synthetic languages are named a..z; pass --data for others)"))
        })?;
        top = top.max(idx + 1);
    }
    SynthGrammar::new(top, seed)
}

fn resolved(flags: &TrainFlags, lambda: Option<f64>, languages: usize) -> Result<TrainConfig> {
    validate_config(&flags.overrides(lambda)?, languages)
}

fn train(a: TrainArgs, argv: Vec<String>) -> Result<()> {
    let cfg = resolved(&a.train, a.lambda, a.langs.len())?;
    let (data, note) = load_data(&a.data, &a.langs, cfg.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut t = Trainer::<f32>::new(cfg.clone(), data)?;
    let rows = match t.run(|_| {}) {
        Ok(rows) => rows,
        Err(e @ Error::Divergence { .. }) => {
            t.checkpoint(note).save(&a.out.join("diverged.bin"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let (mp, cp) = (a.out.join("metrics.csv"), a.out.join("checkpoint.bin"));
    fs::write(&mp, metrics_csv(&rows))?;
    t.checkpoint(note.clone()).save(&cp)?;
    let mut m = RunManifest::new("train", argv, serde_json::json!({"train": cfg, "languages": a.langs, "data": note}), cfg.seed);
    if let Some(d) = &a.data.data {
        m.add_input(d);
    }
    m.add_output(&mp)?;
    m.add_output(&cp)?;
    m.save(&a.out.join(MANIFEST_FILE))
}

fn ablate(a: AblateArgs, argv: Vec<String>) -> Result<()> {
    let top = a.grid.iter().cloned().fold(0.0, f64::max);
    let cfg = resolved(&a.train, Some(top), a.langs.len())?;
    let (data, note) = load_data(&a.data, &a.langs, cfg.seed)?;
    let runs = trainer::ablate_lambda(&a.grid, &cfg, &data)?;
    fs::create_dir_all(&a.out)?;
    let rows: Vec<_> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let path = a.out.join("ablate.csv");
    fs::write(&path, metrics_csv(&rows))?;
    let config = serde_json::json!({"train": cfg, "grid": a.grid, "languages": a.langs, "data": note});
    let mut m = RunManifest::new("ablate", argv, config, cfg.seed);
    m.add_output(&path)?;
    m.save(&a.out.join(MANIFEST_FILE))
}

fn scale(a: ScaleArgs, argv: Vec<String>) -> Result<()> {
    let mut counts = a.counts.clone();
    counts.sort_unstable();
    let top = counts.last().copied().ok_or_else(|| Error::Config("no language counts".into()))?;
    if counts[0] < 2 {
        return Err(Error::Config("constraint requires ≥2 languages".into()));
    }
    let all: Vec<String> = (0..top).map(synthlang::language_name).collect();
    let lmax = a.lambdas.iter().cloned().fold(0.0, f64::max);
    let cfg = resolved(&a.train, Some(lmax), counts[0])?;
    let (data, note) = load_data(&a.data, &all, cfg.seed)?;
    let sets: Vec<Vec<String>> = counts.iter().map(|&k| all[..k].to_vec()).collect();
    let rep = trainer::scaling_experiment(&sets, &a.lambdas, &cfg, &data)?;
    fs::create_dir_all(&a.out)?;
    let (cp, jp) = (a.out.join("scale.csv"), a.out.join("scale.json"));
    let mut csv = String::from("languages,lambda,final_ppl\n");
    for r in &rep.runs {
        csv.push_str(&format!("{},{},{}\n", r.languages.len(), r.lambda, r.final_ppl()));
    }
    fs::write(&cp, csv)?;
    fs::write(&jp, serde_json::to_string_pretty(&rep)? + "\n")?;
    let config = serde_json::json!({"train": cfg, "counts": counts, "lambdas": a.lambdas, "data": note});
    let mut m = RunManifest::new("scale", argv, config, cfg.seed);
    m.add_output(&cp)?;
    m.add_output(&jp)?;
    m.save(&a.out.join(MANIFEST_FILE))
}

fn sample(a: SampleArgs, argv: Vec<String>) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model::<f32>()?;
    let toks = ck.tokenizers()?;
    let j = ck.language_index(&a.lang)?;
    let mut rng = RngState::with_stream(a.seed, 9);
    let prefix: Vec<u32> = if a.prefix.is_empty() { Vec::new() } else { toks[j].encode(&a.prefix) };
    let prefix = prefix.strip_suffix(&[EOS]).unwrap_or(&prefix).to_vec();
    let mut lines = String::new();
    for _ in 0..a.count {
        let ids = model.sample(j, &prefix, a.max_len, a.temperature, &mut rng)?;
        let body: Vec<u32> = ids.into_iter().filter(|&t| t != BOS && t != EOS).collect();
        lines.push_str(&toks[j].decode_lossy(&body)?);
        lines.push('\n');
    }
    match &a.out {
        Some(p) => {
            fs::write(p, lines)?;
            let config = serde_json::json!({"lang": a.lang, "count": a.count, "max_len": a.max_len, "temperature": a.temperature, "prefix": a.prefix});
            let mut m = RunManifest::new("sample", argv, config, a.seed);
            m.add_input(&a.ckpt);
            m.add_output(p)?;
            m.save(&manifest_path(p))
        }
        None => {
            print!("{lines}");
            Ok(())
        }
    }
}

/// Loaded checkpoint with its frozen model and tokenizers.
struct Frozen {
    ck: Checkpoint,
    model: crate::model::LanguageModel<f32>,
    tokenizers: Vec<Tokenizer>,
}

impl Frozen {
    fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let model = ck.model::<f32>()?;
        let tokenizers = ck.tokenizers()?;
        Ok(Frozen { ck, model, tokenizers })
    }

    fn features(&self, lang: &str, texts: &[LabeledExample]) -> Result<Vec<FeatureSequence<f32>>> {
        let j = self.ck.language_index(lang)?;
        let refs: Vec<&str> = texts.iter().map(|e| e.sentence.as_str()).collect();
        let mut fs = extract_batch(&self.model, &self.tokenizers[j], j, &refs, 64)?;
        for (f, e) in fs.iter_mut().zip(texts) {
            f.label = Some(e.label);
        }
        Ok(fs)
    }

    fn task(&self, t: &TaskArgs, lang: &str) -> Result<Vec<LabeledExample>> {
        if let Some(dir) = &t.tasks {
            return synthlang::read_task(&dir.join(format!("{lang}.task.tsv")), lang);
        }
        let extra = &self.ck.meta.extra;
        let seed = extra.get("grammar_seed").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::Invalid("checkpoint was not trained on synthetic languages; pass --tasks".into())
        })?;
        let n = extra.get("grammar_languages").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let g = SynthGrammar::new(n.max(1), seed)?;
        let j = g.language_names().iter().position(|l| l == lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
        g.generate_task(lang, t.task_size, &mut RngState::with_stream(t.task_seed, 7000 + j as u64))
    }
}

fn write_json_out(out: &Option<PathBuf>, body: &impl serde::Serialize, manifest: RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(body)? + "\n";
    match out {
        Some(p) => {
            fs::write(p, text)?;
            let mut m = manifest;
            m.add_output(p)?;
            m.save(&manifest_path(p))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn zeroshot(a: ZeroshotArgs, argv: Vec<String>) -> Result<()> {
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {} outside (0, 1)", a.train_fraction)));
    }
    let fz = Frozen::load(&a.ckpt)?;
    let mut tests = a.test_langs.clone();
    if !tests.contains(&a.train_lang) {
        tests.insert(0, a.train_lang.clone());
    }
    let mut train = Vec::new();
    let mut sets = Vec::new();
    for lang in &tests {
        let mut fs = fz.features(lang, &fz.task(&a.task, lang)?)?;
        if *lang == a.train_lang {
            let cut = ((fs.len() as f64) * a.train_fraction).round() as usize;
            let held = fs.split_off(cut.clamp(1, fs.len().saturating_sub(1)));
            train = fs;
            fs = held;
        }
        sets.push((lang.clone(), fs));
    }
    let cc = ClassifierConfig { epochs: a.epochs, lr: a.lr, hidden: a.hidden, seed: a.seed, ..ClassifierConfig::default() };
    let before = fz.model.store.checksum();
    let clf = train_classifier(&train, &cc)?;
    let report = zero_shot_eval(&clf, &a.train_lang, &sets)?;
    if fz.model.store.checksum() != before {
        return Err(Error::Invalid("language model parameters changed during downstream training".into()));
    }
    let body = DownstreamReport { transfer: Some(report), probe_accuracy: None };
    let mut m = RunManifest::new("zeroshot", argv, serde_json::json!({"classifier": cc, "test_langs": tests}), a.seed);
    m.add_input(&a.ckpt);
    write_json_out(&a.out, &body, m)
}

fn probe(a: ProbeArgs, argv: Vec<String>) -> Result<()> {
    let fz = Frozen::load(&a.ckpt)?;
    let feats = a.langs.iter().map(|l| fz.features(l, &fz.task(&a.task, l)?)).collect::<Result<Vec<_>>>()?;
    let acc = language_id_probe(&feats, a.seed)?;
    let body = DownstreamReport { transfer: None, probe_accuracy: Some(acc) };
    let mut m = RunManifest::new("probe", argv, serde_json::json!({"langs": a.langs}), a.seed);
    m.add_input(&a.ckpt);
    write_json_out(&a.out, &body, m)
}

fn export_emb(a: ExportArgs, argv: Vec<String>) -> Result<()> {
    let fz = Frozen::load(&a.ckpt)?;
    let feats = a.langs.iter().map(|l| fz.features(l, &fz.task(&a.task, l)?)).collect::<Result<Vec<_>>>()?;
    fs::write(&a.out, pca_csv(&a.langs, &feats)?)?;
    let mut m = RunManifest::new("export-emb", argv, serde_json::json!({"langs": a.langs}), 0);
    m.add_input(&a.ckpt);
    m.add_output(&a.out)?;
    m.save(&manifest_path(&a.out))
}
