//! Subcommands. Each writes its outputs plus a [`RunManifest`] into its
//! output directory (`--out`, default `<run-root>/<command>`).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vocalsim::audio::WavFormat;
use vocalsim::corpus::{write_stem_directory, SynthParams};
use vocalsim::encoder::Checkpoint;
use vocalsim::eval::{
    run_artist_eval, run_cluster_metrics, run_gender_eval, run_similarity_eval, sweep_clip_length,
    sweep_low_resource, EvalConfig, EvalModel, InputMode, MetricReport,
};
use vocalsim::retrieval::{
    agreement_matrix, build_index, generate_pool, read_response_log, winrate_matrix,
    AgreementMatrix, IndexConfig, Question, RetrievalIndex, TrialConfig, TrialPool, WinrateMatrix,
};
use vocalsim::sampler::{SamplerConfig, Strategy};
use vocalsim::train::{
    finetune_in_domain, pretrain, TrainConfig, TrainState, BEST_CHECKPOINT, CONFIG_FILE,
    FINAL_CHECKPOINT, LOSS_FILE, STATE_FILE,
};
use vocalsim::Corpus;

use crate::config::{load_corpus, parse_list, ConfigFile, CorpusRecipe, CorpusSpec, SplitSpec};
use crate::manifest::RunManifest;
use crate::server::{serve, Study};

pub const CORPUS_FILE: &str = "corpus.json";
pub const TRIALS_FILE: &str = "trials.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";

pub fn index_file(mode: InputMode) -> String {
    format!("index_{}.json", mode.name())
}

#[derive(Debug, Parser)]
#[command(name = "vocalsim", version, about = "Vocal similarity embeddings: training, evaluation and listening tests")]
pub struct Cli {
    /// Root under which default output directories are created.
    #[arg(long, env = "VOCALSIM_RUN_ROOT", default_value = "runs", global = true)]
    pub run_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory [default: <run-root>/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file whose sections override the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stem corpus and record its recipe.
    SynthCorpus(SynthArgs),
    /// Pre-train an encoder from scratch.
    Pretrain(PretrainArgs),
    /// Continue a run on real mixture/vocal pairs only.
    Finetune(FinetuneArgs),
    /// Gender probe with k-fold cross-validation.
    EvalGender(EvalArgs),
    /// Artist probe, EER and MNR.
    EvalArtist(EvalArgs),
    /// EER and MNR without a probe.
    EvalSimilarity(EvalArgs),
    /// Artist accuracy against clip length.
    SweepClipLength(SweepLengthArgs),
    /// Artist accuracy against training fraction.
    SweepLowResource(SweepFractionArgs),
    /// Clustering quality of clip embeddings.
    ClusterMetrics(EvalArgs),
    /// Build mixture and vocals retrieval indexes for several models.
    BuildIndex(BuildIndexArgs),
    /// Generate listening-test sessions from two indexes.
    GenTrials(GenTrialsArgs),
    /// Run the listening-test HTTP service.
    Serve(ServeArgs),
    /// Winrate and agreement tables from a response log.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthCorpus(_) => "synth-corpus",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::EvalGender(_) => "eval-gender",
            Command::EvalArtist(_) => "eval-artist",
            Command::EvalSimilarity(_) => "eval-similarity",
            Command::SweepClipLength(_) => "sweep-clip-length",
            Command::SweepLowResource(_) => "sweep-low-resource",
            Command::ClusterMetrics(_) => "cluster-metrics",
            Command::BuildIndex(_) => "build-index",
            Command::GenTrials(_) => "gen-trials",
            Command::Serve(_) => "serve",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SynthCorpus(a) => &a.common,
            Command::Pretrain(a) => &a.common,
            Command::Finetune(a) => &a.common,
            Command::EvalGender(a)
            | Command::EvalArtist(a)
            | Command::EvalSimilarity(a)
            | Command::ClusterMetrics(a) => &a.common,
            Command::SweepClipLength(a) => &a.eval.common,
            Command::SweepLowResource(a) => &a.eval.common,
            Command::BuildIndex(a) => &a.common,
            Command::GenTrials(a) => &a.common,
            Command::Serve(a) => &a.common,
            Command::Report(a) => &a.common,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 10)]
    pub artists: usize,
    #[arg(long, default_value_t = 8)]
    pub tracks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clip length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Train/valid/test artist ratios, e.g. "0.8,0.1,0.1".
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Also write the stems as WAV files under `<out>/stems`.
    #[arg(long)]
    pub write_stems: bool,
}

/// Flags that mirror `TrainConfig` and `SamplerConfig` fields.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Training steps [paper scale: 8000].
    #[arg(long, visible_alias = "total-steps")]
    pub steps: Option<usize>,
    /// Optimizer updates per step [paper scale: 64].
    #[arg(long, visible_alias = "minibatches")]
    pub minibatches_per_step: Option<usize>,
    /// Pairs per minibatch [paper scale: 128].
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    pub lr_init: Option<f64>,
    /// Steps without improvement before the learning rate halves [paper scale: 1000].
    #[arg(long)]
    pub lr_halve_window: Option<usize>,
    #[arg(long)]
    pub val_check_interval: Option<usize>,
    #[arg(long)]
    pub val_pairs: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.total_steps, self.steps);
        set(&mut c.minibatches_per_step, self.minibatches_per_step);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.lr_init, self.lr_init);
        set(&mut c.lr_halve_window, self.lr_halve_window);
        set(&mut c.val_check_interval, self.val_check_interval);
        set(&mut c.val_pairs, self.val_pairs);
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// `corpus.json` from synth-corpus, or a stem directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// One of cola, mscol, cola-art, cvsm-a, cvsm-ah, cvsm-af, cvsm-art.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub p_artificial: Option<f64>,
    #[arg(long)]
    pub stage_switch_fraction: Option<f64>,
    #[arg(long)]
    pub excerpt_len_s: Option<f64>,
    /// Seeds initialization, validation pairs and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory written by pretrain (or an earlier finetune).
    #[arg(long)]
    pub from: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint file, or a run directory (its best checkpoint is used).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input_mode: Option<InputMode>,
    #[arg(long)]
    pub n_artists: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub eer_trials: Option<usize>,
    #[arg(long)]
    pub mnr_batch: Option<usize>,
    #[arg(long)]
    pub mnr_trials: Option<usize>,
    #[arg(long)]
    pub gender_folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepLengthArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Clip lengths in seconds, e.g. "1,2,5,10".
    #[arg(long, default_value = "1,2,5,10,20,30")]
    pub lengths: String,
}

#[derive(Debug, Args)]
pub struct SweepFractionArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Fractions of the probe training clips, e.g. "0.1,0.5,1".
    #[arg(long, default_value = "0.05,0.1,0.25,0.5,1")]
    pub fractions: String,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    /// `id=checkpoint`, repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Represent each clip by its first `window_s` seconds.
    #[arg(long)]
    pub window_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenTrialsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding the mixture and vocals indexes.
    #[arg(long)]
    pub index_dir: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub sessions: usize,
    #[arg(long)]
    pub n_per_respondent: Option<usize>,
    #[arg(long)]
    pub control_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// Enables the agreement endpoint.
    #[arg(long)]
    pub index_dir: Option<PathBuf>,
    /// Response log [default: <out>/responses.jsonl].
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Serve only the first `audio_window_s` seconds of each clip.
    #[arg(long)]
    pub audio_window_s: Option<f64>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    /// Also emit agreement tables from these indexes.
    #[arg(long)]
    pub index_dir: Option<PathBuf>,
}

/// Runs one command; returns the hash of the manifest it wrote.
pub fn run(cli: Cli) -> Result<String> {
    let out = cli
        .command
        .common()
        .out
        .clone()
        .unwrap_or_else(|| cli.run_root.join(cli.command.name()));
    let config = ConfigFile::load(cli.command.common().config.as_deref())?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let name = cli.command.name();
    let manifest = match &cli.command {
        Command::SynthCorpus(a) => synth_corpus(a, &config, &out)?,
        Command::Pretrain(a) => run_pretrain(a, &config, &out)?,
        Command::Finetune(a) => run_finetune(a, &config, &out)?,
        Command::EvalGender(a) => eval(name, a, &config, &out, run_gender_eval)?,
        Command::EvalArtist(a) => eval(name, a, &config, &out, run_artist_eval)?,
        Command::EvalSimilarity(a) => eval(name, a, &config, &out, run_similarity_eval)?,
        Command::ClusterMetrics(a) => eval(name, a, &config, &out, run_cluster_metrics)?,
        Command::SweepClipLength(a) => {
            let lengths = parse_list(&a.lengths)?;
            eval(name, &a.eval, &config, &out, |c, m, e| {
                sweep_clip_length(c, m, e, &lengths)
            })?
        }
        Command::SweepLowResource(a) => {
            let fractions = parse_list(&a.fractions)?;
            eval(name, &a.eval, &config, &out, |c, m, e| {
                sweep_low_resource(c, m, e, &fractions)
            })?
        }
        Command::BuildIndex(a) => run_build_index(a, &config, &out)?,
        Command::GenTrials(a) => run_gen_trials(a, &config, &out)?,
        Command::Serve(a) => return run_serve(a, &config, &out),
        Command::Report(a) => run_report(a, &out)?,
    };
    let hash = manifest.write(&out)?;
    log::info!("{name}: wrote {} (manifest {hash})", out.display());
    Ok(hash)
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    std::fs::write(dir.join(name), serde_json::to_vec_pretty(v)?)
        .with_context(|| format!("writing {name}"))
}

fn synth_corpus(a: &SynthArgs, config: &ConfigFile, out: &Path) -> Result<RunManifest> {
    let mut params: SynthParams = config.section("synth")?;
    set(&mut params.duration_s, a.duration);
    let mut split: SplitSpec = config.section("split")?;
    if let Some(s) = &a.split {
        let r = parse_list(s)?;
        let [tr, va, te] = r[..] else {
            bail!("--split needs three ratios, got {s:?}");
        };
        split.ratios = [tr, va, te];
    }
    set(&mut split.seed, a.split_seed);
    let mut spec = CorpusSpec {
        format: crate::config::CORPUS_FORMAT.into(),
        recipe: CorpusRecipe::Synthetic {
            n_artists: a.artists,
            tracks_per_artist: a.tracks,
            seed: a.seed,
            params,
        },
        split,
        manifest_hash: String::new(),
    };
    let corpus = spec.build()?;
    spec.manifest_hash = corpus.manifest_hash();
    write_json(out, CORPUS_FILE, &spec)?;
    let mut m = RunManifest::new("synth-corpus", to_value(&spec)?);
    m.seed = Some(a.seed);
    m.corpus_hash = Some(spec.manifest_hash.clone());
    m.record_output(out, CORPUS_FILE)?;
    if a.write_stems {
        write_stem_directory(&corpus, &out.join("stems"), WavFormat::Float32)
            .context("corpus::write_stem_directory")?;
        m.record_output(out, "stems/manifest.json")?;
    }
    println!(
        "{} tracks by {} artists, manifest {}",
        corpus.len(),
        corpus.artists(None).len(),
        spec.manifest_hash
    );
    Ok(m)
}

fn train_manifest(
    command: &str,
    state: &TrainState,
    spec: &CorpusSpec,
    out: &Path,
    corpus: &Corpus,
) -> Result<RunManifest> {
    let files = state
        .write_run_dir(out, corpus)
        .context("train::write_run_dir")?;
    write_json(out, CORPUS_FILE, spec)?;
    let mut m = RunManifest::new(
        command,
        serde_json::json!({ "train": state.config, "sampler": state.sampler, "corpus": spec }),
    );
    m.seed = Some(state.config.seed);
    m.corpus_hash = Some(spec.manifest_hash.clone());
    m.checkpoint_hashes
        .insert("best".into(), files.best_checkpoint_hash);
    m.checkpoint_hashes
        .insert("final".into(), files.final_checkpoint_hash);
    for f in [
        CONFIG_FILE,
        LOSS_FILE,
        BEST_CHECKPOINT,
        FINAL_CHECKPOINT,
        STATE_FILE,
        CORPUS_FILE,
    ] {
        m.record_output(out, f)?;
    }
    if let Some(last) = state.curve.last() {
        println!(
            "step {}: train loss {:.4}, best val {:?}",
            last.step, last.train_loss, state.best_val
        );
    }
    Ok(m)
}

fn run_pretrain(a: &PretrainArgs, config: &ConfigFile, out: &Path) -> Result<RunManifest> {
    let (corpus, spec) = load_corpus(&a.corpus, &config.section("split")?)?;
    let mut train: TrainConfig = config.section("train")?;
    let mut sampler: SamplerConfig = config.section("sampler")?;
    a.train.apply(&mut train);
    set(&mut sampler.strategy, a.strategy);
    set(&mut sampler.p_artificial, a.p_artificial);
    set(&mut sampler.stage_switch_fraction, a.stage_switch_fraction);
    set(&mut sampler.excerpt_len_s, a.excerpt_len_s);
    if let Some(s) = a.seed {
        train.seed = s;
        sampler.seed = s;
    }
    let state = pretrain(&train, &sampler, &corpus).context("train::pretrain")?;
    train_manifest("pretrain", &state, &spec, out, &corpus)
}

fn run_finetune(a: &FinetuneArgs, config: &ConfigFile, out: &Path) -> Result<RunManifest> {
    let (corpus, spec) = load_corpus(&a.from.join(CORPUS_FILE), &SplitSpec::default())?;
    let state = TrainState::load(&a.from.join(STATE_FILE))
        .with_context(|| format!("train::TrainState::load({})", a.from.display()))?;
    let mut train: TrainConfig = match config.section::<Option<TrainConfig>>("train")? {
        Some(t) => t,
        None => state.config.clone(),
    };
    train.encoder = state.model.config.clone();
    a.train.apply(&mut train);
    let state = finetune_in_domain(state, &train, &corpus).context("train::finetune_in_domain")?;
    train_manifest("finetune", &state, &spec, out, &corpus)
}

fn load_model(path: &Path) -> Result<EvalModel> {
    let file = if path.is_dir() {
        path.join(BEST_CHECKPOINT)
    } else {
        path.to_owned()
    };
    let ck = Checkpoint::load(&file)
        .with_context(|| format!("encoder::Checkpoint::load({})", file.display()))?;
    EvalModel::from_checkpoint(&ck).context("eval::EvalModel::from_checkpoint")
}

fn eval(
    command: &str,
    a: &EvalArgs,
    config: &ConfigFile,
    out: &Path,
    f: impl FnOnce(&Corpus, &EvalModel, &EvalConfig) -> vocalsim::Result<MetricReport>,
) -> Result<RunManifest> {
    let (corpus, spec) = load_corpus(&a.corpus, &config.section("split")?)?;
    let model = load_model(&a.checkpoint)?;
    let mut ec: EvalConfig = config.section("eval")?;
    set(&mut ec.input_mode, a.input_mode);
    set(&mut ec.n_artists, a.n_artists);
    set(&mut ec.repetitions, a.repetitions);
    set(&mut ec.eer_trials, a.eer_trials);
    set(&mut ec.mnr_batch, a.mnr_batch);
    set(&mut ec.mnr_trials, a.mnr_trials);
    set(&mut ec.gender_folds, a.gender_folds);
    set(&mut ec.seed, a.seed);
    let report = f(&corpus, &model, &ec).with_context(|| format!("eval::{command}"))?;
    report.write(out, "report")?;
    for (name, s) in &report.metrics {
        println!("{name}: {:.4} ± {:.4} (n = {})", s.mean, s.std, s.samples.len());
    }
    for c in &report.curve {
        println!("x = {}: accuracy {:.4} ± {:.4}", c.x, c.accuracy.mean, c.accuracy.std);
    }
    let mut m = RunManifest::new(command, serde_json::json!({ "eval": ec, "corpus": spec }));
    m.seed = Some(ec.seed);
    m.corpus_hash = Some(spec.manifest_hash);
    m.checkpoint_hashes
        .insert("model".into(), model.checkpoint_hash.clone());
    m.record_output(out, "report.json")?;
    m.record_output(out, "report.csv")?;
    Ok(m)
}

fn run_build_index(a: &BuildIndexArgs, config: &ConfigFile, out: &Path) -> Result<RunManifest> {
    let (corpus, spec) = load_corpus(&a.corpus, &config.section("split")?)?;
    let mut ic: IndexConfig = config.section("index")?;
    if a.window_s.is_some() {
        ic.window_s = a.window_s;
    }
    let mut models = Vec::new();
    for m in &a.models {
        let Some((id, path)) = m.split_once('=') else {
            bail!("--model expects id=checkpoint, got {m:?}");
        };
        models.push((id.to_string(), load_model(Path::new(path))?));
    }
    let refs: Vec<(String, &EvalModel)> = models.iter().map(|(id, m)| (id.clone(), m)).collect();
    let mut manifest = RunManifest::new(
        "build-index",
        serde_json::json!({ "index": ic, "corpus": spec }),
    );
    manifest.corpus_hash = Some(spec.manifest_hash.clone());
    for (id, m) in &models {
        manifest
            .checkpoint_hashes
            .insert(id.clone(), m.checkpoint_hash.clone());
    }
    for mode in [InputMode::Mixture, InputMode::Vocals] {
        let (index, _) =
            build_index(&corpus, &refs, mode, &ic).context("retrieval::build_index")?;
        let name = index_file(mode);
        std::fs::write(out.join(&name), index.to_bytes()?)?;
        manifest.record_output(out, &name)?;
        println!("{}: {} entries", mode.name(), index.len());
    }
    Ok(manifest)
}

fn load_index(dir: &Path, mode: InputMode) -> Result<RetrievalIndex> {
    let p = dir.join(index_file(mode));
    let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
    let index = RetrievalIndex::from_bytes(&bytes)
        .with_context(|| format!("retrieval::RetrievalIndex::from_bytes({})", p.display()))?;
    if index.input_mode != mode {
        bail!("{} holds a {} index", p.display(), index.input_mode.name());
    }
    Ok(index)
}

fn load_indexes(dir: &Path) -> Result<(RetrievalIndex, RetrievalIndex)> {
    let mix = load_index(dir, InputMode::Mixture)?;
    let voc = load_index(dir, InputMode::Vocals)?;
    if mix.models() != voc.models() {
        bail!(
            "mixture index models {:?} differ from vocals index models {:?}",
            mix.models(),
            voc.models()
        );
    }
    Ok((mix, voc))
}

fn run_gen_trials(a: &GenTrialsArgs, config: &ConfigFile, out: &Path) -> Result<RunManifest> {
    let (mix, voc) = load_indexes(&a.index_dir)?;
    let mut tc: TrialConfig = config.section("trials")?;
    set(&mut tc.n_per_respondent, a.n_per_respondent);
    set(&mut tc.control_fraction, a.control_fraction);
    let voc_tracks = voc.common_tracks();
    let queries: Vec<String> = mix
        .common_tracks()
        .into_iter()
        .filter(|t| voc_tracks.contains(t))
        .collect();
    let (pool, diagnostics) = generate_pool(&mix, &voc, &queries, &mix.models(), &tc, a.sessions, a.seed)
        .context("retrieval::generate_pool")?;
    std::fs::write(out.join(TRIALS_FILE), pool.to_bytes()?)?;
    println!(
        "{} sessions, {} trials, {} warnings",
        pool.sessions.len(),
        pool.trials().count(),
        diagnostics.len()
    );
    let mut m = RunManifest::new(
        "gen-trials",
        serde_json::json!({ "trials": tc, "sessions": a.sessions,
            "index_hashes": [mix.hash()?, voc.hash()?] }),
    );
    m.seed = Some(a.seed);
    m.record_output(out, TRIALS_FILE)?;
    Ok(m)
}

fn load_pool(path: &Path) -> Result<TrialPool> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    TrialPool::from_bytes(&bytes)
        .with_context(|| format!("retrieval::TrialPool::from_bytes({})", path.display()))
}

fn run_serve(a: &ServeArgs, config: &ConfigFile, out: &Path) -> Result<String> {
    let (corpus, spec) = load_corpus(&a.corpus, &config.section("split")?)?;
    let pool = load_pool(&a.trials)?;
    let indexes = a.index_dir.as_deref().map(load_indexes).transpose()?;
    let responses = a
        .responses
        .clone()
        .unwrap_or_else(|| out.join(RESPONSES_FILE));
    let mut m = RunManifest::new(
        "serve",
        serde_json::json!({ "addr": a.addr.to_string(), "audio_window_s": a.audio_window_s,
            "trials_hash": pool.hash()? }),
    );
    m.seed = Some(pool.seed);
    m.corpus_hash = Some(spec.manifest_hash);
    let hash = m.write(out)?;
    let study = Study::open(pool, corpus, indexes, &responses, a.audio_window_s)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?;
    rt.block_on(serve(Arc::new(study), a.addr))?;
    Ok(hash)
}

fn winrate_csv(w: &WinrateMatrix) -> String {
    let mut out = format!("model,{}\n", w.models.join(","));
    for (i, row) in w.cells.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|c| c.map(|v| format!("{v}")).unwrap_or_default())
            .collect();
        out += &format!("{},{}\n", w.models[i], cells.join(","));
    }
    out += "\nmodel,wins,losses,winrate\n";
    for t in &w.totals {
        let rate = t.winrate.map(|v| format!("{v}")).unwrap_or_default();
        out += &format!("{},{},{},{rate}\n", t.model, t.wins, t.losses);
    }
    out
}

fn agreement_csv(a: &AgreementMatrix) -> String {
    let mut out = format!("model,{}\n", a.models.join(","));
    for (i, row) in a.cells.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out += &format!("{},{}\n", a.models[i], cells.join(","));
    }
    out
}

fn print_table(title: &str, models: &[String], cell: impl Fn(usize, usize) -> String) {
    println!("{title}");
    print!("{:>12}", "");
    for m in models {
        print!("{m:>12}");
    }
    println!();
    for (i, m) in models.iter().enumerate() {
        print!("{m:>12}");
        for j in 0..models.len() {
            print!("{:>12}", cell(i, j));
        }
        println!();
    }
}

fn run_report(a: &ReportArgs, out: &Path) -> Result<RunManifest> {
    let pool = load_pool(&a.trials)?;
    let responses = read_response_log(&a.responses)
        .with_context(|| format!("retrieval::read_response_log({})", a.responses.display()))?;
    let mut m = RunManifest::new(
        "report",
        serde_json::json!({ "trials_hash": pool.hash()?, "responses": responses.len() }),
    );
    m.seed = Some(pool.seed);
    for q in [Question::Overall, Question::Vocal] {
        let w = winrate_matrix(&pool, &responses, q).context("retrieval::winrate_matrix")?;
        let stem = format!("winrate_{}", q.name());
        write_json(out, &format!("{stem}.json"), &w)?;
        std::fs::write(out.join(format!("{stem}.csv")), winrate_csv(&w))?;
        m.record_output(out, &format!("{stem}.json"))?;
        m.record_output(out, &format!("{stem}.csv"))?;
        print_table(&format!("winrate ({})", q.name()), &w.models, |i, j| {
            w.cells[i][j].map(|v| format!("{v:.1}")).unwrap_or("-".into())
        });
    }
    if let Some(dir) = &a.index_dir {
        let (mix, voc) = load_indexes(dir)?;
        for ix in [mix, voc] {
            let a = agreement_matrix(&ix, &pool.models, &ix.common_tracks())
                .context("retrieval::agreement_matrix")?;
            let stem = format!("agreement_{}", ix.input_mode.name());
            write_json(out, &format!("{stem}.json"), &a)?;
            std::fs::write(out.join(format!("{stem}.csv")), agreement_csv(&a))?;
            m.record_output(out, &format!("{stem}.json"))?;
            m.record_output(out, &format!("{stem}.csv"))?;
            print_table(
                &format!("agreement ({})", ix.input_mode.name()),
                &a.models,
                |i, j| format!("{:.1}", a.cells[i][j]),
            );
        }
    }
    Ok(m)
}
