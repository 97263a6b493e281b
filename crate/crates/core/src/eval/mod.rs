//! Downstream evaluation: clip embeddings, linear probes, retrieval metrics,
//! cluster quality and the gender / artist protocols with their sweeps.

mod metrics;
mod probe;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::audio::{is_active_slice, seconds_to_samples, ACTIVITY_THRESHOLD};
use crate::corpus::{apportion, sha256_hex, Corpus, Diagnostic, Gender, Partition, StemTrack};
use crate::encoder::{encode, Checkpoint, ModelState};
use crate::error::{Error, Result};
use crate::mel::MelFrontend;
use crate::seeding;

pub use metrics::{
    accuracy_and_macro_f1, aggregate_predictions, argmax, cluster_metrics, cosine_similarity, dot,
    eer, mnr, normalized_rank, sample_verification_pairs, ClusterScores,
};
pub use probe::{
    clip_accuracy, clip_accuracy_and_loss, train_probe, EarlyStopping, ProbeClip, ProbeConfig,
    ProbeModel, StopDecision,
};

/// Which signal the encoder sees at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Mixture,
    Vocals,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Mixture => "mixture",
            InputMode::Vocals => "vocals",
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mixture" | "mix" => Ok(InputMode::Mixture),
            "vocals" | "vocal" => Ok(InputMode::Vocals),
            other => Err(Error::Config(format!(
                "unknown input mode {other:?} (expected mixture or vocals)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub input_mode: InputMode,
    /// Artists sampled per repetition of the artist protocol (M).
    pub n_artists: usize,
    pub repetitions: usize,
    /// Same-artist and different-artist pairs per EER estimate (K).
    pub eer_trials: usize,
    /// Candidates per retrieval trial (N).
    pub mnr_batch: usize,
    pub mnr_trials: usize,
    pub probe: ProbeConfig,
    pub gender_folds: usize,
    /// Train / valid / test clip ratios of the artist protocol.
    pub clip_split: [f64; 3],
    pub excerpt_len_s: f64,
    pub activity_threshold: f64,
    /// Corpus partition evaluated; `None` uses every track.
    pub partition: Option<Partition>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::Mixture,
            n_artists: 10,
            repetitions: 5,
            eer_trials: 5000,
            mnr_batch: 50,
            mnr_trials: 100,
            probe: ProbeConfig::default(),
            gender_folds: 10,
            clip_split: [0.8, 0.1, 0.1],
            excerpt_len_s: 1.0,
            activity_threshold: ACTIVITY_THRESHOLD,
            partition: Some(Partition::Test),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_artists", self.n_artists),
            ("repetitions", self.repetitions),
            ("eer_trials", self.eer_trials),
            ("mnr_batch", self.mnr_batch),
            ("mnr_trials", self.mnr_trials),
            ("gender_folds", self.gender_folds),
            ("probe.max_epochs", self.probe.max_epochs),
            ("probe.patience", self.probe.patience),
            ("probe.batch_size", self.probe.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.excerpt_len_s > 0.0) || !(self.probe.lr > 0.0) {
            return Err(Error::Config(
                "excerpt length and probe lr must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Frozen encoder weights plus the hash of the checkpoint they came from.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub state: ModelState<f32>,
    pub checkpoint_hash: String,
}

impl EvalModel {
    pub fn new(state: ModelState<f32>) -> Result<Self> {
        let checkpoint_hash = Checkpoint::from_state(&state).hash()?;
        Ok(Self {
            state,
            checkpoint_hash,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            state: ck.to_state()?,
            checkpoint_hash: ck.hash()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEmbedding {
    pub track_id: String,
    pub artist_id: String,
    pub gender: Gender,
    /// One pre-projection embedding per vocal-active excerpt, in time order.
    pub excerpt_embeddings: Vec<Vec<f64>>,
    /// L2-normalized mean of the excerpt embeddings.
    pub mean_embedding: Vec<f64>,
}

/// Unit-norm mean of `vectors`. A zero mean maps to the uniform unit vector.
pub fn normalized_mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        mean.iter_mut().for_each(|v| *v /= n);
    } else {
        let u = 1.0 / (d as f64).sqrt();
        mean.iter_mut().for_each(|v| *v = u);
    }
    mean
}

/// Embeds every consecutive excerpt of `track` whose vocal stem passes the
/// activity gate. In mixture mode the encoder sees the mixture excerpt.
pub fn embed_clip(
    track: &StemTrack,
    state: &ModelState<f32>,
    mode: InputMode,
    excerpt_len_s: f64,
    threshold: f64,
) -> Result<ClipEmbedding> {
    let len = seconds_to_samples(excerpt_len_s);
    if len == 0 {
        return Err(Error::Config(
            "excerpt length rounds to zero samples".into(),
        ));
    }
    let fe = MelFrontend::shared();
    let mut excerpts = Vec::new();
    for k in 0..track.len() / len {
        let start = k * len;
        let vocal = &track.vocals.samples()[start..start + len];
        if !is_active_slice(vocal, threshold) {
            continue;
        }
        let mel = match mode {
            InputMode::Vocals => fe.compute(vocal)?,
            InputMode::Mixture => fe.compute(track.mixture_slice(start, len)?.samples())?,
        };
        let e = encode(&mel, state)?;
        excerpts.push(e.iter().map(|&v| v as f64).collect::<Vec<f64>>());
    }
    if excerpts.is_empty() {
        return Err(Error::NoActiveVocals {
            retries: track.len() / len,
            context: format!("track {}", track.track_id),
        });
    }
    Ok(ClipEmbedding {
        track_id: track.track_id.clone(),
        artist_id: track.artist_id.clone(),
        gender: track.gender,
        mean_embedding: normalized_mean(&excerpts),
        excerpt_embeddings: excerpts,
    })
}

/// Embeds the tracks of `partition` (all tracks for `None`). Clips without
/// vocal activity are excluded with a diagnostic.
pub fn embed_corpus(
    corpus: &Corpus,
    state: &ModelState<f32>,
    config: &EvalConfig,
) -> Result<(Vec<ClipEmbedding>, Vec<Diagnostic>)> {
    let mut clips = Vec::new();
    let mut diagnostics = Vec::new();
    for t in corpus.tracks() {
        if let Some(p) = config.partition {
            if corpus.partition_of(&t.track_id) != Some(p) {
                continue;
            }
        }
        match embed_clip(
            t,
            state,
            config.input_mode,
            config.excerpt_len_s,
            config.activity_threshold,
        ) {
            Ok(c) => clips.push(c),
            Err(Error::NoActiveVocals { .. }) => {
                let d = Diagnostic {
                    track_id: Some(t.track_id.clone()),
                    message: "no vocal-active excerpt, excluded".into(),
                };
                log::warn!("{d}");
                diagnostics.push(d);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((clips, diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub samples: Vec<f64>,
}

impl MetricSummary {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Clip length in seconds or training fraction.
    pub x: f64,
    pub accuracy: MetricSummary,
    /// Clips involved, summed over repetitions.
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_manifest_hash: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub input_mode: InputMode,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub curve: Vec<CurvePoint>,
    pub diagnostics: Vec<String>,
    pub provenance: Provenance,
}

impl MetricReport {
    fn new(
        protocol: &str,
        config: &EvalConfig,
        extra: &str,
        corpus: &Corpus,
        model: &EvalModel,
        diagnostics: &[Diagnostic],
    ) -> Self {
        Self {
            protocol: protocol.into(),
            input_mode: config.input_mode,
            metrics: BTreeMap::new(),
            curve: Vec::new(),
            diagnostics: diagnostics.iter().map(|d| d.to_string()).collect(),
            provenance: Provenance {
                config_hash: sha256_hex(format!("{}{extra}", config.hash()).as_bytes()),
                corpus_manifest_hash: corpus.manifest_hash(),
                checkpoint_hash: model.checkpoint_hash.clone(),
            },
        }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.get(name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per metric, then one per curve point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("protocol,input_mode,name,x,mean,std,count\n");
        let (p, m) = (&self.protocol, self.input_mode.name());
        for (name, s) in &self.metrics {
            let _ = writeln!(
                out,
                "{p},{m},{name},,{},{},{}",
                s.mean,
                s.std,
                s.samples.len()
            );
        }
        for c in &self.curve {
            let _ = writeln!(
                out,
                "{p},{m},accuracy,{},{},{},{}",
                c.x, c.accuracy.mean, c.accuracy.std, c.clips
            );
        }
        out
    }

    /// SHA-256 of the JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Fails if a probe's training clips overlap its test clips.
pub fn check_disjoint(train: &[ProbeClip<'_>], test: &[ProbeClip<'_>]) -> Result<()> {
    let a: BTreeSet<&str> = train.iter().map(|c| c.track_id).collect();
    if let Some(c) = test.iter().find(|c| a.contains(c.track_id)) {
        return Err(Error::Duplicate(format!(
            "clip {} is in both the probe training and test sets",
            c.track_id
        )));
    }
    Ok(())
}

fn probe_clip(c: &ClipEmbedding, label: usize) -> ProbeClip<'_> {
    ProbeClip {
        track_id: &c.track_id,
        excerpts: &c.excerpt_embeddings,
        label,
    }
}

fn score(probe: &ProbeModel, test: &[ProbeClip<'_>]) -> Result<(f64, f64)> {
    let preds = test
        .iter()
        .map(|c| probe.predict_clip(c.excerpts))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|c| c.label).collect();
    accuracy_and_macro_f1(&preds, &labels)
}

/// Artist-stratified k-fold gender identification.
pub fn run_gender_eval(
    corpus: &Corpus,
    model: &EvalModel,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let (clips, mut diagnostics) = embed_corpus(corpus, &model.state, config)?;
    gender_eval_on(&clips, &mut diagnostics, config).map(|(acc, f1, folds)| {
        let mut r = MetricReport::new("gender", config, "", corpus, model, &diagnostics);
        r.metrics
            .insert("accuracy".into(), MetricSummary::from_samples(acc));
        r.metrics
            .insert("macro_f1".into(), MetricSummary::from_samples(f1));
        r.metrics.insert(
            "folds".into(),
            MetricSummary::from_samples(vec![folds as f64]),
        );
        r
    })
}

/// Gender protocol on precomputed clip embeddings; returns per-fold
/// accuracy, macro-F1 and the fold count.
pub fn gender_eval_on(
    clips: &[ClipEmbedding],
    diagnostics: &mut Vec<Diagnostic>,
    config: &EvalConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let genders = [Gender::Male, Gender::Female];
    let mut by_gender: Vec<Vec<String>> = vec![Vec::new(); 2];
    for c in clips {
        if let Some(g) = genders.iter().position(|&g| g == c.gender) {
            if !by_gender[g].contains(&c.artist_id) {
                by_gender[g].push(c.artist_id.clone());
            }
        }
    }
    let fewest = by_gender.iter().map(Vec::len).min().unwrap_or(0);
    if fewest < 2 {
        return Err(Error::InsufficientData(format!(
            "gender evaluation needs at least 2 artists of each gender, found {} male / {} female",
            by_gender[0].len(),
            by_gender[1].len()
        )));
    }
    let k = config.gender_folds.min(fewest);
    if k < config.gender_folds {
        let d = Diagnostic {
            track_id: None,
            message: format!(
                "only {fewest} artists for some gender, using {k} folds instead of {}",
                config.gender_folds
            ),
        };
        log::warn!("{d}");
        diagnostics.push(d);
    }
    let mut rng = seeding::stream(config.seed, &[seeding::label("gender-folds")]);
    let mut fold_of: BTreeMap<String, usize> = BTreeMap::new();
    for artists in &mut by_gender {
        artists.sort();
        artists.shuffle(&mut rng);
        for (j, a) in artists.iter().enumerate() {
            fold_of.insert(a.clone(), j % k);
        }
    }
    let labelled: Vec<(usize, ProbeClip<'_>)> = clips
        .iter()
        .filter_map(|c| {
            let g = genders.iter().position(|&g| g == c.gender)?;
            Some((fold_of[&c.artist_id], probe_clip(c, g)))
        })
        .collect();

    let (mut accs, mut f1s) = (Vec::new(), Vec::new());
    for i in 0..k {
        let valid_fold = if k >= 3 { Some((i + 1) % k) } else { None };
        let pick = |f: &dyn Fn(usize) -> bool| -> Vec<ProbeClip<'_>> {
            labelled
                .iter()
                .filter(|(fold, _)| f(*fold))
                .map(|(_, c)| c.clone())
                .collect()
        };
        let test = pick(&|f| f == i);
        let valid = pick(&|f| Some(f) == valid_fold);
        let train = pick(&|f| f != i && Some(f) != valid_fold);
        check_disjoint(&train, &test)?;
        check_disjoint(&valid, &test)?;
        let mut prng = seeding::stream(config.seed, &[seeding::label("gender-probe"), i as u64]);
        let probe = train_probe(&train, &valid, 2, &config.probe, &mut prng)?;
        let (acc, f1) = score(&probe, &test)?;
        accs.push(acc);
        f1s.push(f1);
    }
    Ok((accs, f1s, k))
}

/// One repetition of the artist protocol.
struct ArtistRep<'c> {
    probe: ProbeModel,
    #[cfg_attr(not(test), allow(dead_code))]
    train: Vec<ProbeClip<'c>>,
    test: Vec<ProbeClip<'c>>,
    /// Mean embeddings and labels of every clip of the sampled artists.
    members: Vec<(&'c [f64], usize)>,
}

fn rep_stream(config: &EvalConfig, rep: usize, what: &str) -> seeding::Rng {
    seeding::stream(
        config.seed,
        &[
            seeding::label("artist-eval"),
            rep as u64,
            seeding::label(what),
        ],
    )
}

fn artist_split<'c>(
    clips: &'c [ClipEmbedding],
    config: &EvalConfig,
    rep: usize,
) -> Result<(
    Vec<ProbeClip<'c>>,
    Vec<ProbeClip<'c>>,
    Vec<ProbeClip<'c>>,
    Vec<(&'c [f64], usize)>,
)> {
    let artists: BTreeSet<&str> = clips.iter().map(|c| c.artist_id.as_str()).collect();
    let artists: Vec<&str> = artists.into_iter().collect();
    if artists.len() < config.n_artists {
        return Err(Error::InsufficientData(format!(
            "artist evaluation needs {} artists, only {} have usable clips",
            config.n_artists,
            artists.len()
        )));
    }
    let mut rng = rep_stream(config, rep, "split");
    let mut chosen: Vec<&str> = artists
        .choose_multiple(&mut rng, config.n_artists)
        .copied()
        .collect();
    chosen.sort();
    let mut members: Vec<usize> = clips
        .iter()
        .enumerate()
        .filter(|(_, c)| chosen.contains(&c.artist_id.as_str()))
        .map(|(i, _)| i)
        .collect();
    let label = |i: usize| chosen.binary_search(&clips[i].artist_id.as_str()).unwrap();
    let counts = apportion(members.len(), &config.clip_split)?;
    if counts[0] == 0 || counts[2] == 0 {
        return Err(Error::InsufficientData(format!(
            "{} clips cannot be split into train and test sets",
            members.len()
        )));
    }
    let mean_labels = members
        .iter()
        .map(|&i| (clips[i].mean_embedding.as_slice(), label(i)))
        .collect();
    members.shuffle(&mut rng);
    let mk = |ix: &[usize]| -> Vec<ProbeClip<'c>> {
        ix.iter()
            .map(|&i| probe_clip(&clips[i], label(i)))
            .collect()
    };
    let train = mk(&members[..counts[0]]);
    let valid = mk(&members[counts[0]..counts[0] + counts[1]]);
    let test = mk(&members[counts[0] + counts[1]..]);
    Ok((train, valid, test, mean_labels))
}

fn artist_rep<'c>(
    clips: &'c [ClipEmbedding],
    config: &EvalConfig,
    rep: usize,
) -> Result<ArtistRep<'c>> {
    let (train, valid, test, members) = artist_split(clips, config, rep)?;
    check_disjoint(&train, &test)?;
    check_disjoint(&valid, &test)?;
    let probe = train_probe(
        &train,
        &valid,
        config.n_artists,
        &config.probe,
        &mut rep_stream(config, rep, "probe"),
    )?;
    Ok(ArtistRep {
        probe,
        train,
        test,
        members,
    })
}

/// EER and MNR over the mean embeddings of one repetition's artists.
fn similarity_scores(
    members: &[(&[f64], usize)],
    config: &EvalConfig,
    rep: usize,
) -> Result<(f64, f64)> {
    let labels: Vec<usize> = members.iter().map(|m| m.1).collect();
    let (same, diff) = sample_verification_pairs(
        &labels,
        config.eer_trials,
        &mut rep_stream(config, rep, "eer"),
    );
    let sim = |&(i, j): &(usize, usize)| cosine_similarity(members[i].0, members[j].0);
    let pos: Vec<f64> = same.iter().map(sim).collect();
    let neg: Vec<f64> = diff.iter().map(sim).collect();
    let embeddings: Vec<Vec<f64>> = members.iter().map(|m| m.0.to_vec()).collect();
    let mnr_v = mnr(
        &embeddings,
        &labels,
        config.mnr_batch,
        config.mnr_trials,
        &mut rep_stream(config, rep, "mnr"),
    )?;
    Ok((eer(&pos, &neg)?, mnr_v))
}

fn summarize(samples: BTreeMap<&str, Vec<f64>>) -> BTreeMap<String, MetricSummary> {
    samples
        .into_iter()
        .map(|(k, v)| (k.to_string(), MetricSummary::from_samples(v)))
        .collect()
}

/// Per-repetition accuracy, macro-F1, EER and MNR on precomputed clips.
pub fn artist_eval_on(
    clips: &[ClipEmbedding],
    config: &EvalConfig,
) -> Result<BTreeMap<String, MetricSummary>> {
    let mut samples: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rep in 0..config.repetitions {
        let r = artist_rep(clips, config, rep)?;
        let (acc, f1) = score(&r.probe, &r.test)?;
        let (eer_v, mnr_v) = similarity_scores(&r.members, config, rep)?;
        samples.entry("accuracy").or_default().push(acc);
        samples.entry("macro_f1").or_default().push(f1);
        samples.entry("eer").or_default().push(eer_v);
        samples.entry("mnr").or_default().push(mnr_v);
    }
    Ok(summarize(samples))
}

/// EER and MNR on the same artist draws as [`artist_eval_on`], without
/// training probes.
pub fn similarity_eval_on(
    clips: &[ClipEmbedding],
    config: &EvalConfig,
) -> Result<BTreeMap<String, MetricSummary>> {
    let mut samples: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rep in 0..config.repetitions {
        let (_, _, _, members) = artist_split(clips, config, rep)?;
        let (eer_v, mnr_v) = similarity_scores(&members, config, rep)?;
        samples.entry("eer").or_default().push(eer_v);
        samples.entry("mnr").or_default().push(mnr_v);
    }
    Ok(summarize(samples))
}

/// Artist identification over `repetitions` random draws of M artists with
/// a random clip split, plus EER and MNR on the same artists.
pub fn run_artist_eval(
    corpus: &Corpus,
    model: &EvalModel,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let (clips, diagnostics) = embed_corpus(corpus, &model.state, config)?;
    let mut r = MetricReport::new("artist", config, "", corpus, model, &diagnostics);
    r.metrics = artist_eval_on(&clips, config)?;
    Ok(r)
}

/// Artist-similarity protocol: EER over same/different-artist clip pairs
/// and MNR over retrieval batches.
pub fn run_similarity_eval(
    corpus: &Corpus,
    model: &EvalModel,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let (clips, diagnostics) = embed_corpus(corpus, &model.state, config)?;
    let mut r = MetricReport::new("similarity", config, "", corpus, model, &diagnostics);
    r.metrics = similarity_eval_on(&clips, config)?;
    Ok(r)
}

/// Artist accuracy when each test clip is judged on its first `L` seconds
/// of vocal-active excerpts, for each `L` in `lengths`.
pub fn sweep_clip_length(
    corpus: &Corpus,
    model: &EvalModel,
    config: &EvalConfig,
    lengths: &[f64],
) -> Result<MetricReport> {
    config.validate()?;
    let (clips, diagnostics) = embed_corpus(corpus, &model.state, config)?;
    let longest = clips
        .iter()
        .filter_map(|c| corpus.track(&c.track_id))
        .map(|t| t.duration())
        .fold(0.0, f64::max);
    if let Some(&bad) = lengths.iter().find(|&&l| !(l > 0.0) || l > longest + 1e-9) {
        return Err(Error::Config(format!(
            "clip length {bad} s outside (0, {longest}] s"
        )));
    }
    let reps = (0..config.repetitions)
        .map(|rep| artist_rep(&clips, config, rep))
        .collect::<Result<Vec<_>>>()?;
    let mut r = MetricReport::new(
        "clip-length",
        config,
        &format!("{lengths:?}"),
        corpus,
        model,
        &diagnostics,
    );
    for &l in lengths {
        let n_ex = ((l / config.excerpt_len_s + 1e-9).floor() as usize).max(1);
        let mut accs = Vec::new();
        let mut count = 0;
        for rep in &reps {
            let truncated: Vec<ProbeClip<'_>> = rep
                .test
                .iter()
                .map(|c| ProbeClip {
                    excerpts: &c.excerpts[..n_ex.min(c.excerpts.len())],
                    ..c.clone()
                })
                .collect();
            accs.push(score(&rep.probe, &truncated)?.0);
            count += truncated.len();
        }
        r.curve.push(CurvePoint {
            x: l,
            accuracy: MetricSummary::from_samples(accs),
            clips: count,
        });
    }
    Ok(r)
}

/// Keeps `ceil(fraction · n)` (at least 1) clips of every artist, choosing
/// a nested subset and preserving the original order.
fn stratified_subset<'c>(
    clips: &[ProbeClip<'c>],
    fraction: f64,
    rng: &mut seeding::Rng,
) -> Vec<ProbeClip<'c>> {
    if fraction >= 1.0 {
        return clips.to_vec();
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        by_label.entry(c.label).or_default().push(i);
    }
    let mut keep = BTreeSet::new();
    for (_, mut ix) in by_label {
        ix.shuffle(rng);
        let n = ((fraction * ix.len() as f64).ceil() as usize).clamp(1, ix.len());
        keep.extend(ix.into_iter().take(n));
    }
    clips
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, c)| c.clone())
        .collect()
}

/// Artist accuracy with the probe retrained on a class-stratified fraction
/// of the train and valid clips.
pub fn sweep_low_resource(
    corpus: &Corpus,
    model: &EvalModel,
    config: &EvalConfig,
    fractions: &[f64],
) -> Result<MetricReport> {
    config.validate()?;
    if let Some(&bad) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("fraction {bad} outside (0, 1]")));
    }
    let (clips, diagnostics) = embed_corpus(corpus, &model.state, config)?;
    let mut r = MetricReport::new(
        "low-resource",
        config,
        &format!("{fractions:?}"),
        corpus,
        model,
        &diagnostics,
    );
    let splits = (0..config.repetitions)
        .map(|rep| artist_split(&clips, config, rep))
        .collect::<Result<Vec<_>>>()?;
    for &f in fractions {
        let mut accs = Vec::new();
        let mut count = 0;
        for (rep, (train, valid, test, _)) in splits.iter().enumerate() {
            // the same stream for every fraction gives nested subsets
            let mut srng = rep_stream(config, rep, "subsample");
            let train_f = stratified_subset(train, f, &mut srng);
            let valid_f = stratified_subset(valid, f, &mut srng);
            let present: BTreeSet<usize> = train.iter().map(|c| c.label).collect();
            let kept: BTreeSet<usize> = train_f.iter().map(|c| c.label).collect();
            if present != kept {
                return Err(Error::InsufficientData(format!(
                    "fraction {f} leaves some artist without training clips"
                )));
            }
            check_disjoint(&train_f, test)?;
            let probe = train_probe(
                &train_f,
                &valid_f,
                config.n_artists,
                &config.probe,
                &mut rep_stream(config, rep, "probe"),
            )?;
            accs.push(score(&probe, test)?.0);
            count += train_f.len() + valid_f.len();
        }
        r.curve.push(CurvePoint {
            x: f,
            accuracy: MetricSummary::from_samples(accs),
            clips: count,
        });
    }
    Ok(r)
}

/// Silhouette and intra/inter distance ratio of clip mean embeddings,
/// grouped by artist and, where possible, by gender.
pub fn run_cluster_metrics(
    corpus: &Corpus,
    model: &EvalModel,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let (clips, diagnostics) = embed_corpus(corpus, &model.state, config)?;
    let mut r = MetricReport::new("cluster", config, "", corpus, model, &diagnostics);
    let emb: Vec<Vec<f64>> = clips.iter().map(|c| c.mean_embedding.clone()).collect();
    let artists: Vec<&str> = clips
        .iter()
        .map(|c| c.artist_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: Vec<usize> = clips
        .iter()
        .map(|c| artists.binary_search(&c.artist_id.as_str()).unwrap())
        .collect();
    let s = cluster_metrics(&emb, &labels)?;
    r.metrics.insert(
        "silhouette_artist".into(),
        MetricSummary::from_samples(vec![s.silhouette]),
    );
    r.metrics.insert(
        "intra_inter_artist".into(),
        MetricSummary::from_samples(vec![s.intra_inter_ratio]),
    );
    let gendered: Vec<(Vec<f64>, usize)> = clips
        .iter()
        .filter_map(|c| match c.gender {
            Gender::Male => Some((c.mean_embedding.clone(), 0)),
            Gender::Female => Some((c.mean_embedding.clone(), 1)),
            Gender::Unknown => None,
        })
        .collect();
    let (ge, gl): (Vec<_>, Vec<_>) = gendered.into_iter().unzip();
    if let Ok(s) = cluster_metrics(&ge, &gl) {
        r.metrics.insert(
            "silhouette_gender".into(),
            MetricSummary::from_samples(vec![s.silhouette]),
        );
        r.metrics.insert(
            "intra_inter_gender".into(),
            MetricSummary::from_samples(vec![s.intra_inter_ratio]),
        );
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_clip(id: usize, artist: usize, gender: Gender, e: Vec<Vec<f64>>) -> ClipEmbedding {
        ClipEmbedding {
            track_id: format!("t{id}"),
            artist_id: format!("a{artist:02}"),
            gender,
            mean_embedding: normalized_mean(&e),
            excerpt_embeddings: e,
        }
    }

    #[test]
    fn normalized_mean_is_unit_and_order_free() {
        let v = vec![vec![1.0, 2.0, 2.0], vec![0.0, -1.0, 3.0]];
        let m = normalized_mean(&v);
        let n: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let r = normalized_mean(&[v[1].clone(), v[0].clone()]);
        assert_eq!(m, r);
        let z = normalized_mean(&[vec![0.0; 4]]);
        assert!((z.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_give_majority_rate() {
        // two artists, everything maps to the same point
        let clips: Vec<ClipEmbedding> = (0..40)
            .map(|i| {
                fake_clip(
                    i,
                    if i < 30 { 0 } else { 1 },
                    Gender::Male,
                    vec![vec![1.0, 1.0]; 3],
                )
            })
            .collect();
        let cfg = EvalConfig {
            n_artists: 2,
            repetitions: 3,
            eer_trials: 50,
            mnr_batch: 5,
            mnr_trials: 20,
            ..EvalConfig::default()
        };
        for rep in 0..3 {
            let r = artist_rep(&clips, &cfg, rep).unwrap();
            let train_major =
                usize::from(r.train.iter().filter(|c| c.label == 1).count() * 2 > r.train.len());
            let share = r.test.iter().filter(|c| c.label == train_major).count() as f64
                / r.test.len() as f64;
            assert_eq!(score(&r.probe, &r.test).unwrap().0, share);
        }
        let m = artist_eval_on(&clips, &cfg).unwrap();
        assert_eq!(m["accuracy"].samples.len(), 3);
        assert_eq!(m["macro_f1"].samples.len(), 3);
        assert_eq!(m, artist_eval_on(&clips, &cfg).unwrap());
    }

    #[test]
    fn stratified_subset_keeps_every_class() {
        let e = vec![vec![0.0]];
        let clips: Vec<ProbeClip> = (0..20)
            .map(|i| ProbeClip {
                track_id: "x",
                excerpts: &e,
                label: i % 4,
            })
            .collect();
        let rng = seeding::stream(0, &[]);
        let mut last = usize::MAX;
        for f in [1.0, 0.5, 0.2, 0.01] {
            let s = stratified_subset(&clips, f, &mut rng.clone());
            assert!(s.len() <= last);
            last = s.len();
            let labels: BTreeSet<usize> = s.iter().map(|c| c.label).collect();
            assert_eq!(labels.len(), 4);
        }
    }

    #[test]
    fn input_mode_parse() {
        assert_eq!("Vocals".parse::<InputMode>().unwrap(), InputMode::Vocals);
        assert!("drums".parse::<InputMode>().is_err());
    }
}
