//! End-to-end runs on tiny corpora: staged training, run determinism and
//! stem-directory ingestion.

use vocalsim::audio::WavFormat;
use vocalsim::corpus::{
    artist_disjoint_split, build_synthetic_corpus, load_stem_directory, write_stem_directory,
    SynthParams,
};
use vocalsim::encoder::EncoderConfig;
use vocalsim::eval::{run_similarity_eval, EvalConfig, EvalModel, InputMode};
use vocalsim::sampler::{sample_batch, SamplerConfig, SamplingPool, Strategy};
use vocalsim::train::{finetune_in_domain, pretrain, TrainConfig};
use vocalsim::{Corpus, Partition};

fn tiny_corpus(seed: u64) -> Corpus {
    let params = SynthParams {
        duration_s: 5.0,
        ..SynthParams::default()
    };
    let c = build_synthetic_corpus(6, 3, seed, &params).unwrap();
    artist_disjoint_split(c, [0.5, 0.25, 0.25], 1).unwrap()
}

fn toy_train(total_steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        minibatches_per_step: 1,
        batch_size: 4,
        lr_halve_window: 1_000_000,
        val_check_interval: 2,
        val_pairs: 4,
        seed: 9,
        encoder: EncoderConfig {
            stage_channels: vec![4, 8],
            embed_dim: 8,
            proj_dim: 8,
        },
        ..TrainConfig::default()
    }
}

/// Pre-training on artificial pairs and then finetuning on real pairs is
/// the same run as the switched sampler with a matching switch point, as
/// long as the learning rate never halves.
#[test]
fn two_stage_run_equals_switched_sampler() {
    let corpus = tiny_corpus(3);
    let mut staged_sampler = SamplerConfig::new(Strategy::CvsmA, 5);
    staged_sampler.stage_switch_fraction = 0.5;
    let first = pretrain(&toy_train(4), &staged_sampler, &corpus).unwrap();
    let staged = finetune_in_domain(first, &toy_train(4), &corpus).unwrap();

    let mut switched_sampler = SamplerConfig::new(Strategy::CvsmAf, 5);
    switched_sampler.stage_switch_fraction = 0.5;
    let switched = pretrain(&toy_train(8), &switched_sampler, &corpus).unwrap();

    assert_eq!(staged.step, 8);
    assert_eq!(staged.model, switched.model);
    let kinds = |s: &vocalsim::train::TrainState| {
        s.curve
            .iter()
            .map(|r| r.artificial_anchors)
            .collect::<Vec<_>>()
    };
    assert_eq!(kinds(&staged), kinds(&switched));
    assert!(kinds(&switched)[..4].iter().all(|&n| n == 4));
    assert!(kinds(&switched)[4..].iter().all(|&n| n == 0));
}

#[test]
fn identical_inputs_reproduce_every_artifact() {
    let a = tiny_corpus(4);
    let b = tiny_corpus(4);
    assert_eq!(a.manifest_hash(), b.manifest_hash());
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), tiny_corpus(5).fingerprint());

    let sampler = SamplerConfig::new(Strategy::CvsmAh, 2);
    let pool = SamplingPool::new(&a, Partition::Train).unwrap();
    let batch = |step| sample_batch(&sampler, &pool, 6, step, 0, 10).unwrap();
    let (x, y) = (batch(3), batch(3));
    for (p, q) in x.iter().zip(&y) {
        assert_eq!(p.anchor, q.anchor);
        assert_eq!(p.positive, q.positive);
        assert_eq!(p.anchor_source, q.anchor_source);
    }
    assert!(x.iter().zip(batch(4)).any(|(p, q)| p.anchor != q.anchor));

    let r1 = pretrain(&toy_train(4), &sampler, &a).unwrap();
    let r2 = pretrain(&toy_train(4), &sampler, &b).unwrap();
    let h1 = r1.final_checkpoint().hash().unwrap();
    assert_eq!(h1, r2.final_checkpoint().hash().unwrap());
    assert_eq!(
        r1.best_checkpoint().hash().unwrap(),
        r2.best_checkpoint().hash().unwrap()
    );
    assert_eq!(r1.to_bytes().unwrap(), r2.to_bytes().unwrap());

    let model = EvalModel::from_checkpoint(&r1.final_checkpoint()).unwrap();
    let config = EvalConfig {
        input_mode: InputMode::Vocals,
        n_artists: 3,
        repetitions: 2,
        eer_trials: 50,
        mnr_batch: 4,
        mnr_trials: 10,
        partition: None,
        ..EvalConfig::default()
    };
    let e1 = run_similarity_eval(&a, &model, &config).unwrap();
    let e2 = run_similarity_eval(&b, &model, &config).unwrap();
    assert_eq!(e1.hash().unwrap(), e2.hash().unwrap());
    assert_eq!(e1.provenance.checkpoint_hash, h1);
}

#[test]
fn stem_directory_round_trip_and_damage_report() {
    let corpus = tiny_corpus(6);
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_stem_directory(&corpus, root, WavFormat::Float32).unwrap();

    let (loaded, diags) = load_stem_directory(root).unwrap();
    assert!(diags.is_empty(), "{diags:?}");
    assert_eq!(loaded.len(), corpus.len());
    for (x, y) in corpus.tracks().iter().zip(loaded.tracks()) {
        assert_eq!(x.track_id, y.track_id);
        assert_eq!(x.artist_id, y.artist_id);
        assert_eq!(x.gender, y.gender);
        assert_eq!(x.vocals, y.vocals);
        assert_eq!(x.accompaniment, y.accompaniment);
    }

    // Damage three tracks in different ways plus one stray directory.
    let ids: Vec<String> = corpus.tracks().iter().map(|t| t.track_id.clone()).collect();
    let first = std::fs::read_dir(root.join(&ids[0]))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().contains("accomp"))
        .unwrap();
    std::fs::remove_file(first).unwrap();
    let vocals_of_second = std::fs::read_dir(root.join(&ids[1]))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().contains("vocal"))
        .unwrap();
    std::fs::write(vocals_of_second, b"not a wav file").unwrap();
    std::fs::remove_dir_all(root.join(&ids[2])).unwrap();
    std::fs::create_dir(root.join("stray")).unwrap();

    let (loaded, diags) = load_stem_directory(root).unwrap();
    assert_eq!(loaded.len(), corpus.len() - 3);
    let about = |id: &str| diags.iter().any(|d| d.track_id.as_deref() == Some(id));
    for id in [ids[0].as_str(), ids[1].as_str(), ids[2].as_str(), "stray"] {
        assert!(about(id), "no diagnostic for {id}: {diags:?}");
    }
    assert!(loaded.track(&ids[3]).is_some());
}
