//! Invariants checked over random inputs.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use vocalsim::encoder::bilinear_similarity;
use vocalsim::eval::{aggregate_predictions, eer, normalized_rank, InputMode};
use vocalsim::retrieval::{
    agreement_matrix, winrate_matrix, Choice, Question, RetrievalIndex, Trial, TrialConfig,
    TrialPool, TrialResponse,
};
use vocalsim::train::{contrastive_loss, cross_entropy_rows};

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn matrix(r: usize, c: usize) -> impl Strategy<Value = Array2<f64>> {
    vec_of(r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bilinear_similarity_is_linear_in_each_argument(
        y1 in vec_of(4), y2 in vec_of(4), z in vec_of(3), w in matrix(4, 3), a in -2.0f64..2.0
    ) {
        let (y1, y2, z) = (Array1::from(y1), Array1::from(y2), Array1::from(z));
        let s = |y: &Array1<f64>, z: &Array1<f64>| bilinear_similarity(y.view(), z.view(), w.view()).unwrap();
        let combo = &y1 * a + &y2;
        let lhs = s(&combo, &z);
        let rhs = a * s(&y1, &z) + s(&y2, &z);
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        let zs = &z * a;
        prop_assert!((s(&y1, &zs) - a * s(&y1, &z)).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn eer_is_invariant_under_monotone_transforms(
        pos in prop::collection::vec(-1.0f64..1.0, 1..40),
        neg in prop::collection::vec(-1.0f64..1.0, 1..40),
        scale in 0.1f64..10.0, shift in -5.0f64..5.0
    ) {
        let base = eer(&pos, &neg).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let f = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        prop_assert!((eer(&f(&pos), &f(&neg)).unwrap() - base).abs() < 1e-12);
        let g = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        prop_assert!((eer(&g(&pos), &g(&neg)).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn normalized_rank_is_invariant_under_monotone_transforms(
        p in -1.0f64..1.0, d in prop::collection::vec(-1.0f64..1.0, 1..20), scale in 0.1f64..10.0
    ) {
        let base = normalized_rank(p, &d);
        prop_assert!((0.0..=1.0).contains(&base));
        let t = |x: f64| (scale * x).tanh() + 3.0;
        let dt: Vec<f64> = d.iter().map(|&x| t(x)).collect();
        prop_assert_eq!(normalized_rank(t(p), &dt), base);
    }

    #[test]
    fn loss_ignores_joint_row_permutation(
        y in matrix(6, 4), z in matrix(6, 4), w in matrix(4, 4), rot in 1usize..6
    ) {
        let base = contrastive_loss(y.view(), z.view(), w.view()).unwrap().loss;
        let perm = |m: &Array2<f64>| Array2::from_shape_fn((6, 4), |(i, j)| m[[(i + rot) % 6, j]]);
        let moved = contrastive_loss(perm(&y).view(), perm(&z).view(), w.view()).unwrap().loss;
        prop_assert!((base - moved).abs() < 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn cross_entropy_ignores_per_row_shifts(l in matrix(5, 5), shifts in vec_of(5)) {
        let (base, _) = cross_entropy_rows(l.view()).unwrap();
        let shifted = Array2::from_shape_fn((5, 5), |(i, j)| l[[i, j]] + 10.0 * shifts[i]);
        let (moved, _) = cross_entropy_rows(shifted.view()).unwrap();
        prop_assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn clip_aggregation_ignores_positive_scaling(
        probs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..8),
        scale in 0.01f64..100.0
    ) {
        let scaled: Vec<Vec<f64>> = probs.iter().map(|p| p.iter().map(|v| v * scale).collect()).collect();
        prop_assert_eq!(aggregate_predictions(&probs).unwrap(), aggregate_predictions(&scaled).unwrap());
    }

    #[test]
    fn top1_ignores_embedding_scale(
        embs in prop::collection::vec(vec_of(3), 4..10),
        scales in prop::collection::vec(0.01f64..100.0, 10)
    ) {
        prop_assume!(embs.iter().all(|e| e.iter().any(|v| v.abs() > 1e-3)));
        let mut plain = RetrievalIndex::new(InputMode::Vocals);
        let mut scaled = RetrievalIndex::new(InputMode::Vocals);
        for (i, e) in embs.iter().enumerate() {
            let id = format!("t{i}");
            plain.insert(&id, "m", e).unwrap();
            let s: Vec<f64> = e.iter().map(|v| v * scales[i]).collect();
            scaled.insert(&id, "m", &s).unwrap();
        }
        for i in 0..embs.len() {
            let id = format!("t{i}");
            let a = plain.query_top1("m", &id).unwrap();
            let b = scaled.query_top1("m", &id).unwrap();
            // Scaling moves cosines by rounding only; accept a swap between
            // candidates whose cosines agree to 1e-9.
            if a != b {
                let q = plain.embedding("m", &id).unwrap();
                let c = |t: &str| vocalsim::eval::dot(q, plain.embedding("m", t).unwrap());
                prop_assert!((c(&a) - c(&b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn winrate_ignores_log_order(
        picks in prop::collection::vec((0usize..12, any::<bool>(), any::<bool>()), 1..60),
        seed in any::<u64>()
    ) {
        let pool = toy_pool();
        let mut responses: Vec<TrialResponse> = picks
            .iter()
            .enumerate()
            .map(|(r, &(t, o, v))| TrialResponse {
                trial_id: format!("t{t:02}"),
                respondent_id: format!("r{r}"),
                overall_choice: if o { Choice::A } else { Choice::B },
                vocal_choice: if v { Choice::A } else { Choice::B },
                timestamp: r as u64,
            })
            .collect();
        let base = winrate_matrix(&pool, &responses, Question::Overall).unwrap();
        let mut rng = vocalsim::seeding::stream(seed, &[]);
        use rand::seq::SliceRandom;
        responses.shuffle(&mut rng);
        prop_assert_eq!(&winrate_matrix(&pool, &responses, Question::Overall).unwrap(), &base);
        for i in 0..3 {
            for j in 0..3 {
                if i != j && base.comparisons[i][j] > 0 {
                    prop_assert_eq!(base.cells[i][j].unwrap() + base.cells[j][i].unwrap(), 100.0);
                }
            }
        }
    }

    #[test]
    fn agreement_is_symmetric_with_full_diagonal(
        embs in prop::collection::vec(prop::collection::vec(vec_of(2), 6), 3)
    ) {
        let mut index = RetrievalIndex::new(InputMode::Mixture);
        let models = ["a", "b", "c"];
        for (m, tracks) in models.iter().zip(&embs) {
            for (i, e) in tracks.iter().enumerate() {
                let e = [e[0] + 5.0, e[1]];
                index.insert(&format!("t{i}"), m, &e).unwrap();
            }
        }
        let names: Vec<String> = models.iter().map(|s| s.to_string()).collect();
        let queries = index.common_tracks();
        let a = agreement_matrix(&index, &names, &queries).unwrap();
        for i in 0..3 {
            prop_assert_eq!(a.cells[i][i], 100.0);
            for j in 0..3 {
                prop_assert_eq!(a.cells[i][j], a.cells[j][i]);
                prop_assert!((0.0..=100.0).contains(&a.cells[i][j]));
            }
        }
    }
}

/// Twelve trials cycling through the three model pairs; every fourth trial
/// is a control.
fn toy_pool() -> TrialPool {
    let models = ["a", "b", "c"];
    let trials: Vec<Trial> = (0..12)
        .map(|k| {
            let (i, j) = [(0, 1), (1, 2), (2, 0)][k % 3];
            Trial {
                trial_id: format!("t{k:02}"),
                query_track: format!("q{k}"),
                model_a: models[i].into(),
                model_b: models[j].into(),
                recommendation_a: format!("x{k}"),
                recommendation_b: if k % 4 == 3 { format!("x{k}") } else { format!("y{k}") },
                input_mode: if k % 2 == 0 { InputMode::Mixture } else { InputMode::Vocals },
            }
        })
        .collect();
    TrialPool {
        seed: 0,
        config: TrialConfig::default(),
        models: models.iter().map(|s| s.to_string()).collect(),
        sessions: vec![trials],
    }
}
