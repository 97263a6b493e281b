//! Classification, verification, ranking and cluster metrics.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// Mean of the probability vectors, then argmax (lowest index on ties).
pub fn aggregate_predictions(probabilities: &[Vec<f64>]) -> Result<usize> {
    let first = probabilities
        .first()
        .ok_or_else(|| Error::InsufficientData("no excerpt predictions to aggregate".into()))?;
    let mut mean = vec![0.0; first.len()];
    for p in probabilities {
        if p.len() != mean.len() {
            return Err(Error::Dimension {
                what: "probability vector",
                expected: mean.len(),
                got: p.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    Ok(argmax(&mean))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and the unweighted mean of per-class F1 over the classes that
/// occur in `labels`.
pub fn accuracy_and_macro_f1(predictions: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::InsufficientData("no labels to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = correct as f64 / labels.len() as f64;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let f1_sum: f64 = classes
        .iter()
        .map(|&c| {
            let tp = predictions
                .iter()
                .zip(labels)
                .filter(|(&p, &l)| p == c && l == c)
                .count() as f64;
            let predicted = predictions.iter().filter(|&&p| p == c).count() as f64;
            let actual = labels.iter().filter(|&&l| l == c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (predicted + actual)
            }
        })
        .sum();
    Ok((accuracy, f1_sum / classes.len() as f64))
}

/// Equal error rate. A pair is accepted when its similarity is at least the
/// threshold; the threshold sweeps every observed value plus ±∞ and the
/// crossing of false acceptance and false rejection is linearly
/// interpolated.
pub fn eer(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InsufficientData(
            "equal error rate needs positive and negative pairs".into(),
        ));
    }
    if positives.iter().chain(negatives).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity scores"));
    }
    let mut pos = positives.to_vec();
    let mut neg = negatives.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let rates = |t: f64| {
        let below_pos = pos.partition_point(|&v| v < t) as f64;
        let below_neg = neg.partition_point(|&v| v < t) as f64;
        let far = (nn - below_neg) / nn;
        let frr = below_pos / np;
        (far, frr)
    };
    let mut prev = rates(thresholds[0]);
    if prev.0 == prev.1 {
        return Ok(prev.0);
    }
    for &t in &thresholds[1..] {
        let cur = rates(t);
        let d_prev = prev.0 - prev.1;
        let d_cur = cur.0 - cur.1;
        if d_cur == 0.0 {
            return Ok(cur.0);
        }
        if d_prev > 0.0 && d_cur < 0.0 {
            let a = d_prev / (d_prev - d_cur);
            return Ok(prev.0 + a * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("FAR falls from 1 to 0 while FRR rises from 0 to 1")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Samples up to `k` same-label and `k` different-label index pairs without
/// replacement.
pub fn sample_verification_pairs<R: Rng>(
    labels: &[usize],
    k: usize,
    rng: &mut R,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    let mut take = |mut v: Vec<(usize, usize)>| {
        let n = k.min(v.len());
        v.partial_shuffle(rng, n);
        v.truncate(n);
        v
    };
    let same = take(same);
    let diff = take(diff);
    (same, diff)
}

/// `(r − 1) / (N − 1)` where `r` is the 1-based rank of the positive among
/// itself and the distractors by descending similarity. Distractors tied
/// with the positive count half.
pub fn normalized_rank(positive: f64, distractors: &[f64]) -> f64 {
    if distractors.is_empty() {
        return 0.0;
    }
    let above = distractors.iter().filter(|&&d| d > positive).count() as f64;
    let tied = distractors.iter().filter(|&&d| d == positive).count() as f64;
    (above + 0.5 * tied) / distractors.len() as f64
}

/// Mean normalized rank over `trials` retrieval trials with `n` candidates
/// each (one positive, `n − 1` other-artist distractors). `n` is capped at
/// what the data allows.
pub fn mnr<R: Rng>(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: embeddings.len(),
            right: labels.len(),
        });
    }
    let queries: Vec<usize> = (0..labels.len())
        .filter(|&i| {
            labels
                .iter()
                .enumerate()
                .any(|(j, &l)| j != i && l == labels[i])
        })
        .collect();
    if queries.is_empty() {
        return Err(Error::InsufficientData(
            "mean normalized rank needs an artist with at least 2 clips".into(),
        ));
    }
    if trials == 0 || n < 2 {
        return Err(Error::Config(
            "mnr needs N ≥ 2 and at least one trial".into(),
        ));
    }
    let mut total = 0.0;
    for _ in 0..trials {
        let q = *queries.choose(rng).expect("non-empty");
        let same: Vec<usize> = (0..labels.len())
            .filter(|&j| j != q && labels[j] == labels[q])
            .collect();
        let p = *same.choose(rng).expect("query has a partner");
        let others: Vec<usize> = (0..labels.len())
            .filter(|&j| labels[j] != labels[q])
            .collect();
        let k = (n - 1).min(others.len());
        if k < n - 1 {
            log::debug!("mnr: only {k} distractors available for N = {n}");
        }
        let distractors: Vec<f64> = others
            .choose_multiple(rng, k)
            .map(|&d| cosine_similarity(&embeddings[q], &embeddings[d]))
            .collect();
        let pos = cosine_similarity(&embeddings[q], &embeddings[p]);
        total += normalized_rank(pos, &distractors);
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterScores {
    pub silhouette: f64,
    pub intra_inter_ratio: f64,
}

/// Cosine-distance silhouette and intra/inter distance ratio, each averaged
/// within clusters first and then across clusters.
pub fn cluster_metrics(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<ClusterScores> {
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: embeddings.len(),
            right: labels.len(),
        });
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::InsufficientData(
            "cluster metrics need at least 2 clusters".into(),
        ));
    }
    let idx = |c: usize| clusters.binary_search(&c).unwrap();
    let mut sizes = vec![0usize; clusters.len()];
    for &l in labels {
        sizes[idx(l)] += 1;
    }
    if sizes.iter().any(|&s| s < 2) {
        return Err(Error::InsufficientData(
            "every cluster needs at least 2 points".into(),
        ));
    }
    let n = embeddings.len();
    let normed: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let nn = norm(e);
            if nn == 0.0 {
                e.clone()
            } else {
                e.iter().map(|v| v / nn).collect()
            }
        })
        .collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (1.0 - dot(&normed[i], &normed[j])).max(0.0);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let k = clusters.len();
    let mut sil_sum = vec![0.0; k];
    let mut intra_sum = vec![0.0; k];
    let mut inter_sum = vec![0.0; k];
    for i in 0..n {
        let ci = idx(labels[i]);
        let mut per = vec![0.0; k];
        for j in 0..n {
            if j != i {
                per[idx(labels[j])] += dist[i * n + j];
            }
        }
        let a = per[ci] / (sizes[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci)
            .map(|c| per[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        sil_sum[ci] += if denom > 0.0 { (b - a) / denom } else { 0.0 };
        intra_sum[ci] += per[ci];
        inter_sum[ci] += (0..k).filter(|&c| c != ci).map(|c| per[c]).sum::<f64>();
    }
    let mut sil = 0.0;
    let mut ratio = 0.0;
    for c in 0..k {
        sil += sil_sum[c] / sizes[c] as f64;
        let intra = intra_sum[c] / (sizes[c] * (sizes[c] - 1)) as f64;
        let inter = inter_sum[c] / (sizes[c] * (n - sizes[c])) as f64;
        if inter == 0.0 {
            return Err(Error::InsufficientData(
                "degenerate clusters: zero distance between clusters".into(),
            ));
        }
        ratio += intra / inter;
    }
    Ok(ClusterScores {
        silhouette: sil / k as f64,
        intra_inter_ratio: ratio / k as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_predictions(&[vec![0.3, 0.7]]).unwrap(), 1);
        assert_eq!(
            aggregate_predictions(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap(),
            1
        );
        assert_eq!(aggregate_predictions(&[vec![0.5, 0.5]]).unwrap(), 0);
        assert!(aggregate_predictions(&[]).is_err());
    }

    #[test]
    fn macro_f1_fixture() {
        let (acc, f1) = accuracy_and_macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(f1, 1.0 / 3.0);
        assert_eq!(accuracy_and_macro_f1(&[2, 1], &[2, 1]).unwrap(), (1.0, 1.0));
        assert_eq!(accuracy_and_macro_f1(&[4, 4], &[4, 4]).unwrap(), (1.0, 1.0));
        assert!(accuracy_and_macro_f1(&[], &[]).is_err());
    }

    #[test]
    fn eer_fixtures() {
        assert_eq!(eer(&[0.9, 0.2], &[0.8, 0.1]).unwrap(), 0.5);
        assert_eq!(eer(&[0.9; 4], &[0.1; 3]).unwrap(), 0.0);
        assert_eq!(eer(&[0.1; 4], &[0.9; 3]).unwrap(), 1.0);
        assert!(eer(&[], &[0.1]).is_err());
    }

    #[test]
    fn eer_same_distribution() {
        let mut rng = seeding::stream(5, &[]);
        let pos: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
        let neg: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
        let e = eer(&pos, &neg).unwrap();
        assert!((e - 0.5).abs() < 0.03, "{e}");
    }

    #[test]
    fn normalized_rank_extremes() {
        assert_eq!(normalized_rank(0.9, &[0.1, 0.2, 0.3]), 0.0);
        assert_eq!(normalized_rank(0.0, &[0.1, 0.2, 0.3]), 1.0);
    }

    #[test]
    fn mnr_random_embeddings() {
        let mut rng = seeding::stream(6, &[]);
        let labels: Vec<usize> = (0..200).map(|i| i / 4).collect();
        let emb: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = mnr(&emb, &labels, 50, 1000, &mut rng).unwrap();
        assert!((m - 0.5).abs() < 0.05, "{m}");
        assert!(mnr(&emb, &(0..200).collect::<Vec<_>>(), 50, 10, &mut rng).is_err());
    }

    #[test]
    fn cluster_fixtures() {
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        let dup = vec![a.clone(), a.clone(), b.clone(), b.clone()];
        let s = cluster_metrics(&dup, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.intra_inter_ratio, 0.0);
        assert_eq!(s.silhouette, 1.0);
        assert!(cluster_metrics(&dup, &[0, 0, 0, 0]).is_err());
        assert!(cluster_metrics(&dup, &[0, 0, 0, 1]).is_err());
    }

    #[test]
    fn verification_pairs_are_labelled() {
        let labels = [0, 0, 1, 1, 1];
        let (same, diff) = sample_verification_pairs(&labels, 100, &mut seeding::stream(1, &[]));
        assert_eq!(same.len(), 4);
        assert_eq!(diff.len(), 6);
        assert!(same.iter().all(|&(i, j)| labels[i] == labels[j]));
        assert!(diff.iter().all(|&(i, j)| labels[i] != labels[j]));
    }
}
