//! Top-k ranking of the catalog against query items and list quality
//! scoring: HR@K, MRR@K and NDCG@K against co-interaction ground truth.

use rayon::prelude::*;

use crate::data::{GroundTruth, ItemCatalog};
use crate::error::{Error, Result};

/// Top-k closest candidates to a query, in nondecreasing distance order.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query: usize,
    pub ranked: Vec<usize>,
    pub distances: Vec<f64>,
    /// Requested list length (the divisor of HR@K).
    pub k: usize,
    /// Set when fewer than k candidates were available.
    pub truncated: bool,
}

/// Rank candidates by distance to the query. Ties break by ascending item
/// index; the query is excluded from its own candidate list.
pub fn rank_items(
    query: usize,
    candidates: &[usize],
    k: usize,
    mut distance_to_query: impl FnMut(usize) -> f64,
) -> Result<RankedList> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Config("candidate list is empty".into()));
    }
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if c == query {
            continue;
        }
        let d = distance_to_query(c);
        if !d.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite distance between {query} and {c}"
            )));
        }
        scored.push((d, c));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let take = k.min(scored.len());
    let truncated = take < k;
    let (distances, ranked) = scored.into_iter().take(take).unzip();
    Ok(RankedList {
        query,
        ranked,
        distances,
        k,
        truncated,
    })
}

fn hit_mask(list: &RankedList, truth: &GroundTruth) -> Vec<bool> {
    list.ranked
        .iter()
        .map(|&c| truth.contains(list.query, c))
        .collect()
}

pub(crate) fn hr_from_hits(hits: &[bool], k: usize) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / k as f64
}

pub(crate) fn mrr_from_hits(hits: &[bool]) -> f64 {
    hits.iter()
        .position(|&h| h)
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
}

fn dcg_from_hits(hits: &[bool]) -> f64 {
    hits.iter()
        .enumerate()
        .map(|(idx, &h)| {
            if !h {
                0.0
            } else if idx == 0 {
                1.0
            } else {
                // Position i = idx + 1 discounted by log2(i), per the
                // discount starting at position 2.
                1.0 / ((idx + 1) as f64).log2()
            }
        })
        .sum()
}

pub(crate) fn ndcg_from_hits(hits: &[bool]) -> f64 {
    let c = hits.iter().filter(|&&h| h).count();
    if c == 0 {
        return 0.0;
    }
    let ideal: Vec<bool> = (0..hits.len()).map(|i| i < c).collect();
    dcg_from_hits(hits) / dcg_from_hits(&ideal)
}

/// Fraction of the list inside the query's ground-truth set.
pub fn hr_at_k(list: &RankedList, truth: &GroundTruth) -> f64 {
    hr_from_hits(&hit_mask(list, truth), list.k)
}

/// Reciprocal rank of the first relevant item, or 0 without one.
pub fn mrr_at_k(list: &RankedList, truth: &GroundTruth) -> f64 {
    mrr_from_hits(&hit_mask(list, truth))
}

/// DCG against the best permutation of the same list; 0 when the list has
/// no relevant item.
pub fn ndcg_at_k(list: &RankedList, truth: &GroundTruth) -> f64 {
    ndcg_from_hits(&hit_mask(list, truth))
}

/// Per-query scores of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    pub query: usize,
    pub hr: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// Scores across a query set plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub k: usize,
    pub mean_hr: f64,
    pub mean_mrr: f64,
    pub mean_ndcg: f64,
    pub per_query: Vec<QueryScore>,
    pub num_queries: usize,
    /// Queries whose ground-truth set is empty (scored 0, still counted).
    pub num_empty_truth: usize,
}

impl RankingReport {
    /// CSV rows `query,hr,mrr,ndcg` plus a trailing `mean` summary row.
    pub fn write_csv(&self, catalog: &ItemCatalog, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "query,hr,mrr,ndcg")?;
        for q in &self.per_query {
            writeln!(
                w,
                "{},{},{},{}",
                catalog.item_id(q.query),
                q.hr,
                q.mrr,
                q.ndcg
            )?;
        }
        writeln!(
            w,
            "mean,{},{},{}",
            self.mean_hr, self.mean_mrr, self.mean_ndcg
        )?;
        Ok(())
    }
}

/// Rank and score every query against the candidate pool. Queries with
/// empty ground truth score 0 on all three metrics and are counted
/// separately. Evaluation parallelizes over queries; the report keeps
/// query order.
pub fn evaluate(
    distance: impl Fn(usize, usize) -> f64 + Sync,
    queries: &[usize],
    candidates: &[usize],
    truth: &GroundTruth,
    k: usize,
) -> Result<RankingReport> {
    if queries.is_empty() {
        return Err(Error::Config("evaluation needs at least one query".into()));
    }
    let per_query: Vec<QueryScore> = queries
        .par_iter()
        .map(|&q| {
            let list = rank_items(q, candidates, k, |c| distance(q, c))?;
            let hits = hit_mask(&list, truth);
            Ok(QueryScore {
                query: q,
                hr: hr_from_hits(&hits, list.k),
                mrr: mrr_from_hits(&hits),
                ndcg: ndcg_from_hits(&hits),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_query.len() as f64;
    let num_empty_truth = queries
        .iter()
        .filter(|&&q| truth.num_relevant(q) == 0)
        .count();
    Ok(RankingReport {
        k,
        mean_hr: per_query.iter().map(|q| q.hr).sum::<f64>() / n,
        mean_mrr: per_query.iter().map(|q| q.mrr).sum::<f64>() / n,
        mean_ndcg: per_query.iter().map(|q| q.ndcg).sum::<f64>() / n,
        per_query,
        num_queries: queries.len(),
        num_empty_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truth_from_pairs(pairs: &[(usize, usize)]) -> GroundTruth {
        use crate::data::{
            build_ground_truth, GroundTruthScope, Interaction, InteractionLog, ItemCatalog,
        };
        // Encode each pair as a shared-user co-interaction.
        let mut rows = Vec::new();
        let max_item = pairs.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0);
        for i in 0..=max_item {
            rows.push(Interaction {
                user: format!("pad{i}"),
                item: format!("i{i:04}"),
                rating: 1.0,
                timestamp: 1_000_000 + i as i64,
            });
        }
        for (n, &(a, b)) in pairs.iter().enumerate() {
            let user = format!("u{n}");
            rows.push(Interaction {
                user: user.clone(),
                item: format!("i{a:04}"),
                rating: 1.0,
                timestamp: 0,
            });
            rows.push(Interaction {
                user,
                item: format!("i{b:04}"),
                rating: 1.0,
                timestamp: 1,
            });
        }
        rows.sort_by_key(|r| r.item.clone());
        let log = InteractionLog::new(rows);
        let catalog = ItemCatalog::from_log(&log);
        // Item ids sort identically to indices thanks to zero padding.
        build_ground_truth(&log, &catalog, 100, GroundTruthScope::Population).unwrap()
    }

    #[test]
    fn rank_constant_metric_breaks_ties_by_index() {
        let candidates: Vec<usize> = (0..8).collect();
        let list = rank_items(3, &candidates, 4, |_| 0.42).unwrap();
        assert_eq!(list.ranked, vec![0, 1, 2, 4]);
        assert!(!list.truncated);
    }

    #[test]
    fn rank_takes_k_smallest() {
        let candidates: Vec<usize> = (0..5).collect();
        let dist = [0.5, 0.1, 0.4, 0.2, 0.3];
        let list = rank_items(9, &candidates, 3, |c| dist[c]).unwrap();
        assert_eq!(list.ranked, vec![1, 3, 4]);
        assert_eq!(list.distances, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn rank_matches_full_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let candidates: Vec<usize> = (0..1000).collect();
        let dist: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
        let list = rank_items(1000, &candidates, 10, |c| dist[c]).unwrap();
        let mut oracle: Vec<(f64, usize)> = candidates.iter().map(|&c| (dist[c], c)).collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = oracle.iter().take(10).map(|&(_, c)| c).collect();
        assert_eq!(list.ranked, expect);
    }

    #[test]
    fn rank_truncates_with_flag() {
        let candidates = vec![1, 2];
        let list = rank_items(0, &candidates, 5, |c| c as f64).unwrap();
        assert!(list.truncated);
        assert_eq!(list.ranked.len(), 2);
        assert_eq!(list.k, 5);
    }

    #[test]
    fn hr_counts_hits_over_k() {
        assert_eq!(
            hr_from_hits(
                &[true, false, false, true, false, false, false, false, false, false],
                10
            ),
            0.2
        );
        assert_eq!(hr_from_hits(&[false; 10], 10), 0.0);
    }

    #[test]
    fn mrr_first_relevant_position() {
        assert_eq!(mrr_from_hits(&[true, false, false]), 1.0);
        assert_eq!(mrr_from_hits(&[false, false, true]), 1.0 / 3.0);
        assert_eq!(mrr_from_hits(&[false, false, false]), 0.0);
    }

    #[test]
    fn ndcg_paper_discount() {
        // Hits at positions 1 and 2 with 2 total hits is ideal.
        assert_eq!(ndcg_from_hits(&[true, true, false]), 1.0);
        // k = 3, hits at 1 and 3: (1 + 1/log2(3)) / (1 + 1/log2(2)).
        let got = ndcg_from_hits(&[true, false, true]);
        let expect = (1.0 + 1.0 / 3.0f64.log2()) / 2.0;
        assert!((got - expect).abs() < 1e-12);
        assert!((expect - 0.8155).abs() < 1e-4);
        assert_eq!(ndcg_from_hits(&[false, false, false]), 0.0);
    }

    #[test]
    fn list_level_metrics_agree_with_truth() {
        let truth = truth_from_pairs(&[(0, 2), (0, 5)]);
        let list = RankedList {
            query: 0,
            ranked: vec![1, 2, 3, 5],
            distances: vec![0.1, 0.2, 0.3, 0.4],
            k: 4,
            truncated: false,
        };
        assert_eq!(hr_at_k(&list, &truth), 0.5);
        assert_eq!(mrr_at_k(&list, &truth), 0.5);
        let expect = (1.0 / 2.0f64.log2() + 1.0 / 4.0f64.log2()) / (1.0 + 1.0 / 2.0f64.log2());
        assert!((ndcg_at_k(&list, &truth) - expect).abs() < 1e-12);
    }

    #[test]
    fn evaluate_means_and_empty_truth() {
        let truth = truth_from_pairs(&[(0, 1)]);
        let candidates: Vec<usize> = (0..4).collect();
        // Query 0 ranks its true neighbor first (distance by index gap);
        // query 3 has empty truth.
        let report = evaluate(
            |q, c| (q as f64 - c as f64).abs(),
            &[0, 3],
            &candidates,
            &truth,
            2,
        )
        .unwrap();
        assert_eq!(report.num_queries, 2);
        assert_eq!(report.num_empty_truth, 1);
        assert_eq!(report.per_query[0].mrr, 1.0);
        assert_eq!(report.per_query[1].mrr, 0.0);
        assert_eq!(report.mean_mrr, 0.5);
    }

    #[test]
    fn evaluate_matches_brute_force_reimplementation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let n = 30usize;
        let mut pairs = Vec::new();
        for _ in 0..40 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                pairs.push((a, b));
            }
        }
        let truth = truth_from_pairs(&pairs);
        let coords: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let dist = |q: usize, c: usize| (coords[q] - coords[c]).abs();
        let candidates: Vec<usize> = (0..n).collect();
        let queries: Vec<usize> = (0..20).collect();
        let k = 5;
        let report = evaluate(dist, &queries, &candidates, &truth, k).unwrap();

        // Independent reimplementation.
        for (qi, &q) in queries.iter().enumerate() {
            let mut scored: Vec<(f64, usize)> = candidates
                .iter()
                .filter(|&&c| c != q)
                .map(|&c| (dist(q, c), c))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let top: Vec<usize> = scored.iter().take(k).map(|&(_, c)| c).collect();
            let hits: Vec<bool> = top.iter().map(|&c| truth.contains(q, c)).collect();
            let hr = hits.iter().filter(|&&h| h).count() as f64 / k as f64;
            let mrr = hits
                .iter()
                .position(|&h| h)
                .map_or(0.0, |p| 1.0 / (p + 1) as f64);
            let mut dcg = 0.0;
            let mut ideal = 0.0;
            let c_total = hits.iter().filter(|&&h| h).count();
            for (i, &h) in hits.iter().enumerate() {
                let disc = if i == 0 { 1.0 } else { 1.0 / ((i + 1) as f64).log2() };
                if h {
                    dcg += disc;
                }
                if i < c_total {
                    ideal += disc;
                }
            }
            let ndcg = if c_total == 0 { 0.0 } else { dcg / ideal };
            assert_eq!(report.per_query[qi].hr, hr, "query {q} hr");
            assert_eq!(report.per_query[qi].mrr, mrr, "query {q} mrr");
            assert!((report.per_query[qi].ndcg - ndcg).abs() < 1e-12, "query {q} ndcg");
        }
    }

    #[test]
    fn evaluate_invariant_under_candidate_permutation() {
        let truth = truth_from_pairs(&[(0, 3), (1, 2)]);
        let candidates: Vec<usize> = (0..6).collect();
        let mut shuffled = candidates.clone();
        shuffled.reverse();
        let dist = |q: usize, c: usize| ((q * 7 + c * 13) % 11) as f64;
        let a = evaluate(dist, &[0, 1], &candidates, &truth, 3).unwrap();
        let b = evaluate(dist, &[0, 1], &shuffled, &truth, 3).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(hits in proptest::collection::vec(any::<bool>(), 1..20)) {
            let k = hits.len();
            let hr = hr_from_hits(&hits, k);
            let mrr = mrr_from_hits(&hits);
            let ndcg = ndcg_from_hits(&hits);
            prop_assert!((0.0..=1.0).contains(&hr));
            prop_assert!((0.0..=1.0).contains(&mrr));
            prop_assert!((0.0..=1.0).contains(&ndcg));
            // NDCG attains 1 exactly on top-packed lists, except that the
            // log2(i) discount weighs positions 1 and 2 equally, so a lone
            // hit at position 2 also scores 1.
            let c = hits.iter().filter(|&&h| h).count();
            let ideal = (0..k).map(|i| i < c).collect::<Vec<_>>();
            if c > 0 {
                prop_assert!((ndcg_from_hits(&ideal) - 1.0).abs() < 1e-12);
                prop_assert!(ndcg <= 1.0 + 1e-12);
                let pos2_only = c == 1 && k >= 2 && hits[1];
                if hits != ideal && !pos2_only {
                    prop_assert!(ndcg < 1.0);
                }
            }
        }

        #[test]
        fn moving_a_hit_earlier_never_hurts(
            hits in proptest::collection::vec(any::<bool>(), 2..20),
        ) {
            // Swap every (non-hit, hit) adjacent pair one at a time; each
            // promotion must not hurt MRR or NDCG.
            for pos in 1..hits.len() {
                if hits[pos] && !hits[pos - 1] {
                    let mut better = hits.clone();
                    better.swap(pos, pos - 1);
                    prop_assert!(mrr_from_hits(&better) >= mrr_from_hits(&hits));
                    prop_assert!(ndcg_from_hits(&better) >= ndcg_from_hits(&hits));
                }
            }
        }
    }
}
