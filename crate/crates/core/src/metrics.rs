//! Recall@k, median rank and mean rank.

use std::fmt;

use crate::error::{Error, Result};
use crate::numeric::ParameterSet;
use crate::retrieval::{rank_broad, rank_full, FinalScores, FusionNetwork, Gallery, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TextToVideo => "t2v",
            Direction::VideoToText => "v2t",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    BroadOnly,
    TwoStage,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::BroadOnly => "broad-only",
            Stage::TwoStage => "two-stage",
        })
    }
}

/// 1-based rank of the true item for every query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankMatrix {
    pub ranks: Vec<usize>,
}

/// `rank = 1 + (entries ahead of the true item)`, per query.
pub fn compute_ranks(results: &[FinalScores], truth: &[u64], gallery: &Gallery) -> Result<RankMatrix> {
    if results.len() != truth.len() {
        return Err(Error::input(format!(
            "{} results for {} truth ids",
            results.len(),
            truth.len()
        )));
    }
    let ranks = results
        .iter()
        .zip(truth)
        .map(|(r, &id)| {
            let pos = gallery
                .position_of(id)
                .ok_or_else(|| Error::input(format!("truth id {id} is not in the gallery")))?;
            r.rank_of(pos)
                .ok_or_else(|| Error::input(format!("gallery entry {pos} missing from ranking")))
        })
        .collect::<Result<_>>()?;
    Ok(RankMatrix { ranks })
}

/// One row of retrieval metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub direction: Direction,
    pub stage: Stage,
}

impl MetricsReport {
    pub const CSV_COLUMNS: &'static str = "R@1,R@5,R@10,MdR,MnR";

    /// `R@1,R@5,R@10,MdR,MnR` with fixed precision.
    pub fn csv_fields(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.r1, self.r5, self.r10, self.median_rank, self.mean_rank
        )
    }
}

/// Recall percentages, midpoint median and arithmetic mean of the ranks.
pub fn summarize(ranks: &RankMatrix, direction: Direction, stage: Stage) -> Result<MetricsReport> {
    let q = ranks.ranks.len();
    if q == 0 {
        return Err(Error::input("no queries to summarise"));
    }
    let recall = |k: usize| 100.0 * ranks.ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64;
    let mut sorted = ranks.ranks.clone();
    sorted.sort_unstable();
    let median_rank = if q % 2 == 1 {
        sorted[q / 2] as f64
    } else {
        (sorted[q / 2 - 1] + sorted[q / 2]) as f64 / 2.0
    };
    let mean_rank = sorted.iter().sum::<usize>() as f64 / q as f64;
    Ok(MetricsReport {
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        median_rank,
        mean_rank,
        direction,
        stage,
    })
}

/// Rank every query against `gallery` by stage 1 alone or through the full
/// two-stage pipeline.
pub fn rank_queries(
    queries: &[Query],
    gallery: &Gallery,
    net: &FusionNetwork,
    params: &ParameterSet,
    k: usize,
    stage: Stage,
) -> Result<Vec<FinalScores>> {
    queries
        .iter()
        .map(|q| match stage {
            Stage::BroadOnly => rank_broad(&q.global, gallery),
            Stage::TwoStage => rank_full(q, gallery, net, params, k),
        })
        .collect()
}

/// Rank, locate the true ids and summarise.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_two_stage(
    queries: &[Query],
    truth: &[u64],
    gallery: &Gallery,
    net: &FusionNetwork,
    params: &ParameterSet,
    k: usize,
    stage: Stage,
    direction: Direction,
) -> Result<MetricsReport> {
    let results = rank_queries(queries, gallery, net, params, k, stage)?;
    let ranks = compute_ranks(&results, truth, gallery)?;
    summarize(&ranks, direction, stage)
}
