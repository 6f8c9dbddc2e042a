//! End-to-end runs on the synthetic benchmark: train, evaluate both stages
//! in both directions, sweep ablation axes, and write the CSV artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;

use crate::config::RunConfig;
use crate::data::{generate_split, PairedDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_two_stage, Direction, MetricsReport, Stage};
use crate::model::{text_gallery, video_gallery, Model};
use crate::retrieval::{FinalScores, Gallery, Query};
use crate::training::{train_loop, TrainOutcome};

/// Training and held-out splits for `cfg`. With `test_pairs: 0` the
/// training split doubles as the evaluation set.
pub fn benchmark_data(cfg: &RunConfig) -> Result<(PairedDataset, PairedDataset)> {
    let spec = SyntheticSpec::from_config(cfg);
    let train = generate_split(&spec, Split::Train, cfg.data.pairs)?;
    let test = if cfg.data.test_pairs == 0 {
        train.clone()
    } else {
        generate_split(&spec, Split::Test, cfg.data.test_pairs)?
    };
    Ok((train, test))
}

/// Both galleries and both query sets of an encoded dataset; pair `i` has id `i`.
pub struct EncodedSplit {
    pub ids: Vec<u64>,
    pub video_gallery: Gallery,
    pub text_gallery: Gallery,
    pub text_queries: Vec<Query>,
    pub video_queries: Vec<Query>,
}

pub fn encode_split(model: &Model, ds: &PairedDataset) -> Result<EncodedSplit> {
    let texts = model.encode_texts(&ds.texts)?;
    let videos = model.encode_videos(&ds.videos)?;
    let ids: Vec<u64> = (0..ds.len() as u64).collect();
    Ok(EncodedSplit {
        video_gallery: video_gallery(&videos, &ids)?,
        text_gallery: text_gallery(&texts, &ids)?,
        text_queries: texts.iter().map(Query::from).collect(),
        video_queries: videos.iter().map(Query::from).collect(),
        ids,
    })
}

/// Metrics for both directions and both stages, in the order
/// t2v broad-only, t2v two-stage, v2t broad-only, v2t two-stage.
///
/// Without query indicators there is no focused stage, so the two-stage
/// rows repeat the broad-only rankings.
pub fn evaluate_model(model: &Model, ds: &PairedDataset) -> Result<Vec<MetricsReport>> {
    let enc = encode_split(model, ds)?;
    let k = model.config.model.k;
    let mut out = Vec::with_capacity(4);
    for direction in [Direction::TextToVideo, Direction::VideoToText] {
        let (queries, gallery) = match direction {
            Direction::TextToVideo => (&enc.text_queries, &enc.video_gallery),
            Direction::VideoToText => (&enc.video_queries, &enc.text_gallery),
        };
        let net = model.fusion(direction);
        for stage in [Stage::BroadOnly, Stage::TwoStage] {
            let effective = if model.config.model.use_indicators {
                stage
            } else {
                Stage::BroadOnly
            };
            let mut r = evaluate_two_stage(queries, &enc.ids, gallery, &net, &model.params, k, effective, direction)?;
            r.stage = stage;
            out.push(r);
        }
    }
    Ok(out)
}

/// Look up one report by direction and stage.
pub fn find_report(reports: &[MetricsReport], direction: Direction, stage: Stage) -> Option<&MetricsReport> {
    reports.iter().find(|r| r.direction == direction && r.stage == stage)
}

pub struct RunOutput {
    pub train: TrainOutcome,
    pub metrics: Vec<MetricsReport>,
}

/// Generate the benchmark, train from a fresh model and evaluate on the
/// held-out split.
pub fn train_and_evaluate(cfg: &RunConfig, checkpoint_dir: Option<&Path>) -> Result<RunOutput> {
    let (train, test) = benchmark_data(cfg)?;
    let model = Model::init(cfg)?;
    let outcome = train_loop(&train, model, checkpoint_dir)?;
    let metrics = evaluate_model(&outcome.model, &test)?;
    for r in &metrics {
        info!("{} {}: {}", r.direction, r.stage, r.csv_fields());
    }
    Ok(RunOutput {
        train: outcome,
        metrics,
    })
}

/// Header of the metrics CSV: one row per stage, t2v then v2t columns.
pub fn metrics_csv_header() -> String {
    let cols = |d: &str| {
        MetricsReport::CSV_COLUMNS
            .split(',')
            .map(|c| format!("{d}_{c}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!("stage,{},{}", cols("t2v"), cols("v2t"))
}

fn direction_pair(reports: &[MetricsReport], stage: Stage) -> Result<String> {
    let get = |d| {
        find_report(reports, d, stage)
            .map(MetricsReport::csv_fields)
            .ok_or_else(|| Error::input(format!("no {d} {stage} report")))
    };
    Ok(format!("{},{}", get(Direction::TextToVideo)?, get(Direction::VideoToText)?))
}

pub fn write_metrics_csv<W: Write>(reports: &[MetricsReport], mut w: W) -> Result<()> {
    writeln!(w, "{}", metrics_csv_header())?;
    for stage in [Stage::BroadOnly, Stage::TwoStage] {
        writeln!(w, "{stage},{}", direction_pair(reports, stage)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    write_metrics_csv(reports, BufWriter::new(File::create(path)?))
}

/// Ranked ids of one query with their stage-1 score, delta and final score.
pub fn write_query_csv<W: Write>(result: &FinalScores, gallery: &Gallery, mut w: W) -> Result<()> {
    writeln!(w, "rank,id,stage1,delta,final")?;
    for (r, &i) in result.order.iter().enumerate() {
        writeln!(
            w,
            "{},{},{:.10},{:.10},{:.10}",
            r + 1,
            gallery.entries()[i].id,
            result.stage1[i],
            result.deltas[i],
            result.final_scores[i]
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One ablation axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    /// The four component rows: none, + indicators, + stage-1 scores,
    /// + Gumbel-softmax.
    Components,
    /// One config key over several values.
    Key { key: String, values: Vec<String> },
}

impl Sweep {
    /// Labelled configs, one per row.
    pub fn configs(&self, base: &RunConfig) -> Result<Vec<(String, String, RunConfig)>> {
        match self {
            Sweep::Components => {
                let rows = [
                    ("none", [false, false, false]),
                    ("+indicators", [true, false, false]),
                    ("+stage1_scores", [true, true, false]),
                    ("+gumbel", [true, true, true]),
                ];
                rows.iter()
                    .map(|(label, [ind, s1, gum])| {
                        let mut c = base.clone();
                        c.model.use_indicators = *ind;
                        c.model.add_stage1_scores = *s1;
                        c.model.use_gumbel = *gum;
                        c.validate()?;
                        Ok(("components".to_string(), label.to_string(), c))
                    })
                    .collect()
            }
            Sweep::Key { key, values } => {
                if !RunConfig::is_known_key(key) {
                    return Err(Error::config(format!("unknown key `{key}`")));
                }
                values
                    .iter()
                    .map(|v| {
                        let mut c = base.clone();
                        c.set(key, v)?;
                        Ok((key.clone(), v.clone(), c))
                    })
                    .collect()
            }
        }
    }
}

/// One finished ablation row.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub metrics: Vec<MetricsReport>,
}

/// Train and evaluate every configuration of the sweep, in order.
pub fn run_ablation(base: &RunConfig, sweep: &Sweep) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (axis, value, cfg) in sweep.configs(base)? {
        info!("ablation {axis}={value}");
        let out = train_and_evaluate(&cfg, None)?;
        rows.push(AblationRow {
            axis,
            value,
            metrics: out.metrics,
        });
    }
    Ok(rows)
}

/// One row per configuration: the two-stage metrics in both directions.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    let header = metrics_csv_header();
    let metric_cols = header.strip_prefix("stage,").unwrap_or(&header);
    writeln!(w, "axis,value,{metric_cols}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.axis, r.value, direction_pair(&r.metrics, Stage::TwoStage)?)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("width", "8"),
            ("layers", "1"),
            ("patches", "4"),
            ("frames", "2"),
            ("patch_dim", "4"),
            ("mlp_hidden", "8"),
            ("batch_size", "4"),
            ("cohort_size", "2"),
            ("pairs", "8"),
            ("test_pairs", "6"),
            ("k", "3"),
            ("epochs", "1"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn untrained_model_stages_agree() {
        let cfg = tiny();
        let (_, test) = benchmark_data(&cfg).unwrap();
        let reports = evaluate_model(&Model::init(&cfg).unwrap(), &test).unwrap();
        assert_eq!(reports.len(), 4);
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            let a = find_report(&reports, d, Stage::BroadOnly).unwrap();
            let b = find_report(&reports, d, Stage::TwoStage).unwrap();
            assert_eq!(a.csv_fields(), b.csv_fields());
        }
    }

    #[test]
    fn component_sweep_has_four_rows() {
        let rows = Sweep::Components.configs(&tiny()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(!rows[0].2.model.use_indicators);
        assert!(rows[3].2.model.use_gumbel && rows[3].2.model.add_stage1_scores);
    }

    #[test]
    fn key_sweep_validates() {
        let bad = Sweep::Key {
            key: "indicator_count".into(),
            values: vec!["7".into()],
        };
        assert!(matches!(bad.configs(&tiny()), Err(Error::Config(_))));
        let typo = Sweep::Key {
            key: "kk".into(),
            values: vec!["1".into()],
        };
        assert!(typo.configs(&tiny()).is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let cfg = tiny();
        let (_, test) = benchmark_data(&cfg).unwrap();
        let reports = evaluate_model(&Model::init(&cfg).unwrap(), &test).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("stage,t2v_R@1,t2v_R@5,t2v_R@10,t2v_MdR,t2v_MnR,v2t_R@1"));
        assert!(lines[1].starts_with("broad-only,"));
        assert!(lines[2].starts_with("two-stage,"));
    }
}
