use tokenbinder_core::data::{read_dataset, read_gallery, write_dataset, write_gallery};
use tokenbinder_core::experiment::{benchmark_data, encode_split, train_and_evaluate};
use tokenbinder_core::metrics::{Direction, Stage};
use tokenbinder_core::model::Model;
use tokenbinder_core::retrieval::{rank_broad, rank_full};
use tokenbinder_core::{Error, RunConfig};

fn tiny() -> RunConfig {
    RunConfig::parse(
        "width: 16\nlayers: 1\npatches: 4\nframes: 2\npatch_dim: 8\nmlp_hidden: 16\n\
         batch_size: 8\ncohort_size: 2\npairs: 24\ntest_pairs: 12\nepochs: 2\nk: 4\n\
         lr_base: 1e-3\nlr_fusion: 3e-3\ntemperature: 0.05\n",
    )
    .unwrap()
}

#[test]
fn train_evaluate_reports_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_and_evaluate(&tiny(), Some(dir.path())).unwrap();
    assert_eq!(out.train.checkpoints.len(), 2);
    assert!(out.train.log.iter().all(|r| r.losses.is_finite()));
    assert_eq!(out.metrics.len(), 4);
    let order: Vec<_> = out.metrics.iter().map(|r| (r.direction, r.stage)).collect();
    assert_eq!(
        order,
        vec![
            (Direction::TextToVideo, Stage::BroadOnly),
            (Direction::TextToVideo, Stage::TwoStage),
            (Direction::VideoToText, Stage::BroadOnly),
            (Direction::VideoToText, Stage::TwoStage),
        ]
    );
    for r in &out.metrics {
        assert!(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 100.0);
        assert!((1.0..=12.0).contains(&r.median_rank));
    }
}

#[test]
fn checkpoint_reload_reproduces_rankings() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let out = train_and_evaluate(&cfg, Some(dir.path())).unwrap();
    let reloaded = Model::from_checkpoint(&cfg, out.train.checkpoints.last().unwrap()).unwrap();
    let (_, test) = benchmark_data(&cfg).unwrap();
    let a = encode_split(&out.train.model, &test).unwrap();
    let b = encode_split(&reloaded, &test).unwrap();
    let net = out.train.model.fusion(Direction::TextToVideo);
    for (qa, qb) in a.text_queries.iter().zip(&b.text_queries) {
        let ra = rank_full(qa, &a.video_gallery, &net, &out.train.model.params, 4).unwrap();
        let rb = rank_full(qb, &b.video_gallery, &net, &reloaded.params, 4).unwrap();
        assert!(ra.bit_eq(&rb));
    }
}

#[test]
fn checkpoint_for_another_config_is_rejected() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Model::init(&cfg).unwrap().save_checkpoint(&path).unwrap();
    let mut other = cfg.clone();
    other.model.width = 8;
    assert!(matches!(Model::from_checkpoint(&other, &path), Err(Error::Input(_))));
}

#[test]
fn dataset_and_gallery_files_roundtrip() {
    let cfg = tiny();
    let (train, _) = benchmark_data(&cfg).unwrap();
    let mut buf = Vec::new();
    write_dataset(&train, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(back.groups, train.groups);
    assert_eq!(back.texts, train.texts);

    let model = Model::init(&cfg).unwrap();
    let enc = encode_split(&model, &train).unwrap();
    let mut buf = Vec::new();
    write_gallery(&enc.video_gallery, &mut buf).unwrap();
    let g = read_gallery(buf.as_slice()).unwrap();
    assert_eq!(g, enc.video_gallery);
    let q = &enc.text_queries[0];
    assert_eq!(rank_broad(&q.global, &g).unwrap(), rank_broad(&q.global, &enc.video_gallery).unwrap());
}

#[test]
fn corrupted_gallery_headers_are_rejected() {
    let cfg = tiny();
    let model = Model::init(&cfg).unwrap();
    let (train, _) = benchmark_data(&cfg).unwrap();
    let enc = encode_split(&model, &train).unwrap();
    let mut buf = Vec::new();
    write_gallery(&enc.text_gallery, &mut buf).unwrap();
    for i in 0..33 {
        let mut bad = buf.clone();
        bad[i] ^= 0x01;
        assert!(read_gallery(bad.as_slice()).is_err(), "flip in header byte {i} accepted");
    }
    assert!(read_gallery(&buf[..buf.len() - 1]).is_err());
}

#[test]
fn cohorts_share_a_theme_and_differ_in_one_word() {
    let cfg = tiny();
    let (train, _) = benchmark_data(&cfg).unwrap();
    for cohort in train.cohorts() {
        assert_eq!(cohort.len(), 2);
        let a = &train.texts[cohort[0]].tokens;
        let b = &train.texts[cohort[1]].tokens;
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
    }
}
