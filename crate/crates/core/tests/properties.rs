use proptest::prelude::*;

use tokenbinder_core::encoders::temporal_mean_pool;
use tokenbinder_core::metrics::{summarize, Direction, RankMatrix, Stage};
use tokenbinder_core::numeric::{gumbel_softmax, softmax, Activation};
use tokenbinder_core::retrieval::{
    broad_view_scores, rank_broad, rank_full, stage1_order, FusionNetwork, Gallery, GalleryEntry, Query, Side,
};
use tokenbinder_core::training::{contrastive_loss, focused_ce_loss, training_candidates};
use tokenbinder_core::{DenseArray, ParameterSet, RngStream, RunConfig};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn gallery(n: usize, c: usize, seed: u64) -> Gallery {
    let s = RngStream::new(seed);
    let entries = (0..n)
        .map(|i| GalleryEntry {
            id: 10 * i as u64 + 1,
            global: unit(s.fork(i as u64).normals(c)),
            locals: DenseArray::matrix(2, c, s.fork(500 + i as u64).normals(2 * c)).unwrap(),
        })
        .collect();
    Gallery::new(Side::Video, entries).unwrap()
}

fn trained_net(k: usize, c: usize, seed: u64) -> (FusionNetwork, ParameterSet) {
    let net = FusionNetwork {
        prefix: "f".into(),
        width: c,
        focus_count: 2,
        k,
        blocks: 1,
        hidden: 5,
        activation: Activation::Silu,
        gumbel_temp: 1.0,
        add_stage1_scores: true,
    };
    let mut p = net.init_params(RngStream::new(seed)).unwrap();
    for (i, (_, v)) in p.iter_mut().enumerate() {
        let z = RngStream::new(seed).fork(i as u64).normals(v.value.len());
        for (w, x) in v.value.data_mut().iter_mut().zip(z) {
            *w += 0.3 * x;
        }
    }
    (net, p)
}

fn rows(flat: &[f64], c: usize) -> DenseArray {
    let vs: Vec<Vec<f64>> = flat.chunks(c).map(|r| unit(r.to_vec())).collect();
    DenseArray::from_rows(&vs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-30.0f64..30.0, 1..12), temp in 0.05f64..5.0) {
        let p = softmax(&x, temp);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shift = 7.5;
        let q = softmax(&x.iter().map(|v| v + shift).collect::<Vec<_>>(), temp);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_softmax_is_a_distribution(x in prop::collection::vec(-5.0f64..5.0, 1..8), seed in any::<u64>()) {
        let y = gumbel_softmax(&x, 0.7, RngStream::new(seed), false).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn temporal_pool_ignores_frame_order(frames in 1usize..5, patches in 1usize..5, seed in any::<u64>()) {
        let c = 3;
        let s = RngStream::new(seed);
        let x = DenseArray::matrix(frames * patches, c, s.normals(frames * patches * c)).unwrap();
        let perm = s.fork(1).permutation(frames);
        let mut shuffled = Vec::new();
        for &f in &perm {
            for p in 0..patches {
                shuffled.extend_from_slice(x.row(f * patches + p));
            }
        }
        let y = DenseArray::matrix(frames * patches, c, shuffled).unwrap();
        let a = temporal_mean_pool(&x, frames).unwrap();
        let b = temporal_mean_pool(&y, frames).unwrap();
        prop_assert_eq!(a.shape(), &[patches, c][..]);
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_loss_is_invariant_to_pair_order(b in 2usize..7, seed in any::<u64>()) {
        let c = 4;
        let s = RngStream::new(seed);
        let t = rows(&s.fork(1).normals(b * c), c);
        let v = rows(&s.fork(2).normals(b * c), c);
        let perm = s.fork(3).permutation(b);
        let pick = |m: &DenseArray| DenseArray::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            let l1 = contrastive_loss(&t, &v, 0.1, d).unwrap();
            let l2 = contrastive_loss(&pick(&t), &pick(&v), 0.1, d).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-10);
            prop_assert!(l1 >= 0.0);
        }
    }

    #[test]
    fn focused_ce_is_shift_invariant(x in prop::collection::vec(-10.0f64..10.0, 1..10), shift in -50.0f64..50.0, pos in 0usize..10) {
        let pos = pos % x.len();
        let a = focused_ce_loss(&x, pos).unwrap();
        let b = focused_ce_loss(&x.iter().map(|v| v + shift).collect::<Vec<_>>(), pos).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn training_candidates_contain_truth(scores in prop::collection::vec(-1.0f64..1.0, 2..20), truth in 0usize..20, k in 1usize..20) {
        let truth = truth % scores.len();
        let k = 1 + (k - 1) % scores.len();
        let (cands, pos) = training_candidates(&scores, truth, k).unwrap();
        prop_assert_eq!(cands.len(), k);
        prop_assert_eq!(cands[pos], truth);
        let mut sorted = cands.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn rerank_only_permutes_the_candidate_block(n in 1usize..30, k in 1usize..12, seed in any::<u64>()) {
        let c = 6;
        let g = gallery(n, c, seed);
        let (net, p) = trained_net(k, c, seed ^ 1);
        let s = RngStream::new(seed).fork(9);
        let q = Query {
            global: unit(s.fork(1).normals(c)),
            focus: DenseArray::matrix(2, c, s.fork(2).normals(2 * c)).unwrap(),
        };
        let full = rank_full(&q, &g, &net, &p, k).unwrap();
        let broad = rank_broad(&q.global, &g).unwrap();
        let kk = k.min(n);
        let mut head: Vec<usize> = full.order[..kk].to_vec();
        let mut top: Vec<usize> = broad.order[..kk].to_vec();
        head.sort_unstable();
        top.sort_unstable();
        prop_assert_eq!(head, top);
        prop_assert_eq!(&full.order[kk..], &broad.order[kk..]);
        for i in 0..n {
            if !broad.order[..kk].contains(&i) {
                prop_assert_eq!(full.deltas[i], 0.0);
            }
        }
    }

    #[test]
    fn stage1_order_is_invariant_to_monotone_maps(scores in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        let mapped: Vec<f64> = scores.iter().map(|x| (3.0 * x).exp() + 2.0).collect();
        prop_assert_eq!(stage1_order(&scores), stage1_order(&mapped));
    }

    #[test]
    fn metrics_ignore_query_order(ranks in prop::collection::vec(1usize..50, 1..80), seed in any::<u64>()) {
        let perm = RngStream::new(seed).permutation(ranks.len());
        let shuffled: Vec<usize> = perm.iter().map(|&i| ranks[i]).collect();
        let a = summarize(&RankMatrix { ranks: ranks.clone() }, Direction::TextToVideo, Stage::BroadOnly).unwrap();
        let b = summarize(&RankMatrix { ranks: shuffled }, Direction::TextToVideo, Stage::BroadOnly).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.r1 <= a.r5 && a.r5 <= a.r10);
        prop_assert!(a.median_rank >= 1.0 && a.mean_rank >= 1.0);
    }

    #[test]
    fn broad_scores_are_cosines(n in 1usize..20, seed in any::<u64>()) {
        let g = gallery(n, 5, seed);
        let q = unit(RngStream::new(seed).fork(77).normals(5));
        let s = broad_view_scores(&q, &g).unwrap();
        prop_assert!(s.scores.iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
    }

    #[test]
    fn config_text_roundtrips(seed in any::<u64>(), k in 1usize..20, tau in 0.001f64..1.0) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.k = k;
        cfg.train.temperature = tau;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
