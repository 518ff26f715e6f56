use ctg_core::eval::{example_metrics, iou, split_label, SplitLabel};
use ctg_core::video_repr::{enumerate_segments, Segment};
use ctg_core::{ExperimentConfig, SegmentationMode};
use proptest::prelude::*;

fn ranking_and_annotations() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (1usize..9).prop_flat_map(|t| {
        let n = t * (t + 1) / 2;
        (
            Just(t),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::vec(0..n, 1..6),
        )
    })
}

proptest! {
    #[test]
    fn hit_at_one_implies_hit_at_five((t, order, anns) in ranking_and_annotations()) {
        let segs = enumerate_segments(t).unwrap();
        let ranking: Vec<Segment> = order.iter().map(|&i| segs[i]).collect();
        let annotations: Vec<Segment> = anns.iter().map(|&i| segs[i]).collect();
        let r = example_metrics(&ranking, &annotations).unwrap();
        prop_assert!(!r.hit1 || r.hit5);
        prop_assert!(r.rank_score >= 1.0);
        prop_assert!((0.0..=1.0).contains(&r.iou));
    }

    #[test]
    fn agreed_segment_promoted_to_the_top_scores_perfectly((t, order, anns) in ranking_and_annotations(), pick in 0usize..6) {
        let segs = enumerate_segments(t).unwrap();
        let ranking: Vec<Segment> = order.iter().map(|&i| segs[i]).collect();
        let target = segs[anns[pick % anns.len()]];
        let annotations = vec![target; anns.len()];
        let mut promoted = ranking.clone();
        let pos = promoted.iter().position(|s| *s == target).unwrap();
        let seg = promoted.remove(pos);
        promoted.insert(0, seg);
        let before = example_metrics(&ranking, &annotations).unwrap();
        let after = example_metrics(&promoted, &annotations).unwrap();
        prop_assert!(after.rank_score <= before.rank_score);
        prop_assert_eq!(after.rank_score, 1.0);
        prop_assert!(after.hit1 && after.hit5);
        prop_assert_eq!(after.iou, 1.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0usize..20, 0usize..20), b in (0usize..20, 0usize..20)) {
        let sa = Segment::new(a.0.min(a.1), a.0.max(a.1));
        let sb = Segment::new(b.0.min(b.1), b.0.max(b.1));
        let x = iou(sa, sb);
        prop_assert_eq!(x, iou(sb, sa));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(sa, sa), 1.0);
    }

    #[test]
    fn canonical_index_is_the_enumeration_position(t in 1usize..40) {
        for (i, s) in enumerate_segments(t).unwrap().iter().enumerate() {
            prop_assert_eq!(s.canonical_index(t), i);
        }
    }

    #[test]
    fn config_round_trips(
        dims in prop::collection::vec(1usize..300, 9),
        attention in any::<bool>(),
        flags in prop::array::uniform4(any::<bool>()),
        lr in 1e-4f64..1.0,
        lambda in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let cfg = ExperimentConfig {
            word_dim: dims[0],
            feature_dim: dims[1],
            embed_dim: dims[2],
            pos_dim: dims[3],
            phi_hidden: dims[4],
            video_dim: dims[5],
            video_hidden: dims[6],
            attention_hidden: dims[7],
            num_heads: dims[8] % 6 + 1,
            mode: if attention { SegmentationMode::Attention } else { SegmentationMode::Parser },
            use_masks: flags[0],
            use_refinement: flags[1],
            use_position: flags[2],
            use_weights: flags[3],
            learning_rate: lr,
            fusion_lambda: lambda,
            seed,
            train_path: Some("train.jsonl".into()),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn split_label_follows_priority(words in prop::collection::vec(prop::sample::select(vec!["the", "dog", "before", "after", "then", "while", "runs"]), 0..8)) {
        let tokens: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let label = split_label(&tokens);
        let has = |w: &str| words.contains(&w);
        let expected = if has("before") {
            SplitLabel::Before
        } else if has("after") {
            SplitLabel::After
        } else if has("then") {
            SplitLabel::Then
        } else if has("while") {
            SplitLabel::While
        } else {
            SplitLabel::Base
        };
        prop_assert_eq!(label, expected);
    }
}
