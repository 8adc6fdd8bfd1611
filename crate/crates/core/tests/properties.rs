use proptest::prelude::*;

use scenecap::metrics::{aabb_iou, bleu4, m_at_k_iou, meteor_lite, rouge_l};
use scenecap::pointcloud::{
    decode_binary, decode_json, encode_binary, encode_json, farthest_point_sample_from, knn_group, Aabb, PointCloud,
};
use scenecap::text::words;
use scenecap::tts::{four_gram_overlap, mock_reward, retrieve_summary, select_best, DescriptorBank, JudgeVerdict};

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
    (3usize..40, 0usize..3).prop_flat_map(|(n, f)| {
        (
            prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), n),
            prop::collection::vec(-1.0f64..1.0, n * f),
        )
            .prop_map(move |(c, feats)| PointCloud::new(c, feats, f).unwrap())
    })
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-3).then(|| v.iter().map(|x| x / n).collect())
}

proptest! {
    #[test]
    fn fps_matches_greedy_oracle(cloud in cloud_strategy(), m_frac in 0.0f64..1.0, first_frac in 0.0f64..1.0) {
        let n = cloud.n_points();
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let first = ((n - 1) as f64 * first_frac) as usize;
        let got = farthest_point_sample_from(&cloud, m, first).unwrap();
        prop_assert_eq!(got.len(), m);
        prop_assert_eq!(got[0], first);
        let pts = cloud.coords();
        for step in 1..m {
            let chosen = &got[..step];
            let min_d = |i: usize| chosen.iter().map(|&c| dist2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
            let best = (0..n).filter(|i| !chosen.contains(i)).map(min_d).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(!chosen.contains(&got[step]));
            prop_assert_eq!(min_d(got[step]), best);
        }
    }

    #[test]
    fn knn_groups_are_nearest(cloud in cloud_strategy(), k_frac in 0.0f64..1.0) {
        let n = cloud.n_points();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let centers: Vec<usize> = (0..n).step_by(3).collect();
        let ps = knn_group(&cloud, &centers, k).unwrap();
        let pts = cloud.coords();
        for (p, &c) in centers.iter().enumerate() {
            let group = &ps.neighbor_indices[p * k..(p + 1) * k];
            prop_assert_eq!(group[0], c);
            let worst_in = group.iter().map(|&i| dist2(&pts[i], &pts[c])).fold(0.0, f64::max);
            let best_out = (0..n).filter(|i| !group.contains(i)).map(|i| dist2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
            prop_assert!(worst_in <= best_out);
            let patch = ps.patch(p);
            prop_assert!(patch[..3].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn scene_codecs_round_trip(cloud in cloud_strategy()) {
        prop_assert_eq!(decode_json(&encode_json(&cloud)).unwrap(), cloud.clone());
        // Binary rows are f32: values come back rounded, and a second pass is exact.
        let once = decode_binary(&encode_binary(&cloud)).unwrap();
        for (a, b) in once.coords().iter().zip(cloud.coords()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert_eq!(*x, *y as f32 as f64);
            }
        }
        for i in 0..cloud.n_points() {
            let want: Vec<f64> = cloud.features(i).iter().map(|v| *v as f32 as f64).collect();
            prop_assert_eq!(once.features(i), &want[..]);
        }
        prop_assert_eq!(decode_binary(&encode_binary(&once)).unwrap(), once);
    }

    #[test]
    fn retrieval_matches_exhaustive_sort(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..20),
        q in prop::collection::vec(-1.0f64..1.0, 4),
        k in 1usize..25,
    ) {
        let embs: Vec<Vec<f64>> = raw.into_iter().filter_map(unit).collect();
        prop_assume!(!embs.is_empty());
        let q = match unit(q) { Some(q) => q, None => return Ok(()) };
        let names: Vec<String> = (0..embs.len()).map(|i| format!("thing {i}")).collect();
        let bank = DescriptorBank::new(names.clone(), embs.clone()).unwrap();
        let s = retrieve_summary(&q, &bank, k).unwrap();
        let mut order: Vec<(f64, usize)> = embs.iter().enumerate()
            .map(|(i, e)| (e.iter().zip(&q).map(|(a, b)| a * b).sum(), i)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<String> = order.iter().take(k).map(|&(_, i)| names[i].clone()).collect();
        prop_assert_eq!(&s.descriptors, &want);
        prop_assert_eq!(s.rendered, want.join(", "));
    }

    #[test]
    fn text_metrics_are_bounded(c in "[a-e ]{0,30}", r1 in "[a-e ]{1,30}", r2 in "[a-e ]{1,30}") {
        let (c, refs) = (words(&c), vec![words(&r1), words(&r2)]);
        for v in [bleu4(&c, &refs), rouge_l(&c, &refs), meteor_lite(&c, &refs)] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        if !refs[0].is_empty() {
            prop_assert_eq!(rouge_l(&refs[0], &refs), 1.0);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::array::uniform6(0.1f64..3.0), b in prop::array::uniform6(0.1f64..3.0)) {
        let ba = Aabb::new([a[0], a[1], a[2]], [a[3], a[4], a[5]]).unwrap();
        let bb = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]).unwrap();
        let x = aabb_iou(&ba, &bb).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, aabb_iou(&bb, &ba).unwrap());
        prop_assert!((aabb_iou(&ba, &ba).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn m_at_k_is_non_increasing(pairs in prop::collection::vec((0.0f64..2.0, 0.0f64..1.0), 1..30)) {
        let (scores, ious): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let v = m_at_k_iou(&scores, &ious, step as f64 / 10.0);
            prop_assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn selection_is_argmax(rewards in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..12)) {
        let verdicts: Vec<JudgeVerdict> = rewards.iter().enumerate().map(|(i, r)| match r {
            Some(r) => JudgeVerdict::ok(i, *r, 0.0, String::new()),
            None => JudgeVerdict::failed(i, 0.0, "down".into()),
        }).collect();
        let best = select_best(&verdicts);
        let max = rewards.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        match best {
            None => prop_assert!(rewards.iter().all(Option::is_none)),
            Some(i) => {
                prop_assert_eq!(rewards[i], Some(max));
                prop_assert!(rewards[..i].iter().all(|r| *r != Some(max)));
            }
        }
    }

    #[test]
    fn overlap_and_mock_reward_bounds(a in prop::collection::vec(0usize..5, 0..12), b in prop::collection::vec(0usize..5, 0..12), cand in "[a-z ]{0,30}") {
        let o = four_gram_overlap(&a, &b);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(o, four_gram_overlap(&b, &a));
        prop_assert_eq!(four_gram_overlap(&a, &a), 1.0);
        let vocab = ["red", "chair", "lamp"].iter().map(|s| s.to_string()).collect();
        let r = mock_reward(&vocab, &cand);
        prop_assert!((0.0..=1.0).contains(&r));
    }
}
