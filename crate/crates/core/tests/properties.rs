use proptest::prelude::*;

use camvos::ensemble::{ensemble_apply, EnsembleModel};
use camvos::eval::{boundary_f, jaccard};
use camvos::io::{FeatureMap, Grid, ImageFrame, LabelMask, ProbMap};
use camvos::matching::{match_global, match_local, InstanceGate};
use camvos::neck::{
    decode_logits, object_context, object_context_attention, soft_aggregate, DecoderWeights, EvidenceStack, OcWeights,
};
use camvos::postproc::{connected_components, crop_refine, temporal_filter};
use camvos::stm::{attention_rows, memory_read, KeyValueMaps, MemoryBank};

fn fmap(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
    FeatureMap::new(c, h, w, 16, data).unwrap()
}

/// Channels, height, width and values in [-2, 2].
fn feature_map(max_c: usize, max_side: usize) -> impl Strategy<Value = FeatureMap> {
    (1..=max_c, 1..=max_side, 1..=max_side).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-2.0f32..2.0, c * h * w).prop_map(move |d| fmap(c, h, w, d))
    })
}

fn mask(min_side: usize, max_side: usize, objects: u8) -> impl Strategy<Value = LabelMask> {
    (min_side..=max_side, min_side..=max_side).prop_flat_map(move |(w, h)| {
        prop::collection::vec(0..=objects, w * h).prop_map(move |ids| LabelMask::new(w, h, ids).unwrap())
    })
}

fn mask_pair(max_side: usize, objects: u8) -> impl Strategy<Value = (LabelMask, LabelMask)> {
    (2..=max_side, 2..=max_side).prop_flat_map(move |(w, h)| {
        let m = move || prop::collection::vec(0..=objects, w * h).prop_map(move |ids| LabelMask::new(w, h, ids).unwrap());
        (m(), m())
    })
}

/// Masks made of a few rectangles so that components are non-trivial.
fn blob_mask(w: usize, h: usize, rects: &[(u8, usize, usize, usize, usize)]) -> LabelMask {
    let mut m = LabelMask::background(w, h);
    for &(id, x, y, rw, rh) in rects {
        for yy in y.min(h - 1)..(y + rw).min(h) {
            for xx in x.min(w - 1)..(x + rh).min(w) {
                m.set(xx, yy, id);
            }
        }
    }
    m
}

fn blobs() -> impl Strategy<Value = (LabelMask, LabelMask, f64)> {
    let rects = || prop::collection::vec((1u8..=3, 0usize..40, 0usize..40, 1usize..10, 1usize..10), 0..8);
    (rects(), rects(), 0.01f64..=1.0).prop_map(|(a, b, tau)| (blob_mask(40, 40, &a), blob_mask(40, 40, &b), tau))
}

fn kv(keys: FeatureMap, values: Vec<f32>, cv: usize) -> KeyValueMaps {
    let (h, w) = (keys.height(), keys.width());
    KeyValueMaps::new(keys, fmap(cv, h, w, values)).unwrap()
}

fn memory_case() -> impl Strategy<Value = (KeyValueMaps, Vec<KeyValueMaps>)> {
    (1usize..=6, 1usize..=5, 1usize..=5, 1usize..=5, 1usize..=3).prop_flat_map(|(ck, cv, h, w, t)| {
        let entry = move |hh: usize, ww: usize| {
            (
                prop::collection::vec(-2.0f32..2.0, ck * hh * ww),
                prop::collection::vec(0.0f32..1.0, cv * hh * ww),
            )
                .prop_map(move |(k, v)| kv(fmap(ck, hh, ww, k), v, cv))
        };
        (entry(h, w), prop::collection::vec(entry(3, 2), t))
    })
}

fn bank_of(entries: &[KeyValueMaps]) -> MemoryBank {
    let mut bank = MemoryBank::new(1).unwrap();
    for (t, e) in entries.iter().enumerate() {
        bank.write(t, e.clone(), 1).unwrap();
    }
    bank
}

fn with_extra_key(maps: &KeyValueMaps, value: f32) -> KeyValueMaps {
    let k = maps.keys();
    let mut data = k.data().to_vec();
    data.extend(std::iter::repeat_n(value, k.cells()));
    KeyValueMaps::new(fmap(k.channels() + 1, k.height(), k.width(), data), maps.values().clone()).unwrap()
}

fn permute(feat: &FeatureMap, perm: &[usize]) -> FeatureMap {
    let n = feat.cells();
    let mut data = vec![0.0; feat.data().len()];
    for c in 0..feat.channels() {
        for p in 0..n {
            data[c * n + perm[p]] = feat.plane(c)[p];
        }
    }
    fmap(feat.channels(), feat.height(), feat.width(), data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn memory_rows_are_distributions((query, entries) in memory_case()) {
        let bank = bank_of(&entries);
        for row in attention_rows(&query, &bank, 1).unwrap() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn readout_is_convex_per_channel((query, entries) in memory_case()) {
        let out = memory_read(&query, &bank_of(&entries), 1).unwrap();
        for c in 0..out.channels() {
            let vals = entries.iter().flat_map(|e| e.values().plane(c).to_vec());
            let (lo, hi) = vals.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            for &v in out.plane(c) {
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn constant_key_shift_keeps_weights((query, entries) in memory_case(), shift in -5.0f32..5.0) {
        // an extra key channel of 1 in the query and `shift` in memory adds the
        // same constant to every dot product of a row
        let q = with_extra_key(&query, 1.0);
        let base: Vec<_> = entries.iter().map(|e| with_extra_key(e, 0.0)).collect();
        let moved: Vec<_> = entries.iter().map(|e| with_extra_key(e, shift)).collect();
        let a = attention_rows(&q, &bank_of(&base), 1).unwrap();
        let b = attention_rows(&q, &bank_of(&moved), 1).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn distances_bounded_and_radius_monotone(
        (q, r) in (1usize..=6, 1usize..=6, 1usize..=6).prop_flat_map(|(c, h, w)| {
            let m = move || prop::collection::vec(-2.0f32..2.0, c * h * w).prop_map(move |d| fmap(c, h, w, d));
            (m(), m())
        }),
        seed in any::<u64>(),
        bias in 0.0f32..1.0,
    ) {
        let (h, w) = (q.height(), q.width());
        let ind = Grid::from_vec(h, w, (0..h * w).map(|i| ((seed >> (i % 64)) & 1) as f32).collect()).unwrap();
        let global = match_global(&q, &r, &ind, bias).unwrap();
        for g in [&global.fg, &global.bg] {
            prop_assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let mut last = match_local(&q, &r, &ind, 0, bias).unwrap();
        for radius in 1..=h.max(w) {
            let next = match_local(&q, &r, &ind, radius, bias).unwrap();
            for (a, b) in [(&last.fg, &next.fg), (&last.bg, &next.bg)] {
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| y <= x));
            }
            last = next;
        }
        prop_assert_eq!(last, global);
    }

    #[test]
    fn object_context_is_permutation_equivariant(
        feat in feature_map(6, 5),
        keys in 1usize..=6,
        seed in any::<u64>(),
        rot in 0usize..25,
    ) {
        let n = feat.cells();
        let perm: Vec<usize> = (0..n).map(|p| (p * 7 + rot) % n).collect();
        let mut seen = vec![false; n];
        perm.iter().for_each(|&p| seen[p] = true);
        prop_assume!(seen.iter().all(|&s| s));
        let w = OcWeights::seeded(feat.channels(), keys, seed, 1.5, 0.5);
        let out = object_context(&feat, &w).unwrap();
        let out_p = object_context(&permute(&feat, &perm), &w).unwrap();
        let expect = permute(&out, &perm);
        for (a, b) in out_p.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
        for row in object_context_attention(&feat, &w).unwrap() {
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn aggregate_simplex_and_shift_argmax(
        objects in 1usize..=3,
        (h, w) in (1usize..=3, 1usize..=3),
        seed in any::<u64>(),
        shift in -10.0f32..10.0,
    ) {
        let mut rng = proptest::test_runner::TestRng::from_seed(
            proptest::test_runner::RngAlgorithm::ChaCha,
            &seed.to_le_bytes().repeat(4),
        );
        let logits: Vec<Grid> = (0..objects)
            .map(|_| Grid::from_vec(h, w, (0..h * w).map(|_| rng.random_range(-6.0f32..6.0)).collect()).unwrap())
            .collect();
        let ids: Vec<u8> = (1..=objects as u8).collect();
        let (fh, fw) = (16 * h, 16 * w);
        let prob = soft_aggregate(&logits, &ids, fh, fw).unwrap();
        for p in 0..fh * fw {
            let s: f32 = (0..=objects).map(|k| prob.get(k, p / fw, p % fw)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }
        // shifting background and objects alike is the same as shifting
        // objects by zero once the background is moved back to its fixed 0
        let shifted: Vec<Grid> = logits
            .iter()
            .map(|g| Grid::from_vec(h, w, g.data().iter().map(|v| (v + shift) - shift).collect()).unwrap())
            .collect();
        let moved = soft_aggregate(&shifted, &ids, fh, fw).unwrap();
        let (a, b) = (prob.argmax(), moved.argmax());
        for p in 0..fh * fw {
            let (x, y) = (p % fw, p / fw);
            let mut sorted: Vec<f32> = (0..=objects).map(|k| prob.get(k, y, x)).collect();
            sorted.sort_by(|p, q| q.total_cmp(p));
            if sorted.len() < 2 || sorted[0] - sorted[1] > 1e-4 {
                prop_assert_eq!(a.get(x, y), b.get(x, y));
            }
        }
    }

    #[test]
    fn lower_global_fg_distance_never_lowers_logit(
        h in 1usize..=4,
        w in 1usize..=4,
        vals in prop::collection::vec(0.0f32..1.0, 96),
        drop in 0.0f32..1.0,
        weights in prop::array::uniform8(-3.0f32..3.0),
    ) {
        let mut weights = DecoderWeights::from_array(weights);
        weights.fg_global = weights.fg_global.abs() + 0.01;
        let n = h * w;
        let g = |i: usize| Grid::from_vec(h, w, (0..n).map(|p| vals[(i * n + p) % vals.len()]).collect()).unwrap();
        let neck = fmap(2, h, w, (0..2 * n).map(|p| vals[p % vals.len()] - 0.5).collect());
        let mut stack = EvidenceStack::neutral(neck);
        stack.stm = g(0);
        stack.fg_global = g(1);
        stack.bg_global = g(2);
        stack.fg_local = g(3);
        stack.bg_local = g(4);
        stack.prev = g(5);
        let gate = InstanceGate::identity(2);
        let readout = [0.6, 0.8];
        let before = decode_logits(&stack, &gate, &weights, &readout).unwrap();
        stack.fg_global.data_mut().iter_mut().for_each(|v| *v *= 1.0 - drop);
        let after = decode_logits(&stack, &gate, &weights, &readout).unwrap();
        prop_assert!(after.data().iter().zip(before.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn ensemble_simplex_and_model_order(
        models in 1usize..=4,
        (h, w) in (1usize..=3, 1usize..=3),
        raw in prop::collection::vec(0.001f32..1.0, 4 * 3 * 9),
        weights in prop::collection::vec(-2.0f64..2.0, 4),
        bias in -1.0f64..1.0,
        rot in 0usize..4,
    ) {
        let ids = vec![1u8, 2];
        let n = h * w;
        let maps: Vec<ProbMap> = (0..models)
            .map(|m| ProbMap::from_unnormalized(h, w, ids.clone(), raw[m * 27..m * 27 + 3 * n].to_vec()).unwrap())
            .collect();
        let model = EnsembleModel::with_weights(weights[..models].to_vec(), bias);
        let out = ensemble_apply(&maps, &model).unwrap();
        for p in 0..n {
            let s: f32 = (0..3).map(|k| out.get(k, p / w, p % w)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }
        let order: Vec<usize> = (0..models).map(|i| (i + rot) % models).collect();
        let maps_p: Vec<ProbMap> = order.iter().map(|&i| maps[i].clone()).collect();
        let model_p = EnsembleModel::with_weights(order.iter().map(|&i| model.weights[i]).collect(), bias);
        prop_assert_eq!(ensemble_apply(&maps_p, &model_p).unwrap(), out);
    }

    #[test]
    fn temporal_filter_contract((prev, cur, tau) in blobs()) {
        let once = temporal_filter(&cur, &prev, tau).unwrap();
        prop_assert_eq!(&temporal_filter(&once, &prev, tau).unwrap(), &once);
        for (o, c) in once.ids().iter().zip(cur.ids()) {
            prop_assert!(o == c || *o == 0);
        }
        for id in cur.object_ids() {
            prop_assert!(!connected_components(&once, id).is_empty());
        }
    }

    #[test]
    fn crop_refine_closed_gate_is_identity(m in mask(8, 14, 2), alpha in 0.001f64..0.5) {
        let (w, h) = (m.width(), m.height());
        prop_assume!(m.object_ids().len() == 2);
        let prob = ProbMap::from_mask(&m, &[1, 2]);
        let frame = ImageFrame::filled(w, h, [10, 20, 30]).unwrap();
        let mut calls = 0;
        let mut cb = |req: &camvos::postproc::CropRequest| {
            calls += 1;
            let (cw, ch) = (req.frame.width(), req.frame.height());
            Ok(Some(ProbMap::new(ch, cw, vec![req.object], vec![0.5; 2 * cw * ch]).unwrap()))
        };
        let out = crop_refine(&frame, &prob, 1, alpha, 0.5, &mut cb).unwrap();
        if m.area(1) as f64 >= alpha * (w * h) as f64 {
            prop_assert_eq!(calls, 0);
            prop_assert_eq!(out, prob);
        } else {
            // object 2 keeps its share relative to the background everywhere
            for y in 0..h {
                for x in 0..w {
                    let (b0, o0) = (prob.get(0, y, x), prob.get(2, y, x));
                    let (b1, o1) = (out.get(0, y, x), out.get(2, y, x));
                    prop_assert!((b0 * o1 - b1 * o0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn region_and_boundary_symmetric((a, b) in mask_pair(10, 2), tol in 0.0f64..0.5) {
        for id in [1u8, 2] {
            prop_assert_eq!(jaccard(&a, &b, id).unwrap(), jaccard(&b, &a, id).unwrap());
            prop_assert_eq!(boundary_f(&a, &b, id, tol).unwrap(), boundary_f(&b, &a, id, tol).unwrap());
        }
    }

    #[test]
    fn full_jaccard_iff_same_pixels((a, b) in mask_pair(8, 1)) {
        prop_assume!(a.area(1) > 0 || b.area(1) > 0);
        let same = a.ids().iter().zip(b.ids()).all(|(x, y)| (*x == 1) == (*y == 1));
        prop_assert_eq!(jaccard(&a, &b, 1).unwrap() == 1.0, same);
    }

    #[test]
    fn boundary_f_monotone_in_tolerance((a, b) in mask_pair(10, 1), t1 in 0.0f64..0.6, t2 in 0.0f64..0.6) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(boundary_f(&a, &b, 1, lo).unwrap() <= boundary_f(&a, &b, 1, hi).unwrap());
    }
}
