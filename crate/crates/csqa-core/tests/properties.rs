//! Property tests for the cross-module invariants.

use csqa_core::navigator::{nms_top_n, BoxF};
use csqa_core::qp::{quality_factor, raw_quality_factor, region};
use csqa_core::tensor::Graph;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_slices_are_probability_vectors(
        rows in 1usize..6,
        cols in 1usize..9,
        values in prop::collection::vec(-1e4f64..1e4, 1..48),
        axis_on_rows in any::<bool>(),
    ) {
        let numel = rows * cols;
        let data: Vec<f64> = (0..numel).map(|i| values[i % values.len()]).collect();
        let mut g = Graph::new();
        let t = g.leaf(data, &[rows, cols]).unwrap();
        let axis = if axis_on_rows { 0 } else { 1 };
        let y = g.softmax(t, axis).unwrap();
        let d = g.data(y);
        let (outer, len, inner) = if axis == 0 { (1, rows, cols) } else { (rows, cols, 1) };
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = 0.0;
                for a in 0..len {
                    let v = d[(o * len + a) * inner + i];
                    prop_assert!((0.0..=1.0).contains(&v));
                    sum += v;
                }
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quality_factor_region_partition_and_bounds(
        p in 0.001f64..1.0,
        q in 0.001f64..1.0,
        eps in 0.05f64..0.5,
        lambda in 0.5f64..4.0,
    ) {
        let (adjusted, raw, r) = quality_factor(p, q, eps, lambda);
        prop_assert!((1..=4).contains(&r));
        prop_assert!((0.0..1.0).contains(&raw), "raw phi must be in [0,1)");
        prop_assert!(adjusted >= 0.0);
        if p == q {
            prop_assert_eq!(raw, 0.0);
        }
        // swapping the heads maps regions 2 and 4 onto each other
        let swapped = region(q, p, eps);
        match r {
            1 | 3 => prop_assert_eq!(swapped, r),
            2 => prop_assert_eq!(swapped, 4),
            _ => prop_assert_eq!(swapped, 2),
        }
        prop_assert_eq!(raw_quality_factor(p, q), raw_quality_factor(q, p));
    }

    #[test]
    fn nms_selection_is_sorted_unique_and_below_threshold(
        raw in prop::collection::vec((0.0f64..400.0, 0.0f64..400.0, 5.0f64..90.0, 5.0f64..90.0, -1.0f64..1.0), 1..120),
        theta in 0.05f64..0.9,
        n in 1usize..10,
    ) {
        let boxes: Vec<BoxF> = raw
            .iter()
            .map(|(x, y, w, h, _)| BoxF { x0: *x, y0: *y, x1: x + w, y1: y + h })
            .collect();
        let scores: Vec<f64> = raw.iter().map(|(_, _, _, _, s)| *s).collect();
        let out = nms_top_n(&scores, &boxes, theta, n);
        prop_assert!(out.selected.len() <= n);
        for w in out.selected.windows(2) {
            prop_assert!(w[0].score >= w[1].score, "descending score order");
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &out.selected {
            prop_assert!(seen.insert(p.anchor_index), "duplicate selection");
        }
        for i in 0..out.selected.len() {
            for j in i + 1..out.selected.len() {
                prop_assert!(out.selected[i].boxf().iou(&out.selected[j].boxf()) <= theta);
            }
        }
        if out.selected.len() < n {
            prop_assert_eq!(out.shortfall, Some(out.selected.len()));
        }
    }

    #[test]
    fn stop_gradient_zeroes_any_path(values in prop::collection::vec(-3.0f64..3.0, 4)) {
        let mut g = Graph::new();
        let x = g.leaf_with_grad(values.clone(), &[4], true).unwrap();
        let stopped = g.stop_gradient(x).unwrap();
        let sig = g.sigmoid(stopped).unwrap();
        let prod = g.mul(sig, x).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        // the only gradient into x is the direct (non-stopped) factor
        let grad = g.grad(x).unwrap();
        for (gi, v) in grad.iter().zip(values.iter()) {
            let sig_v = 1.0 / (1.0 + (-v).exp());
            prop_assert!((gi - sig_v).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_add_matches_manual_loop(
        b in 1usize..4,
        c in 1usize..5,
        map in prop::collection::vec(-2.0f64..2.0, 1..60),
        bias in prop::collection::vec(-2.0f64..2.0, 1..5),
    ) {
        let (h, w) = (2usize, 3usize);
        let numel = b * c * h * w;
        let data: Vec<f64> = (0..numel).map(|i| map[i % map.len()]).collect();
        let bias: Vec<f64> = (0..c).map(|i| bias[i % bias.len()]).collect();
        let mut g = Graph::new();
        let x = g.leaf(data.clone(), &[b, c, h, w]).unwrap();
        let bt = g.leaf(bias.clone(), &[1, c, 1, 1]).unwrap();
        let y = g.add(x, bt).unwrap();
        let d = g.data(y);
        for bi in 0..b {
            for ci in 0..c {
                for s in 0..h * w {
                    let idx = (bi * c + ci) * h * w + s;
                    prop_assert_eq!(d[idx], data[idx] + bias[ci]);
                }
            }
        }
    }
}
