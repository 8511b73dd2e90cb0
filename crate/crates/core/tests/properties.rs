//! Randomized invariants across the pipeline.

use std::collections::BTreeMap;

use proptest::prelude::*;
use wiflow::csi::{
    assemble_links, decode_bfee, encode_bfee, normalize_in_place, pack_csi, parse_dat_stream,
    BfeeRecord, CsiFrame, Link, LinkLayout,
};
use wiflow::objectives::{mpjpe, pck, smooth_l1_h, total_loss, LossConfig, MetricAccumulator};
use wiflow::pose::{
    detect_missing, interpolate_missing, LabelSequence, PoseSample, SkeletonTopology, NUM_KEYPOINTS,
};
use wiflow::tensor::{Tape, Tensor};
use wiflow::train::{largest_remainder, TrainConfig};

fn frame_strategy() -> impl Strategy<Value = CsiFrame> {
    (1usize..=3, 1usize..=3, any::<u32>()).prop_flat_map(|(n_rx, n_tx, ts)| {
        prop::collection::vec(any::<[i8; 2]>(), 30 * n_rx * n_tx).prop_map(move |values| {
            let mut f = CsiFrame::zeros(n_rx, n_tx, ts, 0);
            f.values = values;
            f
        })
    })
}

fn poses(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * NUM_KEYPOINTS * 2)
}

fn instance() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..4).prop_flat_map(|n| {
        (
            Just(n),
            poses(n),
            poses(n),
            prop::collection::vec(0.05f64..3.0, n),
        )
    })
}

fn loss_total(pred: &[f64], gt: &[f64], n: usize) -> f64 {
    let tape = Tape::<f64>::new();
    let shape = vec![n, NUM_KEYPOINTS, 2];
    let p = tape.constant(Tensor::from_f64(shape.clone(), pred).unwrap());
    let g = tape.constant(Tensor::from_f64(shape, gt).unwrap());
    let t = total_loss(
        &p,
        &g,
        &SkeletonTopology::standard(),
        &LossConfig::default(),
    )
    .unwrap();
    t.total.value().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bfee_stream_round_trips(frame in frame_strategy(), sel in any::<u8>(), count in any::<u16>()) {
        let rec = BfeeRecord {
            timestamp_low: frame.timestamp,
            bfee_count: count,
            n_rx: frame.n_rx as u8,
            n_tx: frame.n_tx as u8,
            rssi_a: 1,
            rssi_b: 2,
            rssi_c: 3,
            noise: -92,
            agc: 40,
            antenna_sel: sel,
            rate: 0x4101,
            payload: pack_csi(&frame, sel),
        };
        let report = parse_dat_stream(&encode_bfee(&rec));
        prop_assert_eq!(&report.records, &vec![rec.clone()]);
        prop_assert_eq!(decode_bfee(&report.records[0], 0).unwrap(), frame);
    }

    #[test]
    fn link_order_follows_layout(a in frame_strategy(), seed in any::<u64>()) {
        // any permutation of the 3x3 links of one receiver
        let mut links: Vec<Link> = LinkLayout::receiver_major(1, a.n_tx, a.n_rx).links;
        let mut s = seed;
        for i in (1..links.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            links.swap(i, (s >> 33) as usize % (i + 1));
        }
        let layout = LinkLayout::new(links.clone()).unwrap();
        let frames = BTreeMap::from([(0, a.clone())]);
        let out = assemble_links(&frames, &layout).unwrap();
        for (b, l) in links.iter().enumerate() {
            for sc in 0..30 {
                let [re, im] = a.get(sc, l.rx, l.tx);
                let want = ((re as f64).powi(2) + (im as f64).powi(2)).sqrt();
                prop_assert!((out[30 * b + sc] as f64 - want).abs() <= 1e-5 * want.max(1.0));
            }
        }
    }

    #[test]
    fn normalized_windows_have_zero_mean_unit_variance(
        v in prop::collection::vec(-50.0f32..50.0, 40..400),
    ) {
        let spread = v.iter().cloned().fold(f32::MIN, f32::max) - v.iter().cloned().fold(f32::MAX, f32::min);
        prop_assume!(spread > 1e-2);
        let mut w = v.clone();
        normalize_in_place(&mut w);
        let n = w.len() as f64;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn pck_is_monotone_and_translation_invariant(
        (n, pred, gt, scales) in instance(),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        dx in -10.0f64..10.0,
        dy in -10.0f64..10.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(pck(&pred, &gt, &scales, lo).unwrap() <= pck(&pred, &gt, &scales, hi).unwrap());
        let shift = |v: &[f64]| -> Vec<f64> {
            v.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { dx } else { dy }).collect()
        };
        let (sp, sg) = (shift(&pred), shift(&gt));
        prop_assert!((mpjpe(&sp, &sg).unwrap() - mpjpe(&pred, &gt).unwrap()).abs() < 1e-9);
        prop_assert_eq!(n, scales.len());
    }

    #[test]
    fn metric_shards_merge_exactly((n, pred, gt, scales) in instance(), cut in 0usize..4) {
        let cut = cut.min(n);
        let at = cut * NUM_KEYPOINTS * 2;
        let mut whole = MetricAccumulator::new();
        whole.add(&pred, &gt, &scales).unwrap();
        let mut left = MetricAccumulator::new();
        left.add(&pred[..at], &gt[..at], &scales[..cut]).unwrap();
        let mut right = MetricAccumulator::new();
        right.add(&pred[at..], &gt[at..], &scales[cut..]).unwrap();
        left.merge(&right);
        let (a, b) = (whole.report(1.0), left.report(1.0));
        prop_assert_eq!(a.pck_values(), b.pck_values());
        prop_assert!((a.mpjpe - b.mpjpe).abs() < 1e-12);
    }

    #[test]
    fn loss_is_symmetric_and_nonnegative((n, pred, gt, _s) in instance()) {
        let ab = loss_total(&pred, &gt, n);
        let ba = loss_total(&gt, &pred, n);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(loss_total(&gt, &gt, n), 0.0);
    }

    #[test]
    fn smooth_l1_is_even_and_bounded(x in -10.0f64..10.0, beta in 0.01f64..5.0) {
        let h = smooth_l1_h(x, beta);
        prop_assert_eq!(h, smooth_l1_h(-x, beta));
        // between the quadratic and the absolute value
        prop_assert!(h <= x.abs() + 1e-12);
        prop_assert!(h >= x.abs() - 0.5 * beta - 1e-12);
    }

    #[test]
    fn interpolation_fills_between_neighbors(
        flat in poses(12),
        holes in prop::collection::vec(prop::bool::weighted(0.3), 12 * NUM_KEYPOINTS),
    ) {
        let clean: Vec<PoseSample> = (0..12)
            .map(|i| {
                let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
                for (j, p) in kp.iter_mut().enumerate() {
                    *p = [flat[(i * NUM_KEYPOINTS + j) * 2] + 3.0, flat[(i * NUM_KEYPOINTS + j) * 2 + 1]];
                }
                PoseSample::new(i as u64, kp)
            })
            .collect();
        let clean = LabelSequence::new("s", "x", clean);
        let mut holed = clean.clone();
        for (i, s) in holed.samples.iter_mut().enumerate() {
            for j in 0..NUM_KEYPOINTS {
                // frame 0 always stays valid so no track is empty
                if i > 0 && holes[i * NUM_KEYPOINTS + j] {
                    s.confidence[j] = 0.0;
                }
            }
        }
        let out = interpolate_missing(&holed, &SkeletonTopology::standard()).unwrap();
        prop_assert!(detect_missing(&out).iter().flatten().all(|m| !m));
        for j in 0..NUM_KEYPOINTS {
            let valid: Vec<usize> = (0..12).filter(|&i| holed.samples[i].confidence[j] != 0.0).collect();
            for i in 0..12 {
                let got = out.samples[i].keypoints[j];
                if valid.contains(&i) {
                    prop_assert_eq!(got, clean.samples[i].keypoints[j]);
                    continue;
                }
                let prev = *valid.iter().rfind(|&&v| v < i).unwrap();
                match valid.iter().find(|&&v| v > i) {
                    Some(&next) => {
                        let w = (i - prev) as f64 / (next - prev) as f64;
                        for c in 0..2 {
                            let (p, q) = (clean.samples[prev].keypoints[j][c], clean.samples[next].keypoints[j][c]);
                            prop_assert!((got[c] - (p + w * (q - p))).abs() < 1e-12);
                        }
                    }
                    None => prop_assert_eq!(got, clean.samples[prev].keypoints[j]),
                }
            }
        }
    }

    #[test]
    fn largest_remainder_sums_and_stays_near_quota(
        n in 0usize..500,
        raw in prop::collection::vec(0.0f64..1.0, 1..5),
    ) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let ratios: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let sizes = largest_remainder(n, &ratios);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (s, r) in sizes.iter().zip(&ratios) {
            prop_assert!((*s as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn config_flat_echo_round_trips(lr in 1e-6f64..1.0, epochs in 0usize..100, stride in 1usize..40) {
        let cfg = TrainConfig { lr, epochs, stride, ..TrainConfig::desk() };
        prop_assert_eq!(TrainConfig::from_json(&cfg.to_flat_json()).unwrap(), cfg);
    }
}
