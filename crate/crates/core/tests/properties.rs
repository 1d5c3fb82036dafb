use proptest::prelude::*;

use cmr_landmark::heatmap::{decode, encode};
use cmr_landmark::image::Image;
use cmr_landmark::landmarks::{Frame, LandmarkSet, Point, View};
use cmr_landmark::measure::{a_rvi_angle, angle_diff, l2_mm, lv_length};
use cmr_landmark::preprocess::preprocess_to;
use cmr_landmark::service::{encode_frame, FrameDecoder};

const GRID: usize = 64;

fn view() -> impl Strategy<Value = View> {
    prop::sample::select(View::ALL.to_vec())
}

fn point(lo: f64, hi: f64) -> impl Strategy<Value = Point> {
    (lo..hi, lo..hi).prop_map(|(r, c)| Point::new(r, c))
}

/// Up to three points at least 20 px apart, away from the border.
fn separated_slots() -> impl Strategy<Value = [Option<Point>; 3]> {
    [
        prop::option::weighted(0.8, point(12.0, 51.0)),
        prop::option::weighted(0.8, point(12.0, 51.0)),
        prop::option::weighted(0.8, point(12.0, 51.0)),
    ]
    .prop_filter("landmarks closer than 20 px", |pts| {
        let present: Vec<&Point> = pts.iter().flatten().collect();
        present.iter().enumerate().all(|(i, a)| present[i + 1..].iter().all(|b| l2_mm(**a, **b, (1.0, 1.0)) >= 20.0))
    })
}

fn lax_set(v1: Point, v2: Point, apex: Point, spacing: (f64, f64)) -> LandmarkSet {
    LandmarkSet::new(View::Ch4, Frame::new(400, 400, spacing), [Some(v1), Some(v2), Some(apex)]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trip(view in view(), points in separated_slots()) {
        let frame = Frame::new(GRID, GRID, (1.0, 1.0));
        let truth = LandmarkSet::new(view, frame, points).unwrap();
        let back = decode(&encode(&truth, GRID, GRID, 5.0).unwrap(), view, 0.5, frame).unwrap();
        prop_assert_eq!(back.presence(), truth.presence());
        for (a, b) in back.points.iter().zip(&truth.points) {
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!(l2_mm(*a, *b, (1.0, 1.0)) <= 1.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_commutes_with_slot_permutation(
        view in view(),
        points in separated_slots(),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let frame = Frame::new(GRID, GRID, (1.0, 1.0));
        let roundtrip = |pts: [Option<Point>; 3]| {
            let set = LandmarkSet::new(view, frame, pts).unwrap();
            decode(&encode(&set, GRID, GRID, 5.0).unwrap(), view, 0.5, frame).unwrap().points
        };
        let direct = roundtrip(points);
        let permuted = roundtrip(perm.map(|k| points[k]));
        for (slot, &k) in perm.iter().enumerate() {
            prop_assert_eq!(permuted[slot], direct[k]);
        }
    }

    #[test]
    fn preprocess_maps_points_invertibly(
        h in 16usize..80,
        w in 16usize..80,
        sr in 0.5f64..2.0,
        sc in 0.5f64..2.0,
        frame in prop::sample::select(vec![32usize, 64, 96]),
        seed in any::<u64>(),
        (pr, pc) in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let px = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f32 + 1.0).collect();
        let img = Image::new(h, w, px, (sr, sc)).unwrap();
        let (out, rec) = preprocess_to(&img, frame);
        prop_assert_eq!((out.height(), out.width()), (frame, frame));
        prop_assert_eq!(out.spacing_mm(), (1.0, 1.0));
        let (row, col) = (pr * (h - 1) as f64, pc * (w - 1) as f64);
        let (fr, fc) = rec.forward(row, col);
        let (br, bc) = rec.inverse(fr, fc);
        prop_assert!((br - row).abs() < 1e-9 && (bc - col).abs() < 1e-9);
        // physical distances survive resampling to 1 mm
        let (f0r, f0c) = rec.forward(0.0, 0.0);
        let mm = l2_mm(Point::new(0.0, 0.0), Point::new(row, col), (sr, sc));
        prop_assert!((l2_mm(Point::new(f0r, f0c), Point::new(fr, fc), (1.0, 1.0)) - mm).abs() < 1e-9);
        if rec.normalized {
            let support: Vec<f64> = out.pixels().iter().filter(|v| **v != 0.0).map(|v| *v as f64).collect();
            let n = support.len() as f64;
            let mean = support.iter().sum::<f64>() / n;
            let var = support.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn distance_is_a_metric(a in point(-500.0, 500.0), b in point(-500.0, 500.0), c in point(-500.0, 500.0),
                            s in (0.1f64..3.0, 0.1f64..3.0)) {
        prop_assert_eq!(l2_mm(a, b, s), l2_mm(b, a, s));
        prop_assert!(l2_mm(a, a, s) == 0.0);
        prop_assert!(l2_mm(a, c, s) <= l2_mm(a, b, s) + l2_mm(b, c, s) + 1e-9);
    }

    #[test]
    fn angle_difference_wraps(a in -1e4f64..1e4, b in -1e4f64..1e4, k in -5i32..5) {
        let d = angle_diff(a, b);
        prop_assert!(d > -180.0 - 1e-9 && d <= 180.0 + 1e-9);
        prop_assert!((angle_diff(a + 360.0 * k as f64, b) - d).abs() < 1e-6 || (d.abs() - 180.0).abs() < 1e-6);
        prop_assert!((angle_diff(b, a) + d).abs() < 1e-6 || (d.abs() - 180.0).abs() < 1e-6);
    }

    #[test]
    fn insertion_angle_ignores_isotropic_spacing(a in point(0.0, 399.0), c in point(0.0, 399.0), s in 0.2f64..4.0) {
        prop_assume!(l2_mm(a, c, (1.0, 1.0)) > 1e-3);
        let set = |sp| LandmarkSet::new(View::Sax, Frame::new(400, 400, sp), [Some(a), None, Some(c)]).unwrap();
        let unit = a_rvi_angle(&set((1.0, 1.0))).unwrap();
        let scaled = a_rvi_angle(&set((s, s))).unwrap();
        prop_assert!(angle_diff(unit, scaled).abs() < 1e-9);
        prop_assert!(unit > -180.0 && unit <= 180.0);
    }

    #[test]
    fn lv_length_ignores_valve_order(v1 in point(0.0, 399.0), v2 in point(0.0, 399.0), apex in point(0.0, 399.0),
                                     s in (0.2f64..3.0, 0.2f64..3.0)) {
        let a = lv_length(&lax_set(v1, v2, apex, s)).unwrap();
        prop_assert_eq!(a, lv_length(&lax_set(v2, v1, apex, s)).unwrap());
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn framing_survives_any_chunking(
        payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..300), 0..6),
        cuts in prop::collection::vec(1usize..64, 1..40),
    ) {
        let mut stream = Vec::new();
        for p in &payloads {
            stream.extend(encode_frame(p).unwrap());
        }
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        let mut pos = 0;
        for cut in cuts.iter().cycle() {
            if pos >= stream.len() {
                break;
            }
            let end = (pos + cut).min(stream.len());
            dec.push(&stream[pos..end]);
            pos = end;
            while let Some(p) = dec.next_payload().unwrap() {
                got.push(p);
            }
        }
        prop_assert_eq!(got, payloads);
        prop_assert_eq!(dec.pending(), 0);
    }
}
