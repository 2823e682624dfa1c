use duq_core::baselines::ensemble_decompose;
use duq_core::metrics::{self, ece_dense, pavpu, ImageMetrics};
use duq_core::synth::{decode_dmap, encode_dmap};
use duq_core::uncertainty::losses::{cross_entropy, minmax, optimal_slice};
use duq_core::TensorMap;
use proptest::prelude::*;

fn unit_map(side: usize) -> impl Strategy<Value = TensorMap> {
    prop::collection::vec(0.0f64..=1.0, side * side)
        .prop_map(move |v| TensorMap::new(1, side, side, v).unwrap())
}

fn binary_map(side: usize) -> impl Strategy<Value = TensorMap> {
    prop::collection::vec(prop::bool::ANY, side * side).prop_map(move |v| {
        TensorMap::new(1, side, side, v.into_iter().map(f64::from).collect()).unwrap()
    })
}

fn triple() -> impl Strategy<Value = (TensorMap, TensorMap, TensorMap)> {
    (2usize..=9).prop_flat_map(|n| (unit_map(n), binary_map(n), unit_map(n)))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn minmax_is_idempotent(v in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let once = minmax(&v);
        prop_assert!(close(&minmax(&once), &once, 1e-12));
        prop_assert!(once.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn minmax_ignores_positive_affine_maps(
        v in prop::collection::vec(-10.0f64..10.0, 2..64),
        a in 0.1f64..100.0,
        b in -100.0f64..100.0,
    ) {
        let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        prop_assert!(close(&minmax(&moved), &minmax(&v), 1e-9));
    }

    #[test]
    fn mutual_information_is_non_negative(
        samples in (2usize..8, 1usize..32).prop_flat_map(|(m, len)| {
            prop::collection::vec(prop::collection::vec(0.0f64..=1.0, len), m)
        })
    ) {
        let len = samples[0].len();
        let maps: Vec<TensorMap> = samples.into_iter().map(|v| TensorMap::new(1, 1, len, v).unwrap()).collect();
        let d = ensemble_decompose(&maps).unwrap();
        prop_assert!(d.epistemic.values().iter().all(|&e| e >= -1e-9));
        for ((p, a), e) in d.predictive.values().iter().zip(d.aleatoric.values()).zip(d.epistemic.values()) {
            prop_assert!((p - a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_selection_dominates_every_member(
        preds in (2usize..6, 1usize..32).prop_flat_map(|(m, len)| {
            (prop::collection::vec(prop::collection::vec(0.001f64..0.999, len), m),
             prop::collection::vec(prop::bool::ANY, len))
        })
    ) {
        let (members, y) = preds;
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        let slices: Vec<&[f64]> = members.iter().map(|m| m.as_slice()).collect();
        let best = optimal_slice(&slices, &y).unwrap();
        for m in &members {
            for i in 0..y.len() {
                prop_assert!(cross_entropy(best[i], y[i]) <= cross_entropy(m[i], y[i]));
            }
        }
    }

    #[test]
    fn metric_ranges_and_patch_totals((s, y, u) in triple(), g in 1usize..5) {
        let e = ece_dense(&s, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let t = pavpu(&s, &y, &u, g).unwrap();
        for k in 0..metrics::PAVPU_BINS {
            prop_assert_eq!(t.n_ac[k] + t.n_au[k] + t.n_ic[k] + t.n_iu[k], t.patches);
            prop_assert!((0.0..=1.0).contains(&t.per_bin[k]));
        }
        let m = metrics::mae(&s, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        if let Some(f) = metrics::f_measure(&s, &y, metrics::DEFAULT_BETA_SQ).unwrap() {
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn ece_ignores_pixel_order((s, y, _) in triple(), shift in 1usize..50) {
        let n = s.len();
        let rot = |m: &TensorMap| {
            let mut v = m.values().to_vec();
            v.rotate_left(shift % n);
            TensorMap::new(1, m.height(), m.width(), v).unwrap()
        };
        let a = ece_dense(&s, &y).unwrap();
        let b = ece_dense(&rot(&s), &rot(&y)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn aggregate_ignores_image_order(vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..10)) {
        let imgs: Vec<ImageMetrics> = vals
            .iter()
            .enumerate()
            .map(|(i, &(m, e, p))| ImageMetrics { file: i.to_string(), mae: m, f_beta: Some(m), ece_d: e, pavpu: p })
            .collect();
        let mut rev = imgs.clone();
        rev.reverse();
        let a = metrics::aggregate(&imgs).unwrap();
        let b = metrics::aggregate(&rev).unwrap();
        prop_assert!((a.ece_d - b.ece_d).abs() < 1e-12);
        prop_assert!((a.pavpu - b.pavpu).abs() < 1e-12);
        prop_assert!((a.mae - b.mae).abs() < 1e-12);
    }

    #[test]
    fn dmap_roundtrip(m in (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-1e6f64..1e6, c * h * w).prop_map(move |v| TensorMap::new(c, h, w, v).unwrap())
    })) {
        prop_assert_eq!(decode_dmap(&encode_dmap(&m)).unwrap(), m.to_f32_precision());
    }
}
