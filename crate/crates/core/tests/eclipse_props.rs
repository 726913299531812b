#![allow(clippy::excessive_precision)]

use elegant::backends::EmbeddingVector;
use elegant::eclipse::{clip_score, dataset_eclipse, eclipse, penalty, PenaltyParams};
use elegant::raster::{mask_image, Raster};
use elegant::scene::{BBox, Entity, EntitySource, LocalSceneGraph, Triplet, TripletStatus};
use proptest::prelude::*;

// Reference values computed with mpmath at 40 digits.
const P2_A001: f64 = 0.9961445079573883740;
const P4_A001: f64 = 0.9981110884053942011;
const P2_A01: f64 = 0.96210716526924970;
const P4_A01: f64 = 0.98127063738340952;
const P2_A0001: f64 = 0.99961378024094040;
const P4_A0001: f64 = 0.99981094808878149;

#[test]
fn penalty_matches_reference_values() {
    for (alpha, p2, p4) in [
        (0.01, P2_A001, P4_A001),
        (0.1, P2_A01, P4_A01),
        (0.001, P2_A0001, P4_A0001),
    ] {
        let p = PenaltyParams::new(3.0, alpha).unwrap();
        assert!((penalty(2.0, &p).unwrap() - p2).abs() < 1e-12, "alpha {alpha}");
        assert!((penalty(4.0, &p).unwrap() - p4).abs() < 1e-12, "alpha {alpha}");
    }
}

#[test]
fn penalty_edge_cases() {
    let p = PenaltyParams::new(3.0, 0.01).unwrap();
    assert_eq!(penalty(1.0, &p).unwrap(), 0.0);
    assert!(penalty(0.5, &p).is_err());
    assert!(penalty(f64::NAN, &p).is_err());
    assert!(PenaltyParams::new(1.0, 0.01).is_err());
    assert!(PenaltyParams::new(3.0, 0.0).is_err());
}

fn entity(id: &str, label: &str) -> Entity {
    Entity::new(
        id,
        label,
        BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
        0.9,
        EntitySource::Detected,
    )
    .unwrap()
}

fn graph(image: &str, subject: &str, n: usize) -> LocalSceneGraph {
    let objects: Vec<Entity> = (0..n).map(|i| entity(&format!("o{i}"), "tree")).collect();
    let relations = (0..n)
        .map(|i| {
            Triplet::candidate(subject, "near", format!("o{i}"))
                .unwrap()
                .with_status(TripletStatus::VerifiedDirect, Some(0.9))
                .unwrap()
        })
        .collect();
    LocalSceneGraph::new(image, entity(subject, "man"), objects, relations).unwrap()
}

#[test]
fn graph_and_dataset_scores_match_reference() {
    let p = PenaltyParams::new(3.0, 0.01).unwrap();
    let g = eclipse(&graph("i", "s", 2), &[60.0, 40.0], &p).unwrap();
    assert!((g.eclipse - 49.80722539786941870).abs() < 1e-9);

    let graphs = [graph("a", "s", 2), graph("b", "s", 4), graph("c", "s", 0)];
    let scores = [vec![50.0; 2], vec![50.0; 4], vec![]];
    let r = dataset_eclipse(&graphs[..2], &scores[..2], 0.01).unwrap();
    assert_eq!(r.m_star, 3.0);
    assert!((r.dataset_eclipse - 49.85638990906956438).abs() < 1e-9);

    // empty graphs score 0 but do not move the calibration
    let r = dataset_eclipse(&graphs, &scores, 0.01).unwrap();
    assert_eq!(r.m_star, 3.0);
    assert_eq!(r.per_graph[2].eclipse, 0.0);
    assert!((r.dataset_eclipse - 2.0 * 49.85638990906956438 / 3.0).abs() < 1e-9);
}

#[test]
fn single_relation_datasets_cannot_calibrate() {
    let graphs = [graph("a", "s", 1), graph("b", "s", 1)];
    assert!(dataset_eclipse(&graphs, &[vec![10.0], vec![20.0]], 0.01).is_err());
}

fn params() -> impl Strategy<Value = PenaltyParams> {
    (1.5f64..20.0, 0.001f64..1.0).prop_map(|(m, a)| PenaltyParams::new(m, a).unwrap())
}

proptest! {
    #[test]
    fn penalty_peaks_at_m_star(p in params()) {
        prop_assert!((penalty(p.m_star(), &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_unimodal(p in params()) {
        let m = p.m_star();
        let lo = 1.0 + 1e-6;
        let hi = 5.0 * m;
        let mut grid: Vec<f64> = (0..=400).map(|i| lo + (hi - lo) * i as f64 / 400.0).collect();
        grid.push(m);
        grid.sort_by(f64::total_cmp);
        let vals: Vec<f64> = grid.iter().map(|&x| penalty(x, &p).unwrap()).collect();
        for (x, v) in grid.iter().zip(&vals) {
            prop_assert!((0.0..=1.0).contains(v), "P({x}) = {v}");
        }
        for w in grid.windows(2).zip(vals.windows(2)) {
            let ([x0, x1], [v0, v1]) = (w.0, w.1) else { unreachable!() };
            if *x1 <= m {
                prop_assert!(v1 > v0, "not rising at {x0}..{x1}");
            } else if *x0 >= m {
                prop_assert!(v1 < v0, "not falling at {x0}..{x1}");
            }
        }
    }

    #[test]
    fn shorter_side_is_penalized_more(p in params(), frac in 0.01f64..0.99) {
        let delta = frac * (p.m_star() - 1.0);
        let below = penalty(p.m_star() - delta, &p).unwrap();
        let above = penalty(p.m_star() + delta, &p).unwrap();
        prop_assert!(below < above);
    }

    #[test]
    fn larger_alpha_penalizes_more(m in 1.5f64..20.0, a in 0.001f64..0.5, x in 1.01f64..60.0) {
        prop_assume!((x - m).abs() > 1e-3);
        let weak = penalty(x, &PenaltyParams::new(m, a).unwrap()).unwrap();
        let strong = penalty(x, &PenaltyParams::new(m, 2.0 * a).unwrap()).unwrap();
        prop_assert!(strong < weak);
    }

    #[test]
    fn clip_score_contract(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
        s in 0.01f64..100.0,
        t in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let ea = EmbeddingVector::new(a.clone()).unwrap();
        let eb = EmbeddingVector::new(b.clone()).unwrap();
        let base = clip_score(&ea, &eb).unwrap();
        prop_assert!((0.0..=100.0).contains(&base));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        if dot < 0.0 {
            prop_assert_eq!(base, 0.0);
        }
        let sa = EmbeddingVector::new(a.iter().map(|v| v * s).collect()).unwrap();
        let sb = EmbeddingVector::new(b.iter().map(|v| v * t).collect()).unwrap();
        prop_assert!((clip_score(&sa, &sb).unwrap() - base).abs() < 1e-9);
        prop_assert!((clip_score(&ea, &ea).unwrap() - 100.0).abs() < 1e-9);
    }
}

/// Brute-force mask: visit every pixel and test its centre against both boxes.
pub fn mask_oracle(img: &Raster, a: &BBox, b: &BBox) -> Vec<u8> {
    let inside = |bx: &BBox, cx: f64, cy: f64| cx >= bx.x_min && cx < bx.x_max && cy >= bx.y_min && cy < bx.y_max;
    let mut out = Vec::with_capacity(img.data().len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            if inside(a, cx, cy) || inside(b, cx, cy) {
                out.extend_from_slice(&img.pixel(x, y));
            } else {
                out.extend_from_slice(&[0, 0, 0]);
            }
        }
    }
    out
}

fn image_and_boxes() -> impl Strategy<Value = (Raster, BBox, BBox)> {
    (1u32..=64, 1u32..=64, any::<u64>()).prop_flat_map(|(w, h, seed)| {
        let bx = move || {
            (0.0..w as f64, 0.0..h as f64, 0.0f64..1.0, 0.0f64..1.0).prop_map(move |(x0, y0, fw, fh)| {
                let x1 = x0 + (w as f64 - x0) * fw;
                let y1 = y0 + (h as f64 - y0) * fh;
                BBox::new(x0, y0, x1.max(x0 + 1e-9).min(w as f64), y1.max(y0 + 1e-9).min(h as f64)).unwrap()
            })
        };
        let data: Vec<u8> = (0..w * h * 3)
            .map(|i| {
                (seed
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(i as u64)
                    .wrapping_mul(1442695040888963407)
                    >> 56) as u8
            })
            .collect();
        (Just(Raster::new(w, h, data).unwrap()), bx(), bx())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mask_matches_brute_force((img, a, b) in image_and_boxes()) {
        let masked = mask_image(&img, &a, &b).unwrap();
        prop_assert_eq!(masked.data(), &mask_oracle(&img, &a, &b)[..]);
    }
}

#[test]
fn integer_boxes_mask_exact_pixels() {
    let img = Raster::filled(6, 4, [9, 9, 9]).unwrap();
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(4.0, 3.0, 6.0, 4.0).unwrap();
    let m = mask_image(&img, &a, &b).unwrap();
    let kept = m.data().chunks(3).filter(|p| p == &[9, 9, 9]).count();
    assert_eq!(kept, 4 + 2);
}

fn half_grid_boxes() -> impl Strategy<Value = (Raster, BBox, BBox)> {
    (1u32..=16, 1u32..=16).prop_flat_map(|(w, h)| {
        let bx = move || {
            (0..2 * w, 0..2 * h, 1..=2 * w, 1..=2 * h).prop_map(move |(x0, y0, dx, dy)| {
                let x1 = (x0 + dx).min(2 * w);
                let y1 = (y0 + dy).min(2 * h);
                BBox::new(
                    x0 as f64 / 2.0,
                    y0 as f64 / 2.0,
                    x1.max(x0 + 1) as f64 / 2.0,
                    y1.max(y0 + 1) as f64 / 2.0,
                )
                .unwrap()
            })
        };
        let data: Vec<u8> = (0..w * h * 3).map(|i| (i % 255) as u8 + 1).collect();
        (Just(Raster::new(w, h, data).unwrap()), bx(), bx())
    })
}

proptest! {
    // edges fall exactly on pixel centres
    #[test]
    fn mask_handles_centre_aligned_edges((img, a, b) in half_grid_boxes()) {
        prop_assume!(a.within(img.width() as f64, img.height() as f64) && b.within(img.width() as f64, img.height() as f64));
        let masked = mask_image(&img, &a, &b).unwrap();
        prop_assert_eq!(masked.data(), &mask_oracle(&img, &a, &b)[..]);
    }
}
