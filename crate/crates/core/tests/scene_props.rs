use elegant::scene::{iou, merge_global, BBox, Entity, EntitySource, LocalSceneGraph, Triplet, TripletStatus};
use proptest::prelude::*;

/// Count sample points of a `res`-per-unit grid inside each box.
fn rasterized_iou(a: &BBox, b: &BBox, extent: f64, res: usize) -> f64 {
    let n = (extent * res as f64) as usize;
    let step = 1.0 / res as f64;
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max;
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        let x = (i as f64 + 0.5) * step;
        for j in 0..n {
            let y = (j as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn partial_overlap_matches_raster_count() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
    let oracle = rasterized_iou(&a, &b, 3.0, 200);
    // 1 / 7 exactly on any grid aligned to unit boundaries
    assert!((oracle - 0.142857).abs() < 1e-6);
    assert!((iou(&a, &b) - oracle).abs() < 1e-12);
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..50.0, 0.0f64..50.0, 0.01f64..50.0, 0.01f64..50.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_graph() -> impl Strategy<Value = LocalSceneGraph> {
    (
        arb_box(),
        prop::collection::vec((arb_box(), "[a-z]{1,6}( [a-z]{1,4})?", 0.0f64..=1.0), 0..5),
    )
        .prop_map(|(sbox, objs)| {
            let subject = Entity::new("s", "man", sbox, 0.8, EntitySource::Detected).unwrap();
            let objects: Vec<Entity> = objs
                .iter()
                .enumerate()
                .map(|(i, (b, _, c))| Entity::new(format!("o{i}"), "thing", *b, *c, EntitySource::Detected).unwrap())
                .collect();
            let relations = objs
                .iter()
                .enumerate()
                .map(|(i, (_, p, c))| {
                    let status = if i % 2 == 0 {
                        TripletStatus::VerifiedDirect
                    } else {
                        TripletStatus::VerifiedCoca
                    };
                    Triplet::candidate("s", p, format!("o{i}"))
                        .unwrap()
                        .with_status(status, Some(*c))
                        .unwrap()
                })
                .collect();
            LocalSceneGraph::new("img", subject, objects, relations).unwrap()
        })
}

proptest! {
    #[test]
    fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn iou_of_box_with_itself_is_one(a in arb_box()) {
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_a_fraction(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn local_graph_json_round_trip(g in arb_graph()) {
        let text = serde_json::to_string(&g).unwrap();
        let back: LocalSceneGraph = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn global_graph_json_round_trip(g in arb_graph()) {
        let mut other = g.clone();
        other.subject.id = "s2".into();
        for t in &mut other.relations {
            t.subject_id = "s2".into();
        }
        let global = merge_global("img", vec![g, other]).unwrap();
        let back: elegant::scene::GlobalSceneGraph =
            serde_json::from_str(&serde_json::to_string(&global).unwrap()).unwrap();
        prop_assert_eq!(back, global);
    }
}
