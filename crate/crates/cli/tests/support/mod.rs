//! A three-image mock scenario shared by the CLI tests and the acceptance
//! suite, with the ECLIPSE values it should produce computed independently.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use elegant::backends::{EmbedInput, FixtureSet, ImageRef};
use elegant::eclipse::triplet_caption;
use elegant::prompts::{render_calibration, render_rationale, render_thinker_open, render_verify};
use elegant::raster::{mask_image, Raster};
use elegant::scene::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const W: u32 = 48;
pub const H: u32 = 32;
pub const PREDICATES: [&str; 6] = ["riding", "watching", "sitting on", "carrying", "near", "standing on"];

pub struct SceneImage {
    pub id: &'static str,
    pub objects: Vec<(&'static str, [f64; 4])>,
}

pub fn scenes() -> Vec<SceneImage> {
    vec![
        SceneImage {
            id: "img0",
            objects: vec![
                ("man", [2.0, 2.0, 20.0, 30.0]),
                ("horse", [10.0, 10.0, 40.0, 30.0]),
                ("hat", [4.0, 0.0, 12.0, 6.0]),
                ("tree", [30.0, 0.0, 46.0, 20.0]),
                ("dog", [0.0, 24.0, 8.0, 32.0]),
            ],
        },
        SceneImage {
            id: "img1",
            objects: vec![
                ("woman", [5.0, 5.0, 25.0, 30.0]),
                ("umbrella", [0.0, 0.0, 30.0, 12.0]),
                ("bench", [15.0, 20.0, 45.0, 32.0]),
                ("bird", [40.0, 0.0, 47.0, 6.0]),
            ],
        },
        SceneImage {
            id: "img2",
            objects: vec![
                ("cat", [10.0, 10.0, 30.0, 25.0]),
                ("sofa", [0.0, 15.0, 48.0, 32.0]),
                ("lamp", [35.0, 0.0, 45.0, 18.0]),
                ("cup", [20.0, 5.0, 28.0, 14.0]),
            ],
        },
    ]
}

/// Positive-area overlap, independent of the library.
pub fn overlaps(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0].max(b[0]) < a[2].min(b[2]) && a[1].max(b[1]) < a[3].min(b[3])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Direct(Option<f64>),
    Rescued,
    Rejected,
}

pub fn verdict(img: usize, s: usize, o: usize) -> Verdict {
    match (img * 7 + s * 3 + o) % 5 {
        0 => Verdict::Direct(Some(0.9)),
        1 => Verdict::Direct(Some(0.7)),
        2 => Verdict::Direct(None),
        3 => Verdict::Rescued,
        _ => Verdict::Rejected,
    }
}

pub fn predicate(img: usize, s: usize, o: usize) -> &'static str {
    PREDICATES[(img + 2 * s + o) % PREDICATES.len()]
}

pub fn raster(img: usize) -> Raster {
    let data = (0..W * H)
        .flat_map(|i| {
            let (x, y) = (i % W, i / W);
            [(x * 5 + img as u32 * 40) as u8, (y * 7) as u8, ((x + y) * 3) as u8 | 1]
        })
        .collect();
    Raster::new(W, H, data).unwrap()
}

fn bbox(b: &[f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3]).unwrap()
}

/// Plain-arithmetic cosine and CLIPScore.
fn clip(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (100.0 * dot / (na * nb)).max(0.0)
}

pub struct Scenario {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub fixtures: FixtureSet,
    /// Per local graph (in generation order): the CLIPScores of its relations.
    pub expected_scores: Vec<Vec<f64>>,
    pub gt_count: usize,
}

impl Scenario {
    /// Dataset ECLIPSE: m* over non-empty graphs, empty graphs count as 0.
    pub fn expected_eclipse(&self, alpha: f64) -> f64 {
        let sizes: Vec<f64> = self
            .expected_scores
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| s.len() as f64)
            .collect();
        let m = sizes.iter().sum::<f64>() / sizes.len() as f64;
        let mu = m - 1.0;
        let total: f64 = self
            .expected_scores
            .iter()
            .map(|s| {
                if s.is_empty() {
                    return 0.0;
                }
                let x = s.len() as f64;
                let p = if x == 1.0 {
                    0.0
                } else {
                    (-alpha * (x + mu * (mu / (x - 1.0)).ln() - m)).exp()
                };
                p * s.iter().sum::<f64>() / x
            })
            .sum();
        total / self.expected_scores.len() as f64
    }

    pub fn out_dir(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Write images, annotations, fixtures and config into `dir`.
pub fn build(dir: &Path) -> Scenario {
    let mut fixtures = FixtureSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut vectors: BTreeMap<Vec<u8>, Vec<f64>> = BTreeMap::new();
    let mut vector_for = |key: Vec<u8>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        vectors
            .entry(key)
            .or_insert_with(|| (0..8).map(|_| rng.gen_range(-0.3..1.0)).collect())
            .clone()
    };
    let mut expected_scores = Vec::new();
    let mut images_json = Vec::new();
    let mut annotations = Vec::new();
    let mut gt_count = 0;

    for (ii, scene) in scenes().iter().enumerate() {
        let r = raster(ii);
        let file = format!("{}.png", scene.id);
        r.save_png(&dir.join(&file)).unwrap();
        let image = ImageRef {
            image_id: scene.id.into(),
            uri: file.clone(),
            width: W,
            height: H,
        };
        images_json.push(json!({"image_id": scene.id, "uri": file, "width": W, "height": H}));
        let detections: Vec<(&str, [f64; 4], f64)> = scene
            .objects
            .iter()
            .enumerate()
            .map(|(k, (l, b))| (*l, *b, 0.9 - 0.1 * k as f64))
            .collect();
        fixtures.detect(&image, None, &detections);

        let mut gts = Vec::new();
        for (si, (sl, sb)) in scene.objects.iter().enumerate() {
            let cands: Vec<usize> = (0..scene.objects.len())
                .filter(|&oi| oi != si && overlaps(sb, &scene.objects[oi].1))
                .collect();
            let mut scores = Vec::new();
            if !cands.is_empty() {
                let labels: Vec<&str> = cands.iter().map(|&oi| scene.objects[oi].0).collect();
                let text = cands
                    .iter()
                    .map(|&oi| format!("({sl}, {}, {})", predicate(ii, si, oi), scene.objects[oi].0))
                    .collect::<Vec<_>>()
                    .join(", ");
                fixtures.complete(&render_thinker_open(sl, &labels).unwrap(), &text);
            }
            for &oi in &cands {
                let (ol, ob) = scene.objects[oi];
                let p = predicate(ii, si, oi);
                let q = render_verify(sl, p, ol).unwrap();
                let v = verdict(ii, si, oi);
                match v {
                    Verdict::Direct(prob) => {
                        fixtures.vqa(&image, &q, "Yes", prob);
                    }
                    Verdict::Rescued | Verdict::Rejected => {
                        fixtures.vqa(&image, &q, "No", Some(0.3));
                        let rationale = format!("the {sl} is close to the {ol}");
                        fixtures.vqa(&image, &render_rationale(sl, ol).unwrap(), &rationale, None);
                        let answer = if v == Verdict::Rescued { "Yes" } else { "No" };
                        fixtures.complete(&render_calibration(&rationale, sl, p, ol).unwrap(), answer);
                    }
                }
                if (si + oi) % 2 == 0 {
                    gts.push(json!({"subject_id": format!("g{si}"), "predicate": p, "object_id": format!("g{oi}")}));
                }
                if v == Verdict::Rejected {
                    continue;
                }
                let png = mask_image(&r, &bbox(sb), &bbox(&ob)).unwrap().encode_png().unwrap();
                let iv = vector_for(png.clone(), &mut rng);
                fixtures.embed(&EmbedInput::Image(png), &iv);
                let caption = triplet_caption(sl, p, ol).unwrap();
                let tv = vector_for(caption.clone().into_bytes(), &mut rng);
                fixtures.embed(&EmbedInput::Text(caption), &tv);
                scores.push((oi, p, clip(&iv, &tv)));
            }
            // graph relations are ordered by (object id, predicate); ids follow detection order
            scores.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            expected_scores.push(scores.into_iter().map(|s| s.2).collect());
        }
        gt_count += gts.len();
        let entities: Vec<Value> = scene
            .objects
            .iter()
            .enumerate()
            .map(|(k, (l, b))| json!({"id": format!("g{k}"), "label": l, "bbox": b}))
            .collect();
        annotations.push(json!({
            "image_id": scene.id, "width": W, "height": H, "uri": file,
            "entities": entities, "triplets": gts,
        }));
    }

    fixtures.save(&dir.join("fixtures.json")).unwrap();
    std::fs::write(
        dir.join("annotations.json"),
        serde_json::to_string_pretty(&annotations).unwrap(),
    )
    .unwrap();
    let config = json!({
        "images": images_json,
        "annotations": "annotations.json",
        "mode": "open",
        "alphas": [0.1, 0.01, 0.001],
        "ks": [10, 20, 50],
        "parallelism": 4,
        "mock_fixtures": "fixtures.json",
    });
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    Scenario {
        dir: dir.to_path_buf(),
        config: config_path,
        fixtures,
        expected_scores,
        gt_count,
    }
}

/// Run the CLI in-process; returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    cli_env(args, &[])
}

pub fn cli_env(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
    let env = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("elegant").chain(args.iter().copied());
    let code = elegant_cli::run_cli(argv, &env, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
