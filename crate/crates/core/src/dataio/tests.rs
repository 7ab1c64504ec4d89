use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::geometry::{hausdorff, iou, rasterize, Point};
use crate::losses::PerceptualExtractor;

fn small(count: usize, seed: u64) -> SynthConfig {
    SynthConfig { count, size: 48, n_vertices: 32, seed, ..SynthConfig::default() }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate_synthetic(&small(4, 3)).unwrap();
    let b = generate_synthetic(&small(4, 3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_synthetic(&small(4, 4)).unwrap());
    assert_eq!(a.ids().collect::<Vec<_>>(), ["img_000", "img_001", "img_002", "img_003"]);
}

#[test]
fn noiseless_interior_is_exact() {
    let cfg = SynthConfig { noise: 0.0, ..small(3, 5) };
    let ds = generate_synthetic(&cfg).unwrap();
    for s in ds.samples() {
        let gt = ds.ground_truth(&s.id).unwrap();
        let c = gt.centroid();
        let v = s.image.get(c.x.round() as usize, c.y.round() as usize);
        assert_eq!(v, 0.25);
        assert_eq!(s.image.get(0, 0), 0.75);
    }
}

#[test]
fn rendered_mask_agrees_with_ground_truth() {
    let ds = generate_synthetic(&SynthConfig { noise: 0.0, ..SynthConfig { count: 12, ..SynthConfig::default() } }).unwrap();
    for s in ds.samples() {
        let gt = ds.ground_truth(&s.id).unwrap();
        assert!(gt.is_simple());
        let rendered = crate::geometry::Mask {
            width: s.image.width,
            height: s.image.height,
            bits: s.image.pixels.iter().map(|&v| v < 0.5).collect(),
        };
        let truth = rasterize(gt, s.image.width, s.image.height).unwrap();
        assert!(iou(&rendered, &truth).unwrap() > 0.98, "{}", s.id);
    }
}

#[test]
fn save_load_round_trip() {
    let mut ds = generate_synthetic(&small(3, 9)).unwrap();
    ds.set_exemplar("img_001").unwrap();
    let c = PartialCorrection::new(
        "img_002",
        Author::Human,
        Contour::open(vec![Point::new(1.25, 2.5), Point::new(3.0, 4.125), Point::new(0.1, 0.2)]),
    );
    ds.add_corrections("img_002", vec![c]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let mut back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.root.as_deref(), Some(dir.path()));
    back.root = None;
    assert_eq!(back, ds);
}

#[test]
fn load_without_labels() {
    let ds = generate_synthetic(&small(2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    std::fs::remove_dir_all(dir.path().join("labels")).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.labeled_ids().count(), 0);
    assert!(back.training_view().is_err());
}

#[test]
fn quarantine_keeps_only_the_exemplar() {
    let mut ds = generate_synthetic(&small(4, 2)).unwrap();
    ds.set_exemplar("img_002").unwrap();
    let view = ds.training_view().unwrap();
    assert_eq!(view.exemplar_id, "img_002");
    assert_eq!(view.exemplar, ds.ground_truth("img_002").unwrap());
    ds.quarantine();
    assert_eq!(ds.labeled_ids().collect::<Vec<_>>(), ["img_002"]);
}

#[test]
fn load_rejects_bad_inputs() {
    let ds = generate_synthetic(&small(2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    std::fs::write(dir.path().join("labels/ghost.contour.json"), r#"{"closed":true,"points":[[0,0],[1,0],[0,1]]}"#).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
    std::fs::remove_file(dir.path().join("labels/ghost.contour.json")).unwrap();
    std::fs::write(dir.path().join("corrections/img_000.corrections.json"), r#"{"image":"img_000","segments":[{"author":"human","points":[[1,1]]}]}"#).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("segments[0].points"), "{err}");
    std::fs::remove_file(dir.path().join("corrections/img_000.corrections.json")).unwrap();
    std::fs::copy(dir.path().join("images/img_000.pgm"), dir.path().join("images/img_000.png")).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn corrections_json_schema() {
    let text = r#"{"image":"a","segments":[{"author":"human","points":[[1.5,2.0],[3.0,4.0]]},{"author":"simulated","points":[[0.0,0.0],[1.0,0.0],[0.0,1.0]],"closed":true,"timestamp":17}]}"#;
    let f: CorrectionsFile = serde_json::from_str(text).unwrap();
    f.validate().unwrap();
    let cs = f.clone().into_corrections();
    assert!(!cs[0].is_full_label() && cs[1].is_full_label());
    assert_eq!(serde_json::to_string(&CorrectionsFile::from_corrections("a", &cs)).unwrap(), text);
    let bad: CorrectionsFile = serde_json::from_str(r#"{"image":"a","segments":[{"author":"human","points":[[1,2],[1e999,0]]}]}"#).unwrap_or(CorrectionsFile { image: "a".into(), segments: vec![] });
    assert!(bad.validate().is_err());
}

fn descriptor_sums(ds: &Dataset, ex: &PerceptualExtractor) -> Vec<(String, f64)> {
    let d: Vec<Vec<f64>> = ds.samples().iter().map(|s| global_descriptor(ex, &s.image).unwrap()).collect();
    ds.samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let total = (0..d.len())
                .map(|j| d[i].iter().zip(&d[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .sum();
            (s.id.clone(), total)
        })
        .collect()
}

#[test]
fn exemplar_selection_matches_brute_force() {
    let ds = generate_synthetic(&small(10, 11)).unwrap();
    let ex = PerceptualExtractor::default_bank();
    let sums = descriptor_sums(&ds, &ex);
    let want = sums.iter().min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))).unwrap().0.clone();
    assert_eq!(select_exemplar(&ds, &ex).unwrap(), want);
}

#[test]
fn exemplar_selection_tie_and_duplicate_rules() {
    let ds = generate_synthetic(&small(2, 12)).unwrap();
    let ex = PerceptualExtractor::default_bank();
    assert_eq!(select_exemplar(&ds, &ex).unwrap(), "img_000");

    let base = generate_synthetic(&small(3, 13)).unwrap();
    let mut samples = base.samples().to_vec();
    let mut dup = samples[2].clone();
    dup.id = "zz_copy".into();
    samples.push(dup);
    let ds = Dataset::new(base.meta.clone(), samples, BTreeMap::new()).unwrap();
    let picked = select_exemplar(&ds, &ex).unwrap();
    let sums = descriptor_sums(&ds, &ex);
    let min = sums.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    assert_eq!(sums.iter().find(|s| s.0 == picked).unwrap().1, min);

    let one = generate_synthetic(&small(2, 1)).unwrap();
    let single = Dataset::new(one.meta.clone(), one.samples()[..1].to_vec(), BTreeMap::new()).unwrap();
    assert!(select_exemplar(&single, &ex).is_err());
}

fn shifted(c: &Contour, dx: f64) -> Contour {
    c.translate(Point::new(dx, 0.0))
}

#[test]
fn simulated_corrections_pick_the_worst() {
    let ds = generate_synthetic(&small(10, 14)).unwrap();
    let gt: BTreeMap<String, Contour> = ds.ids().map(|id| (id.to_string(), ds.ground_truth(id).unwrap().clone())).collect();
    let preds: BTreeMap<String, Contour> =
        gt.iter().enumerate().map(|(i, (id, c))| (id.clone(), shifted(c, [0.5, 7.0, 1.0, 3.0, 9.0, 0.0, 2.0, 8.0, 4.0, 6.0][i]))).collect();
    let out = simulate_corrections(&preds, &gt, 0.25, CorrectionMode::Full, DEFAULT_TAU).unwrap();
    let ids: Vec<&str> = out.iter().map(|c| c.image.as_str()).collect();
    let mut manual: Vec<(&String, f64)> = preds.iter().map(|(id, p)| (id, hausdorff(p, &gt[id]))).collect();
    manual.sort_by(|a, b| b.1.total_cmp(&a.1));
    assert_eq!(ids, manual[..3].iter().map(|m| m.0.as_str()).collect::<Vec<_>>());
    assert_eq!(ids, ["img_004", "img_007", "img_001"]);
    assert!(out.iter().all(|c| c.is_full_label() && c.contour == gt[&c.image]));

    assert!(simulate_corrections(&preds, &gt, 0.0, CorrectionMode::Full, 3.0).unwrap().is_empty());
    assert_eq!(simulate_corrections(&preds, &gt, 1.0, CorrectionMode::Full, 3.0).unwrap().len(), 10);
    assert!(simulate_corrections(&gt, &gt, 1.0, CorrectionMode::Partial, 3.0).unwrap().is_empty());
    let mut missing = preds.clone();
    missing.remove("img_000");
    assert!(simulate_corrections(&missing, &gt, 1.0, CorrectionMode::Full, 3.0).is_err());
}

#[test]
fn partial_corrections_cover_the_bad_arc() {
    let ds = generate_synthetic(&small(2, 15)).unwrap();
    let truth = ds.ground_truth("img_000").unwrap().clone();
    let mut pred = truth.clone();
    for i in 10..16 {
        let c = truth.centroid();
        pred.vertices[i] = c + (truth.vertices[i] - c) * 0.6;
    }
    let gt = BTreeMap::from([("img_000".to_string(), truth.clone())]);
    let preds = BTreeMap::from([("img_000".to_string(), pred)]);
    let out = simulate_corrections(&preds, &gt, 1.0, CorrectionMode::Partial, 3.0).unwrap();
    assert_eq!(out.len(), 1);
    let seg = &out[0].contour;
    assert!(!seg.closed && seg.len() >= 3);
    assert!(seg.vertices.iter().all(|p| truth.vertices.contains(p)));
    assert!(seg.vertices.contains(&truth.vertices[12]));
    assert!(!seg.vertices.contains(&truth.vertices[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_contours_are_simple(seed in 0u64..10_000) {
        let (_, c) = render_blob(&SynthConfig { seed, ..SynthConfig::default() }, seed % 7).unwrap();
        prop_assert!(c.is_simple());
        prop_assert!(c.signed_area() > 0.0);
    }

    #[test]
    fn exemplar_choice_ignores_input_order(seed in 0u64..50, rot in 0usize..5) {
        let ds = generate_synthetic(&small(5, seed)).unwrap();
        let mut samples = ds.samples().to_vec();
        samples.rotate_left(rot);
        let shuffled = Dataset::new(ds.meta.clone(), samples, BTreeMap::new()).unwrap();
        let ex = PerceptualExtractor::default_bank();
        prop_assert_eq!(select_exemplar(&ds, &ex).unwrap(), select_exemplar(&shuffled, &ex).unwrap());
    }
}

#[test]
fn append_creates_then_extends_corrections_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img_000.corrections.json");
    let seg = |x: f64| Segment {
        author: Author::Human,
        points: vec![Point::new(x, 1.0), Point::new(x + 1.0, 2.0)],
        closed: false,
        timestamp: Some(7),
    };
    let first = CorrectionsFile::append(&path, "img_000", vec![seg(0.0)]).unwrap();
    assert_eq!(first.segments.len(), 1);
    let second = CorrectionsFile::append(&path, "img_000", vec![seg(5.0)]).unwrap();
    assert_eq!(second.segments, vec![seg(0.0), seg(5.0)]);
    assert_eq!(CorrectionsFile::read(&path).unwrap(), second);
    assert!(CorrectionsFile::append(&path, "img_001", vec![seg(1.0)]).is_err());
    let bad = Segment { points: vec![Point::new(0.0, 0.0)], ..seg(0.0) };
    assert!(CorrectionsFile::append(&path, "img_000", vec![bad]).is_err());
    assert_eq!(CorrectionsFile::read(&path).unwrap(), second);
}
