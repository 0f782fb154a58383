use cdnet::data::{list_ids, load_dir, synthetic, Sample};
use cdnet::synth::{Building, Presence, Scene, SyntheticSpec};

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["A", "B", "label"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn generation_is_byte_identical() {
    let spec = SyntheticSpec::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ids = spec.write(a.path(), 3, 4).unwrap();
    spec.write(b.path(), 3, 4).unwrap();
    assert_eq!(ids, vec!["00003", "00004", "00005", "00006"]);
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(spec.generate(5), spec.generate(5));
    assert_ne!(spec.generate(5), spec.generate(6));
}

#[test]
fn no_buildings_means_no_change() {
    let spec = SyntheticSpec { buildings: [0, 0], ..SyntheticSpec::default() };
    for i in 0..10 {
        assert!(spec.generate(i).label.iter().all(|&v| v == 0));
    }
}

#[test]
fn label_is_the_raster_of_a_new_building() {
    let spec = SyntheticSpec::default();
    let b = Building { x: 10, y: 20, w: 7, h: 5, color: [0.9, 0.8, 0.7], presence: Presence::OnlyB };
    let scene = Scene { buildings: vec![b], gamma: [1.0, 0.8], shift: [1, -1], index: 0 };
    let pair = spec.render(&scene);
    for y in 0..64 {
        for x in 0..64 {
            let inside = (10..17).contains(&x) && (20..25).contains(&y);
            assert_eq!(pair.label[y * 64 + x], if inside { 255 } else { 0 }, "({x},{y})");
        }
    }
}

#[test]
fn label_is_the_symmetric_difference_of_footprints() {
    let spec = SyntheticSpec::default();
    for i in 0..20 {
        let scene = spec.scene(i);
        let pair = spec.render(&scene);
        for y in 0..64 {
            for x in 0..64 {
                let inside = |b: &Building| (b.x..b.x + b.w).contains(&x) && (b.y..b.y + b.h).contains(&y);
                let in_a = scene.buildings.iter().any(|b| b.presence != Presence::OnlyB && inside(b));
                let in_b = scene.buildings.iter().any(|b| b.presence != Presence::OnlyA && inside(b));
                assert_eq!(pair.label[y * 64 + x] == 255, in_a != in_b);
            }
        }
    }
}

#[test]
fn nuisance_draws_stay_in_range() {
    let spec = SyntheticSpec::default();
    for i in 0..50 {
        let s = spec.scene(i);
        assert!((2..=6).contains(&s.buildings.len()));
        assert!(s.gamma.iter().all(|g| (0.7..=1.3).contains(g)));
        assert!(s.shift.iter().all(|d| d.abs() <= 1));
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let base = SyntheticSpec::default();
    assert!(SyntheticSpec { buildings: [3, 1], ..base.clone() }.validate().is_err());
    assert!(SyntheticSpec { gamma: [0.0, 1.0], ..base.clone() }.validate().is_err());
    assert!(SyntheticSpec { jitter: 2, ..base.clone() }.validate().is_err());
    assert!(SyntheticSpec { size: 4, ..base }.validate().is_err());
}

#[test]
fn written_pairs_load_back_exactly() {
    let spec = SyntheticSpec::default();
    let dir = tempfile::tempdir().unwrap();
    spec.write(dir.path(), 0, 3).unwrap();
    assert_eq!(list_ids(dir.path()).unwrap(), vec!["00000", "00001", "00002"]);
    assert_eq!(load_dir(dir.path()).unwrap(), synthetic(&spec, 0, 3));
}

#[test]
fn malformed_labels_name_the_file() {
    let spec = SyntheticSpec::default();
    let dir = tempfile::tempdir().unwrap();
    spec.write(dir.path(), 0, 1).unwrap();
    let label = dir.path().join("label/00000.png");
    image::GrayImage::from_pixel(64, 64, image::Luma([7])).save(&label).unwrap();
    let err = Sample::load(dir.path(), "00000").unwrap_err().to_string();
    assert!(err.contains("00000.png") && err.contains("neither 0 nor 255"), "{err}");
    image::GrayImage::new(32, 64).save(&label).unwrap();
    assert!(Sample::load(dir.path(), "00000").unwrap_err().to_string().contains("label"));
}
