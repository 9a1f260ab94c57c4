use std::fs;
use std::path::Path;

use palsim::dataset::{generate_with, regenerate_pair, DatasetSpec, Manifest, Split, MANIFEST_FILE};
use palsim::degrade::PhysicalInfoMap;
use palsim::{seed, ColorState, Execution, Geometry, ImagePlane, OpticalPrescription};
use rand::Rng;

fn compact_prescription() -> OpticalPrescription {
    let fovs: Vec<usize> = (0..101).step_by(10).collect();
    OpticalPrescription::reference().subset(&fovs, &[5, 15, 25]).unwrap()
}

fn write_source(dir: &Path, name: &str, h: usize, w: usize, s: u64) {
    let mut rng = seed::rng(s);
    let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    ImagePlane::new(h, w, 3, data, ColorState::Srgb, Geometry::PerspectiveUnfolded)
        .unwrap()
        .save_png8(&dir.join(name))
        .unwrap();
}

fn spec(src: &Path, out: &Path) -> DatasetSpec {
    let mut s = DatasetSpec::new(src, out, 77);
    s.target_height = 64;
    s.target_width = 128;
    s.n_train_distributions = 1;
    s.n_val_distributions = 1;
    s
}

#[test]
fn small_dataset_contract() {
    let src = tempfile::tempdir().unwrap();
    write_source(src.path(), "a.png", 80, 170, 1);
    write_source(src.path(), "b.png", 64, 128, 2);
    write_source(src.path(), "tiny.png", 20, 40, 3);
    fs::write(src.path().join("notes.txt"), "not an image").unwrap();
    let out = tempfile::tempdir().unwrap();
    let p = compact_prescription();
    let m = generate_with(&spec(src.path(), out.path()), &p, Execution::Parallel).unwrap();

    assert_eq!(m.pair_count(), 4);
    assert!(m.failures.is_empty());
    assert!(m.succeeded());
    assert_eq!(m.skipped.len(), 1);
    assert_eq!(m.skipped[0].file, "tiny.png");
    assert_eq!(m.sources.len(), 2);
    assert_eq!(m.distributions.len(), 2);
    assert_eq!(m.distributions[0].split, Split::Train);
    assert_eq!(m.distributions[1].split, Split::Val);
    assert_ne!(m.distributions[0].seed, m.distributions[1].seed);

    let mut degraded = 0;
    let mut maps = 0;
    for d in &m.distributions {
        assert_eq!(d.strehl.len(), p.fov_samples_deg.len());
        assert!(d.strehl.iter().all(|&s| s > 0.0 && s <= 1.0));
        for pair in &d.pairs {
            let img = ImagePlane::load(&out.path().join(&pair.degraded)).unwrap();
            assert_eq!(img.shape(), (64, 128, 3));
            degraded += 1;
            let phys = PhysicalInfoMap::read(&out.path().join(&pair.phys_raw), &out.path().join(&pair.phys_json)).unwrap();
            assert_eq!(phys.shape(), (64, 128, 3));
            maps += 1;
            assert!(pair.gt.starts_with(&format!("{}/{}/", d.id, d.split.name())));
        }
    }
    assert_eq!((degraded, maps), (4, 4));
    assert!(m.standard_strehl.iter().all(|&s| s > 0.0 && s <= 1.0));
    assert_eq!(Manifest::load(&out.path().join(MANIFEST_FILE)).unwrap(), m);
}

#[test]
fn any_pair_can_be_rebuilt_from_the_manifest() {
    let src = tempfile::tempdir().unwrap();
    write_source(src.path(), "a.png", 70, 140, 4);
    write_source(src.path(), "b.png", 90, 150, 5);
    let out = tempfile::tempdir().unwrap();
    let m = generate_with(&spec(src.path(), out.path()), &compact_prescription(), Execution::Parallel).unwrap();
    let d = &m.distributions[1];
    let pair = &d.pairs[1];
    let r = regenerate_pair(out.path(), &d.id, &pair.pair_id, Execution::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.degraded.image.save_png8(&dir.path().join("d.png")).unwrap();
    r.gt.save_png8(&dir.path().join("g.png")).unwrap();
    let read = |p: &Path| fs::read(p).unwrap();
    assert_eq!(read(&dir.path().join("d.png")), read(&out.path().join(&pair.degraded)));
    assert_eq!(read(&dir.path().join("g.png")), read(&out.path().join(&pair.gt)));
    assert_eq!(
        r.degraded.physical_info.to_f32_bytes(),
        read(&out.path().join(&pair.phys_raw))
    );
    assert!(regenerate_pair(out.path(), "train_09", &pair.pair_id, Execution::Sequential).is_err());
}

#[test]
fn different_master_seeds_differ() {
    let src = tempfile::tempdir().unwrap();
    write_source(src.path(), "a.png", 64, 128, 6);
    let p = compact_prescription();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_with(&spec(src.path(), a.path()), &p, Execution::Parallel).unwrap();
    let mut sb = spec(src.path(), b.path());
    sb.master_seed = 78;
    let mb = generate_with(&sb, &p, Execution::Parallel).unwrap();
    assert_ne!(ma.distributions[0].seed, mb.distributions[0].seed);
    assert_ne!(
        fs::read(a.path().join(&ma.distributions[0].pairs[0].degraded)).unwrap(),
        fs::read(b.path().join(&mb.distributions[0].pairs[0].degraded)).unwrap()
    );
}
