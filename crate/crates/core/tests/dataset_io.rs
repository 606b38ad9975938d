use flowtrace::error::Error;
use flowtrace::forgegen::{allocate_kinds, read_dataset, write_dataset, DatasetSpec, ForgeryKind, KindMix, Split};
use proptest::prelude::*;

fn spec() -> DatasetSpec {
    DatasetSpec { train_count: 10, test_count: 6, ..Default::default() }
}

#[test]
fn written_dataset_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(&spec(), dir.path()).unwrap();
    let read = read_dataset(dir.path()).unwrap();
    assert_eq!(read.spec, spec());
    assert_eq!(read.samples.len(), written.len());
    for (a, b) in written.iter().zip(&read.samples) {
        assert_eq!((&a.id, a.kind, a.split, a.seed), (&b.id, b.kind, b.split, b.seed));
        assert_eq!(a.mask, b.mask);
        let worst = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{}: {worst}", a.id);
    }
    assert_eq!(read.split(Split::Train).len(), 10);
    assert_eq!(read.split(Split::Test).len(), 6);
}

#[test]
fn generation_is_deterministic() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&spec(), d1.path()).unwrap();
    write_dataset(&spec(), d2.path()).unwrap();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> =
            std::fs::read_dir(d1.path().join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            let a = std::fs::read(d1.path().join(sub).join(&n)).unwrap();
            let b = std::fs::read(d2.path().join(sub).join(&n)).unwrap();
            assert_eq!(a, b, "{sub}/{n:?}");
        }
    }
}

#[test]
fn missing_mask_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let samples = write_dataset(&spec(), dir.path()).unwrap();
    let victim = &samples[3].id;
    std::fs::remove_file(dir.path().join("masks").join(format!("{victim}.png"))).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Format { id, .. }) => assert_eq!(&id, victim),
        other => panic!("expected a format error, got {:?}", other.map(|d| d.samples.len())),
    }
}

#[test]
fn missing_manifest_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn default_mix_allocation() {
    assert_eq!(allocate_kinds(100, &KindMix::default()), [40, 30, 20, 10]);
    assert_eq!(allocate_kinds(64, &KindMix::default()), [26, 19, 13, 6]);
}

#[test]
fn authentic_samples_have_empty_masks() {
    let dir = tempfile::tempdir().unwrap();
    let samples = write_dataset(&spec(), dir.path()).unwrap();
    for s in &samples {
        assert_eq!(s.kind == ForgeryKind::Authentic, s.mask.is_empty(), "{}", s.id);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn allocation_sums_and_stays_near_exact(count in 0usize..2000, a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
        let total = a + b + c + 1.0;
        let mix = KindMix { splice: a / total, copymove: b / total, removal: c / total, authentic: 1.0 / total };
        let alloc = allocate_kinds(count, &mix);
        prop_assert_eq!(alloc.iter().sum::<usize>(), count);
        let w = [mix.splice, mix.copymove, mix.removal, mix.authentic];
        for (n, p) in alloc.iter().zip(w) {
            prop_assert!((*n as f64 - p * count as f64).abs() < 1.0 + 1e-6);
        }
    }
}
