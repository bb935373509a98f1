use fedicra::dataset;
use fedicra_core::synthdata::{generate_site, AnnotationType, DomainShift, SiteSpec, Task};

#[test]
fn dump_and_load_preserve_masks_labels_and_boxes() {
    let specs: Vec<SiteSpec> = [AnnotationType::BBox, AnnotationType::Scribble2]
        .iter()
        .enumerate()
        .map(|(k, &annotation)| SiteSpec {
            site_id: k,
            n_train: 3,
            n_test: 2,
            size: 32,
            task: Task::Nested,
            shift: DomainShift::preset(k),
            annotation,
            seed: 11,
        })
        .collect();
    let sites: Vec<_> = specs.iter().map(|s| generate_site(s).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    dataset::dump(dir.path(), &sites).unwrap();
    let back = dataset::load(dir.path(), &specs).unwrap();
    for (a, b) in sites.iter().zip(&back) {
        assert_eq!(a.train.len(), b.train.len());
        assert_eq!(a.test.len(), b.test.len());
        for (x, y) in a.train.iter().chain(&a.test).zip(b.train.iter().chain(&b.test)) {
            assert_eq!(x.index, y.index);
            assert_eq!(x.full_mask, y.full_mask);
            assert_eq!(x.sparse, y.sparse);
            let worst = x.image.data().iter().zip(y.image.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-12, "{}", worst);
        }
    }
}

#[test]
fn unconfigured_site_is_rejected() {
    let spec = SiteSpec {
        site_id: 3,
        n_train: 1,
        n_test: 1,
        size: 16,
        task: Task::Blob,
        shift: DomainShift::default(),
        annotation: AnnotationType::Point,
        seed: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    dataset::dump(dir.path(), &[generate_site(&spec).unwrap()]).unwrap();
    let other = SiteSpec { site_id: 0, ..spec };
    assert!(dataset::load(dir.path(), &[other]).is_err());
}
