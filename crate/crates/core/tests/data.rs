use awb_core::data::{generate_dataset, Dataset, DomainTransform, Split, SyntheticDomainSpec, MANIFEST_FILE};
use awb_core::AwbError;
use awb_tensor::RngStream;

fn spec(name: &str, transform: DomainTransform) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        name: name.into(),
        n_identities: 12,
        views_per_identity: 10,
        height: 64,
        width: 32,
        transform,
        identity_seed: 5,
        train_fraction: 0.6,
        query_fraction: 0.2,
    }
}

fn shifted() -> DomainTransform {
    DomainTransform { color_shift: [0.12, -0.04, -0.12], blur_radius: 1, texture_seed: 29 }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&spec("target", shifted()), 0).unwrap();
    let b = generate_dataset(&spec("target", shifted()), 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 120);
    assert!(a.pixels.iter().all(|p| p.len() == 3 * 64 * 32));
}

#[test]
fn zero_transform_domains_coincide() {
    let a = generate_dataset(&spec("source", DomainTransform::default()), 0).unwrap();
    let b = generate_dataset(&spec("target", DomainTransform::default()), 0).unwrap();
    assert_eq!(a.pixels, b.pixels);
    let c = generate_dataset(&spec("target", shifted()), 0).unwrap();
    assert_ne!(a.pixels, c.pixels);
}

fn distance(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn identities_are_separable() {
    let ds = generate_dataset(&spec("source", shifted()), 0).unwrap();
    let by_id = |id: usize| -> Vec<usize> { (0..ds.len()).filter(|&i| ds.records[i].identity == id).collect() };
    let mut rng = RngStream::new(61, 0);
    let (mut inter, mut intra) = (0.0, 0.0);
    for _ in 0..100 {
        let a = rng.uniform_int(0, 11);
        let b = (a + 1 + rng.uniform_int(0, 10)) % 12;
        let (va, vb) = (by_id(a), by_id(b));
        let (i, j) = (va[rng.uniform_int(0, 9)], vb[rng.uniform_int(0, 9)]);
        inter += distance(&ds.pixels[i], &ds.pixels[j]);
        let (p, q) = (va[rng.uniform_int(0, 9)], va[rng.uniform_int(0, 9)]);
        intra += distance(&ds.pixels[p], &ds.pixels[q]);
    }
    assert!(inter > intra, "inter {inter} vs intra {intra}");
}

#[test]
fn query_and_gallery_share_identities_but_not_images() {
    let ds = generate_dataset(&spec("target", shifted()), 100).unwrap();
    let q = ds.select("target", &[Split::Query]);
    let g = ds.select("target", &[Split::Gallery]);
    assert!(q.iter().all(|i| !g.contains(i)));
    let mut qi = ds.identities(&q);
    let mut gi = ds.identities(&g);
    qi.sort();
    qi.dedup();
    gi.sort();
    gi.dedup();
    assert_eq!(qi, gi);
    assert_eq!(ds.records[0].image_id, 100);
    assert_eq!((q.len(), g.len()), (24, 24));
}

#[test]
fn write_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = generate_dataset(&spec("source", DomainTransform::default()), 0).unwrap();
    ds.extend(generate_dataset(&spec("target", shifted()), ds.len()).unwrap()).unwrap();
    ds.write(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let first: Vec<&str> = manifest.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 5);
    assert_eq!(first[2], "source");
    let back = Dataset::load(dir.path(), 64, 32).unwrap();
    assert_eq!(back, ds);
    assert!(matches!(Dataset::load(dir.path(), 32, 32), Err(AwbError::Data(_))));
    std::fs::write(dir.path().join(MANIFEST_FILE), "0\t1\tsource\ttrain\n").unwrap();
    assert!(matches!(Dataset::load(dir.path(), 64, 32), Err(AwbError::Data(_))));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec("source", DomainTransform::default());
    s.n_identities = 1;
    assert!(generate_dataset(&s, 0).is_err());
    let mut s = spec("two words", DomainTransform::default());
    s.n_identities = 3;
    assert!(generate_dataset(&s, 0).is_err());
}
