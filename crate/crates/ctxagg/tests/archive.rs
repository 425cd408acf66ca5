use ctxagg::archive;
use ctxagg::config::RunConfig;
use ctxagg_core::toy::{train, ToyDetector};
use ctxagg_core::ParamStore;

#[test]
fn trained_checkpoint_round_trips_bit_exactly() {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.toy.train.iterations = 1;
    let done = train(&cfg.toy, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    archive::save(dir.path(), &done.store, &cfg).unwrap();

    let manifest = archive::load_manifest(dir.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.scalars, done.store.numel());

    let mut fresh = ParamStore::new(99);
    ToyDetector::new(&mut fresh, &manifest.config.toy).unwrap();
    archive::load_params(dir.path(), &mut fresh).unwrap();
    for ((_, a), (_, b)) in done.store.iter().zip(fresh.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |p: &ctxagg_core::param::Parameter| {
            p.value
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }
}

#[test]
fn checkpoint_for_another_model_is_rejected() {
    let cfg = RunConfig::default();
    let mut store = ParamStore::new(0);
    ToyDetector::new(&mut store, &cfg.toy).unwrap();
    let dir = tempfile::tempdir().unwrap();
    archive::save(dir.path(), &store, &cfg).unwrap();

    let mut other = cfg.toy.clone();
    other.modules.scp = false;
    let mut smaller = ParamStore::new(0);
    ToyDetector::new(&mut smaller, &other).unwrap();
    assert!(archive::load_params(dir.path(), &mut smaller).is_err());
}

#[test]
fn atomic_write_leaves_no_temp_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/file.txt");
    archive::write_atomic(&path, b"one").unwrap();
    archive::write_atomic(&path, b"two").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"two");
    assert_eq!(
        std::fs::read_dir(dir.path().join("nested"))
            .unwrap()
            .count(),
        1
    );
}
