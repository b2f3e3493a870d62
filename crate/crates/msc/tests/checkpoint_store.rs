use std::fs;

use msc::checkpoint::{load_checkpoint, CheckpointStore};
use msc::Error;
use msc_core::model::{EncoderSpec, GlobalHeadSpec, Model, ModelSpec};
use msc_core::objectives::ObjectiveSpec;
use msc_core::trainer::CheckpointRecord;

fn record(epoch: usize, loss: f64) -> CheckpointRecord {
    let obj = ObjectiveSpec::parse("CR").unwrap();
    let enc = EncoderSpec { input_side: 8, channels: vec![2, 3, 4], local_layer: 2, repr_dim: 4, leaky_slope: 0.2 };
    let spec = ModelSpec::for_objective(&enc, &obj, GlobalHeadSpec::Linear, 3, None);
    let params = [Model::build(&spec, 2 * epoch as u64).unwrap().params, Model::build(&spec, 2 * epoch as u64 + 1).unwrap().params];
    CheckpointRecord { epoch, validation_loss: loss, train_loss: -loss, params, model_spec: spec, objective: obj }
}

#[test]
fn twelve_saves_keep_the_ten_lowest() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = CheckpointStore::open(dir.path(), 10).unwrap();
    let losses = [0.9, 0.3, 1.2, 0.1, 0.5, 0.7, 1.1, 0.2, 0.8, 0.4, 1.0, 0.6];
    for (i, &l) in losses.iter().enumerate() {
        store.save(&record(i + 1, l)).unwrap();
        assert!(store.ids().len() <= 10);
    }
    let mut expected: Vec<(f64, usize)> = losses.iter().enumerate().map(|(i, &l)| (l, i + 1)).collect();
    expected.sort_by(|a, b| a.0.total_cmp(&b.0));
    let expected_ids: Vec<usize> = expected[..10].iter().map(|&(_, id)| id).collect();
    assert_eq!(store.ids(), expected_ids);
    let files = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ckpt").count();
    assert_eq!(files, 10);
    assert!(!dir.path().join("003.ckpt").exists() && !dir.path().join("007.ckpt").exists());

    // Reopening rebuilds the same ranking from the files.
    let reopened = CheckpointStore::open(dir.path(), 10).unwrap();
    assert_eq!(reopened.ids(), expected_ids);
    assert_eq!(reopened.load(4).unwrap(), record(4, 0.1));
}

#[test]
fn corrupted_file_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = CheckpointStore::open(dir.path(), 3).unwrap();
    store.save(&record(5, 0.25)).unwrap();
    let path = store.path_of(5);
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Integrity { .. })));
    assert!(CheckpointStore::open(dir.path(), 3).is_err());
}

#[test]
fn loading_an_evicted_id_names_the_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = CheckpointStore::open(dir.path(), 1).unwrap();
    store.save(&record(1, 0.5)).unwrap();
    store.save(&record(2, 0.4)).unwrap();
    assert_eq!(store.ids(), vec![2]);
    assert!(matches!(store.load(1), Err(Error::Missing { .. })));
}
