use msc_core::eval::{cka, extract_features, fit_probe, ProbeConfig, Task};
use msc_core::objectives::ObjectiveSpec;
use msc_core::saliency::{
    atlas_overlap, crossmodal_links, group_stats, integrated_gradients, postprocess, threshold_and_clusterize, Connectivity,
    DiceTable,
};
use msc_core::synth::{generate_dataset, LatentSpec, VolumePair};
use msc_core::trainer::{pretrain, NullSink, TrainConfig};
use msc_core::{rng_from_seed, Volume};
use rand::Rng as _;

#[test]
fn train_probe_align_and_explain_in_memory() {
    let ds = generate_dataset(&LatentSpec::default(), 20).unwrap();
    let mut cfg = TrainConfig::desk(ObjectiveSpec::parse("XX-CC").unwrap());
    cfg.epochs = 3;
    let mut seen = Vec::new();
    let records = pretrain(&ds.pairs, &ds.split, 0, &cfg, &mut NullSink, &mut |m| seen.push(m.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    let models = records[0].models().unwrap();

    let train: Vec<&VolumePair> = ds.split.train_members(0).into_iter().map(|i| &ds.pairs[i]).collect();
    let val: Vec<&VolumePair> = ds.split.fold_members(0).into_iter().map(|i| &ds.pairs[i]).collect();
    let probe = ProbeConfig { trials: 5, ..Default::default() };
    let mut features = Vec::new();
    for m in 0..2 {
        let tr = extract_features(&models[m], &train, m, Task::TwoWay).unwrap();
        let va = extract_features(&models[m], &val, m, Task::TwoWay).unwrap();
        let r = fit_probe(&tr, &va, None, 2, &probe).unwrap();
        assert!((0.0..=1.0).contains(&r.val_metric));
        features.push(tr);
    }
    let alignment = cka(&features[0].z, &features[1].z, false).unwrap();
    assert!((0.0..=1.0 + 1e-12).contains(&alignment));

    let mask = ds.atlas.brain_mask();
    let maps: Vec<Volume> = train
        .iter()
        .take(4)
        .map(|p| {
            let raw = integrated_gradients(&models[0], &p.volumes[0], None, &[0], 8).unwrap().remove(0);
            postprocess(&raw, &mask, 1.0).unwrap()
        })
        .collect();
    assert!(maps.iter().all(|v| v.data.iter().all(|x| (0.0..=1.0).contains(x))));
}

/// Group B has elevated saliency inside one ROI; the statistics pipeline
/// must recover a cluster there and link it to that ROI.
#[test]
fn planted_group_difference_is_recovered() {
    let ds = generate_dataset(&LatentSpec::default(), 10).unwrap();
    let atlas = &ds.atlas;
    let target = 3u32;
    let mut rng = rng_from_seed(9);
    let mut draw = |shift: f64| {
        let data = atlas.labels.iter().map(|&l| rng.random::<f64>() + if l == target { shift } else { 0.0 }).collect();
        Volume::from_vec(atlas.dims, data).unwrap()
    };
    let a: Vec<Volume> = (0..12).map(|_| draw(0.0)).collect();
    let b: Vec<Volume> = (0..12).map(|_| draw(2.0)).collect();
    let stat = group_stats(&a, &b).unwrap();
    let mut report = threshold_and_clusterize(&stat, 0.025, 20, Connectivity::TwentySix).unwrap();
    assert!(!report.clusters.is_empty());
    let dice = atlas_overlap(&mut report, atlas).unwrap();
    let best = dice.iter().max_by(|x, y| x.1.total_cmp(y.1)).unwrap();
    assert_eq!(*best.0, target);
    assert!(*best.1 > 0.8, "dice {}", best.1);
    // Group A ranks below group B there, so the largest cluster is positive.
    assert_eq!(report.clusters.iter().max_by_key(|c| c.size).unwrap().sign, 1);

    let mut table = DiceTable::default();
    table.dims.insert(0, dice);
    let z = msc_core::Mat::from_rows(&(0..8).map(|i| vec![i as f64, (i * i) as f64]).collect::<Vec<_>>()).unwrap();
    let graph = crossmodal_links(&z, &z, [&table, &table], atlas.n_rois() as u32, 4).unwrap();
    assert!(graph.edges.iter().any(|e| e.roi_m1 == target && e.roi_m2 == target));
}
