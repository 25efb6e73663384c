use std::collections::BTreeMap;

use ndarray::Array3;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rfp_core::csi::{write_stream, CsiFrame, Label, StreamHeader};
use rfp_core::nn::{write_model, InputGeometry, ModelSpec, Network};
use rfp_core::pipeline::{
    build_dataset, build_dataset_from_streams, evaluate, train, BuildConfig, Confusion, Dataset, PipelineError,
    Split, TrainConfig,
};
use rfp_core::preprocess::PipelineVariant;
use rfp_core::synth::{gen_scenes, scene_streams, DatasetSpec, SimConfig};

fn small_dataset(scenes: usize, windows: usize, variant: PipelineVariant, seed: u64) -> Dataset {
    let spec = DatasetSpec {
        scenes,
        windows_per_label: windows,
        window_len: 128,
        sim: SimConfig::default(),
    };
    let mut streams = Vec::new();
    for scene in gen_scenes(&spec, seed).unwrap() {
        for s in scene_streams(&scene, &spec).unwrap() {
            streams.push((s.header().clone(), s));
        }
    }
    let cfg = BuildConfig { variant, ..BuildConfig::default() };
    build_dataset_from_streams(streams, &cfg).unwrap()
}

fn frame(i: u64, scale: f64) -> CsiFrame {
    CsiFrame::new(i * 10_000, Array3::from_elem((56, 3, 3), Complex64::new(scale, 0.5 * scale)))
}

#[test]
fn non_overlapping_windows_from_a_long_stream() {
    let header = StreamHeader::new(56, 3, 3, Some(Label::Empty), "d0");
    let frames: Vec<CsiFrame> = (0..12_800).map(|i| frame(i, 1.0 + (i % 7) as f64 * 0.01)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("long.csi");
    write_stream(std::fs::File::create(&path).unwrap(), &header, frames).unwrap();
    let ds = build_dataset(&[path], &BuildConfig::default()).unwrap();
    assert_eq!(ds.len(), 100);
    assert!(ds.rejected.is_empty());
    // Last frames of consecutive windows are exactly one window apart.
    for w in ds.samples.windows(2) {
        assert_eq!(w[1].last_timestamp_us - w[0].last_timestamp_us, 128 * 10_000);
    }
}

#[test]
fn every_window_rejected_is_an_error() {
    let header = StreamHeader::new(56, 3, 3, Some(Label::Motion), "d0");
    let frames: Vec<CsiFrame> = (0..1_280).map(|i| frame(i, if i % 2 == 1 { 0.0 } else { 1.0 })).collect();
    match build_dataset_from_streams(vec![(header, frames)], &BuildConfig::default()) {
        Err(PipelineError::NoValidWindows { rejected }) => assert_eq!(rejected, 10),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unlabeled_stream_is_rejected() {
    let header = StreamHeader::new(56, 3, 3, None, "d0");
    let frames: Vec<CsiFrame> = (0..200).map(|i| frame(i, 1.0)).collect();
    assert!(matches!(
        build_dataset_from_streams(vec![(header, frames)], &BuildConfig::default()),
        Err(PipelineError::MissingLabel(_))
    ));
}

#[test]
fn split_errors() {
    let ds = small_dataset(3, 2, PipelineVariant::WithDft, 1);
    let d = ds.days.clone();
    assert!(matches!(
        Split::by_days(&ds, &d[..2], &d[1..], 0.0, 1),
        Err(PipelineError::DayOverlap(_))
    ));
    assert!(matches!(
        Split::by_days(&ds, &["nope".to_string()], &d[..1], 0.0, 1),
        Err(PipelineError::UnknownDay(_))
    ));
    assert!(Split::by_days(&ds, &d[..1], &d[1..], 1.0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_never_share_days(mask in prop::collection::vec(0u8..3, 4), val in 0.0f64..0.9, seed in any::<u64>()) {
        let ds = synthetic_index_dataset(4, 5);
        let pick = |want: u8| -> Vec<String> {
            ds.days.iter().zip(&mask).filter(|(_, &m)| m == want).map(|(d, _)| d.clone()).collect()
        };
        let split = Split::by_days(&ds, &pick(0), &pick(1), val, seed).unwrap();
        let mut train_side = Split::days_of(&ds, &split.train);
        train_side.extend(Split::days_of(&ds, &split.val));
        let test_side = Split::days_of(&ds, &split.test);
        prop_assert!(train_side.is_disjoint(&test_side));
        prop_assert!(!train_side.iter().any(|d| pick(1).iter().any(|t| t == d)));
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), split.train.len() + split.val.len());
    }
}

/// Tiny dataset with constant samples, for bookkeeping tests only.
fn synthetic_index_dataset(days: usize, per_day: usize) -> Dataset {
    let mut ds = Dataset::empty(PipelineVariant::WithDft);
    let input = rfp_core::preprocess::ModelInput {
        tensors: vec![Array3::zeros((50, 14, 9)), Array3::zeros((50, 14, 6))],
    };
    for d in 0..days {
        for i in 0..per_day {
            let label = if i % 2 == 0 { Label::Empty } else { Label::Motion };
            ds.push(&input, label, &format!("day-{d}"), i as u64).unwrap();
        }
    }
    ds
}

#[test]
fn single_class_training_set_is_rejected() {
    let mut ds = synthetic_index_dataset(2, 4);
    for s in &mut ds.samples {
        s.label = Label::Empty;
    }
    let split = Split::by_days(&ds, &ds.days[..1], &ds.days[1..], 0.0, 1).unwrap();
    let spec = ModelSpec::reference(PipelineVariant::WithDft, InputGeometry::default());
    assert!(matches!(
        train(&ds, &split, spec, &TrainConfig::default()),
        Err(PipelineError::SingleClassTrainingSet { empty: 4, motion: 0 })
    ));
}

#[test]
fn evaluation_matches_recount_and_ignores_order() {
    let ds = small_dataset(2, 6, PipelineVariant::WithDft, 3);
    let net = Network::new(ModelSpec::reference(PipelineVariant::WithDft, InputGeometry::default()), 5).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let ev = evaluate(&net, &ds, &idx).unwrap();

    let mut by_day: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for o in &ev.outputs {
        let day = ds.days[ds.samples[o.index].day].clone();
        let slot = match (o.label, o.prob_motion > 0.5) {
            (Label::Motion, true) => 0,
            (Label::Empty, true) => 1,
            (Label::Empty, false) => 2,
            (Label::Motion, false) => 3,
        };
        by_day.entry(day).or_default()[slot] += 1;
    }
    assert_eq!(ev.per_day.len(), by_day.len());
    for d in &ev.per_day {
        let c = by_day[&d.day];
        assert_eq!([d.confusion.tp, d.confusion.fp, d.confusion.tn, d.confusion.fn_], c);
    }
    assert_eq!(ev.overall.total(), ds.len());

    let mut shuffled = idx.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let ev2 = evaluate(&net, &ds, &shuffled).unwrap();
    assert_eq!(ev2.overall, ev.overall);
    assert_eq!(ev2.per_day, ev.per_day);
}

#[test]
fn constant_empty_predictor_metrics() {
    let ds = small_dataset(1, 4, PipelineVariant::WithDft, 4);
    let mut net = Network::new(ModelSpec::reference(PipelineVariant::WithDft, InputGeometry::default()), 1).unwrap();
    let mut params = net.params_mut();
    let n = params.len();
    params[n - 2].value.fill(0.0);
    params[n - 1].value.data_mut().copy_from_slice(&[5.0, -5.0]);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let c = evaluate(&net, &ds, &idx).unwrap().overall;
    assert_eq!(ds.class_counts(&idx), [4, 4]);
    assert_eq!((c.accuracy(), c.fpr(), c.fnr()), (0.5, 0.0, 1.0));

    let mut perfect = Confusion::default();
    for l in [Label::Empty, Label::Motion, Label::Motion] {
        perfect.record(l, l);
    }
    assert_eq!(perfect.accuracy(), 1.0);
}

#[test]
fn subsample_and_concat() {
    let a = synthetic_index_dataset(2, 6);
    let b = synthetic_index_dataset(3, 4);
    let joined = a.clone().concat(b).unwrap();
    assert_eq!(joined.len(), 24);
    assert_eq!(joined.days.len(), 3);
    let s1 = joined.subsample(10, 7);
    let s2 = joined.subsample(10, 7);
    let s3 = joined.subsample(10, 8);
    assert_eq!(s1.len(), 10);
    assert_eq!(s1.samples, s2.samples);
    let ids = |d: &Dataset| -> Vec<(String, u64)> {
        d.samples.iter().map(|s| (d.days[s.day].clone(), s.last_timestamp_us)).collect()
    };
    assert_ne!(ids(&s1), ids(&s3));
    assert!(matches!(
        a.concat(Dataset::empty(PipelineVariant::NoDft)),
        Err(PipelineError::VariantMismatch { .. })
    ));
}

#[test]
fn training_is_bit_reproducible() {
    let ds = small_dataset(2, 8, PipelineVariant::WithDft, 5);
    let split = Split::by_days(&ds, &ds.days[..1], &ds.days[1..], 0.25, 2).unwrap();
    let spec = ModelSpec::reference(PipelineVariant::WithDft, InputGeometry::default());
    let cfg = TrainConfig {
        epochs: 2,
        batch: 4,
        ..TrainConfig::default()
    };
    let bytes = |seed: u64| {
        let (net, report) = train(&ds, &split, spec.clone(), &TrainConfig { seed, ..cfg }).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert_eq!(report.test_overall.unwrap().total(), split.test.len());
        let mut out = Vec::new();
        write_model(&mut out, &net, "m").unwrap();
        out
    };
    let first = bytes(11);
    assert_eq!(first, bytes(11));
    assert_ne!(first, bytes(12));
}
