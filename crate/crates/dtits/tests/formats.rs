use dtits::checkpoint::{self, Checkpoint};
use dtits::io;
use dtits_core::aggregate::Raster;
use dtits_core::losses::Mode;
use dtits_core::model::{Model, Stage};
use dtits_core::{Dataset, HyperParams, Mask, PrototypeBank, TimeSeries};
use proptest::prelude::*;

fn dataset(vals: Vec<f32>, masks: Vec<bool>, labels: Option<Vec<usize>>, len: usize, ch: usize) -> Dataset {
    let n = masks.len() / len;
    let series = (0..n)
        .map(|i| TimeSeries::new(len, ch, vals[i * len * ch..(i + 1) * len * ch].iter().map(|&v| v as f64).collect()).unwrap())
        .collect();
    let ms = (0..n).map(|i| Mask::raw(masks[i * len..(i + 1) * len].iter().map(|&b| f64::from(u8::from(b))).collect())).collect();
    Dataset::new(series, ms, labels.map(|l| l[..n].to_vec()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_round_trips(
        len in 2usize..8,
        ch in 1usize..4,
        n in 1usize..6,
        seed in prop::collection::vec(-1e3f32..1e3, 200),
        bits in prop::collection::vec(any::<bool>(), 50),
        labels in prop::option::of(prop::collection::vec(0usize..4, 6)),
        binary in any::<bool>(),
    ) {
        let d = dataset(seed[..n * len * ch].to_vec(), bits[..n * len].to_vec(), labels, len, ch);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if binary { "d.bin" } else { "d.txt" });
        io::write_dataset(&path, &d).unwrap();
        let back = io::read_dataset(&path).unwrap();
        prop_assert_eq!(back.series, d.series);
        prop_assert_eq!(back.masks.iter().map(|m| m.weights().to_vec()).collect::<Vec<_>>(),
            d.masks.iter().map(|m| m.weights().to_vec()).collect::<Vec<_>>());
        prop_assert_eq!(back.labels, d.labels);
    }

    #[test]
    fn raster_round_trips(h in 1usize..7, w in 1usize..7, v in prop::collection::vec(-1i32..9, 49), binary in any::<bool>()) {
        let r = Raster::new(h, w, v[..h * w].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if binary { "r.bin" } else { "r.csv" });
        io::write_raster(&path, &r).unwrap();
        prop_assert_eq!(io::read_label_raster(&path).unwrap(), r);
    }
}

#[test]
fn text_dataset_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.txt");
    std::fs::write(&p, "T=3,C=1,N=1,labeled=0\n1,2\n1,1,1\n").unwrap();
    let e = io::read_dataset(&p).unwrap_err().to_string();
    assert!(e.contains("bad.txt:2:"), "{e}");
}

#[test]
fn predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pred.csv");
    io::write_predictions(&p, &[0, 3, 1]).unwrap();
    assert_eq!(io::read_predictions(&p).unwrap(), vec![0, 3, 1]);
    assert!(std::fs::read_to_string(&p).unwrap().contains("2,4"));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (len, ch, k) = (24, 2, 3);
    let data: Vec<f64> = (0..k * len * ch).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let bank = PrototypeBank::new(k, len, ch, data).unwrap();
    let hp = HyperParams { landmarks: 3, ..HyperParams::default() };
    let mut model = Model::init(bank, &hp, [4, 6, 4], 7).unwrap();
    // a non-zero head so the round trip exercises real transformations
    for (i, v) in model.encoder.head_w.data.iter_mut().enumerate() {
        *v = ((i % 7) as f64 - 3.0) * 0.05;
    }
    let ck = Checkpoint { model, mode: Mode::Unsupervised, stage: Stage::Offset, class_map: Some(vec![1, 0, 1]) };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save(&p, &ck).unwrap();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(back.mode, ck.mode);
    assert_eq!(back.stage, ck.stage);
    assert_eq!(back.class_map, ck.class_map);
    let xs: Vec<TimeSeries> = (0..5)
        .map(|s| TimeSeries::new(len, ch, (0..len * ch).map(|i| ((i + s) as f64 * 0.3).sin()).collect()).unwrap())
        .collect();
    let d = Dataset::new(xs, vec![Mask::full(len); 5], None);
    let a = ck.model.errors(&d, Stage::Offset, 8).unwrap();
    let b = back.model.errors(&d, Stage::Offset, 8).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            // tensors are stored as f32
            assert!((x - y).abs() < 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let bank = PrototypeBank::new(1, 10, 1, vec![0.5; 10]).unwrap();
    let hp = HyperParams { landmarks: 2, ..HyperParams::default() };
    let model = Model::init(bank, &hp, [2, 2, 2], 0).unwrap();
    let ck = Checkpoint { model, mode: Mode::Supervised, stage: Stage::Warp, class_map: None };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save(&p, &ck).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(checkpoint::load(&p).is_err());
}
