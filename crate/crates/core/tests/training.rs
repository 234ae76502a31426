use std::fs;
use std::path::Path;

use filmworld::dataset::{build_dataset, Dataset, DatasetFamily, Source, Split, SplitSpec};
use filmworld::models::{Architecture, FilmConfig, Model, ModelConfig};
use filmworld::tensor::{AdamConfig, Checkpoint};
use filmworld::trainer::{
    accuracy_on, emit_metrics, evaluate, read_curves, run_curriculum, train, CurriculumSpec, Pretrain, TrainData,
    TrainOutput, TrainSchedule, CURVES_CSV, CURVES_SVG,
};

fn dataset(dir: &Path, family: DatasetFamily, seed: u64) -> Dataset {
    let spec = SplitSpec {
        seed,
        ..SplitSpec::sizes(32, 16, 8)
    };
    build_dataset(&Source::Family(family), &spec, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn compact(ds: &Dataset, seed: u64) -> Model {
    Model::build(ModelConfig::Film(FilmConfig::compact()), ds.manifest.vocabulary.len(), 64, seed).unwrap()
}

fn schedule(iterations: u64) -> TrainSchedule {
    TrainSchedule {
        iterations,
        batch_size: 8,
        eval_interval: Some(2),
        ..TrainSchedule::default()
    }
}

fn quiet() -> TrainOutput<'static> {
    TrainOutput {
        run_dir: None,
        config: serde_json::Value::Null,
        on_eval: None,
    }
}

#[test]
fn same_seed_same_trace_and_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("d"), DatasetFamily::Existential, 1);
    let data = TrainData::single(&ds);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut m = compact(&ds, 4);
        let (rec, opt) = train(&mut m, &data, &schedule(6), AdamConfig::default(), None, quiet()).unwrap();
        runs.push((rec.loss_trace, m.to_checkpoint(Some(&opt)).to_bytes()));
    }
    assert_eq!(runs[0].0.len(), 6);
    assert_eq!(runs[0], runs[1]);
    let mut other = compact(&ds, 4);
    let mut s = schedule(6);
    s.seed = 1;
    let (rec, _) = train(&mut other, &data, &s, AdamConfig::default(), None, quiet()).unwrap();
    assert_ne!(rec.loss_trace, runs[0].0);
}

#[test]
fn flipped_labels_complement_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let ds = dataset(&dir, DatasetFamily::Existential, 2);
    let flipped_dir = tmp.path().join("flipped");
    fs::create_dir_all(&flipped_dir).unwrap();
    for f in ["manifest.json", "images.bin"] {
        fs::copy(dir.join(f), flipped_dir.join(f)).unwrap();
    }
    let mut lines = String::new();
    for rec in &ds.records {
        let mut r = rec.clone();
        r.label = 1 - r.label;
        lines += &serde_json::to_string(&r).unwrap();
        lines.push('\n');
    }
    fs::write(flipped_dir.join("records.jsonl"), lines).unwrap();
    let flipped = Dataset::open(&flipped_dir).unwrap();
    for seed in 0..3 {
        let m = compact(&ds, seed);
        for split in Split::ALL {
            let a = evaluate(&m, &ds, split).unwrap();
            let b = evaluate(&m, &flipped, split).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12, "{split}: {a} + {b}");
        }
    }
}

#[test]
fn accuracy_is_weighted_mean_over_a_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("d"), DatasetFamily::Numbers, 3);
    let m = compact(&ds, 0);
    let idx: Vec<usize> = ds.split(Split::Train).iter().map(|r| r.index).collect();
    let whole = accuracy_on(&m, &ds, &idx).unwrap();
    let (a, b) = idx.split_at(11);
    let parts = accuracy_on(&m, &ds, a).unwrap() * a.len() as f64 + accuracy_on(&m, &ds, b).unwrap() * b.len() as f64;
    assert!((whole - parts / idx.len() as f64).abs() < 1e-12);
}

#[test]
fn curriculum_transfers_weights_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let pre = dataset(&tmp.path().join("pre"), DatasetFamily::SimpleSpatial, 4);
    let config = ModelConfig::Film(FilmConfig::compact());
    let out = tmp.path().join("cur");
    let spec = CurriculumSpec {
        config: config.clone(),
        pretrain: Pretrain::Train {
            data: TrainData::single(&pre),
            schedule: schedule(4),
        },
        finetune: TrainData::single(&pre),
        finetune_schedule: schedule(2),
        adam: AdamConfig::default(),
        out_dir: Some(out.clone()),
    };
    let (pre_rec, fine_rec, _) = run_curriculum(spec).unwrap();
    let pre_rec = pre_rec.unwrap();
    // same weights, same data: the finetune run starts where pretraining ended
    assert_eq!(fine_rec.rows[0].val_accuracy, pre_rec.final_accuracy().unwrap());

    // finetuning from the saved checkpoint starts from bit-identical parameters
    let ckpt_path = out.join("pretrain").join("final.ckpt");
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap().to_bytes(), fs::read(&ckpt_path).unwrap());
    let (loaded, _) = Model::from_checkpoint(&ckpt).unwrap();
    let spec = CurriculumSpec {
        config,
        pretrain: Pretrain::Checkpoint(ckpt_path),
        finetune: TrainData::single(&pre),
        finetune_schedule: TrainSchedule {
            iterations: 0,
            ..schedule(0)
        },
        adam: AdamConfig::default(),
        out_dir: None,
    };
    let (none, _, model) = run_curriculum(spec).unwrap();
    assert!(none.is_none());
    for ((na, a), (nb, b)) in loaded.params().iter().zip(model.params()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data(), "{na}");
    }
}

#[test]
fn curriculum_rejects_a_different_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("d"), DatasetFamily::Existential, 5);
    let m = compact(&ds, 0);
    let path = tmp.path().join("m.ckpt");
    m.to_checkpoint(None).save(&path).unwrap();
    let spec = CurriculumSpec {
        config: Architecture::CnnLstm.default_config(),
        pretrain: Pretrain::Checkpoint(path),
        finetune: TrainData::single(&ds),
        finetune_schedule: schedule(1),
        adam: AdamConfig::default(),
        out_dir: None,
    };
    assert!(matches!(run_curriculum(spec), Err(filmworld::Error::ArchitectureMismatch(_))));
}

#[test]
fn metrics_round_trip_through_csv_and_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(&tmp.path().join("d"), DatasetFamily::Existential, 6);
    let mut m = compact(&ds, 0);
    let (rec, _) = train(&mut m, &TrainData::single(&ds), &schedule(4), AdamConfig::default(), None, quiet()).unwrap();
    let out = tmp.path().join("metrics");
    emit_metrics(&rec, &out).unwrap();
    let rows = read_curves(&out.join(CURVES_CSV)).unwrap();
    assert_eq!(rows, rec.rows);
    assert_eq!(rows.len(), 3);
    let svg = fs::read_to_string(out.join(CURVES_SVG)).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let text: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    assert!(text.iter().any(|t| t.contains("iterations")), "{text:?}");
    assert!(text.iter().any(|t| t.contains("accuracy")));
}

#[test]
fn untrained_model_is_near_chance_on_balanced_val() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SplitSpec {
        seed: 9,
        ..SplitSpec::sizes(4, 400, 4)
    };
    let dir = tmp.path().join("d");
    build_dataset(&Source::Family(DatasetFamily::Existential), &spec, &dir).unwrap();
    let ds = Dataset::open(&dir).unwrap();
    let m = compact(&ds, 0);
    let acc = evaluate(&m, &ds, Split::Val).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

#[test]
#[ignore = "about 25 minutes on one core"]
fn loss_falls_on_the_overfit_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let spec = SplitSpec {
        seed: 0,
        ..SplitSpec::sizes(256, 16, 16)
    };
    build_dataset(&Source::Family(DatasetFamily::Existential), &spec, &dir).unwrap();
    let ds = Dataset::open(&dir).unwrap();
    let mut m = compact(&ds, 0);
    let schedule = TrainSchedule {
        iterations: 1000,
        eval_interval: Some(1000),
        eval_sample_size: Some(16),
        ..TrainSchedule::default()
    };
    let (rec, _) = train(&mut m, &TrainData::single(&ds), &schedule, AdamConfig::default(), None, quiet()).unwrap();
    let early = median(rec.loss_trace[..100].to_vec());
    let late = median(rec.loss_trace[900..].to_vec());
    assert!(late < early, "{late} vs {early}");
}
