//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 6 train for hours and only run with `FILMWORLD_NIGHTLY=1`;
//! otherwise they print SKIP. `FILMWORLD_ACCEPT=1,3` restricts the run to
//! the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use filmworld::dataset::{
    build_dataset, has_withheld_feature, verify_loaded, Dataset, DatasetFamily, MixSpec, Source, Split, SplitSpec,
};
use filmworld::models::{FilmConfig, Model, ModelConfig};
use filmworld::tensor::{gradcheck, AdamConfig};
use filmworld::trainer::{
    accuracy_on, run_curriculum, standard_eval_points, train, CurriculumSpec, Mixer, Pretrain, TrainData, TrainOutput,
    TrainSchedule, Trainer, LOSS_TRACE_TXT,
};
use filmworld::worldgen::{ColorName, ShapeKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn criterion_1() -> Outcome {
    let r = common::oracle::run(1, 20_000);
    let detail = format!(
        "{} scenes, {} captions, {} pairs, {} mismatches",
        r.scenes, r.captions, r.pairs, r.mismatches
    );
    match r.first {
        Some(first) => Outcome::Fail(format!("{detail}; first: {first}")),
        None => check(r.mismatches == 0, detail),
    }
}

fn criterion_2(tmp: &Path) -> Outcome {
    let spec = SplitSpec {
        seed: 7,
        ..SplitSpec::sizes(10_000, 1_000, 1_000)
    };
    let dir = tmp.join("c2");
    if let Err(e) = build_dataset(&Source::Family(DatasetFamily::Existential), &spec, &dir) {
        return Outcome::Fail(e.to_string());
    }
    let ds = Dataset::open(&dir).expect("open");
    let mut notes = Vec::new();
    let mut ok = true;
    for split in Split::ALL {
        let recs = ds.split(split);
        let pos = recs.iter().filter(|r| r.label == 1).count() as i64;
        let gap = (2 * pos - recs.len() as i64).abs();
        ok &= gap <= 1 && recs.len() == spec.size(split);
        notes.push(format!("{split} |T-F|={gap}"));
    }
    let listed = [
        (ShapeKind::Square, ColorName::Red),
        (ShapeKind::Triangle, ColorName::Green),
    ];
    ok &= listed.iter().all(|c| spec.withheld_combos.contains(c));
    let leaked = ds
        .split(Split::Train)
        .iter()
        .chain(ds.split(Split::Val))
        .filter(|r| r.withheld || has_withheld_feature(&r.scene, &spec))
        .count();
    ok &= leaked == 0;
    let test = ds.split(Split::Test);
    let rate = test.iter().filter(|r| has_withheld_feature(&r.scene, &spec)).count() as f64 / test.len() as f64;
    ok &= (rate - spec.test_withheld_rate).abs() <= 0.02;
    let report = verify_loaded(&ds);
    ok &= report.is_clean();
    notes.push(format!(
        "withheld in train+val {leaked}, test withheld rate {rate:.3} (config {}), {} violations",
        spec.test_withheld_rate,
        report.violations.len()
    ));
    check(ok, notes.join(", "))
}

fn criterion_3() -> Outcome {
    match gradcheck::run_suite(gradcheck::DEFAULT_SEEDS) {
        Err(e) => Outcome::Fail(e.to_string()),
        Ok(reports) => {
            let worst = reports
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .expect("ops");
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
            check(
                failed.is_empty() && reports.iter().all(|r| r.cases >= 20),
                format!(
                    "{} ops x {} seeds, worst {} at {:.2e} (tolerance {:.0e}), failing {:?}",
                    reports.len(),
                    gradcheck::DEFAULT_SEEDS,
                    worst.op,
                    worst.max_rel_error,
                    gradcheck::TOLERANCE,
                    failed
                ),
            )
        }
    }
}

fn criterion_4(tmp: &Path) -> Outcome {
    let dir = tmp.join("c4");
    let spec = SplitSpec {
        seed: 0,
        ..SplitSpec::sizes(256, 16, 16)
    };
    if let Err(e) = build_dataset(&Source::Family(DatasetFamily::Existential), &spec, &dir) {
        return Outcome::Fail(e.to_string());
    }
    let ds = Dataset::open(&dir).expect("open");
    let config = FilmConfig::default();
    let mut model = Model::build(ModelConfig::Film(config), ds.manifest.vocabulary.len(), 64, 0).expect("model");
    let data = TrainData::single(&ds);
    let pool: Vec<usize> = ds.split(Split::Train).iter().map(|r| r.index).collect();
    let mut trainer = Trainer::new(&mut model, &data, 64, 0, AdamConfig::default(), None).expect("trainer");
    let mut acc = 0.0;
    while trainer.iteration() < 3000 {
        if let Err(e) = trainer.step() {
            return Outcome::Fail(e.to_string());
        }
        // the criterion asks whether 95% is reached within the budget, so
        // stop at the first check that shows it
        if trainer.iteration() % 25 == 0 {
            acc = accuracy_on(trainer.model(), &ds, &pool).expect("accuracy");
            if acc >= 0.95 {
                break;
            }
        }
    }
    check(
        acc >= 0.95,
        format!(
            "default FiLM, 256 train instances: train accuracy {acc:.3} after {} iterations",
            trainer.iteration()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn desk_dataset(tmp: &Path, family: DatasetFamily) -> Dataset {
    let dir = tmp.join(family.name());
    if !dir.join("manifest.json").exists() {
        build_dataset(&Source::Family(family), &SplitSpec::default(), &dir).expect("build");
    }
    Dataset::open(&dir).expect("open")
}

fn desk_run(ds: &Dataset, seed: u64, iterations: u64) -> f64 {
    let mut model = Model::build(ModelConfig::Film(FilmConfig::default()), ds.manifest.vocabulary.len(), 64, seed)
        .expect("model");
    let schedule = TrainSchedule {
        iterations,
        seed,
        ..TrainSchedule::default()
    };
    let out = TrainOutput {
        run_dir: None,
        config: serde_json::Value::Null,
        on_eval: None,
    };
    let (record, _) = train(&mut model, &TrainData::single(ds), &schedule, AdamConfig::default(), None, out).expect("train");
    record.final_accuracy().expect("rows")
}

fn nightly() -> bool {
    std::env::var("FILMWORLD_NIGHTLY").is_ok_and(|v| v == "1")
}

fn criterion_5(tmp: &Path) -> Outcome {
    if !nightly() {
        return Outcome::Skip("hours of training; set FILMWORLD_NIGHTLY=1".into());
    }
    let ex = desk_dataset(tmp, DatasetFamily::Existential);
    let rel = desk_dataset(tmp, DatasetFamily::Relational);
    let e: Vec<f64> = (0..3).map(|s| desk_run(&ex, s, 20_000)).collect();
    let r: Vec<f64> = (0..3).map(|s| desk_run(&rel, s, 20_000)).collect();
    let (me, mr) = (median(e.clone()), median(r.clone()));
    check(
        me >= 0.85 && mr <= 0.65,
        format!("existential {e:.3?} median {me:.3}, relational {r:.3?} median {mr:.3}"),
    )
}

fn criterion_6(tmp: &Path) -> Outcome {
    if !nightly() {
        return Outcome::Skip("hours of training; set FILMWORLD_NIGHTLY=1".into());
    }
    let spatial = desk_dataset(tmp, DatasetFamily::SimpleSpatial);
    let rel = desk_dataset(tmp, DatasetFamily::Relational);
    let mut cur = Vec::new();
    let mut scratch = Vec::new();
    for seed in 0..3 {
        let schedule = TrainSchedule {
            iterations: 20_000,
            seed,
            ..TrainSchedule::default()
        };
        let spec = CurriculumSpec {
            config: ModelConfig::Film(FilmConfig::default()),
            pretrain: Pretrain::Train {
                data: TrainData::single(&spatial),
                schedule: schedule.clone(),
            },
            finetune: TrainData::single(&rel),
            finetune_schedule: schedule,
            adam: AdamConfig::default(),
            out_dir: None,
        };
        let (_, fine, _) = run_curriculum(spec).expect("curriculum");
        cur.push(fine.final_accuracy().expect("rows"));
        scratch.push(desk_run(&rel, seed, 40_000));
    }
    let (mc, ms) = (median(cur.clone()), median(scratch.clone()));
    check(
        mc - ms >= 0.10,
        format!("curriculum {cur:.3?} median {mc:.3}, from scratch (40k) {scratch:.3?} median {ms:.3}"),
    )
}

fn criterion_7() -> Outcome {
    let expected: BTreeSet<u64> = (0..=10).map(|k| 1000 * k).chain((3..=20).map(|k| 5000 * k)).collect();
    let got: BTreeSet<u64> = standard_eval_points(100_000).into_iter().collect();
    let schedule_points: BTreeSet<u64> = TrainSchedule::default().eval_points().into_iter().collect();
    let mut mixer = Mixer::new(&[0.45, 0.55], 0).expect("mixer");
    let train_share = (0..10_000).filter(|_| mixer.draw() == 0).count() as f64 / 10_000.0;
    let mix = MixSpec::new(vec![(DatasetFamily::Existential, 0.45), (DatasetFamily::Relational, 0.55)]).expect("mix");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen_share = (0..10_000).filter(|_| mix.sample_index(&mut rng) == 0).count() as f64 / 10_000.0;
    check(
        got == expected && schedule_points == expected && (train_share - 0.45).abs() <= 0.02 && (gen_share - 0.45).abs() <= 0.02,
        format!(
            "{} eval points match the rule: {}; first-component share {train_share:.4} (training), {gen_share:.4} (generation)",
            got.len(),
            got == expected && schedule_points == expected
        ),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_filmworld"))
        .args(args)
        .env_remove("FILMWORLD_DATA")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn criterion_8(tmp: &Path) -> Outcome {
    let run = || -> Result<Outcome, String> {
        let mut dirs = Vec::new();
        for name in ["gen-a", "gen-b"] {
            let d = tmp.join(name);
            cli(&[
                "generate", "--family", "existential", "--train", "1000", "--val", "100", "--test", "100", "--seed", "7",
                "--out", d.to_str().unwrap(),
            ])?;
            dirs.push(d);
        }
        let mut differing = Vec::new();
        for entry in fs::read_dir(&dirs[0]).map_err(|e| e.to_string())? {
            let name = entry.map_err(|e| e.to_string())?.file_name();
            if fs::read(dirs[0].join(&name)).ok() != fs::read(dirs[1].join(&name)).ok() {
                differing.push(name.to_string_lossy().into_owned());
            }
        }
        let cfg = tmp.join("c8.json");
        fs::write(&cfg, r#"{"schedule": {"eval_interval": 100, "eval_sample_size": 64, "deterministic": true}}"#)
            .map_err(|e| e.to_string())?;
        let mut traces = Vec::new();
        for name in ["run-a", "run-b"] {
            let out = tmp.join(name);
            cli(&[
                "train", "--data", dirs[0].to_str().unwrap(), "--model", "film", "--compact", "--iterations", "100",
                "--seed", "0", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
            ])?;
            traces.push((
                fs::read(out.join(LOSS_TRACE_TXT)).map_err(|e| e.to_string())?,
                fs::read(out.join("final.ckpt")).map_err(|e| e.to_string())?,
            ));
        }
        let lines = String::from_utf8_lossy(&traces[0].0).lines().count();
        let same = traces[0] == traces[1];
        Ok(check(
            differing.is_empty() && same && lines == 100,
            format!(
                "generate: differing files {differing:?}; train: {lines} losses, traces and checkpoints identical: {same}"
            ),
        ))
    };
    run().unwrap_or_else(Outcome::Fail)
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("FILMWORLD_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let tmp = tempfile::tempdir().expect("tempdir");
    let criteria: [(u32, &str, &dyn Fn() -> Outcome); 8] = [
        (1, "semantics oracle", &criterion_1),
        (2, "dataset invariants", &|| criterion_2(tmp.path())),
        (3, "gradient checks", &criterion_3),
        (4, "overfit sanity", &|| criterion_4(tmp.path())),
        (5, "learnability gap", &|| criterion_5(tmp.path())),
        (6, "curriculum trend", &|| criterion_6(tmp.path())),
        (7, "schedule and mixing", &criterion_7),
        (8, "determinism", &|| criterion_8(tmp.path())),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n} {status} [{name}] {detail} ({secs:.0}s)");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
