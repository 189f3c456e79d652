use std::fs;

use foa::channel::{ChannelConfig, ChannelKind};
use foa::checkpoint::{self, Checkpoint};
use foa::harness::{self, parse_config_str, parse_csv, run_job, world_from_meta, world_meta, write_atomic, Job, CSV_HEADER};
use foa::model::{Architecture, ClScModel};
use foa::retrieval::{evaluate, EvalConfig};
use foa::source::build_dataset;
use foa::training::Scheme;
use foa::Execution;

/// A sweep small enough to run in a couple of seconds.
const TINY: &str = r#"
[world]
num_identities = 12
train_ids = 6
test_ids = 6
latent_dim = 4
obs_dim = 8
pairs_per_id = 4

[model]
feature_dim = 8
z_dim = 8
proj_dim = 4
hidden = 16

[train]
epochs_t1 = 2
epochs_t2 = 2
epochs_t3 = 2
epochs_t4 = 2
batch_size = 8

[sweep]
axis = "snr_db"
values = [0.0, 10.0]
fixed = 4
schemes = ["cl_sc", "single_source"]
seeds = [3]
"#;

#[test]
fn sweep_writes_csv_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config_str(TINY).unwrap();
    cfg.output = dir.path().join("run");
    let rows = harness::run_sweep(&cfg, Execution::Sequential).unwrap();
    assert_eq!(rows.len(), 4);

    let csv = fs::read_to_string(cfg.output.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let parsed = parse_csv(&csv).unwrap();
    assert_eq!(parsed.len(), rows.len());
    for (a, b) in parsed.iter().zip(&rows) {
        assert_eq!((a.scheme, a.snr_db, a.bandwidth, a.seed, a.top1), (b.scheme, b.snr_db, b.bandwidth, b.seed, b.top1));
    }

    let log = fs::read_to_string(cfg.output.join("run.log")).unwrap();
    let echoed: String = log
        .lines()
        .skip(1)
        .take_while(|l| !l.contains('\t'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut back = parse_config_str(&echoed).unwrap();
    back.output = cfg.output.clone();
    assert_eq!(back, cfg);
    assert!(log.lines().any(|l| l.contains("\tT3\t")));

    let ckpts: Vec<_> = fs::read_dir(cfg.output.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 4);
    // no temporary files left behind
    for entry in fs::read_dir(&cfg.output).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(!name.to_string_lossy().ends_with(".tmp"), "{name:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_file_and_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(TINY).unwrap();
    let job = Job {
        scheme: Scheme::ClSc,
        channel: ChannelConfig::new(ChannelKind::Awgn, 5.0, 4).unwrap(),
        seed: 3,
    };
    let out = run_job(&job, &cfg.world, &cfg.model, &cfg.train, &cfg.eval).unwrap();
    let ckpt = Checkpoint {
        scheme: job.scheme,
        meta: world_meta(&cfg.world).into_iter().collect(),
        model: out.model,
    };
    let first = dir.path().join("first.ckpt");
    checkpoint::save(&ckpt, &first).unwrap();
    let loaded = checkpoint::load(&first).unwrap();
    let second = dir.path().join("second.ckpt");
    checkpoint::save(&loaded, &second).unwrap();
    assert_eq!(fs::read_to_string(&first).unwrap(), fs::read_to_string(&second).unwrap());

    let world = world_from_meta(&loaded.meta).unwrap();
    assert_eq!(world, cfg.world);
    let split = build_dataset(&world, job.seed).unwrap();
    let eval = EvalConfig {
        trials: 1,
        seed: job.seed,
        execution: Execution::Sequential,
    };
    let after = evaluate(&loaded.model, &split, loaded.scheme, &job.channel, &eval).unwrap();
    assert_eq!(after.top1(), out.row.top1);
}

#[test]
fn loading_into_the_wrong_architecture_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::desk(4, 6, ChannelKind::Awgn);
    let ckpt = Checkpoint {
        scheme: Scheme::NomaJscc,
        meta: Default::default(),
        model: ClScModel::new(arch.clone(), 1).unwrap(),
    };
    let text = checkpoint::to_text(&ckpt);
    // claim a wider hidden layer than the stored weights have
    let wrong = text.replace(&format!("meta hidden {}", arch.hidden), &format!("meta hidden {}", arch.hidden + 1));
    let path = dir.path().join("wrong.ckpt");
    fs::write(&path, wrong).unwrap();
    let err = checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains('`'), "{err}");
}

#[test]
fn atomic_write_replaces_whole_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_atomic(&path, "old contents that are longer\n").unwrap();
    write_atomic(&path, "new\n").unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "new\n");
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
}

#[test]
fn failed_sweep_leaves_no_results_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config_str(TINY).unwrap();
    cfg.output = dir.path().join("run");
    // more training identities than the world has
    cfg.world.train_ids = 20;
    assert!(harness::run_sweep(&cfg, Execution::Sequential).is_err());
    assert!(!cfg.output.join("results.csv").exists());
}
