use mgvmoe::autodiff::{OptimizerKind, Rng, Tape};
use mgvmoe::data::{generate_dataset, split_zero_shot, Dataset, DatasetConfig, DatasetSplit, Sample};
use mgvmoe::encoders::{encode_image, encode_text, Task};
use mgvmoe::harness::{
    evaluate, evaluate_routed, expert_report, export_embeddings, run_seed, sweep_beta, sweep_experts, train,
    Checkpoint, Model, Noise, TrainConfig,
};
use mgvmoe::vmoe::{concat_modalities, Routing};
use mgvmoe::Error;

fn small_dataset(seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        samples_per_category: 6,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 8,
        h: 4,
        experts: 2,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn split(ds: &Dataset, seed: u64) -> DatasetSplit {
    let ids: Vec<usize> = ds.categories.iter().map(|c| c.id).collect();
    split_zero_shot(&ids, &ds.samples, ds.config.split, seed).unwrap()
}

fn param_bits(model: &Model) -> Vec<(String, Vec<u64>)> {
    model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let ds = small_dataset(0);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    let out = train(&cfg, &ds, &split(&ds, 0)).unwrap();
    assert!(out.log.is_empty() && out.batches.is_empty());
    assert_eq!(out.best.epoch, 0);
    let init = Model::for_dataset(&cfg, &ds).unwrap();
    assert_eq!(param_bits(&out.best.model), param_bits(&init));
}

#[test]
fn fixed_seed_reproduces_log_and_checkpoint_bitwise() {
    let ds = small_dataset(1);
    let sp = split(&ds, 3);
    let cfg = TrainConfig {
        seed: 3,
        ..small_config()
    };
    let a = train(&cfg, &ds, &sp).unwrap();
    let b = train(&cfg, &ds, &sp).unwrap();
    let log_bits = |o: &mgvmoe::harness::TrainOutcome| {
        o.batches
            .iter()
            .flat_map(|x| [x.l_rank, x.l_aux, x.l_reg, x.l_cl, x.l_vat, x.total])
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(log_bits(&a), log_bits(&b));
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    let ea = evaluate(&a.best.model, &ds, &sp.test, &sp.unseen).unwrap();
    let eb = evaluate(&b.best.model, &ds, &sp.test, &sp.unseen).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn ablations_zero_their_terms_in_every_batch() {
    let ds = small_dataset(2);
    let sp = split(&ds, 0);
    let no_mgvat = train(
        &TrainConfig {
            no_mgvat: true,
            ..small_config()
        },
        &ds,
        &sp,
    )
    .unwrap();
    assert!(no_mgvat.batches.iter().all(|b| b.l_cl == 0.0 && b.l_vat == 0.0));
    assert!(no_mgvat.batches.iter().all(|b| b.l_aux > 0.0 && b.l_reg > 0.0));

    let cfg = TrainConfig {
        no_vmoe: true,
        ..small_config()
    };
    let no_vmoe = train(&cfg, &ds, &sp).unwrap();
    assert!(no_vmoe.batches.iter().all(|b| b.l_aux == 0.0 && b.l_reg == 0.0));
    assert!(no_vmoe.batches.iter().any(|b| b.l_cl > 0.0));

    let model = &no_vmoe.last.model;
    assert!(model.vmoe.is_none());
    for s in sp.train.iter().take(4) {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let enc = model.encode_sample(&tape, &p, &ds.vocab, s, None, &Routing::Learned).unwrap();
        let seq = model.tokenize(&ds.vocab, s).unwrap();
        let text = encode_text(&tape, &p, &model.text, &seq).unwrap();
        let visual = encode_image(&tape, &p, &model.image, &s.grid().unwrap()).unwrap();
        let m = concat_modalities(visual, text).unwrap();
        assert_eq!(enc.h.value(), m.value());
    }
}

#[test]
fn zero_beta_leaves_only_ranking_gradients() {
    let ds = small_dataset(3);
    let cfg = TrainConfig {
        beta: 0.0,
        ..small_config()
    };
    let model = Model::for_dataset(&cfg, &ds).unwrap();
    let cats = ds.names(&[0, 1, 2, 3]).unwrap();
    let batch: Vec<&Sample> = ds.samples.iter().filter(|s| s.label < 4).take(6).collect();
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let mut rng = Rng::new(9);
    let out = model.forward_batch(&tape, &p, &ds.vocab, &batch, &cats, Noise::Sample(&mut rng)).unwrap();
    let vat = model.prepare_vat(&out, &mut rng).unwrap();
    let terms = model.losses(&tape, &out, vat.as_ref()).unwrap();
    let b = terms.breakdown();
    assert!(b.l_aux > 0.0 && b.l_reg > 0.0 && b.l_cl > 0.0);
    assert_eq!(b.total, b.l_rank);
    let full = tape.backward(terms.total).unwrap();
    let rank = tape.backward(terms.rank).unwrap();
    let mut full: Vec<_> = full.params().collect();
    let mut rank: Vec<_> = rank.params().collect();
    full.sort_by_key(|(id, _)| id.index());
    rank.sort_by_key(|(id, _)| id.index());
    assert_eq!(full.len(), rank.len());
    for ((ia, ga), (ib, gb)) in full.iter().zip(&rank) {
        assert_eq!(ia, ib);
        assert_eq!(ga, gb, "{}", model.store.get(*ia).name);
    }
}

#[test]
fn evaluation_reads_only_the_requested_prototypes() {
    let ds = small_dataset(4);
    let sp = split(&ds, 1);
    let model = Model::for_dataset(&small_config(), &ds).unwrap();
    let ev = evaluate(&model, &ds, &sp.test, &sp.unseen).unwrap();
    let touched: Vec<usize> = ev.prototype_accesses.keys().copied().collect();
    let mut unseen = sp.unseen.clone();
    unseen.sort_unstable();
    assert_eq!(touched, unseen);
    assert!(ev.prototype_accesses.values().all(|&n| n == 1));
    assert!(sp.seen.iter().all(|c| !ev.prototype_accesses.contains_key(c)));
    assert!(ev.predictions.iter().all(|p| sp.unseen.contains(p)));

    assert!(evaluate(&model, &ds, &[], &sp.unseen).is_err());
    assert!(evaluate(&model, &ds, &sp.test, &sp.seen).is_err());
}

#[test]
fn sweeps_emit_one_row_per_setting_and_seed() {
    let ds = small_dataset(5);
    let cfg = TrainConfig {
        epochs: 1,
        ..small_config()
    };
    let rows = sweep_experts(&cfg, &ds, &[1, 2, 4, 8], &[7]).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(),
        ["1", "2", "4", "8"]
    );
    let standalone = run_seed(
        &TrainConfig {
            experts: 8,
            ..cfg.clone()
        },
        &ds,
        7,
    )
    .unwrap();
    assert_eq!(rows[3].report, standalone.test.report);

    let rows = sweep_beta(&cfg, &ds, &[0.0, 0.1, 1.0, 10.0], &[7]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.seed == 7 && r.sweep == "beta"));
}

#[test]
fn expert_report_forces_each_expert() {
    let ds = small_dataset(6);
    let sp = split(&ds, 0);
    let single = TrainConfig {
        experts: 1,
        ..small_config()
    };
    let out = train(&single, &ds, &sp).unwrap();
    let rows = expert_report(&out.best.model, &ds, &sp.test, &sp.unseen).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].report, evaluate(&out.best.model, &ds, &sp.test, &sp.unseen).unwrap().report);

    let multi = train(&small_config(), &ds, &sp).unwrap();
    let a = expert_report(&multi.best.model, &ds, &sp.test, &sp.unseen).unwrap();
    let b = expert_report(&multi.best.model, &ds, &sp.test, &sp.unseen).unwrap();
    assert_eq!(a, b);
    let forced = evaluate_routed(&multi.best.model, &ds, &sp.test, &sp.unseen, &Routing::Expert(1)).unwrap();
    assert_eq!(a[1].report, forced.report);

    let plain = train(
        &TrainConfig {
            no_vmoe: true,
            ..small_config()
        },
        &ds,
        &sp,
    )
    .unwrap();
    assert!(expert_report(&plain.best.model, &ds, &sp.test, &sp.unseen).is_err());
}

#[test]
fn embedding_export_is_stable() {
    let ds = small_dataset(7);
    let sp = split(&ds, 0);
    let model = Model::for_dataset(&small_config(), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.csv");
    let second = dir.path().join("b.csv");
    export_embeddings(&model, &ds, &sp.test, &first).unwrap();
    export_embeddings(&model, &ds, &sp.test, &second).unwrap();
    let text = std::fs::read_to_string(&first).unwrap();
    assert_eq!(text.as_bytes(), std::fs::read(&second).unwrap().as_slice());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), sp.test.len());
    let width = 2 + model.config.d + Task::Met.entity_dim(model.config.d);
    assert!(lines.iter().all(|l| l.split(',').count() == width));
    assert!(export_embeddings(&model, &ds, &sp.test, &dir.path().join("missing/x.csv")).is_err());
}

#[test]
fn checkpoint_files_round_trip_and_replace_atomically() {
    let ds = small_dataset(8);
    let out = train(&small_config(), &ds, &split(&ds, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.best.save(&path).unwrap();
    out.last.save(&path).unwrap();
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["model.ckpt"]);
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), out.last.to_bytes().unwrap());
    assert_eq!(param_bits(&back.model), param_bits(&out.last.model));
}

#[test]
fn runaway_learning_rate_reports_the_diverging_component() {
    let ds = small_dataset(9);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 1e200,
        freeze_embeddings: false,
        epochs: 3,
        ..small_config()
    };
    match train(&cfg, &ds, &split(&ds, 0)) {
        Err(Error::Diverged { component, .. }) => {
            assert!(["l_rank", "l_aux", "l_reg", "l_cl", "l_vat", "total"].contains(&component.as_str()), "{component}")
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

/// Default configuration, first five epochs, three seeds.
#[test]
fn default_runs_reduce_the_loss_and_separate_experts() {
    let ds = generate_dataset(&DatasetConfig::default()).unwrap();
    let mut gaps = Vec::new();
    for seed in 0..3 {
        let sp = split(&ds, seed);
        let cfg = TrainConfig {
            epochs: 5,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &ds, &sp).unwrap();
        let totals: Vec<f64> = out.log.iter().map(|e| e.total).collect();
        let rises = totals.windows(2).filter(|w| w[1] >= w[0]).count();
        println!("seed {seed} epoch totals {totals:?}");
        assert!(rises <= 1, "seed {seed}: {totals:?}");
        assert!(totals[4] < totals[0]);

        let rows = expert_report(&out.last.model, &ds, &sp.test, &sp.unseen).unwrap();
        let f1: Vec<f64> = rows.iter().map(|r| r.report.f1).collect();
        let gap = f1.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - f1.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("seed {seed} per-expert unseen F1 {f1:?}");
        gaps.push(gap);
    }
    assert!(gaps.iter().all(|&g| g > 0.0), "{gaps:?}");
}
