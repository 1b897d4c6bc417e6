use super::*;
use crate::grid::{LanguageId, TlpGrid};
use crate::model::ModelSpec;
use crate::synth::{generate_grid, GeneratorSpec, TlpDataset};

struct Fixture {
    grid: TlpGrid,
    store: DataStore,
    net: Network,
}

fn fixture() -> Fixture {
    let tasks = vec![
        TaskId::shallow("POS", 3),
        TaskId::deep("NLI", 3, MetricKind::Accuracy),
        TaskId::deep("QA", 2, MetricKind::F1),
    ];
    let grid = TlpGrid::dense(tasks.clone(), vec![LanguageId::new("en"), LanguageId::new("de")], 60).unwrap();
    let store = DataStore::new(generate_grid(&grid, &GeneratorSpec::default(), 3).unwrap());
    let net = Network::new(ModelSpec::for_tasks(8, [12, 12], 8, &tasks)).unwrap();
    Fixture { grid, store, net }
}

impl Fixture {
    fn task(&self, label: &str) -> &TaskId {
        self.grid.task(self.grid.find_label(label).unwrap())
    }

    fn tlp<'a>(&'a self, label: &'a str) -> TlpRef<'a> {
        TlpRef::new(&self.net, label, self.task(label)).unwrap()
    }
}

fn quick() -> FinetuneConfig {
    FinetuneConfig {
        epochs_shallow: 2,
        epochs_deep: 2,
        task_epochs: BTreeMap::new(),
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn epoch_table() {
    let cfg = FinetuneConfig {
        epoch_scale: 3,
        ..Default::default()
    };
    assert_eq!(cfg.epochs_for(&TaskId::deep("QA", 2, MetricKind::F1)), 6);
    assert_eq!(cfg.epochs_for(&TaskId::deep("NLI", 3, MetricKind::Accuracy)), 15);
    assert_eq!(cfg.epochs_for(&TaskId::shallow("NER", 3)), 30);
}

#[test]
fn zero_epochs_return_init_and_ties_pick_smaller_rate() {
    let f = fixture();
    let init = f.net.init_params(1);
    let cfg = FinetuneConfig {
        epoch_scale: 0,
        ..quick()
    };
    let out = finetune(&f.net, &f.store, &init, f.tlp("NLI.de"), &cfg).unwrap();
    assert_eq!(out.params, init.values);
    assert_eq!(out.lr, 1e-3);
    assert_eq!(out.candidates.len(), 2);
    assert_eq!(f.store.reads("NLI.de", Split::Train), 0);
}

#[test]
fn finetuning_reduces_train_loss() {
    let f = fixture();
    let init = f.net.init_params(1);
    for label in ["POS.de", "NLI.en", "QA.de"] {
        let t = f.tlp(label);
        let out = finetune(&f.net, &f.store, &init, t, &quick()).unwrap();
        let train = f.store.read_all(label, Split::Train).unwrap();
        let batch: Vec<&Example> = train.iter().collect();
        let before = f.net.forward_loss(&init.values, t.head, &batch).unwrap();
        let after = f.net.forward_loss(&out.params, t.head, &batch).unwrap();
        assert!(after < before, "{label}: {after} >= {before}");
        let best = out.candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.dev_metric, best);
    }
}

#[test]
fn metric_matches_counting_oracle() {
    let f = fixture();
    let params = f.net.init_params(6).values;
    for label in ["POS.en", "NLI.en", "QA.en"] {
        let t = f.tlp(label);
        let data = &f.store.dataset(label).unwrap().dev[..50];
        let got = score(&f.net, &params, t.head, t.task, data).unwrap();
        let preds: Vec<Prediction> = data.iter().map(|e| f.net.predict(&params, t.head, e)).collect();
        let expect = match t.task.metric {
            MetricKind::Accuracy if t.task.kind == TaskKind::Shallow => {
                let mut hit = 0.0;
                let mut n = 0.0;
                for (p, e) in preds.iter().zip(data) {
                    let (Prediction::Tokens(p), Target::Tokens(y)) = (p, &e.target) else { panic!() };
                    for i in 0..y.len() {
                        n += 1.0;
                        if p[i] == y[i] {
                            hit += 1.0;
                        }
                    }
                }
                hit / n
            }
            MetricKind::Accuracy => {
                let mut hit = 0.0;
                for (p, e) in preds.iter().zip(data) {
                    if let (Prediction::Class(p), Target::Class(y)) = (p, &e.target) {
                        if p == y {
                            hit += 1.0;
                        }
                    }
                }
                hit / 50.0
            }
            MetricKind::F1 => {
                let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
                for (p, e) in preds.iter().zip(data) {
                    let (Prediction::Class(p), Target::Class(y)) = (p, &e.target) else { panic!() };
                    match (*p == 1, *y == 1) {
                        (true, true) => tp += 1.0,
                        (true, false) => fp += 1.0,
                        (false, true) => fneg += 1.0,
                        _ => {}
                    }
                }
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fneg)
                }
            }
        };
        assert!((got - expect).abs() < 1e-12, "{label}: {got} vs {expect}");
    }
}

#[test]
fn f1_examples() {
    assert_eq!(f1(&[(1, 1), (0, 0)], 2), 1.0);
    // tp=1 fp=1 fn=1
    assert!((f1(&[(1, 1), (1, 0), (0, 1), (0, 0)], 2) - 0.5).abs() < 1e-12);
    assert_eq!(f1(&[(0, 1), (0, 0)], 2), 0.0);
    // constant positive on balanced labels
    assert!((f1(&[(1, 1), (1, 0)], 2) - 2.0 / 3.0).abs() < 1e-12);
    assert!((f1(&[(0, 0), (1, 1), (2, 2)], 3) - 1.0).abs() < 1e-12);
}

#[test]
fn perfect_and_constant_predictors() {
    let f = fixture();
    let t = f.tlp("NLI.en");
    let params = f.net.init_params(2).values;
    let mut data: Vec<Example> = f.store.dataset("NLI.en").unwrap().dev.clone();
    for e in data.iter_mut() {
        if let Prediction::Class(c) = f.net.predict(&params, t.head, e) {
            e.target = Target::Class(c);
        }
    }
    assert_eq!(score(&f.net, &params, t.head, t.task, &data).unwrap(), 1.0);

    // zero parameters predict class 0 everywhere
    let zeros = f.net.zeros().values;
    for (i, e) in data.iter_mut().enumerate() {
        e.target = Target::Class(i % 2);
    }
    let acc_task = TaskId::deep("NLI", 3, MetricKind::Accuracy);
    assert_eq!(score(&f.net, &zeros, t.head, &acc_task, &data).unwrap(), 0.5);
    assert!(score(&f.net, &zeros, t.head, &acc_task, &[]).is_err());
}

#[test]
fn zero_shot_rejects_training_languages_and_flags_reports() {
    let f = fixture();
    let params = f.net.init_params(2).values;
    let t = f.tlp("NLI.de");
    assert!(matches!(
        zero_shot_eval(&f.net, &f.store, &params, t, "de", &["en", "de"], Split::Test),
        Err(Error::NotExternal(_))
    ));
    // an external copy of the pivot-language data scores like the original
    let orig = f.store.dataset("NLI.en").unwrap().clone();
    let ext = TlpDataset {
        label: "NLI.xx".into(),
        ..orig
    };
    let store = DataStore::new([f.store.dataset("NLI.en").unwrap().clone(), ext]);
    let task = f.task("NLI.en");
    let ext_ref = TlpRef::new(&f.net, "NLI.xx", task).unwrap();
    let zs = zero_shot_eval(&f.net, &store, &params, ext_ref, "xx", &["en"], Split::Test).unwrap();
    let inside = evaluate(&f.net, &store, &params, f.tlp("NLI.en"), Split::Test).unwrap();
    assert!(zs.zero_shot && !inside.zero_shot);
    assert_eq!(zs.value, inside.value);
    assert_eq!(store.reads("NLI.xx", Split::Train), 0);
}

#[test]
fn baseline_is_deterministic_and_isolated() {
    let f = fixture();
    let init = f.net.init_params(1);
    let before = f.store.snapshot();
    let a = train_baseline(&f.net, &f.store, &init, f.tlp("QA.de"), &quick()).unwrap();
    let touched = before.touched_since(&f.store.snapshot());
    assert!(touched.iter().all(|(l, _)| l == "QA.de"), "{touched:?}");
    assert_eq!(f.store.reads("QA.de", Split::Test), 0);
    let b = train_baseline(&f.net, &f.store, &init, f.tlp("QA.de"), &quick()).unwrap();
    assert_eq!(a, b);
    let test = evaluate(&f.net, &f.store, &a.params, f.tlp("QA.de"), Split::Test).unwrap();
    assert!((0.0..=1.0).contains(&test.value));
}

#[test]
fn batch_plan_covers_each_dataset_once_per_epoch() {
    let sizes = [7, 3, 12];
    let mut rng = stream(1, "plan", &[]);
    let plan = mtl_batch_plan(&sizes, 4, &mut rng);
    assert_eq!(plan.len(), 6);
    for (j, &n) in sizes.iter().enumerate() {
        let mut seen: Vec<usize> = plan.iter().flatten().filter(|(k, _)| *k == j).map(|&(_, i)| i).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
    let again = mtl_batch_plan(&sizes, 4, &mut stream(1, "plan", &[]));
    assert_eq!(plan, again);
    assert_ne!(plan, mtl_batch_plan(&sizes, 4, &mut stream(2, "plan", &[])));
}

#[test]
fn single_tlp_mtl_equals_baseline_run() {
    let f = fixture();
    let init = f.net.init_params(1);
    let cfg = FinetuneConfig {
        lrs: [3e-3, 3e-3],
        ..quick()
    };
    let base = train_baseline(&f.net, &f.store, &init, f.tlp("NLI.en"), &cfg).unwrap();
    let mtl = MtlConfig {
        lr: 3e-3,
        epochs: 2,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
    };
    let p = train_mtl_baseline(&f.net, &f.store, &init, &[f.tlp("NLI.en")], &mtl).unwrap();
    assert_eq!(p.values, base.params);
}

#[test]
fn mixed_mtl_touches_only_selected_train_splits() {
    let f = fixture();
    let init = f.net.init_params(1);
    let before = f.store.snapshot();
    let sel = [f.tlp("POS.en"), f.tlp("NLI.en"), f.tlp("QA.en")];
    let cfg = MtlConfig {
        epochs: 1,
        ..Default::default()
    };
    let p = train_mtl_baseline(&f.net, &f.store, &init, &sel, &cfg).unwrap();
    assert!(p.is_finite());
    let after = f.store.snapshot();
    for l in ["POS.en", "NLI.en", "QA.en"] {
        assert_eq!(after.get(l, Split::Train) - before.get(l, Split::Train), 60);
    }
    assert!(before.touched_since(&after).iter().all(|(l, s)| l.ends_with(".en") && *s == Split::Train));
    assert!(train_mtl_baseline(&f.net, &f.store, &init, &[], &cfg).is_err());
}
