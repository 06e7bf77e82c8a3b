//! Harness-level behavior: expert specialization, the coefficient-recovery
//! experiment, evaluation baselines, and pipeline composition.

use std::sync::OnceLock;

use mergeforge_cli::pipeline::{
    default_pipeline_config, eval_model, run_pipeline, NamedDam, RecipeSpec,
};
use mergeforge_cli::report::Report;
use mergeforge_cli::tasks::{batch_records, Record, TaskKind, TaskSpec};
use mergeforge_core::checkpoint::WeightMap;
use mergeforge_core::dam::{dam_train, DamConfig};
use mergeforge_core::merge::{MergeMethod, MergeScope};
use mergeforge_core::model::{init_model, train_expert, TokenBatch, TransformerConfig};
use mergeforge_core::rng::{derive_seed, Rng};

struct Fixture {
    model: TransformerConfig,
    base: WeightMap,
    experts: Vec<WeightMap>,
    train_records: Vec<Vec<Record>>,
    eval_sets: Vec<(String, Vec<TokenBatch>)>,
}

/// One fabricated 2-expert suite shared across tests (default tasks,
/// shorter fabrication than the pipeline default).
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = default_pipeline_config();
        let model = config.model.clone();
        let seed = 11u64;
        let base = init_model(&model, derive_seed(seed, "base", 0)).unwrap();
        let mut experts = Vec::new();
        let mut train_records = Vec::new();
        let mut eval_sets = Vec::new();
        for (i, task) in config.tasks.iter().enumerate() {
            let mut records = task.generate(&model, seed).unwrap();
            for r in &mut records {
                r.affinity = i;
            }
            let split = records.len() - records.len() / 10;
            let batches = batch_records(&records[..split], 8).unwrap();
            let expert = train_expert(
                &base,
                &model,
                &batches,
                400,
                config.fabrication.learning_rate,
                derive_seed(seed, "expert", i as u64),
            )
            .unwrap();
            experts.push(expert);
            eval_sets.push((task.name(), batch_records(&records[split..], 8).unwrap()));
            train_records.push(records[..split].to_vec());
        }
        Fixture { model, base, experts, train_records, eval_sets }
    })
}

#[test]
fn experts_specialize_to_their_own_task() {
    let f = fixture();
    for (i, expert) in f.experts.iter().enumerate() {
        let losses = eval_model(expert, &f.model, &f.eval_sets).unwrap();
        for (j, loss) in losses.iter().enumerate() {
            if i != j {
                assert!(
                    losses[i] < *loss,
                    "expert {i}: own-task loss {:.4} vs task {j} loss {loss:.4}",
                    losses[i]
                );
            }
        }
    }
}

/// When every training batch comes from expert 0's task, the learned
/// coefficient mass settles higher on model 0.
#[test]
fn coefficients_recover_the_data_generating_expert() {
    let f = fixture();
    let refs: Vec<&WeightMap> = f.experts.iter().collect();
    let task0 = &f.train_records[0];
    let mut relabeled = task0.clone();
    for r in &mut relabeled {
        r.affinity = 1;
    }
    let streams = vec![
        batch_records(task0, 1).unwrap(),
        batch_records(&relabeled, 1).unwrap(),
    ];
    let config = DamConfig { steps: 400, ..DamConfig::default() };
    let (_, report) = dam_train(&f.base, &refs, &streams, &f.model, &config).unwrap();
    let mass = &report.summary.per_model_mean_abs;
    assert!(
        mass[0] > mass[1],
        "coefficient mass did not favor the data-generating expert: {mass:?}"
    );
}

#[test]
fn untrained_model_scores_near_log_vocab_on_random_ids() {
    // The 1/sqrt(fan_in) head init gives untrained logits unit variance,
    // which adds ~1/2 nat over the uniform baseline; ln V must dominate
    // that for the 10% window, hence the larger vocabulary here.
    let model = TransformerConfig { vocab_size: 512, ..TransformerConfig::default() };
    let weights = init_model(&model, 77).unwrap();
    let mut rng = Rng::new(78);
    let batches: Vec<TokenBatch> = (0..8)
        .map(|_| TokenBatch {
            sequences: (0..8)
                .map(|_| (0..16).map(|_| rng.next_index(model.vocab_size)).collect())
                .collect(),
            affinity: 0,
        })
        .collect();
    let losses = eval_model(&weights, &model, &[("random".into(), batches)]).unwrap();
    let expected = (model.vocab_size as f64).ln();
    assert!(
        (losses[0] - expected).abs() <= 0.1 * expected,
        "loss {:.4} not within 10% of ln V = {expected:.4}",
        losses[0]
    );
}

#[test]
fn evaluation_is_repeatable() {
    let f = fixture();
    let a = eval_model(&f.base, &f.model, &f.eval_sets).unwrap();
    let b = eval_model(&f.base, &f.model, &f.eval_sets).unwrap();
    assert_eq!(a, b);
}

fn quick_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            kind: TaskKind::Copy,
            name: None,
            vocab_lo: 2,
            vocab_hi: 10,
            seq_len: 16,
            samples: 60,
            seed: 0,
        },
        TaskSpec {
            kind: TaskKind::ConstantGrammar,
            name: None,
            vocab_lo: 12,
            vocab_hi: 24,
            seq_len: 12,
            samples: 60,
            seed: 0,
        },
    ]
}

#[test]
fn pipeline_with_only_soup_reports_one_method_row() {
    let ws = tempfile::tempdir().unwrap();
    let mut config = default_pipeline_config();
    config.tasks = quick_tasks();
    config.fabrication.steps = 250;
    config.recipes = vec![RecipeSpec {
        name: "soup".into(),
        method: MergeMethod::Soup,
        weights: None,
        density: 1.0,
        drop_p: 0.0,
        t_schedule: None,
        merge_scope: MergeScope::LinearOnly,
        seed: None,
    }];
    config.dam = Vec::new();
    config.evo = None;
    let report = run_pipeline(ws.path(), &config, false).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].method, "soup");
    assert_eq!(report.tasks.len(), 2);

    // Method set tracks the configured set exactly.
    config.dam = vec![NamedDam {
        name: "dam-kl".into(),
        config: DamConfig { steps: 30, ..DamConfig::default() },
    }];
    let report = run_pipeline(ws.path(), &config, false).unwrap();
    let methods: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["soup", "dam-kl"]);
}

#[test]
fn pipeline_report_round_trips_and_averages() {
    let ws = tempfile::tempdir().unwrap();
    let mut config = default_pipeline_config();
    config.tasks = quick_tasks();
    config.fabrication.steps = 250;
    config.dam = Vec::new();
    config.evo = None;
    let report = run_pipeline(ws.path(), &config, false).unwrap();

    let json_path = ws.path().join(&config.output_dir).join("report.json");
    let loaded = Report::from_json(&std::fs::read_to_string(json_path).unwrap()).unwrap();
    assert_eq!(loaded, report);
    for row in &loaded.rows {
        let mean = row.losses.iter().sum::<f64>() / row.losses.len() as f64;
        assert!((row.avg - mean).abs() < 1e-9);
    }
}

#[test]
fn fabrication_oracle_rejects_unspecialized_experts() {
    // Zero training steps leave every expert equal to the base, so no
    // expert can beat the others on its own task and the oracle must fire.
    let ws = tempfile::tempdir().unwrap();
    let mut config = default_pipeline_config();
    config.tasks = quick_tasks();
    config.fabrication.steps = 0;
    config.dam = Vec::new();
    config.evo = None;
    let err = run_pipeline(ws.path(), &config, false).unwrap_err();
    assert!(err.to_string().contains("distinguishable"), "{err}");
}
