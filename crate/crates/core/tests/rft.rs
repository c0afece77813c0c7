use dftlab::losses::LossSpec;
use dftlab::model::ModelConfig;
use dftlab::rft::{read_filtered, rft_train, sample_and_filter, task_verifier, write_outputs, RftConfig, STATS_FILE};
use dftlab::tasks::{generate_dataset, verify, Demonstration, TaskKind, TaskSpec};
use dftlab::training::{train_run, RunConfig};

fn warmed() -> (dftlab::model::Model, Vec<Demonstration>, RunConfig) {
    let mut spec = TaskSpec::new(TaskKind::Reversal, 8);
    spec.train_difficulty = (2, 3);
    spec.ood_difficulty = (4, 4);
    let data = generate_dataset(&spec, 40, 1, 1).unwrap().train;
    let mut rc = RunConfig::new(
        ModelConfig {
            vocab_size: TaskKind::Reversal.vocabulary().size(),
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 16,
            seed: 2,
        },
        LossSpec::sft(),
    );
    rc.max_steps = Some(250);
    rc.learning_rate = 5e-3;
    rc.batch_size = 20;
    let model = train_run(&rc, &data, &mut []).unwrap().model;
    (model, data, rc)
}

#[test]
fn self_sampling_round_trip_and_retrain() {
    let (model, prompts, rc) = warmed();
    let cfg = RftConfig {
        max_new_tokens: 8,
        seed: 4,
        ..RftConfig::default()
    };
    let (kept, stats) = sample_and_filter(&model, &prompts, task_verifier, &cfg).unwrap();
    assert!(stats.keep_rate > 0.0, "{stats:?}");
    assert_eq!(stats.keep_rate, stats.verified as f64 / (4 * prompts.len()) as f64);
    assert_eq!(stats.per_prompt_kept.iter().sum::<usize>(), stats.verified);
    assert_eq!(stats.retained + stats.duplicates_removed, stats.verified);
    assert_eq!(stats.kept_histogram.iter().sum::<usize>(), prompts.len());

    let again = sample_and_filter(&model, &prompts, task_verifier, &cfg).unwrap();
    assert_eq!(again.0, kept);
    assert_eq!(again.1, stats);

    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &kept, &stats).unwrap();
    let back = read_filtered(dir.path()).unwrap();
    assert_eq!(back, kept);
    for d in &back {
        assert!(verify(d.task, &d.prompt_ids, &d.response_ids));
    }
    assert!(dir.path().join(STATS_FILE).exists());

    let mut short = rc.clone();
    short.max_steps = Some(5);
    for loss in [LossSpec::sft(), LossSpec::dft()] {
        let out = rft_train(&model, &back, &loss, &short, &mut []).unwrap();
        assert_eq!(out.metrics.len(), 5);
    }
}
