use mdc_core::harness::{self, ExperimentConfig};

#[test]
fn mdc_training_on_disjoint_scenes_cuts_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "method = mdc\nseeds = 0\nout = {}\n\
         data.kind = disjoint_tones\ndata.n_train = 64\ndata.n_val = 4\ndata.n_eval = 1\n\
         net.context = 3\nnet.hidden = 64\nnet.embedding_dim = 8\n\
         train.learning_rate = 0.001\ntrain.batch_size = 4\ntrain.max_epochs = 40\n",
        dir.path().display()
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    harness::gen_data(&cfg).unwrap();
    let runs = harness::train_runs(&cfg).unwrap();
    let log = &runs[0].log;
    let best = log.best_val_loss().unwrap();
    let initial = log.initial_val_loss.unwrap();
    assert!(log.epochs.len() <= 200);
    assert!(best < 0.2 * initial, "{best} vs initial {initial}");
    assert!(log.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
}
