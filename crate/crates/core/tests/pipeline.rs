use patchground::head::{load_checkpoint, save_checkpoint};
use patchground::synth::{generate_corpus, read_corpus, write_corpus, SynthConfig};
use patchground::trainer::{evaluate, run_ablation_matrix, split_point, TrainConfig};

#[test]
fn matrix_cells_match_reevaluated_checkpoints() {
    let corpus = generate_corpus(&SynthConfig::default(), 100).unwrap();
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let art = run_ablation_matrix(&config, &corpus.samples, 1).unwrap();
    assert_eq!(art.report.cells.len(), 5);
    assert_eq!(art.report.corpus_size, 100);

    let tmp = tempfile::tempdir().unwrap();
    let held_out = &corpus.samples[split_point(100, config.eval_split)..];
    for (cell, params) in art.report.cells.iter().zip(&art.params) {
        let run = &cell.runs[0];
        let dir = tmp.path().join(&cell.variant.name);
        save_checkpoint(&dir, &params[0], run.seed, serde_json::Value::Null).unwrap();
        let (loaded, _) = load_checkpoint::<f64>(&dir).unwrap();
        let ev = evaluate(&loaded, held_out, config.decode, config.gamma).unwrap();
        assert_eq!(ev.report.overall, run.accuracy, "{}", cell.variant.name);
        assert_eq!(ev.suppression_mass, run.suppression_mass);
        assert_eq!(cell.accuracy.mean, run.accuracy);
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let cfg = SynthConfig {
        seed: 11,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg, 5).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(tmp.path(), &corpus).unwrap();
    let back = read_corpus(tmp.path()).unwrap();
    assert_eq!(back.manifest, corpus.manifest);
    assert_eq!(back.samples, corpus.samples);
}
