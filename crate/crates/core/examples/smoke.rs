use sddlab::data::SyntheticSpec;
use sddlab::harness::*;

fn config() -> ExperimentConfig {
    let mut config = default_desk_config();
    config.data.source = DataSource::Synthetic { spec: SyntheticSpec {
        num_classes: 4, num_samples: 200, height: 8, width: 8,
        class_signal: 0.5, noise_std: 0.2, seed: 1 } };
    config.model.image_size = 8;
    config.model.embed_dim = 32;
    config.model.depth = 2;
    config.model.num_heads = 2;
    config.train.epochs = 2;
    config.train.batch_size = 32;
    config.prune.zeta_end = 0.5;
    config.checkpoint_every = 1;
    config
}

fn main() {
    let config = config();
    let mut opts = RunOptions::new("/tmp/ref_run");
    opts.quiet = true;
    let reference = run_experiment(&config, &opts).unwrap();

    // determinism: identical config+seed => identical metrics bytes
    let mut opts2 = RunOptions::new("/tmp/ref_run2");
    opts2.quiet = true;
    run_experiment(&config, &opts2).unwrap();
    let a = std::fs::read("/tmp/ref_run/metrics.csv").unwrap();
    let b = std::fs::read("/tmp/ref_run2/metrics.csv").unwrap();
    assert_eq!(a, b, "determinism violated");
    println!("determinism: OK ({} bytes)", a.len());

    // kill after 2 rows, resume, compare full curve
    let mut opts3 = RunOptions::new("/tmp/killed_run");
    opts3.quiet = true;
    opts3.abort_after_iterations = Some(2);
    let interrupted = run_experiment(&config, &opts3).unwrap();
    assert_eq!(interrupted.curve.len(), 2);
    assert!(matches!(interrupted.manifest.status, RunStatus::Interrupted));
    let resumed = resume(std::path::Path::new("/tmp/killed_run"), true).unwrap();
    assert_eq!(resumed.curve.len(), reference.curve.len());
    let c = std::fs::read("/tmp/killed_run/metrics.csv").unwrap();
    assert_eq!(a, c, "resumed metrics differ from uninterrupted");
    println!("resume: OK");

    // resume of a completed run is a no-op
    let again = resume(std::path::Path::new("/tmp/killed_run"), true).unwrap();
    assert_eq!(again.curve.len(), reference.curve.len());
    println!("resume-completed noop: OK");
}
