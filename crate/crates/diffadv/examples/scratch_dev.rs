// Temporary calibration harness; deleted before release.
use diffadv::models::dataset;
use diffadv::models::fit::{fit_bundle, FitConfig};

fn main() {
    let t0 = std::time::Instant::now();
    for (label, cfg) in [
        (
            "tiny",
            FitConfig {
                seed: 5,
                per_class: 12,
                eval_count: 8,
                predictor_hidden: 6,
                predictor_batches: 150,
                predictor_batch_size: 4,
                classifier_epochs: 14,
                ..Default::default()
            },
        ),
        (
            "tiny-longer",
            FitConfig {
                seed: 5,
                per_class: 12,
                eval_count: 8,
                predictor_hidden: 6,
                predictor_batches: 150,
                predictor_batch_size: 4,
                classifier_epochs: 40,
                classifier_lr: 5e-3,
                ..Default::default()
            },
        ),
        ("default", FitConfig::default()),
    ] {
        let ds = dataset::generate(cfg.per_class, cfg.side, cfg.seed);
        match fit_bundle(ds, &cfg) {
            Ok(b) => println!(
                "{label}: train_acc={:?} eval_acc={:?} floor={:.4} heldout={:.4} gradchk={:.2e} ({:.1}s)",
                b.report.train_accuracy,
                b.report.eval_accuracy,
                b.report.training_floor_mse,
                b.report.heldout_mse,
                b.report.grad_check_max_rel_error,
                t0.elapsed().as_secs_f64()
            ),
            Err(e) => println!("{label}: FIT ERROR: {e} ({:.1}s)", t0.elapsed().as_secs_f64()),
        }
    }
}
