//! Manual convergence probe; run with
//! `cargo test --test train_probe -- --ignored --nocapture`.

use std::time::Instant;

use lscfg::config::RunConfig;
use lscfg::textures::build_dataset;
use lscfg::train::{encode_set, evaluate, train};

#[test]
#[ignore]
fn desk_profile_convergence() {
    let config = RunConfig::desk_default();
    let t0 = Instant::now();
    let ds = build_dataset(&config.data, config.sae.input_hw, config.seed).unwrap();
    println!(
        "dataset: {} train / {} test  ({:.1}s)",
        ds.train.len(),
        ds.test.len(),
        t0.elapsed().as_secs_f64()
    );
    let t1 = Instant::now();
    let outcome = train(&config, &ds.train, |m| {
        println!(
            "epoch {:>2}: l_ce {:.4}  l_g {:>9.4}  acc {:.4}  in_cluster {:.4}  ({:.1}s)",
            m.epoch,
            m.l_ce,
            m.l_g,
            m.acc,
            m.in_cluster_fraction,
            t1.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    let report = evaluate(&outcome.model, &outcome.clusters, &ds.train).unwrap();
    println!("train eval: acc {:.4}  ls_acc {:.4}", report.accuracy, report.ls_accuracy);
    let test_report = evaluate(&outcome.model, &outcome.clusters, &ds.test).unwrap();
    println!("test  eval: acc {:.4}  ls_acc {:.4}", test_report.accuracy, test_report.ls_accuracy);

    let encodings = encode_set(&outcome.model, &ds.train).unwrap();
    let labels: Vec<usize> = ds.train.iter().map(|s| s.label.code()).collect();
    let mut within_15r = 0usize;
    let mut max_norm: f64 = 0.0;
    for (z, &l) in encodings.iter().zip(&labels) {
        let d = outcome.clusters.center_distances(z)[l];
        if d <= 1.5 * outcome.clusters.radius(l) {
            within_15r += 1;
        }
        max_norm = max_norm.max((z[0] * z[0] + z[1] * z[1]).sqrt());
    }
    println!(
        "containment: {:.4} within 1.5r, max |z| = {:.4}  (total {:.1}s)",
        within_15r as f64 / labels.len() as f64,
        max_norm,
        t0.elapsed().as_secs_f64()
    );
}
