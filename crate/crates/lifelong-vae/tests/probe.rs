use lifelong_vae::data::{accumulate_test, split_by_label, synthesize_corpus};
use lifelong_vae::lifelong::*;
use lifelong_vae::metrics::{
    feature_stats, frechet_distance, negative_test_elbo, train_feature_classifier, FeatureMode,
};
use lifelong_vae::networks::{init_model, ArchSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_ablation() {
    let (train, test) = synthesize_corpus(3, 1000, 200, 7).unwrap();
    let seq = split_by_label(&train, &test, 0.1, 3).unwrap();
    let extractor = train_feature_classifier(&train, 11).unwrap();
    let arch = ArchSpec {
        input_dim: 784,
        hidden_dim: 256,
        hidden_layers: 2,
        discrete_dim: 3,
        continuous_dim: 14,
    };
    let seed: u64 = std::env::var("PROBE_SEED")
        .map(|v| v.parse().unwrap())
        .unwrap_or(1);
    let tau_decay: f64 = std::env::var("PROBE_TAU_DECAY")
        .map(|v| v.parse().unwrap())
        .unwrap_or(3e-5);
    for (name, lambda, consistency) in [
        ("both", 0.01, true),
        ("consistency-only", 0.0, true),
        ("neither", 0.0, false),
    ] {
        let config = TrainConfig {
            method: Method::Lifelong,
            lambda,
            consistency,
            learning_rate: 1e-3,
            max_epochs: 50,
            tau_schedule: TauSchedule {
                decay: tau_decay,
                ..TauSchedule::default()
            },
            ..TrainConfig::default()
        };
        let student = init_model(&arch.with_discrete_dim(1), seed ^ 0xABC).unwrap();
        let mut state = LifelongState::new(student, seed);
        for i in 0..3 {
            let t = &seq.triples[i];
            train_distribution(&mut state, &t.train, &t.val, &config).unwrap();
            if i + 1 < 3 {
                on_distribution_shift(&mut state, true, 9000 + i as u64).unwrap();
            }
        }
        let accum = accumulate_test(&seq, 3).unwrap();
        let mut grng = ChaCha8Rng::seed_from_u64(777);
        let generated =
            teacher_generate(&state.student, 3, 2048, &mut grng).unwrap();
        let mode = FeatureMode::Classifier(&extractor);
        let test_stats = feature_stats(&accum.images, &mode).unwrap();
        let gen_stats = feature_stats(&generated.images, &mode).unwrap();
        let fd = frechet_distance(&test_stats, &gen_stats).unwrap();
        let tr = |s: &lifelong_vae::metrics::FeatureStats| -> f64 {
            (0..s.dim()).map(|i| s.cov[[i, i]]).sum()
        };
        let mean_gap: f64 = test_stats
            .mean
            .iter()
            .zip(&gen_stats.mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        println!(
            "ablation {name:>18} | step-3 frechet {fd:>8.2} | tr_test {:>7.1} tr_gen {:>7.1} mean_gap {:>7.2}",
            tr(&test_stats),
            tr(&gen_stats),
            mean_gap
        );

        // Dump a 3x8 grid of generations (rows: discrete code) as PGM.
        let mut pgm = String::from("P2\n224 84\n255\n");
        for row in 0..3 {
            for y in 0..28 {
                let mut line = Vec::new();
                for col in 0..8 {
                    let idx = col * 3 + row; // counts through the cycling codes
                    for x in 0..28 {
                        let v = (generated.images[[idx, y * 28 + x]] * 255.0) as u8;
                        line.push(v.to_string());
                    }
                }
                pgm.push_str(&line.join(" "));
                pgm.push('\n');
            }
        }
        std::fs::write(format!("/tmp/gen_{name}.pgm"), pgm).unwrap();
    }
}

#[test]
#[ignore]
fn probe_permuted() {
    use lifelong_vae::data::{make_permuted_sequence, DistributionTriple, Split};
    let (train, _test) = synthesize_corpus(10, 100, 20, 7).unwrap();
    let (test, _) = synthesize_corpus(10, 20, 1, 8).unwrap();
    let test = lifelong_vae::data::ImageDataset::new(
        test.images.clone(),
        test.labels.clone(),
        Split::Test,
        "synthetic",
    )
    .unwrap();
    let extractor = train_feature_classifier(&train, 11).unwrap();
    // Carve val from the 1000-image base.
    let idx_val: Vec<usize> = (0..100).collect();
    let idx_train: Vec<usize> = (100..1000).collect();
    let base = DistributionTriple {
        train: train.subset(&idx_train, Split::Train),
        val: train.subset(&idx_val, Split::Val),
        test,
    };
    let seed: u64 = std::env::var("PROBE_SEED")
        .map(|v| v.parse().unwrap())
        .unwrap_or(1);
    let seq = make_permuted_sequence(&base, 3, 99).unwrap();
    let arch = ArchSpec {
        input_dim: 784,
        hidden_dim: 256,
        hidden_layers: 2,
        discrete_dim: 3,
        continuous_dim: 14,
    };
    for method in [Method::Lifelong, Method::Ewc] {
        let started = std::time::Instant::now();
        let config = TrainConfig {
            method,
            learning_rate: 1e-3,
            gamma: 50.0,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let start_dim = if method == Method::Lifelong { 1 } else { 3 };
        let student = init_model(&arch.with_discrete_dim(start_dim), seed ^ 0xABC).unwrap();
        let mut state = LifelongState::new(student, seed);
        for i in 0..3 {
            let t = &seq.triples[i];
            train_distribution(&mut state, &t.train, &t.val, &config).unwrap();
            if i + 1 < 3 {
                if method == Method::Ewc {
                    let fisher = lifelong_vae::objective::estimate_fisher_diag(
                        &state.student,
                        &t.train.images,
                        1,
                        4000 + i as u64,
                        0.5,
                    )
                    .unwrap();
                    on_distribution_shift(&mut state, false, 9000 + i as u64).unwrap();
                    state.fisher = Some(fisher);
                } else {
                    on_distribution_shift(&mut state, true, 9000 + i as u64).unwrap();
                }
            }
        }
        let accum = accumulate_test(&seq, 3).unwrap();
        let mut grng = ChaCha8Rng::seed_from_u64(777);
        let generated = teacher_generate(&state.student, 3, 2048, &mut grng).unwrap();
        let mode = FeatureMode::Classifier(&extractor);
        let fd = frechet_distance(
            &feature_stats(&accum.images, &mode).unwrap(),
            &feature_stats(&generated.images, &mode).unwrap(),
        )
        .unwrap();
        println!(
            "permuted {:>8} | final accum frechet {fd:>8.2} | {:.1}s",
            method.as_str(),
            started.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn probe_forgetting() {
    let (train, test) = synthesize_corpus(3, 1000, 200, 7).unwrap();
    let seq = split_by_label(&train, &test, 0.1, 3).unwrap();
    let extractor = train_feature_classifier(&train, 11).unwrap();
    let arch = ArchSpec {
        input_dim: 784,
        hidden_dim: 256,
        hidden_layers: 2,
        discrete_dim: 3,
        continuous_dim: 14,
    };
    let lr: f64 = std::env::var("PROBE_LR")
        .map(|v| v.parse().unwrap())
        .unwrap_or(1e-3);
    let seed: u64 = std::env::var("PROBE_SEED")
        .map(|v| v.parse().unwrap())
        .unwrap_or(1);

    for method in [Method::Vanilla, Method::Lifelong] {
        let config = TrainConfig {
            method,
            learning_rate: lr,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let start_dim = if method == Method::Lifelong { 1 } else { 3 };
        let student = init_model(&arch.with_discrete_dim(start_dim), seed ^ 0xABC).unwrap();
        let mut state = LifelongState::new(student, seed);
        let test0 = &seq.triples[0].test.images;
        let started = std::time::Instant::now();
        for i in 0..3 {
            let t = &seq.triples[i];
            let hist = train_distribution(&mut state, &t.train, &t.val, &config).unwrap();
            let e0 = negative_test_elbo(&state.student, test0, 4, 555, 0.5).unwrap();

            let accum = accumulate_test(&seq, i + 1).unwrap();
            let mut grng = ChaCha8Rng::seed_from_u64(777 + i as u64);
            let generated = teacher_generate(
                &state.student,
                state.student.arch.discrete_dim,
                2048,
                &mut grng,
            )
            .unwrap();
            let mode = FeatureMode::Classifier(&extractor);
            let fd = frechet_distance(
                &feature_stats(&accum.images, &mode).unwrap(),
                &feature_stats(&generated.images, &mode).unwrap(),
            )
            .unwrap();
            println!(
                "{:>8} step {} | test0 elbo {:>8.2} | accum frechet {:>8.2} | epochs {} | {:.1}s",
                method.as_str(),
                i + 1,
                e0,
                fd,
                hist.len(),
                started.elapsed().as_secs_f64()
            );
            if i + 1 < 3 {
                on_distribution_shift(&mut state, method == Method::Lifelong, 9000 + i as u64)
                    .unwrap();
            }
        }
    }
}
