use ckbd::codec::{ContextKind, ModelConfig};
use ckbd::data::synthetic_corpus;
use ckbd::masklab::train_random_mask_model;
use ckbd::trainer::TrainConfig;
use std::time::Instant;

fn main() {
    for (n, m) in [(16usize, 24usize), (12, 16), (16, 32)] {
        let cfg = TrainConfig {
            lambda: 0.01,
            steps: 30,
            batch: 8,
            patch_size: 64,
            learning_rate: 1e-4,
            lr_decay_step: 1_000_000,
            seed: 1,
            model: ModelConfig {
                n_channels: n,
                latent_channels: m,
                context_kernel: 5,
                context_kind: ContextKind::Checkerboard,
                ..ModelConfig::default()
            },
        };
        let corpus = synthetic_corpus(7, 48, 64);
        let t = Instant::now();
        let _w = train_random_mask_model(&cfg, &corpus, |_, _| {}).unwrap();
        let per_step = t.elapsed().as_secs_f64() / 30.0;
        println!(
            "masklab N={n} M={m}: {:.1} ms/step -> 20k steps = {:.1} min",
            per_step * 1e3,
            per_step * 20_000.0 / 60.0
        );
    }
}
