//! One DAL run on small synthetic data, printing a line per round.
//!
//! cargo run --release --example single_run -- entropy 0.4

use noisy_dal::acquisition::Strategy;
use noisy_dal::dataset::{synth_blobs_split, SynthConfig};
use noisy_dal::engine::{run_dal_with, DalConfig};

fn main() -> noisy_dal::Result<()> {
    let mut args = std::env::args().skip(1);
    let strategy: Strategy = args.next().as_deref().unwrap_or("gci_vital").parse()?;
    let noise_rate: f64 = args.next().map_or(Ok(0.2), |s| s.parse()).expect("noise rate must be a number");

    let data = SynthConfig { num_classes: 10, per_class: 200, side: 16, ..SynthConfig::default() };
    let (train, test) = synth_blobs_split(&data, 50)?;

    let mut cfg = DalConfig::preset("vit-b4", 10)?;
    cfg.vit.image_size = 16;
    cfg.strategy = strategy;
    cfg.noise_rate = noise_rate;
    cfg.seed_size = 100;
    cfg.round_budget = 100;
    cfg.rounds = 4;
    cfg.train.max_epochs = 10;
    cfg.train.batch_size = 16;

    run_dal_with(&train, &test, cfg, |r| {
        println!(
            "round {} labeled {:>4} ({:.0}%) top1 {:.3} brier {:.3} fit {:.1}s",
            r.round,
            r.labeled,
            100.0 * r.labeled_fraction,
            r.top1,
            r.brier,
            r.seconds
        );
    })?;
    Ok(())
}
