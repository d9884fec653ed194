//! Trains a small model on a generated phantom set and prints test metrics.
//!
//! Usage: `phantom_run [epochs] [lr] [ablation] [lambda] [seed] [offset_lo] [offset_hi]`

use std::time::Instant;

use mcddpm::config::desk_model;
use mcddpm::data::{generate_phantom_dataset, split_records, PhantomSpec, Split};
use mcddpm::evaluation::{analyze_case, evaluate_cases};
use mcddpm::postprocess::PostprocessConfig;
use mcddpm::training::{fit, Trainer};
use mcddpm::{Ablation, InferenceConfig, Mcddpm, PNorm, TrainConfig};

fn main() -> mcddpm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let epochs: usize = arg(1, "200").parse().unwrap();
    let lr: f64 = arg(2, "1e-3").parse().unwrap();
    let ablation: Ablation = arg(3, "full").parse()?;
    let lambda: f64 = arg(4, "0.5").parse().unwrap();
    let seed: u64 = arg(5, "0").parse().unwrap();
    let mut spec = PhantomSpec::default();
    spec.anomaly.intensity_offset.0 = arg(6, &spec.anomaly.intensity_offset.0.to_string()).parse().unwrap();
    spec.anomaly.intensity_offset.1 = arg(7, &spec.anomaly.intensity_offset.1.to_string()).parse().unwrap();

    let records = generate_phantom_dataset(&spec)?;
    let train = split_records(records.clone(), Split::Train);
    let val = split_records(records.clone(), Split::Val);
    let test = split_records(records, Split::Test);

    let config = TrainConfig {
        lr,
        lambda,
        seed,
        max_epochs: epochs,
        val_every: 25,
        patches: mcddpm::diffusion::PatchSampler { sizes: vec![(32, 32)] },
        ..TrainConfig::default()
    };
    let model = Mcddpm::new(desk_model(ablation), seed)?;
    println!("parameters: {}", model.params().count());
    let start = Instant::now();
    let trainer = Trainer::new(model, config)?;
    let out = fit(trainer, &train, &val)?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    for h in out.history.iter().filter(|h| h.val_error.is_some()) {
        println!("epoch {:>4} loss {:.5} val {:.5}", h.epoch, h.train_loss, h.val_error.unwrap());
    }
    let model = out.best.model()?;
    let schedule = out.final_trainer.schedule.clone();
    let infer = InferenceConfig { seed, ..InferenceConfig::default() };
    let post = PostprocessConfig::default();
    let cases = test
        .iter()
        .map(|r| analyze_case(&model, r, &schedule, &infer, &post, PNorm::L2))
        .collect::<mcddpm::Result<Vec<_>>>()?;
    let rows = evaluate_cases(&cases, &[0.1, 0.2, 0.3], "phantom", "best")?;
    print!("{}", mcddpm::evaluation::EvalReport { rows }.to_table());
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
