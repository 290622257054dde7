//! Times desk-scale training steps.

use std::time::Instant;

use soundfilter::trainer::{TrainConfig, Trainer};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut trainer = Trainer::new(TrainConfig::desk()).expect("desk config");
    let batch = trainer.batch_for(0).unwrap();
    trainer.train_step(&batch).unwrap();
    let start = Instant::now();
    for s in 1..=steps {
        let batch = trainer.batch_for(s).unwrap();
        let loss = trainer.train_step(&batch).unwrap();
        println!("step {s}: loss {loss:.3} dB");
    }
    let per = start.elapsed().as_secs_f64() / steps as f64;
    println!("{per:.3} s/step, {:.1} min per 6000 steps", per * 6000.0 / 60.0);
    let start = Instant::now();
    let eval = trainer.evaluate().unwrap();
    println!("eval {eval:.3} dB in {:.2} s", start.elapsed().as_secs_f64());
}
