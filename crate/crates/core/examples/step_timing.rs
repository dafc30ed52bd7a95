//! Times forward/backward passes of LeNet-5 on random batches.

use std::time::Instant;

use fisher_prune::{build_lenet5, Tape, Tensor};

fn main() {
    let model = build_lenet5(0);
    let batch = 64;
    let images = Tensor::full(&[batch, 1, 28, 28], 0.5f32);
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let reps: usize = std::env::var("REPS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);

    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = model.forward(&mut tape, x).unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
        tape.backward(loss).unwrap();
    }
    let train = start.elapsed().as_secs_f64() / reps as f64;

    let start = Instant::now();
    for _ in 0..reps {
        model.predict(&images).unwrap();
    }
    let infer = start.elapsed().as_secs_f64() / reps as f64;
    println!(
        "batch {batch}: train step {:.1} ms ({:.0} samples/s), inference {:.1} ms ({:.0} samples/s)",
        train * 1e3,
        batch as f64 / train,
        infer * 1e3,
        batch as f64 / infer
    );
}
