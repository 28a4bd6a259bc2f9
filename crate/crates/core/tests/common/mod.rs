#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use aedkit::{Dataset, Instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SYMBOLS: usize = 30;
/// Symbols 1..=KEYS carry the mapping; the rest are distractors.
pub const KEYS: usize = 14;
pub const DISTRACTORS: usize = 2;

pub fn symbol(i: usize) -> String {
    format!("w{i:02}")
}

/// Fixed bijection on the key symbols; symbol 0 is the instruction.
pub fn target_of(x: usize) -> usize {
    1 + (5 * (x - 1) + 3) % KEYS
}

/// `tasks` x `per_task` clean instances. The input is a key symbol followed
/// by distractor symbols; the output is the image of the key. Distractors
/// make instances distinguishable, so a model can memorize individual ones.
pub fn synthetic_corpus(tasks: usize, per_task: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tasks * per_task);
    for t in 0..tasks {
        for j in 0..per_task {
            let x = rng.gen_range(1..=KEYS);
            let mut input = vec![symbol(x)];
            input.extend((0..DISTRACTORS).map(|_| symbol(rng.gen_range(KEYS + 1..SYMBOLS))));
            out.push(
                Instance::new(format!("t{t:02}-{j:02}"), symbol(0), symbol(target_of(x)))
                    .with_task(format!("task{t:02}"))
                    .with_input(input.join(" ")),
            );
        }
    }
    Dataset::new(out).expect("unique ids")
}

pub fn aedkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aedkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
