#[path = "support/gradcases.rs"]
mod gradcases;

use gradcases::{failure, Instance};

fn run(loss: &str) {
    for seed in 0..4 {
        let inst = Instance::new(seed);
        if let Some(msg) = failure(&inst.check(loss)) {
            panic!("{loss}, instance {seed}: {msg}");
        }
    }
}

#[test]
fn demi_cycle() {
    run("demi-cycle");
}

#[test]
fn translation() {
    run("translation");
}

#[test]
fn cycle() {
    run("cycle");
}

#[test]
fn infonce() {
    run("infonce");
}

#[test]
fn total_representation_loss() {
    run("total");
}

#[test]
fn probe_cross_entropy() {
    run("probe-ce");
}

#[test]
fn attention_path_cross_entropy() {
    run("attention-ce");
}
