//! Runs the synthetic confound experiment for one or more seeds.
//!
//! `cargo run --release -p veil-core --example synthetic -- seeds=0,1 task_rate=0.3`

use std::time::Instant;

use veil::experiment::SyntheticExperiment;

fn main() -> veil::Result<()> {
    let mut exp = SyntheticExperiment::default();
    let mut seeds = vec![0u64];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        let f = || v.parse::<f64>().expect("numeric value");
        match k {
            "seeds" => seeds = v.split(',').map(|s| s.parse().expect("seed")).collect(),
            "task_rate" => exp.synth.task_rate = f(),
            "task_purity" => exp.synth.task_purity = f(),
            "style_rate" => exp.synth.style_rate = f(),
            "rho" => exp.synth.confound_strength = f(),
            "length" => exp.synth.length = f() as usize,
            "embed" => exp.embed_dim = f() as usize,
            "maps" => exp.conv_maps = f() as usize,
            "disc_hidden" => exp.disc_hidden = f() as usize,
            "epochs" => exp.train.max_epochs = f() as usize,
            "patience" => exp.train.patience = f() as usize,
            "dropout" => exp.train.dropout = f(),
            "lr" => exp.train.learning_rate = f(),
            "standardize" => exp.attacker.standardize = v == "true",
            "lambdas" => exp.lambdas = v.split(',').map(|s| s.parse().expect("lambda")).collect(),
            other => panic!("unknown key {other}"),
        }
    }
    for seed in seeds {
        let start = Instant::now();
        let r = exp.clone().with_seed(seed).run()?;
        println!("seed {seed} ({:.1}s)", start.elapsed().as_secs_f64());
        for arm in std::iter::once(&r.baseline).chain(&r.adversarial) {
            println!(
                "  λ={:<8} dev {:5.1}  in {:5.1}  ood {:5.1}  attack {:5.1} (maj {:4.1})  disc {:>5}  epochs {}",
                arm.lambda.map_or("none".to_string(), |l| format!("{l:e}")),
                arm.dev_accuracy,
                arm.in_domain_accuracy,
                arm.out_of_domain_accuracy,
                arm.attacker_accuracy,
                arm.majority_baseline,
                arm.discriminator_accuracy.map_or("-".to_string(), |d| format!("{d:.1}")),
                arm.history.epochs.len(),
            );
        }
        println!("  selected λ={:e}", r.selected_arm().lambda.unwrap_or(0.0));
    }
    Ok(())
}
