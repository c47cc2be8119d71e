// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end run on the default synthetic dataset: train, assign, steer,
//! evaluate. Prints a short summary of every metric.

use std::time::Instant;

use saemnesia::concepts::{centralization_report, compute_stats, ScoreTable, DEFAULT_DELTA, DEFAULT_MARGIN};
use saemnesia::config::RunConfig;
use saemnesia::eval::Evaluator;
use saemnesia::steering::{build_plan, uniform_multipliers};
use saemnesia::synth::{generate, generate_split};
use saemnesia::trainer::{dataset_oc, run_pipeline};
use saemnesia::{Concept, Domain};

fn main() -> saemnesia::Result<()> {
    let text = std::env::args()
        .nth(1)
        .map(|p| std::fs::read_to_string(p).expect("readable config"))
        .unwrap_or_default();
    let cfg = RunConfig::from_toml(&text)?;
    let start = Instant::now();
    let train = generate(&cfg.synth)?;
    let holdout = generate_split(&cfg.synth, cfg.eval.holdout_split)?;
    let out = run_pipeline(&train, cfg.model, &cfg.unsupervised, &cfg.supervised)?;
    println!("trained in {:.1?}", start.elapsed());
    for (name, log) in [("unsup", &out.unsupervised_log), ("sup", &out.supervised_log)] {
        if let Some(last) = log.last() {
            println!("{name}: {:?} dead={}", last.losses, last.dead);
        }
    }

    let table = ScoreTable::from_model(&out.model, &train, DEFAULT_DELTA)?;
    let report = centralization_report(&table, &out.assignment, DEFAULT_MARGIN)?;
    let dominant = report.iter().filter(|r| r.dominant).count();
    let top_match = report.iter().filter(|r| r.top_latent == r.assigned).count();
    let min_ratio = report.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    println!(
        "centralization: dominant {dominant}/{} top==assigned {top_match} min ratio {min_ratio:.3}",
        report.len()
    );
    for r in report.iter().filter(|r| !r.dominant) {
        println!("  weak {} top {:.4} runner {:.4} ratio {:.3} top_latent {} assigned {}", r.concept, r.top, r.runner_up, r.ratio, r.top_latent, r.assigned);
    }
    println!(
        "oc holdout: pre {:.5} post {:.5}",
        dataset_oc(&out.pretrained, &holdout, &out.assignment)?,
        dataset_oc(&out.model, &holdout, &out.assignment)?
    );

    let stats = compute_stats(&out.model, &train)?;
    let objects: Vec<Concept> = out.assignment.concepts().filter(|c| c.domain == Domain::Object).collect();
    let plan = build_plan(&stats, &out.assignment, &objects, &uniform_multipliers(&objects, -1.0))?;
    let ev = Evaluator::new(&out.model, &train, &holdout)?;
    println!("clean object acc {:.4}", ev.clean_accuracy(Domain::Object)?.overall);
    println!("clean style acc {:.4}", ev.clean_accuracy(Domain::Style)?.overall);
    let sweep = ev.tune_multipliers(&plan, &cfg.steering.candidates)?;
    let tuned = build_plan(&stats, &out.assignment, &objects, &sweep.best_multipliers())?;
    let (mut ua, mut ira, mut cra) = (0.0, 0.0, 0.0);
    for &c in &objects {
        let r = ev.evaluate_unlearning(&tuned, c)?;
        if r.ua < 0.9 || r.ira < 0.85 {
            println!("  low {c}: ua {:.3} ira {:.3} cra {:.3} g {:?}", r.ua, r.ira, r.cra, tuned.multiplier(c));
        }
        ua += r.ua;
        ira += r.ira;
        cra += r.cra;
    }
    let k = objects.len() as f64;
    println!("tuned: ua {:.4} ira {:.4} cra {:.4} ({} evals)", ua / k, ira / k, cra / k, sweep.evaluations);
    let curve = ev.uniform_sweep(&plan, &cfg.steering.candidates)?;
    for p in &curve.points {
        println!("  uniform {:>5}: ua {:.4} ira {:.4} cra {:.4} avg {:.4}", p.multiplier, p.ua, p.ira, p.cra, p.average);
    }
    let order: Vec<Concept> = cfg
        .eval
        .sequential_order
        .iter()
        .map(|n| train.find_concept(n))
        .collect::<saemnesia::Result<_>>()?;
    let seq = ev.sequential_unlearning(&tuned, &order)?;
    for t in &seq.tasks {
        println!("  seq {}: ua {:.4} ra {:.4}", t.task, t.ua, t.ra);
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
