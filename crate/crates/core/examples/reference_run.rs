//! Runs the reference experiment end to end in a temporary directory and
//! prints the comparison table plus the headline aggregate numbers.
//!
//! ```sh
//! cargo run --release -p emea-core --example reference_run
//! ```

use std::time::Instant;

use emea_core::eval::{average_records, Method};
use emea_core::pipeline::{continuum_average, standard_methods, Pipeline};
use emea_core::reference::reference_config;
use emea_core::report::build_table;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let fast = args.iter().any(|a| a == "--fast");
    let dir = tempfile::tempdir()?;
    let cfg = reference_config(dir.path());
    let p = Pipeline::new(cfg)?;

    let phases: &[(&str, Box<dyn Fn() -> emea_core::error::Result<()>>)] = &[
        ("gen-data", Box::new(|| p.gen_data(false).map(|_| ()))),
        ("pretrain", Box::new(|| p.pretrain(false).map(|_| ()))),
        (
            "lm-adapters",
            Box::new(|| p.train_lm_adapters(None, false).map(|_| ())),
        ),
        ("task", Box::new(|| p.train_task(false).map(|_| ()))),
        ("fusion", Box::new(|| p.train_fusion(false).map(|_| ()))),
    ];
    for (name, f) in phases {
        let t = Instant::now();
        f()?;
        println!("{name}: {:.1}s", t.elapsed().as_secs_f32());
    }

    let t = Instant::now();
    let records = p.eval_grid(&standard_methods())?;
    println!("grid: {:.1}s", t.elapsed().as_secs_f32());

    let table = build_table(&records)?;
    print!("{}", table.render_text());

    for m in standard_methods() {
        if let Some(v) = continuum_average(&records, &m.key()) {
            println!("avg {:<10} {:.4}", m.key(), v);
        }
    }

    // Per-variety view of the adapted ensemble vs the ensemble and singles.
    for r in average_records(&records) {
        if r.method == "emea-s10" {
            println!(
                "emea-s10 {} = {:.4} alpha_mean={:?}",
                r.variety, r.value, r.alpha_mean
            );
        }
    }

    if fast {
        return Ok(());
    }

    // Batch-size sweep on the middle target.
    let t = Instant::now();
    let sweep = p.sweep("tgt-mid", &[1, 4, 16, 32])?;
    println!("sweep: {:.1}s", t.elapsed().as_secs_f32());
    for r in sweep.iter().filter(|r| r.seed.is_none()) {
        println!("sweep bs={} -> {:.4}", r.batch_size, r.value);
    }

    // Throughput ordering.
    let t = Instant::now();
    for m in [Method::En, Method::Ensemble, Method::EmeaS1, Method::EmeaS10] {
        let eps = p.bench("tgt-mid", m, 4, 6, 2)?;
        println!("bench {:<10} {eps:.1} ex/s", m.key());
    }
    println!("bench: {:.1}s", t.elapsed().as_secs_f32());

    // Budgeted adapters on the middle target.
    let t = Instant::now();
    for budget in [1_000usize, 50_000] {
        let mut vals = Vec::new();
        for &seed in &p.cfg.seeds.clone() {
            let r = p.eval_cell("tgt-mid", Method::NewAdapter(budget), seed)?;
            vals.push(r.value);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        println!(
            "new-adapter-{budget}: {mean:.4} ({:.1}s so far)",
            t.elapsed().as_secs_f32()
        );
    }
    Ok(())
}
