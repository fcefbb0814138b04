//! Runs the full comparison and prints the report.
//! Usage: `cargo run --release --example experiment [config.json]`.

use hreid::pipeline::{run_experiment, RunConfig};

fn main() -> hreid::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let start = std::time::Instant::now();
    let exp = run_experiment(&config)?;
    print!("{}", exp.report.to_text());
    for m in &exp.models {
        let h = &m.hierarchy;
        println!(
            "{}: {} nodes, {} leaves, depth {}",
            h.method.label(),
            h.nodes().len(),
            h.leaves().len(),
            h.root.depth()
        );
    }
    println!("architecture search, structured tree:");
    for n in &exp.models[0].train_log.nodes {
        if let Some(r) = &n.search {
            let acc: Vec<String> = r.candidates.iter().map(|c| format!("{:.3}@{}B", c.accuracy, c.memory_bytes)).collect();
            println!("  {:<12} {} layer(s) from [{}]", n.node_id, r.selected_layers, acc.join(" "));
        }
    }
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
