//! Full desk run: prepares (or reuses) the autoencoder, tail cache and
//! teacher, then trains and scores every ablation variant.
//!
//! ```text
//! cargo run --release --example desk_run -- [config.toml] [workdir] [variant,...]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use evoedit::evalbench::{report_table, run_ablations, teacher_anchoring, AblationVariant, BenchSettings};
use evoedit::pipeline::{prepare_cached, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) if p != "-" => TrainConfig::load(p.as_ref())?,
        _ => TrainConfig::default(),
    };
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "desk".into()));
    let variants = match args.next() {
        Some(list) => list.split(',').map(str::parse).collect::<Result<Vec<AblationVariant>, _>>()?,
        None => AblationVariant::ALL.to_vec(),
    };
    std::fs::create_dir_all(&dir)?;

    let t0 = Instant::now();
    let prepared = prepare_cached(&cfg, &dir, |l| {
        if l.step % 250 == 0 {
            eprintln!("[{:7.1}s] {} {} loss {:.4}", t0.elapsed().as_secs_f64(), l.phase, l.step, l.loss);
        }
    })?;
    let settings = BenchSettings::from_config(&cfg);
    let (first, last) = teacher_anchoring(&prepared.teacher.ema, &prepared.vae, &settings)?;
    eprintln!("teacher anchoring: first frame {first:.2} dB, last frame {last:.2} dB");

    let (table, _) = run_ablations(&variants, &prepared, &cfg, &settings, |v, l| {
        if l.step % 50 == 0 {
            eprintln!("[{:7.1}s] {} {} loss {:.4}", t0.elapsed().as_secs_f64(), v.name(), l.step, l.loss);
        }
    })?;
    println!("{}", table.to_text());
    for line in table.ordering_summary() {
        println!("{line}");
    }
    for r in &table.rows {
        println!("\n{}\n{}", r.variant.name(), report_table(&r.report));
    }
    println!("\nbaseline\n{}", report_table(&table.baseline));
    eprintln!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
