//! Trains the desk profile on synthetic scenes and reports held-out scores.
//!
//! cargo run --release -p slotforge --example desk -- [key=value ...]

use std::time::Instant;

use slotforge::features::generate_scene;
use slotforge::metrics::evaluate;
use slotforge::trainer::train;
use slotforge::{infer, InferOptions, MaskSource, Model, RunConfig, SyntheticSceneSpec};

fn main() -> slotforge::Result<()> {
    let mut cfg = RunConfig::desk();
    for arg in std::env::args().skip(1) {
        cfg.apply_assignment(&arg)?;
    }

    let scene = |s: u64| {
        generate_scene(&SyntheticSceneSpec {
            seed: s,
            ..Default::default()
        })
    };
    let train_set = (0..64)
        .map(|s| scene(s).map(|(f, _)| f))
        .collect::<slotforge::Result<Vec<_>>>()?;
    let held_out = (1000..1016).map(scene).collect::<slotforge::Result<Vec<_>>>()?;
    let gts: Vec<_> = held_out.iter().map(|(_, g)| g.clone()).collect();

    let start = Instant::now();
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let report = train(&mut model, &train_set, &cfg.train, None)?;
    let first = report.losses.first().map_or(f64::NAN, |r| r.loss);
    let last = report.losses.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "steps {} loss {first:.4} -> {last:.4} in {:.1?}",
        report.losses.len(),
        start.elapsed()
    );

    for source in [MaskSource::Alpha, MaskSource::Attention] {
        let opts = InferOptions {
            mask_source: source,
            ..Default::default()
        };
        let preds = held_out
            .iter()
            .map(|(map, _)| infer(&model, map, &opts).map(|o| o.segmentation))
            .collect::<slotforge::Result<Vec<_>>>()?;
        let eval = evaluate(&preds, &gts, None)?;
        println!(
            "{:>9}: corloc {:.3} miou {:.3} mbo {:.3}",
            source.to_string(),
            eval.corloc,
            eval.miou,
            eval.mbo
        );
    }
    Ok(())
}
