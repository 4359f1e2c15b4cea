//! Trains on a small synthetic set and reports held-out point-wise mesh
//! distance before and after.
//!
//! `cargo run --release -p pose-transfer --example desk_run -- <mode> <epochs> <lr> <seed> [baseline|noLD]`

use std::time::Instant;

use pose_transfer::losses::LossWeights;
use pose_transfer::mesh::{zero_center, DEFAULT_EVAL_SEED};
use pose_transfer::metrics::{pmd, points_of};
use pose_transfer::synthetic::{make_dataset, DatasetConfig};
use pose_transfer::trainer::{pair_pmd, prepare_eval, Mode, Seeds, TrainData, Trainer, TrainingConfig};
use pose_transfer::{GeneratorParams, ModelDims};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode: Mode = args.first().map(String::as_str).unwrap_or("supervised").parse()?;
    let epochs: usize = args.get(1).map_or(Ok(60), |s| s.parse())?;
    let lr: f64 = args.get(2).map_or(Ok(1e-3), |s| s.parse())?;
    let seed: u64 = args.get(3).map_or(Ok(0), |s| s.parse())?;
    let variant = args.get(4).cloned().unwrap_or_default();

    let ds = make_dataset(&DatasetConfig {
        n_ids: 4,
        n_poses: 8,
        seed,
        ..DatasetConfig::default()
    })?;
    let held = [6usize, 7];
    let data = TrainData::from_dataset(&ds)?.retain(|k, _| !held.contains(&k.pose));
    let mut dims = ModelDims::scaled(8)?;
    let mut weights = LossWeights::default();
    if variant == "baseline" {
        weights = LossWeights::baseline();
    }
    if variant == "noLD" {
        dims.disentangle = false;
        weights = LossWeights::baseline();
    }
    let cfg = TrainingConfig {
        mode,
        epochs,
        lr0: lr,
        dims,
        weights,
        seeds: Seeds {
            init: seed,
            shuffle: seed + 100,
            reorder: seed + 200,
        },
        ..TrainingConfig::default()
    };
    let mesh = |i: usize, p: usize| {
        let k = ds.entries.iter().position(|e| e.identity == i && e.pose == p).unwrap();
        &ds.meshes[k]
    };
    let eval = |params: &GeneratorParams<f32>| -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for &p in &held {
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        total +=
                            pair_pmd(params, mesh(a, p), mesh(b, 0), mesh(b, p), &cfg.ot, DEFAULT_EVAL_SEED).unwrap();
                        n += 1;
                    }
                }
            }
        }
        total / n as f64
    };
    let mut idle = 0.0;
    for &p in &held {
        for b in 0..4 {
            let (src, tgt) = (mesh(b, 0).to_tensor::<f64>(), mesh(b, p).to_tensor::<f64>());
            idle += pmd(&points_of(&src)?, &points_of(&tgt)?)?;
        }
    }
    println!("identity mesh left in its own pose: pmd {:.6}", idle / (2.0 * 4.0));
    let mut copy = 0.0;
    for &p in &held {
        for a in 0..4 {
            for b in (0..4).filter(|&b| b != a) {
                let src = zero_center(mesh(a, p)).to_tensor::<f64>();
                let tgt = zero_center(mesh(b, p)).to_tensor::<f64>();
                copy += pmd(&points_of(&src)?, &points_of(&tgt)?)?;
            }
        }
    }
    println!("pose mesh copied unchanged: pmd {:.6}", copy / (2.0 * 12.0));
    let mut trainer = Trainer::<f32>::new(cfg.clone(), &data)?;
    let before = eval(&trainer.params);
    println!("untrained held-out pmd {before:.6}");
    let start = Instant::now();
    trainer.run(|t| {
        let e = t.epoch();
        if e % 10 == 0 || e == 1 {
            let recs = &t.log.records;
            let last = recs.iter().rev().take(12).map(|r| r.values.total).sum::<f64>() / 12.0;
            println!(
                "epoch {e} loss {last:.4} pmd {:.6} t {:.1}s",
                eval(&t.params),
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let after = eval(&trainer.params);
    let parts = |params: &GeneratorParams<f32>, poses: &[usize]| -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for &p in poses {
            for a in 0..4 {
                for b in (0..4).filter(|&b| b != a) {
                    let (pm, im, tm) =
                        prepare_eval(mesh(a, p), mesh(b, 0), Some(mesh(b, p)), DEFAULT_EVAL_SEED).unwrap();
                    let out = params.transfer(&pm, &im, &cfg.ot).unwrap();
                    let hard = pm
                        .to_tensor::<f32>()
                        .gather_rows(&pose_transfer::losses::one_hot_indices(&out.binary).unwrap());
                    let gt = points_of(&tm.unwrap().to_tensor::<f64>()).unwrap();
                    for (k, t) in [&out.output, &out.warped, &hard].into_iter().enumerate() {
                        acc[k] += pmd(&points_of(t).unwrap(), &gt).unwrap();
                    }
                    n += 1.0;
                }
            }
        }
        acc.map(|x| x / n)
    };
    let [o, w, h] = parts(&trainer.params, &held);
    println!("held-out pmd: output {o:.6} soft warp {w:.6} hard warp {h:.6}");
    let [o, w, h] = parts(&trainer.params, &[1, 2]);
    println!("training poses pmd: output {o:.6} soft warp {w:.6} hard warp {h:.6}");
    println!(
        "trained held-out pmd {after:.6} reduction {:.1}% time {:.1}s",
        100.0 * (1.0 - after / before),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
