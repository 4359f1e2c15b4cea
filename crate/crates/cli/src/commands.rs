use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pose_transfer::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pose_transfer::gradcheck::{self, Which};
use pose_transfer::losses::LossWeights;
use pose_transfer::mesh::{load_mesh, save_mesh, MeshFormat, DEFAULT_EVAL_SEED};
use pose_transfer::metrics::{MetricReport, CSV_HEADER};
use pose_transfer::network::OtConfig;
use pose_transfer::synthetic::{load_manifest, make_dataset, DatasetConfig};
use pose_transfer::trainer::{evaluate_pair, transfer_meshes, Seeds, TrainData};
use pose_transfer::{Error, Mesh, Mode, ModelDims, Trainer, TrainingConfig};

use crate::settings::Settings;
use crate::{EvalArgs, Failure, GenDataArgs, GradcheckArgs, TrainArgs, TransferArgs};

pub const SEED_ENV: &str = "MAPCON_SEED";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.mapc";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.mapc";
pub const EVAL_CSV: &str = "eval.csv";

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
}

fn make_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::io(format!("creating {}: {e}", path.display())))
}

pub fn gen_data(a: GenDataArgs, s: &Settings) -> Result<(), Failure> {
    let d = DatasetConfig::default();
    let cfg = DatasetConfig {
        n_ids: s.get(a.n_ids, "n-ids", d.n_ids)?,
        n_poses: s.get(a.n_poses, "n-poses", d.n_poses)?,
        seed: s.get(a.seed, "seed", d.seed)?,
        split: s.get(a.split, "split", d.split)?,
        segments: s.get(a.segments, "segments", d.segments)?,
        rings: s.get(a.rings, "rings", d.rings)?,
        sides: s.get(a.sides, "sides", d.sides)?,
        noise: s.get(a.noise, "noise", d.noise)?,
        ranges: d.ranges,
    };
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Failure::usage(format!(
            "noise {} must be finite and non-negative",
            cfg.noise
        )));
    }
    let ds = make_dataset(&cfg)?;
    let manifest = ds.write(&a.out)?;
    let labelled = ds.labelled_count();
    println!(
        "wrote {} meshes ({labelled} labelled, {} unlabelled), manifest {}",
        ds.meshes.len(),
        ds.meshes.len() - labelled,
        manifest.display()
    );
    Ok(())
}

fn parse_dims(raw: &str) -> Result<ModelDims, Failure> {
    let v = raw
        .split(':')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::usage(format!("dims `{raw}`: {e}")))?;
    ModelDims::from_slice(&v).map_err(|e| Failure::usage(format!("dims `{raw}`: {e}")))
}

fn training_config(a: &TrainArgs, s: &Settings) -> Result<TrainingConfig, Failure> {
    let d = TrainingConfig::default();
    let w = LossWeights::default();
    let mut dims = match s.opt(a.dims.clone(), "dims")? {
        Some(raw) => parse_dims(&raw)?,
        None => ModelDims::scaled(s.get(a.dims_scale, "dims-scale", 1)?)?,
    };
    if let Some(on) = s.opt(a.disentangle, "disentangle")? {
        dims.disentangle = on;
    }
    let cfg = TrainingConfig {
        mode: s.get(a.mode, "mode", d.mode)?,
        epochs: s.get(a.epochs, "epochs", d.epochs)?,
        batch_size: s.get(a.batch_size, "batch-size", d.batch_size)?,
        lr0: s.get(a.lr, "lr", d.lr0)?,
        weights: LossWeights {
            rec: s.get(a.lambda_rec, "lambda-rec", w.rec)?,
            edge: s.get(a.lambda_edge, "lambda-edge", w.edge)?,
            mesh_cc: s.get(a.lambda_mesh_cc, "lambda-mesh-cc", w.mesh_cc)?,
            mesh_ss: s.get(a.lambda_mesh_ss, "lambda-mesh-ss", w.mesh_ss)?,
            point: s.get(a.lambda_point, "lambda-point", w.point)?,
            margin: s.get(a.margin, "margin", w.margin)?,
        },
        ot: OtConfig {
            eps: s.get(a.sinkhorn_eps, "sinkhorn-eps", d.ot.eps)?,
            iterations: s.get(a.sinkhorn_iters, "sinkhorn-iters", d.ot.iterations)?,
        },
        dims,
        seeds: Seeds {
            init: s.get(a.seed_init, "seed-init", d.seeds.init)?,
            shuffle: s.get(a.seed_shuffle, "seed-shuffle", d.seeds.shuffle)?,
            reorder: s.get(a.seed_reorder, "seed-reorder", d.seeds.reorder)?,
        },
        stage_switch_epoch: s.opt(a.stage_switch_epoch, "stage-switch-epoch")?,
    };
    cfg.validate()?;
    if cfg.stage_switch_epoch.is_some() && cfg.mode != Mode::Semi {
        return Err(Failure::usage("--stage-switch-epoch only applies to semi mode"));
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs, s: &Settings) -> Result<(), Failure> {
    let cfg = training_config(&a, s)?;
    let every = s.get(a.checkpoint_every, "checkpoint-every", 10)?;
    let manifest = s
        .opt(a.manifest.clone(), "manifest")?
        .ok_or_else(|| Failure::usage("train needs --manifest"))?;
    let (entries, meshes) = load_manifest(&manifest)?;
    let data = TrainData::new(&entries, &meshes)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::<f32>::resume(cfg.clone(), &data, load_checkpoint(p)?)?,
        None => Trainer::<f32>::new(cfg.clone(), &data)?,
    };
    make_dir(&a.out)?;
    let header = cfg.describe();
    for line in &header {
        println!("{line}");
    }
    let log_path = a.out.join(TRAIN_LOG);
    let mut last_good = trainer.checkpoint();
    while !trainer.is_done() {
        let records = match trainer.run_epoch() {
            Ok(r) => r,
            Err(e) => {
                let kept = a.out.join(LAST_GOOD_CHECKPOINT);
                save_checkpoint(&last_good, &kept)?;
                write_file(&log_path, &trainer.log.to_csv(&header))?;
                eprintln!("kept checkpoint of epoch {} at {}", last_good.epoch, kept.display());
                return Err(e.into());
            }
        };
        let steps = records.len();
        let mean = records.iter().map(|r| r.values.total).sum::<f64>() / steps.max(1) as f64;
        let lr = records.last().map_or(0.0, |r| r.lr);
        println!(
            "epoch {}/{} steps {steps} mean total {mean:.6e} lr {lr:e}",
            trainer.epoch(),
            cfg.epochs
        );
        last_good = trainer.checkpoint();
        write_file(&log_path, &trainer.log.to_csv(&header))?;
        if every > 0 && trainer.epoch() % every == 0 && !trainer.is_done() {
            save_checkpoint(&last_good, a.out.join(format!("epoch_{:04}.mapc", trainer.epoch())))?;
        }
    }
    write_file(&log_path, &trainer.log.to_csv(&header))?;
    let path = a.out.join(FINAL_CHECKPOINT);
    save_checkpoint(&trainer.checkpoint(), &path)?;
    println!("final checkpoint {}", path.display());
    Ok(())
}

fn eval_seed(flag: Option<u64>, s: &Settings) -> Result<u64, Failure> {
    if let Some(seed) = s.opt(flag, "seed")? {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|e| Failure::usage(format!("{SEED_ENV}=`{raw}`: {e}"))),
        Err(_) => Ok(DEFAULT_EVAL_SEED),
    }
}

fn load_model(path: &Path, scale: Option<usize>) -> Result<Checkpoint<f32>, Failure> {
    let ck = load_checkpoint::<f32>(path)?;
    if let Some(scale) = scale {
        let want = ModelDims::scaled(scale)?.to_vec();
        let have = ck.params.dims.to_vec();
        // the trailing entry is the disentangle flag, not a width
        if want[..9] != have[..9] {
            return Err(Error::DimMismatch(format!(
                "checkpoint widths {:?} do not match --dims-scale {scale}",
                &have[..9]
            ))
            .into());
        }
    }
    Ok(ck)
}

fn mesh_format(name: &str) -> Result<MeshFormat, Failure> {
    match name.to_ascii_lowercase().as_str() {
        "obj" => Ok(MeshFormat::Obj),
        "ply" => Ok(MeshFormat::Ply),
        other => Err(Failure::usage(format!("unknown mesh format `{other}` (obj, ply)"))),
    }
}

pub fn transfer(a: TransferArgs, s: &Settings) -> Result<(), Failure> {
    let seed = eval_seed(a.seed, s)?;
    let format = match s.opt(a.format.clone(), "format")? {
        Some(f) => mesh_format(&f)?,
        None => MeshFormat::from_path(&a.identity).unwrap_or(MeshFormat::Ply),
    };
    let ck = load_model(&a.checkpoint, s.opt(a.dims_scale, "dims-scale")?)?;
    let pose = load_mesh(&a.pose)?;
    let identity = load_mesh(&a.identity)?;
    let res = transfer_meshes(&ck.params, &pose, &identity, &ck.ot, seed)?;
    make_dir(&a.out)?;
    let ext = match format {
        MeshFormat::Obj => "obj",
        MeshFormat::Ply => "ply",
    };
    let out = a.out.join(format!("transferred.{ext}"));
    save_mesh(&res.output, &out, format)?;
    println!("wrote {} ({} vertices)", out.display(), res.output.num_vertices());
    if a.emit_warped {
        let warped = a.out.join(format!("warped.{ext}"));
        save_mesh(&res.warped, &warped, format)?;
        println!("wrote {}", warped.display());
    }
    Ok(())
}

struct Pair {
    id: String,
    pose: usize,
    identity: usize,
    target: Option<usize>,
}

/// Every (pose mesh, identity mesh) combination with different identities
/// and different poses; the target is the identity in the pose mesh's pose.
fn manifest_pairs(path: &Path) -> Result<(Vec<Mesh>, Vec<Pair>), Failure> {
    let (entries, meshes) = load_manifest(path)?;
    let index: BTreeMap<(usize, usize), usize> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.identity, e.pose), i))
        .collect();
    let mut pairs = Vec::new();
    for (i, p) in entries.iter().enumerate() {
        for (j, q) in entries.iter().enumerate() {
            if p.identity == q.identity || p.pose == q.pose {
                continue;
            }
            pairs.push(Pair {
                id: format!("id{}_pose{}->id{}_pose{}", p.identity, p.pose, q.identity, q.pose),
                pose: i,
                identity: j,
                target: index.get(&(q.identity, p.pose)).copied(),
            });
        }
    }
    Ok((meshes, pairs))
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Pair list rows `pose,identity[,target]`, paths relative to the list.
fn listed_pairs(path: &Path) -> Result<(Vec<Mesh>, Vec<Pair>), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut meshes = Vec::new();
    let mut loaded: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut load = |rel: &str| -> Result<usize, Failure> {
        let full = base.join(rel);
        if let Some(&i) = loaded.get(&full) {
            return Ok(i);
        }
        meshes.push(load_mesh(&full)?);
        loaded.insert(full, meshes.len() - 1);
        Ok(meshes.len() - 1)
    };
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("pose,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (p, i, t) = match fields[..] {
            [p, i] => (p, i, None),
            [p, i, ""] => (p, i, None),
            [p, i, t] => (p, i, Some(t)),
            _ => {
                return Err(Failure::io(format!(
                    "{}:{}: expected pose,identity[,target]",
                    path.display(),
                    n + 1
                )))
            }
        };
        pairs.push(Pair {
            id: format!("{}->{}", stem(Path::new(p)), stem(Path::new(i))),
            pose: load(p)?,
            identity: load(i)?,
            target: t.map(&mut load).transpose()?,
        });
    }
    Ok((meshes, pairs))
}

pub fn eval(a: EvalArgs, s: &Settings) -> Result<(), Failure> {
    let seed = eval_seed(a.seed, s)?;
    let ck = load_model(&a.checkpoint, s.opt(a.dims_scale, "dims-scale")?)?;
    let (meshes, pairs) = match (&a.pairs, s.opt(a.manifest.clone(), "manifest")?) {
        (Some(list), _) => listed_pairs(list)?,
        (None, Some(m)) => manifest_pairs(&m)?,
        (None, None) => return Err(Failure::usage("eval needs --manifest or --pairs")),
    };
    let missing: Vec<&str> = pairs
        .iter()
        .filter(|p| p.target.is_none())
        .map(|p| p.id.as_str())
        .collect();
    if a.strict && !missing.is_empty() {
        return Err(Failure::io(format!(
            "{} pair(s) without ground truth: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut csv = format!("{CSV_HEADER}\n");
    let mut reports = Vec::new();
    for p in &pairs {
        let Some(t) = p.target else {
            eprintln!("warning: no ground truth for {}", p.id);
            csv.push_str(&format!("{},NA,NA,NA,NA,NA\n", p.id));
            continue;
        };
        let mut r = evaluate_pair(
            &ck.params,
            &meshes[p.pose],
            &meshes[p.identity],
            &meshes[t],
            &ck.ot,
            seed,
        )?;
        if !a.timing {
            r.seconds = 0.0;
        }
        csv.push_str(&r.csv_row(&p.id));
        csv.push('\n');
        reports.push(r);
    }
    let mean = MetricReport::mean(&reports);
    if let Some(m) = &mean {
        csv.push_str(&m.csv_row("mean"));
        csv.push('\n');
    }
    make_dir(&a.out)?;
    let path = a.out.join(EVAL_CSV);
    write_file(&path, &csv)?;
    match mean {
        Some(m) => println!(
            "{} pairs scored, {} without ground truth; mean PMD {:.4} CD {:.4} EMD {:.4} (x1e4, x1e4, x1e3)",
            reports.len(),
            missing.len(),
            m.pmd * pose_transfer::metrics::PMD_UNIT,
            m.cd * pose_transfer::metrics::CD_UNIT,
            m.emd * pose_transfer::metrics::EMD_UNIT
        ),
        None => println!("no pair had ground truth; nothing scored"),
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs, s: &Settings) -> Result<(), Failure> {
    let which = s.get(a.which, "which", Which::All)?;
    let tol = s.get(a.tol, "tol", 1e-4)?;
    let seed = s.get(a.seed, "seed", 0)?;
    let repeats = s.get(a.repeats, "repeats", 3)?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Failure::usage(format!("tol {tol} must be positive")));
    }
    if repeats == 0 {
        return Err(Failure::usage("repeats must be at least 1"));
    }
    if let Some(c) = &a.corrupt {
        if !gradcheck::registry().iter().any(|i| i.name == c) {
            return Err(Failure::usage(format!("no gradient check item named `{c}`")));
        }
    }
    // worst error per item over all seeds, in registry order
    let mut worst: Vec<(&'static str, f64, bool)> = Vec::new();
    for r in 0..repeats {
        for item in gradcheck::run(which, tol, seed + r, a.corrupt.as_deref())? {
            match worst.iter_mut().find(|w| w.0 == item.name) {
                Some(w) => {
                    w.1 = w.1.max(item.max_rel_error);
                    w.2 &= item.passed;
                }
                None => worst.push((item.name, item.max_rel_error, item.passed)),
            }
        }
    }
    for (name, err, ok) in &worst {
        println!("{name:<20} {err:.3e} {}", if *ok { "ok" } else { "FAIL" });
    }
    let failed: Vec<&str> = worst.iter().filter(|w| !w.2).map(|w| w.0).collect();
    println!(
        "{} items, {} seed(s) from {seed}, tol {tol:e}: {} failed",
        worst.len(),
        repeats,
        failed.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 5,
            msg: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}
