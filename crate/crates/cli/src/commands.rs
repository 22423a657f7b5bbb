use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use sgm_core::cells::CellKind;
use sgm_core::data::{generate, generate_set, load_manifest, write_manifest, write_pfm, write_ppm, SequenceDescriptor};
use sgm_core::network::{FusionNet, NetConfig};
use sgm_core::train::gradcheck::{gradcheck_net, GradcheckOptions};
use sgm_core::train::{evaluate, evaluate_set, train_to_dir, Checkpoint, Precision, TrainConfig, Trainer};
use sgm_core::{Element, ExposureSequence, SceneSpec, SequenceBatch, TonemapConfig};

use crate::{AblateArgs, Command, EvalArgs, FuseArgs, GenDataArgs, GradcheckArgs, InspectArgs, TrainArgs, TrainFlags};

pub(crate) fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Fuse(a) => fuse(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::InspectCkpt(a) => inspect(a, out),
    }
}

/// Defaults, then the config file, then explicit flags.
fn build_config(flags: &TrainFlags, cell: Option<CellKind>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.merge_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = cell {
        cfg.cell = v;
    }
    if let Some(v) = flags.mode {
        cfg.mode = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if flags.shuffle_order {
        cfg.shuffle_exposure_order = true;
    }
    if let Some(v) = &flags.var_lengths {
        cfg.variable_length_set = v.clone();
    }
    if let Some(v) = flags.precision {
        cfg.precision = v;
    }
    if let Some(v) = flags.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = flags.patch {
        cfg.patch_size = v;
    }
    if let Some(v) = flags.features {
        cfg.features = v;
    }
    if let Some(v) = flags.halve_every {
        cfg.halve_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_sequences(manifest: &Path) -> Result<Vec<(String, ExposureSequence)>> {
    let descriptors = load_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let mut seen = HashSet::new();
    descriptors
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let seq = d.load().with_context(|| format!("loading sequence `{}`", d.name))?;
            let name = if seen.insert(d.name.clone()) {
                d.name.clone()
            } else {
                format!("{}_{}", d.name, i)
            };
            Ok((name, seq))
        })
        .collect()
}

fn subset(seq: &ExposureSequence, n: Option<usize>) -> Result<ExposureSequence> {
    Ok(match n {
        Some(n) => seq.centered_subset(n)?,
        None => seq.clone(),
    })
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    ensure!(a.n > 0, "--n must be at least 1");
    let template = SceneSpec {
        height: a.size,
        width: a.size,
        ..SceneSpec::default().with_frames(a.n)
    };
    let seqs = generate_set(&template, a.seed, a.count)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut descriptors = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let name = format!("seq{:03}", i);
        let dir = a.out.join(&name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut frames = Vec::with_capacity(seq.len());
        for (k, (frame, &t)) in seq.frames().iter().zip(seq.exposure_times()).enumerate() {
            let path = dir.join(format!("frame{}.ppm", k));
            write_ppm(&path, frame)?;
            frames.push((path, t));
        }
        let gt = dir.join("gt.pfm");
        write_pfm(&gt, seq.hdr_gt().expect("generated sequences carry ground truth"))?;
        descriptors.push(SequenceDescriptor {
            name,
            frames,
            ref_index: seq.ref_index(),
            gt: Some(gt),
        });
    }
    let manifest = a.out.join("manifest.txt");
    write_manifest(&manifest, &descriptors)?;
    writeln!(
        out,
        "wrote {} sequences of {} frames to {}",
        seqs.len(),
        a.n,
        manifest.display()
    )?;
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = build_config(&a.flags, a.cell)?;
    let data: Vec<_> = load_sequences(&a.manifest)?.into_iter().map(|(_, s)| s).collect();
    let ckpt = match cfg.precision {
        Precision::F32 => train_to_dir::<f32>(cfg.clone(), data.clone(), &a.out)?,
        Precision::F64 => train_to_dir::<f64>(cfg.clone(), data.clone(), &a.out)?,
    };
    writeln!(
        out,
        "trained {} {} net for {} steps ({} parameters)",
        cfg.mode,
        cfg.cell,
        ckpt.step,
        ckpt.param_count()
    )?;
    if ckpt.step > 0 {
        let (pl, pt) = match cfg.precision {
            Precision::F32 => evaluate_set(&ckpt.to_net::<f32>()?, &data, TonemapConfig::default())?,
            Precision::F64 => evaluate_set(&ckpt.to_net::<f64>()?, &data, TonemapConfig::default())?,
        };
        writeln!(out, "training set psnr_l {:.3} dB, psnr_t {:.3} dB", pl, pt)?;
    }
    writeln!(
        out,
        "model written to {}",
        a.out.join(sgm_core::train::MODEL_FILE).display()
    )?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Precision)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let precision = ckpt.config()?.precision;
    Ok((ckpt, precision))
}

fn fuse_with<T: Element>(ckpt: &Checkpoint, a: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let net = ckpt.to_net::<T>()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, seq) in load_sequences(&a.manifest)? {
        let seq = subset(&seq, a.n)?;
        let y = net.predict(&seq).with_context(|| format!("fusing `{}`", name))?;
        let path = a.out.join(format!("{}.pfm", name));
        write_pfm(&path, &y.cast())?;
        writeln!(out, "{} N={} -> {}", name, seq.len(), path.display())?;
    }
    Ok(())
}

fn fuse(a: FuseArgs, out: &mut dyn Write) -> Result<()> {
    let (ckpt, precision) = load_checkpoint(&a.ckpt)?;
    match precision {
        Precision::F32 => fuse_with::<f32>(&ckpt, &a, out),
        Precision::F64 => fuse_with::<f64>(&ckpt, &a, out),
    }
}

fn eval_with<T: Element>(ckpt: &Checkpoint, a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let net = ckpt.to_net::<T>()?;
    writeln!(out, "name,N,psnr_l,psnr_t")?;
    for (name, seq) in load_sequences(&a.manifest)? {
        let seq = subset(&seq, a.n)?;
        let (pl, pt) =
            evaluate(&net, &seq, TonemapConfig::default()).with_context(|| format!("evaluating `{}`", name))?;
        writeln!(out, "{},{},{},{}", name, seq.len(), pl, pt)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (ckpt, precision) = load_checkpoint(&a.ckpt)?;
    match precision {
        Precision::F32 => eval_with::<f32>(&ckpt, &a, out),
        Precision::F64 => eval_with::<f64>(&ckpt, &a, out),
    }
}

/// PSNR-L and PSNR-T per evaluated length for one trained kind.
struct AblationRow {
    kind: CellKind,
    params: usize,
    scores: Vec<(f64, f64)>,
}

fn ablate_kind<T: Element>(cfg: TrainConfig, data: &[ExposureSequence], ns: &[usize]) -> Result<AblationRow> {
    let kind = cfg.cell;
    let mut trainer = Trainer::<T>::new(cfg, data.to_vec())?;
    trainer.run(|_, _, _| Ok(()))?;
    let net = trainer.net();
    let mut scores = Vec::with_capacity(ns.len());
    for &n in ns {
        let subsets = data
            .iter()
            .map(|s| s.centered_subset(n))
            .collect::<sgm_core::Result<Vec<_>>>()?;
        scores.push(evaluate_set(net, &subsets, TonemapConfig::default())?);
    }
    Ok(AblationRow {
        kind,
        params: net.param_count(),
        scores,
    })
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    ensure!(!a.kinds.is_empty(), "--kinds is empty");
    ensure!(!a.ns.is_empty() && !a.ns.contains(&0), "--ns needs positive lengths");
    let mut base = build_config(&a.flags, None)?;
    if base.variable_length_set.is_empty() {
        base.variable_length_set = a.ns.clone();
    }
    let longest = *a.ns.iter().max().expect("checked non-empty");
    let data: Vec<ExposureSequence> = match &a.manifest {
        Some(m) => load_sequences(m)?.into_iter().map(|(_, s)| s).collect(),
        None => {
            let template = SceneSpec {
                height: a.size,
                width: a.size,
                ..SceneSpec::default().with_frames(longest)
            };
            generate_set(&template, base.seed, a.count)?
        }
    };
    if let Some(short) = data.iter().find(|s| s.len() < longest) {
        bail!("a sequence has {} frames but N={} is requested", short.len(), longest);
    }

    let mut rows = Vec::with_capacity(a.kinds.len());
    for &kind in &a.kinds {
        let cfg = TrainConfig {
            cell: kind,
            ..base.clone()
        };
        let row = match cfg.precision {
            Precision::F32 => ablate_kind::<f32>(cfg, &data, &a.ns),
            Precision::F64 => ablate_kind::<f64>(cfg, &data, &a.ns),
        }
        .with_context(|| format!("ablating `{}`", kind))?;
        rows.push(row);
    }

    let mut header = format!("{:<8} {:>9}", "kind", "params");
    for n in &a.ns {
        header.push_str(&format!(
            " {:>11} {:>11}",
            format!("N={} PSNR-L", n),
            format!("N={} PSNR-T", n)
        ));
    }
    writeln!(out, "{}", header)?;
    for r in &rows {
        let mut line = format!("{:<8} {:>9}", r.kind.name(), r.params);
        for (pl, pt) in &r.scores {
            line.push_str(&format!(" {:>11.3} {:>11.3}", pl, pt));
        }
        writeln!(out, "{}", line)?;
    }
    let mean_t = |r: &AblationRow| r.scores.iter().map(|s| s.1).sum::<f64>() / r.scores.len() as f64;
    let mut ranked: Vec<&AblationRow> = rows.iter().collect();
    ranked.sort_by(|x, y| mean_t(y).total_cmp(&mean_t(x)));
    let order: Vec<&str> = ranked.iter().map(|r| r.kind.name()).collect();
    writeln!(out, "ranking by mean PSNR-T: {}", order.join(" > "))?;

    if let Some(path) = &a.out {
        let mut csv = String::from("kind,params,N,psnr_l,psnr_t\n");
        for r in &rows {
            for (n, (pl, pt)) in a.ns.iter().zip(&r.scores) {
                csv.push_str(&format!("{},{},{},{},{}\n", r.kind, r.params, n, pl, pt));
            }
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    ensure!(a.n > 0 && a.size > 0, "--n and --size must be positive");
    let seq = generate(&SceneSpec {
        seed: a.seed,
        height: a.size,
        width: a.size,
        ..SceneSpec::default().with_frames(a.n)
    })?;
    let batch = SequenceBatch::<f64>::from_sequences(&[seq])?;
    let opts = GradcheckOptions {
        coords_per_tensor: (a.coords > 0).then_some(a.coords),
        seed: a.seed,
        tolerance: a.tolerance,
        ..GradcheckOptions::default()
    };
    let mut failed = Vec::new();
    for &kind in &a.kinds {
        let net = FusionNet::<f64>::new(NetConfig {
            cell: kind,
            mode: a.mode,
            features: a.features,
            seed: a.seed,
        })?;
        let report = gradcheck_net(&net, &batch, &opts)?;
        let worst = report.worst().map(|w| w.name.as_str()).unwrap_or("-");
        let verdict = if report.passed() { "pass" } else { "FAIL" };
        writeln!(
            out,
            "{:<8} max_rel_err {:.3e} over {} coordinates (worst {}) {}",
            kind.name(),
            report.max_rel_error(),
            report.checked(),
            worst,
            verdict
        )?;
        if !report.passed() {
            failed.push(kind.name());
        }
    }
    if !failed.is_empty() {
        bail!(
            "gradient check above tolerance {} for {}",
            a.tolerance,
            failed.join(", ")
        );
    }
    Ok(())
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    writeln!(out, "step {}", ckpt.step)?;
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, t) in &ckpt.tensors {
        writeln!(out, "{} {:?} {:?} {}", name, t.shape(), t.dtype(), t.len())?;
        let group = name.split('.').next().unwrap_or(name);
        *groups.entry(group).or_default() += t.len();
    }
    for (group, count) in &groups {
        writeln!(out, "{} total {}", group, count)?;
    }
    writeln!(out, "total {}", ckpt.param_count())?;
    Ok(())
}
