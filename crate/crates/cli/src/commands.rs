use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use eet_core::checkpoint::Container;
use eet_core::data::{contact_sheet, load_dataset, read_image, sample_dataset, save_dataset, write_image, AuKind, DatasetMeta, GlyphConfig};
use eet_core::diagnostics::{check_loss, check_stage2_composite, LossKind, COMPOSITE_TOLERANCE, DEFAULT_STEP, LOSS_TOLERANCE};
use eet_core::evaluator::{
    emit_report, evaluate_identity, evaluate_transfer, format_table, CopySource, KeepTarget, OracleSettings, Oracles,
    RenderWithSource, Transfer,
};
use eet_core::kv::KeyValues;
use eet_core::networks::ModelBundle;
use eet_core::trainer::{run, EpochSummary, RunOptions, TrainConfig};
use eet_core::EetError;
use eet_tensor::gradcheck::{check_layer, LayerKind};

use crate::{CheckGradsArgs, EvalArgs, GenDataArgs, GradientMismatch, InspectArgs, Scope, TrainArgs, TransferArgs, DATA_ENV};

fn write_manifest(path: &Path, command: &str, kv: &KeyValues) -> Result<()> {
    let text = format!("# eet {command}\n{}", kv.render());
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn data_dir(flag: &Option<PathBuf>, fallback: Option<&PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag.as_ref().or(fallback) {
        return Ok(p.clone());
    }
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| EetError::Config(format!("no dataset directory: pass --data or set {DATA_ENV}")).into())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if !a.force && a.out.read_dir().is_ok_and(|mut d| d.next().is_some()) {
        return Err(EetError::Config(format!("{} is not empty; pass --force to write into it", a.out.display())).into());
    }
    let aus = match &a.aus {
        Some(list) => list.split(',').map(|s| s.trim().parse::<AuKind>()).collect::<eet_core::Result<Vec<_>>>()?,
        None => AuKind::DEFAULT.to_vec(),
    };
    let config = GlyphConfig { aus, max_level: a.levels, identities: a.ids, poses: a.poses, resolution: a.res };
    let dataset = sample_dataset(&config, a.per_id, a.test_fraction, a.seed)?;
    let meta = DatasetMeta { config, seed: a.seed, images_per_id: a.per_id, test_fraction: a.test_fraction };
    save_dataset(&a.out, &dataset, &meta)?;
    println!(
        "wrote {} train and {} test images to {}",
        dataset.train.len(),
        dataset.test.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply(&KeyValues::parse(&text)?)?;
    }
    let mut kv = KeyValues::new();
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| EetError::Config(format!("override `{o}` is not of the form key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    cfg.apply(&kv)?;
    cfg.stage = a.stage;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if a.no_clip {
        cfg.clip_norm = None;
    }
    if let Some(p) = &a.init_from {
        cfg.init_from = Some(p.clone());
    }
    cfg.data = Some(data_dir(&a.data, cfg.data.as_ref())?);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let data = cfg.data.clone().expect("resolved");
    let (dataset, meta) = load_dataset(&data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_manifest(&a.out.join(format!("stage{}.manifest", cfg.stage)), "train", &cfg.to_kv())?;
    let start = Instant::now();
    let mut hook = |s: &EpochSummary, _: &ModelBundle| -> eet_core::Result<()> {
        let terms: Vec<String> = s.means.iter().map(|(t, v)| format!("{}={v:.4}", t.name())).collect();
        println!(
            "[{:>6.1}s] stage {} epoch {}/{} lr {:.2e} {}",
            start.elapsed().as_secs_f64(),
            s.stage,
            s.epoch,
            cfg.epochs,
            s.lr,
            terms.join(" ")
        );
        Ok(())
    };
    let opts = RunOptions {
        out_dir: a.out.clone(),
        resume: a.resume,
        stop_after: a.stop_after,
        on_epoch: Some(&mut hook),
    };
    let outcome = run(&cfg, &dataset.train, &meta.config, opts)?;
    println!(
        "stage {} finished {} epochs; checkpoint {}; losses {}",
        cfg.stage,
        outcome.epochs_completed,
        outcome.checkpoint.display(),
        outcome.losses_csv.display()
    );
    Ok(())
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let c = Container::load(path)?;
    Ok(ModelBundle::from_container(&c)?)
}

pub fn transfer(a: &TransferArgs) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let expected = [1, bundle.arch.channels, bundle.arch.resolution, bundle.arch.resolution];
    let mut inputs = Vec::new();
    for path in [&a.a, &a.b] {
        let img = read_image(path)?;
        if img.shape() != expected {
            return Err(EetError::Data(format!(
                "{}: shape {:?} does not match the model input {:?}",
                path.display(),
                img.shape(),
                expected
            ))
            .into());
        }
        inputs.push(img);
    }
    let (out_a, out_b) = bundle.transfer(&inputs[0], &inputs[1])?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_image(&a.out.join("out_a.png"), &out_a)?;
    write_image(&a.out.join("out_b.png"), &out_b)?;
    if a.sheet {
        let sheet = contact_sheet(&[&inputs[0], &inputs[1], &out_a, &out_b])?;
        write_image(&a.out.join("sheet.png"), &sheet)?;
    }
    let mut kv = KeyValues::new();
    kv.set("model", a.model.display());
    kv.set("a", a.a.display());
    kv.set("b", a.b.display());
    kv.set("sheet", a.sheet);
    write_manifest(&a.out.join("transfer.manifest"), "transfer", &kv)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let data = data_dir(&a.data, None)?;
    let (dataset, meta) = load_dataset(&data)?;
    if dataset.test.is_empty() {
        return Err(EetError::Data(format!("{} has no test split", data.display())).into());
    }
    let settings = OracleSettings { seed: OracleSettings::default().seed.wrapping_add(a.seed), ..Default::default() };
    let oracles = match &a.oracles {
        Some(path) => Oracles::from_container(&Container::load(path)?)?,
        None => Oracles::train(&meta.config, &settings)?,
    };
    if oracles.config != meta.config {
        return Err(EetError::Config("oracles were trained for a different glyph configuration".into()).into());
    }
    if let Some(path) = &a.save_oracles {
        oracles.to_container().save(path)?;
    }

    let rerender = RenderWithSource(meta.config.clone());
    let mut methods: Vec<&dyn Transfer> = vec![&bundle];
    if a.baselines {
        methods.extend([&KeepTarget as &dyn Transfer, &CopySource, &rerender]);
    }
    let mut transfer_rows = Vec::new();
    let mut identity_rows = Vec::new();
    for m in methods {
        transfer_rows.push(evaluate_transfer(m, &dataset.test, &oracles, a.pairs, a.seed)?);
        identity_rows.push(evaluate_identity(m, &dataset.test, &oracles, a.same_pairs, a.diff_pairs, a.seed)?);
    }
    if !a.baselines {
        identity_rows.push(evaluate_identity(&KeepTarget, &dataset.test, &oracles, a.same_pairs, a.diff_pairs, a.seed)?);
    }
    emit_report(&a.out, &transfer_rows, &identity_rows)?;

    let mut kv = KeyValues::new();
    kv.set("model", a.model.display());
    kv.set("data", data.display());
    kv.set("pairs", a.pairs);
    kv.set("seed", a.seed);
    kv.set("same_pairs", a.same_pairs);
    kv.set("diff_pairs", a.diff_pairs);
    kv.set("baselines", a.baselines);
    match &a.oracles {
        Some(p) => kv.set("oracles", p.display()),
        None => kv.set("oracle_seed", settings.seed),
    }
    let q = &oracles.quality;
    let mse: Vec<String> = q.au_mse.iter().map(|m| format!("{m:.4}")).collect();
    kv.set("oracle_au_mse", mse.join(","));
    kv.set("oracle_id_accuracy", q.id_accuracy);
    write_manifest(&a.out.join("eval.manifest"), "eval", &kv)?;
    print!("{}", format_table(&transfer_rows, &identity_rows));
    Ok(())
}

pub fn check_grads(a: &CheckGradsArgs) -> Result<()> {
    println!("# eet check-grads scope={:?} seed={} per_module={}", a.scope, a.seed, a.per_module);
    let mut failures = 0;
    let mut report = |name: &str, r: eet_tensor::gradcheck::GradCheckReport, tol: f64| {
        let ok = r.passes(tol);
        failures += usize::from(!ok);
        println!("{} {name:<28} {r}", if ok { "ok  " } else { "FAIL" });
    };
    match a.scope {
        Scope::Layers => {
            for kind in LayerKind::ALL {
                report(kind.name(), check_layer(kind, a.seed)?, LOSS_TOLERANCE);
            }
        }
        Scope::Losses => {
            for kind in LossKind::ALL {
                report(kind.name(), check_loss(kind, a.seed)?, LOSS_TOLERANCE);
            }
        }
        Scope::Full => {
            report("stage2_composite", check_stage2_composite(a.seed, a.per_module, DEFAULT_STEP)?, COMPOSITE_TOLERANCE);
        }
    }
    if failures > 0 {
        return Err(GradientMismatch(failures).into());
    }
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let c = Container::load(&a.path)?;
    println!("# header");
    print!("{}", c.header.render());
    println!("# arrays");
    let mut total = 0;
    for (name, t) in &c.arrays {
        total += t.numel();
        println!("{name:<48} {:?}", t.shape());
    }
    println!("# {} arrays, {total} values", c.arrays.len());
    Ok(())
}
