use std::collections::BTreeMap;
use std::error::Error;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use nppc::codec_bridge::{encode_decode, quantize8, RatePoint, RateSchedule};
use nppc::data_io::{decode_image, load_checkpoint, load_image_folder, read_curve_csv, save_checkpoint, write_curve_csv, write_png, ImageBatch, ImageStore, Split};
use nppc::evaluation::{bd_rate, curves_svg, eval_curve, eval_curve_per_point, psnr, residual_map, Pipeline};
use nppc::npp::Npp;
use nppc::proxy::{checkpoint_name, Proxy};
use nppc::task_head::{train_classifier, Classifier};
use nppc::toy::{write_toy_dataset, ToyConfig};
use nppc::trainer::{pair_proxy, pretrain_candidates, Frozen, Stage, StageReport, StageRun, TrainConfig};

use crate::manifest::Manifest;
use crate::{BdArgs, Command, EvalArgs, NppArgs, PlotArgs, ProxyArgs, ToyArgs, TrainArgs, VisArgs};

type CmdResult = Result<(), Box<dyn Error>>;

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::MakeToyData(a) => make_toy_data(a),
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::TrainProxy(a) => train_proxy(a),
        Command::TrainNpp(a) => train_npp(a, NppKind::Fixed),
        Command::TrainNppAdaptive(a) => train_npp(a, NppKind::Adaptive),
        Command::TrainNppMulti(a) => train_npp(a, NppKind::Multi),
        Command::EvalCurve(a) => eval(a),
        Command::Bdrate(a) => bdrate(a),
        Command::Visualize(a) => visualize(a),
        Command::Plot(a) => plot(a),
    }
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig, Box<dyn Error>> {
    let text = fs::read_to_string(&args.config).map_err(|e| format!("cannot read {}: {e}", args.config.display()))?;
    let mut cfg = TrainConfig::from_text(&text)?;
    if let Some(codec) = args.codec {
        cfg = cfg.with_codec(codec);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.classifier.seed = seed;
    }
    Ok(cfg)
}

fn load_split(data: &Path, split: Split, limit: Option<usize>, min_side: usize) -> Result<ImageStore, Box<dyn Error>> {
    let mut ds = load_image_folder(data, split)?;
    if let Some(n) = limit {
        ds = ds.take_per_class(n);
    }
    log::info!("{} {split} images in {} classes", ds.len(), ds.class_count());
    Ok(ds.load(min_side)?)
}

fn start_manifest(command: &str, args: &TrainArgs, cfg: &TrainConfig) -> Result<Manifest, Box<dyn Error>> {
    let mut m = Manifest::new(command, Some(cfg.seed));
    m.input("config", &args.config)?;
    m.input("data", &args.data)?;
    m.config(&cfg.to_text());
    Ok(m)
}

fn make_toy_data(a: ToyArgs) -> CmdResult {
    let cfg = ToyConfig { size: a.size, train_per_class: a.train_per_class, test_per_class: a.test_per_class, seed: a.seed, ..ToyConfig::default() };
    write_toy_dataset(&a.out, &cfg)?;
    let mut m = Manifest::new("make-toy-data", Some(a.seed));
    m.set("size", a.size);
    m.set("train_per_class", a.train_per_class);
    m.set("test_per_class", a.test_per_class);
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn train_classifier_cmd(a: TrainArgs) -> CmdResult {
    let cfg = load_config(&a)?;
    let train = load_split(&a.data, Split::Train, a.limit_per_class, cfg.crop)?;
    let model = train_classifier(&train, &cfg.classifier)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("classifier.nppc");
    save_checkpoint(&path, &model.to_checkpoint())?;
    let mut m = start_manifest("train-classifier", &a, &cfg)?;
    if let Ok(test) = load_split(&a.data, Split::Test, None, cfg.crop) {
        let (x, labels) = test.all_center(cfg.crop)?;
        let acc = model.accuracy(&x, &labels);
        log::info!("clean test accuracy {acc:.4}");
        m.set("clean_test_accuracy", acc);
    }
    m.output(&path)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn train_proxy(a: ProxyArgs) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let rp = cfg.schedule.get(a.rate_point)?;
    let codec = cfg.codec.open()?;
    let store = load_split(&a.common.data, Split::Train, a.common.limit_per_class, cfg.crop)?;
    let (train, calib) = store.hold_out(cfg.calibration_images)?;
    let (cx, _) = calib.all_center(cfg.crop)?;
    let candidates = pretrain_candidates(&cfg, &train, &cx)?;
    let (proxy, report) = pair_proxy(&cfg, &candidates, &train, &cx, codec.as_ref(), rp)?;
    fs::create_dir_all(&a.common.out)?;
    let path = a.common.out.join(checkpoint_name(rp.id));
    save_checkpoint(&path, &proxy.to_checkpoint())?;
    let mut m = start_manifest("train-proxy", &a.common, &cfg)?;
    m.set("rate_point", rp.id);
    m.set("lambda_p", report.lambda_p);
    m.set("real_bpp", report.real_bpp);
    m.set("proxy_bpp", report.proxy_bpp);
    m.set("mimicry_mse_before", report.mimicry_before);
    m.set("mimicry_mse_after", report.mimicry_after);
    m.set("skipped_batches", report.skipped_batches);
    m.output(&path)?;
    m.write_for(&a.common.out)?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum NppKind {
    Fixed,
    Adaptive,
    Multi,
}

fn load_frozen(a: &NppArgs, cfg: &TrainConfig) -> Result<Frozen, Box<dyn Error>> {
    let classifier = Classifier::from_checkpoint(load_checkpoint(&a.classifier)?)?;
    let mut proxies = BTreeMap::new();
    for rp in cfg.schedule.points() {
        let path = a.proxy_dir.join(checkpoint_name(rp.id));
        if path.exists() {
            proxies.insert(rp.id, Proxy::from_checkpoint(load_checkpoint(&path)?)?);
        }
    }
    Ok(Frozen { classifier, proxies, codec: cfg.codec.open()? })
}

struct StageInputs<'a> {
    cfg: &'a TrainConfig,
    frozen: &'a Frozen,
    train: &'a ImageStore,
    val: (&'a ImageBatch, &'a [usize]),
    out: &'a Path,
    resume: bool,
}

/// Runs a stage in `eval_every` chunks, saving resumable state after each.
fn run_stage(inp: &StageInputs<'_>, stage: Stage, init: Npp, tag: &str) -> Result<(Npp, StageReport), Box<dyn Error>> {
    let state_path = inp.out.join(format!("{tag}_state.nppc"));
    let mut run = if inp.resume && state_path.exists() {
        let run = StageRun::from_checkpoint(load_checkpoint(&state_path)?)?;
        if run.stage != stage {
            return Err(format!("{} holds a different stage", state_path.display()).into());
        }
        log::info!("resuming {tag} at step {}", run.step);
        run
    } else {
        StageRun::new(stage, init)
    };
    let mut log_file = OpenOptions::new().create(true).append(true).open(inp.out.join("progress.log"))?;
    let mut total = StageReport::default();
    while !run.is_finished(inp.cfg) {
        let until = (run.step / inp.cfg.eval_every + 1) * inp.cfg.eval_every;
        let report = run.run(inp.cfg, inp.frozen, inp.train, inp.val, until)?;
        for rec in &report.records {
            writeln!(log_file, "{}", rec.to_line())?;
        }
        for (step, score) in &report.validation {
            writeln!(log_file, "step={step} stage={} validation L={score:.6}", stage.number())?;
        }
        total.records.extend(report.records);
        total.validation.extend(report.validation);
        total.skipped_batches += report.skipped_batches;
        save_checkpoint(&state_path, &run.to_checkpoint())?;
    }
    log::info!("{tag}: best validation L={:.6} at step {}", run.best_score, run.best_step);
    Ok((run.best, total))
}

fn train_npp(a: NppArgs, kind: NppKind) -> CmdResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(mode) = a.forward_mode {
        cfg.forward_mode = mode;
    }
    let frozen = load_frozen(&a, &cfg)?;
    let store = load_split(&a.common.data, Split::Train, a.common.limit_per_class, cfg.crop)?;
    let (train, val) = store.hold_out(cfg.validation_images)?;
    let (vx, vl) = val.all_center(cfg.crop)?;
    fs::create_dir_all(&a.common.out)?;
    let inp = StageInputs { cfg: &cfg, frozen: &frozen, train: &train, val: (&vx, &vl), out: &a.common.out, resume: a.resume };

    let command = match kind {
        NppKind::Fixed => "train-npp",
        NppKind::Adaptive => "train-npp-adaptive",
        NppKind::Multi => "train-npp-multi",
    };
    let mut m = start_manifest(command, &a.common, &cfg)?;
    m.input("classifier", &a.classifier)?;
    m.input("proxy_dir", &a.proxy_dir)?;
    let mut outputs = Vec::new();
    match kind {
        NppKind::Fixed => {
            let rp = match a.rate_point {
                Some(id) => cfg.schedule.get(id)?,
                None => cfg.schedule.middle(),
            };
            let (npp, _) = run_stage(&inp, Stage::Fixed(rp), Npp::init(cfg.npp.clone(), cfg.seed)?, "npp_stage2")?;
            outputs.push(save_npp(&a.common.out, "npp_stage2.nppc", &npp)?);
            m.set("rate_point", rp.id);
        }
        NppKind::Adaptive => {
            let ckpt = a.ckpt.as_ref().ok_or("train-npp-adaptive needs --ckpt <stage-2 filter>")?;
            m.input("ckpt", ckpt)?;
            let start = Npp::from_checkpoint(load_checkpoint(ckpt)?)?;
            let (npp, _) = run_stage(&inp, Stage::Adaptive, start, "npp_adaptive")?;
            outputs.push(save_npp(&a.common.out, "npp_adaptive.nppc", &npp)?);
        }
        NppKind::Multi => {
            for &rp in cfg.schedule.points() {
                let tag = format!("npp_rp{}", rp.id);
                let (npp, _) = run_stage(&inp, Stage::Fixed(rp), Npp::init(cfg.npp.clone(), cfg.seed)?, &tag)?;
                outputs.push(save_npp(&a.common.out, &format!("{tag}.nppc"), &npp)?);
            }
        }
    }
    for p in &outputs {
        m.output(p)?;
    }
    m.write_for(&a.common.out)?;
    Ok(())
}

fn save_npp(dir: &Path, name: &str, npp: &Npp) -> Result<std::path::PathBuf, Box<dyn Error>> {
    let path = dir.join(name);
    save_checkpoint(&path, &npp.to_checkpoint())?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

/// Schedule and crop for evaluation commands.
fn eval_setup(config: Option<&Path>, codec: nppc::codec_bridge::CodecKind, crop: Option<usize>) -> Result<(RateSchedule, usize), Box<dyn Error>> {
    match config {
        Some(path) => {
            let cfg = TrainConfig::from_text(&fs::read_to_string(path)?)?.with_codec(codec);
            Ok((cfg.schedule, crop.unwrap_or(cfg.crop)))
        }
        None => Ok((codec.default_schedule(), crop.unwrap_or(64))),
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let (schedule, crop) = eval_setup(a.config.as_deref(), a.codec, a.crop)?;
    let codec = a.codec.open()?;
    let classifier = Classifier::from_checkpoint(load_checkpoint(&a.classifier)?)?;
    let test = load_split(&a.data, Split::Test, a.limit_per_class, crop)?;
    let (x, labels) = test.all_center(crop)?;
    let mut m = Manifest::new("eval-curve", None);
    m.input("data", &a.data)?;
    m.input("classifier", &a.classifier)?;
    m.set("codec", a.codec);
    m.set("schedule", schedule.to_config_string());
    m.set("crop", crop);
    let curve = if let Some(dir) = &a.per_point {
        m.input("per_point", dir)?;
        let models: Vec<(RatePoint, Npp)> = schedule
            .points()
            .iter()
            .map(|&rp| Ok((rp, Npp::from_checkpoint(load_checkpoint(dir.join(format!("npp_rp{}.nppc", rp.id)))?)?)))
            .collect::<Result<_, Box<dyn Error>>>()?;
        let refs: Vec<(RatePoint, &Npp)> = models.iter().map(|(rp, n)| (*rp, n)).collect();
        eval_curve_per_point(&refs, "multi", codec.as_ref(), &x, &labels, &classifier)?
    } else if let Some(ckpt) = &a.ckpt {
        m.input("ckpt", ckpt)?;
        let npp = Npp::from_checkpoint(load_checkpoint(ckpt)?)?;
        eval_curve(Pipeline::Npp(&npp), "npp", codec.as_ref(), &schedule, &x, &labels, &classifier)?
    } else {
        eval_curve(Pipeline::Baseline, "baseline", codec.as_ref(), &schedule, &x, &labels, &classifier)?
    };
    for p in &curve.points {
        log::info!("rate point {} (param {}): bpp {:.4} accuracy {:.4} psnr {:.2}", p.rate_point, p.codec_param, p.bpp, p.accuracy, p.psnr);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_curve_csv(&curve, &a.out)?;
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn bdrate(a: BdArgs) -> CmdResult {
    let anchor = read_curve_csv(&a.anchor)?;
    let test = read_curve_csv(&a.test)?;
    // Adding zero turns a negative zero into "0.00".
    let v = bd_rate(&anchor, &test)? + 0.0;
    println!("{v:.2}");
    if let Some(out) = &a.out {
        fs::write(out, format!("{v:.6}\n"))?;
        let mut m = Manifest::new("bdrate", None);
        m.input("anchor", &a.anchor)?;
        m.input("test", &a.test)?;
        m.output(out)?;
        m.write_for(out)?;
    }
    Ok(())
}

fn visualize(a: VisArgs) -> CmdResult {
    let (schedule, _) = eval_setup(a.config.as_deref(), a.codec, None)?;
    let rp = match a.rate_point {
        Some(id) => schedule.get(id)?,
        None => schedule.middle(),
    };
    let codec = a.codec.open()?;
    let npp = Npp::from_checkpoint(load_checkpoint(&a.ckpt)?)?;
    let images: Vec<ImageBatch> = match (&a.image, &a.data) {
        (Some(path), _) => vec![decode_image(path)?],
        (None, Some(data)) => {
            let ds = load_image_folder(data, Split::Test)?;
            ds.items.iter().take(a.count).map(|(p, _)| decode_image(p)).collect::<Result<_, _>>()?
        }
        (None, None) => return Err("visualize needs --data or --image".into()),
    };
    fs::create_dir_all(&a.out)?;
    let mut m = Manifest::new("visualize", None);
    m.input("ckpt", &a.ckpt)?;
    m.set("rate_point", rp.id);
    let mut summary = File::create(a.out.join("summary.txt"))?;
    writeln!(summary, "image,baseline_bpp,npp_bpp,baseline_psnr,npp_psnr")?;
    for (i, x) in images.iter().enumerate() {
        let x = quantize8(x);
        let filtered = quantize8(&npp.apply(&x, rp, npp.config.qa_enabled)?);
        let base = encode_decode(codec.as_ref(), &x, rp)?;
        let ours = encode_decode(codec.as_ref(), &filtered, rp)?;
        let files = [
            ("input", x.clone()),
            ("filtered", filtered.clone()),
            ("residual", residual_map(&x, &filtered)?),
            ("baseline_decoded", base.recon.clone()),
            ("npp_decoded", ours.recon.clone()),
        ];
        for (name, img) in files {
            let path = a.out.join(format!("{i:03}_{name}.png"));
            write_png(&img, 0, &path)?;
            m.output(&path)?;
        }
        writeln!(summary, "{i},{:.4},{:.4},{:.2},{:.2}", base.bpp, ours.bpp, psnr(&x, &base.recon)?, psnr(&x, &ours.recon)?)?;
    }
    m.write_for(&a.out)?;
    Ok(())
}

fn plot(a: PlotArgs) -> CmdResult {
    let mut curves = Vec::new();
    let mut m = Manifest::new("plot", None);
    for path in &a.curves {
        let mut c = read_curve_csv(path)?;
        c.pipeline = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        m.input(&c.pipeline, path)?;
        curves.push(c);
    }
    fs::write(&a.out, curves_svg(&curves, &a.title))?;
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    Ok(())
}
