use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use attfd::detector::{detect, generate_anchors, predict, ClassLayout, Detector};
use attfd::fewshot::{
    evaluate, init_novel_detector, sample_support_set, train_base, train_novel, EpochMetrics, EvalReport, Hyperparams,
};
use attfd::ppm;
use attfd::synthdata::{build_benchmark, category_name, dump_scene, generate_scene, Benchmark, SplitSpec};
use attfd::tensor::{Checkpoint, OpKind};
use attfd::verify::{gradient_suite, TOLERANCE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::CliError;

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_path();
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    cfg.write_snapshot(&dir)?;
    Ok(dir)
}

fn split_of(cfg: &RunConfig) -> Result<SplitSpec, CliError> {
    SplitSpec::new(cfg.split).map_err(|e| CliError::Usage(e.to_string()))
}

fn benchmark(cfg: &RunConfig, split: &SplitSpec) -> Result<Benchmark, CliError> {
    Ok(build_benchmark(cfg.seed, split, cfg.data.sizes, &cfg.data.scene)?)
}

fn load_detector(path: &str) -> Result<Detector, CliError> {
    if path.is_empty() {
        return Err(CliError::Usage("no checkpoint given (set `checkpoint`)".into()));
    }
    let ckpt = Checkpoint::load(Path::new(path)).map_err(|e| CliError::Usage(e.to_string()))?;
    Detector::from_checkpoint(&ckpt).map_err(|e| CliError::Usage(format!("checkpoint {path}: {e}")))
}

fn check_split(det: &Detector, split: &SplitSpec) -> Result<(), CliError> {
    let base = &det.layout.categories[..det.layout.num_base];
    let novel = det.layout.novel_categories();
    if base != split.base().as_slice() || (!novel.is_empty() && novel != split.novel.as_slice()) {
        return Err(CliError::Usage(format!(
            "checkpoint classes (base {base:?}, novel {novel:?}) do not match split {} (novel {:?})",
            split.split, split.novel
        )));
    }
    Ok(())
}

struct MetricsLog(BufWriter<File>);

impl MetricsLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        Ok(MetricsLog(BufWriter::new(File::create(path)?)))
    }

    fn write(&mut self, m: &EpochMetrics) -> attfd::Result<()> {
        writeln!(self.0, "{}", serde_json::to_string(m)?)?;
        eprintln!(
            "{} epoch {:>3}  loss {:.5}  cls {:.5}  bbox {:.5}  lr {:.2e}",
            m.stage, m.epoch, m.loss_total, m.loss_cls, m.loss_bbox, m.lr
        );
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.0.flush()?;
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("{:<10} {:>8}", "class", "AP");
    for (c, ap) in &report.per_class {
        println!("{:<10} {:>8.4}", category_name(*c), ap);
    }
    println!("base mAP  {:.4}", report.base_map);
    println!("novel mAP {:.4}", report.novel_map);
    println!("all mAP   {:.4}", report.all_map);
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = prepare_out(cfg)?;
    let split = split_of(cfg)?;
    let b = benchmark(cfg, &split)?;
    for (name, scenes) in [("base_train", &b.base_train), ("novel_pool", &b.novel_pool), ("test", &b.test)] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        for (i, s) in scenes.iter().enumerate() {
            dump_scene(&sub, &format!("{i:04}"), s)?;
        }
        println!("{name}: {} scenes", scenes.len());
    }
    Ok(())
}

pub fn train_base_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = prepare_out(cfg)?;
    let split = split_of(cfg)?;
    let b = benchmark(cfg, &split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut det = Detector::init(cfg.detector.clone(), ClassLayout::base(split.base()), &mut rng)?;
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
    let t = Instant::now();
    train_base(&mut det, &b.base_train, &cfg.saliency, cfg.loss.alpha, &cfg.base_schedule(), &mut |m| log.write(m))?;
    log.finish()?;
    eprintln!("trained in {:.1?}", t.elapsed());
    det.to_checkpoint().save(&dir.join("base.ckpt.json"))?;
    let (report, _) = evaluate(&det, &b.test, &split, &cfg.saliency)?;
    write_json(&dir.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

pub fn train_novel_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let base = load_detector(&cfg.checkpoint)?;
    let split = split_of(cfg)?;
    check_split(&base, &split)?;
    if !base.layout.novel_categories().is_empty() {
        return Err(CliError::Usage("train-novel needs a base checkpoint".into()));
    }
    let dir = prepare_out(cfg)?;
    let b = benchmark(cfg, &split)?;
    let (det, report) = novel_stage(cfg, &base, &b, &split, &cfg.loss, Some(&dir))?;
    det.to_checkpoint().save(&dir.join("novel.ckpt.json"))?;
    write_json(&dir.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

fn novel_stage(
    cfg: &RunConfig,
    base: &Detector,
    b: &Benchmark,
    split: &SplitSpec,
    hp: &Hyperparams,
    log_dir: Option<&Path>,
) -> Result<(Detector, EvalReport), CliError> {
    let support = sample_support_set(&b.novel_pool, &split.novel, &split.base(), hp.k_shot, hp.base_multiplier, cfg.seed)?;
    let mut det = init_novel_detector(base, &support, &split.novel, &cfg.saliency)?;
    let t = Instant::now();
    match log_dir {
        Some(dir) => {
            let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
            train_novel(&mut det, base, &support, &cfg.saliency, hp, &cfg.novel_schedule(), &mut |m| log.write(m))?;
            log.finish()?;
        }
        None => {
            train_novel(&mut det, base, &support, &cfg.saliency, hp, &cfg.novel_schedule(), &mut |_| Ok(()))?;
        }
    }
    eprintln!("fine-tuned in {:.1?}", t.elapsed());
    let (report, _) = evaluate(&det, &b.test, split, &cfg.saliency)?;
    Ok((det, report))
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let det = load_detector(&cfg.checkpoint)?;
    let split = split_of(cfg)?;
    check_split(&det, &split)?;
    let dir = prepare_out(cfg)?;
    let b = benchmark(cfg, &split)?;
    let (report, dets) = evaluate(&det, &b.test, &split, &cfg.saliency)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut f = BufWriter::new(File::create(dir.join("detections.jsonl"))?);
    for d in &dets {
        writeln!(f, "{}", serde_json::to_string(d)?)?;
    }
    f.flush()?;
    print_report(&report);
    Ok(())
}

fn parse_fault(name: &str) -> Result<OpKind, CliError> {
    OpKind::ALL
        .into_iter()
        .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
        .ok_or_else(|| CliError::Usage(format!("unknown primitive `{name}`")))
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = prepare_out(cfg)?;
    let fault = cfg.gradcheck_fault.as_deref().map(parse_fault).transpose()?;
    let t = Instant::now();
    let report = gradient_suite(fault)?;
    println!("{:<36} {:>12}  result", "check", "max rel err");
    for e in &report {
        println!("{:<36} {:>12.3e}  {}", e.name, e.max_rel_error, if e.passed { "ok" } else { "FAIL" });
    }
    println!("tolerance {TOLERANCE:e}, {:.1?}", t.elapsed());
    write_json(&dir.join("gradcheck.json"), &report)?;
    let failed = report.iter().filter(|e| !e.passed).count();
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

pub fn render_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let det = load_detector(&cfg.checkpoint)?;
    let dir = prepare_out(cfg)?;
    let scene = generate_scene(cfg.render_scene_seed, &cfg.data.scene)?;
    let sal = cfg.saliency.compute(&scene)?;
    let pred = predict(&det, &scene.image, Some(&sal))?;
    let (h, w) = (scene.height(), scene.width());
    ppm::write_rgb(&dir.join("image.ppm"), &scene.image)?;
    ppm::write_gray(&dir.join("saliency.ppm"), sal.values(), h, w)?;
    match &pred.attention {
        Some(att) => {
            let (ah, aw) = (att.shape()[0], att.shape()[1]);
            // The map sums to one; scale by its peak for display.
            let peak = att.data().iter().cloned().fold(0.0, f64::max);
            let up: Vec<f64> = (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    let v = att.data()[(y * ah / h) * aw + x * aw / w];
                    if peak > 0.0 { v / peak } else { 0.0 }
                })
                .collect();
            ppm::write_gray(&dir.join("topdown.ppm"), &up, h, w)?;
        }
        None => eprintln!("detector has no top-down path; topdown.ppm not written"),
    }
    let anchors = generate_anchors(&det.config.anchors)?;
    let dets = detect(&pred, &anchors, &det.layout, &det.config, 0)?;
    write_json(&dir.join("detections.json"), &dets)?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// CSV header of `sweep.csv`.
pub const SWEEP_COLUMNS: [&str; 10] =
    ["beta", "eta", "epsilon", "gamma", "split", "k_shot", "seed", "base_map", "novel_map", "all_map"];

fn cell_key(values: &[String]) -> String {
    values[..7].join(",")
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = prepare_out(cfg)?;
    let csv_path = dir.join("sweep.csv");
    let mut done = BTreeSet::new();
    if csv_path.exists() {
        let mut r = csv::Reader::from_path(&csv_path)?;
        for row in r.records() {
            let row: Vec<String> = row?.iter().map(str::to_string).collect();
            done.insert(cell_key(&row));
        }
    }
    let fresh = !csv_path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(&csv_path)?;
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        out.write_record(SWEEP_COLUMNS)?;
        out.flush()?;
    }
    let s = &cfg.sweep;
    for &split_id in &s.split {
        for &seed in &s.seeds {
            let run = RunConfig { seed, split: split_id, ..cfg.clone() };
            let split = split_of(&run)?;
            let b = benchmark(&run, &split)?;
            let mut base: Option<Detector> = None;
            for &k in &s.k_shot {
                for &beta in &s.beta {
                    for &eta in &s.eta {
                        for &epsilon in &s.epsilon {
                            for &gamma in &s.gamma {
                                let hp = Hyperparams { beta, eta, epsilon, gamma, k_shot: k, ..cfg.loss };
                                hp.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                                let key: Vec<String> = [beta, eta, epsilon, gamma]
                                    .iter()
                                    .map(|v| v.to_string())
                                    .chain([split_id.to_string(), k.to_string(), seed.to_string()])
                                    .collect();
                                if done.contains(&cell_key(&key)) {
                                    continue;
                                }
                                if base.is_none() {
                                    base = Some(sweep_base(&run, &b, &split, &dir)?);
                                }
                                let (_, r) = novel_stage(&run, base.as_ref().expect("trained"), &b, &split, &hp, None)?;
                                let mut row = key;
                                row.extend([r.base_map, r.novel_map, r.all_map].iter().map(|v| v.to_string()));
                                out.write_record(&row)?;
                                out.flush()?;
                                println!("{}", row.join(","));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Base detector for one (split, seed), trained once and cached on disk.
fn sweep_base(run: &RunConfig, b: &Benchmark, split: &SplitSpec, dir: &Path) -> Result<Detector, CliError> {
    let path = dir.join(format!("base_split{}_seed{}.ckpt.json", split.split, run.seed));
    if path.exists() {
        return Ok(Detector::from_checkpoint(&Checkpoint::load(&path)?)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut det = Detector::init(run.detector.clone(), ClassLayout::base(split.base()), &mut rng)?;
    train_base(&mut det, &b.base_train, &run.saliency, run.loss.alpha, &run.base_schedule(), &mut |_| Ok(()))?;
    det.to_checkpoint().save(&path)?;
    Ok(det)
}
