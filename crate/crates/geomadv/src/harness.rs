//! Experiment orchestration: white-box and per-region attack benchmarks, the
//! geometric-variable sweep, defense evaluation, CSV persistence, and a text
//! report over stored results.
//!
//! Every emitted file starts with a comment line carrying the format version
//! and the config seed. Aggregates are recomputable from the per-sample rows,
//! and re-running an experiment with the same config reproduces the CSV bytes
//! except for wall-time columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackMethod};
use crate::defense::evaluate_under_defense;
use crate::error::{Error, Result};
use crate::facegen::{load_dataset, Dataset, Sample};
use crate::image::{pixel_to_norm, write_pgm, Image, NormalizedPoint};
use crate::tps::{tps_fit, LandmarkSet};
use crate::victim::{load_checkpoint, VictimModel};

/// Region labels, indexed by group id - 1, plus the all-regions pseudo-label.
pub const REGION_NAMES: [&str; 5] = ["jaw", "right_eye", "left_eye", "nose", "mouth"];
pub const ALL_REGIONS: &str = "all";

/// Which experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Whitebox,
    PerRegion,
    Sweep,
    Defense,
}

/// Sweep settings: which geometric variables, the offset range, and the grid
/// resolution (odd step counts include offset zero exactly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variables: Vec<u8>,
    pub range: f64,
    pub steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { variables: (1..=8).collect(), range: 0.3, steps: 25 }
    }
}

/// A full experiment description; paths are resolved at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub defended_checkpoints: Vec<PathBuf>,
    pub attacks: Vec<AttackConfig>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Cap on the number of attacked samples (after filtering to correctly
    /// classified ones); `None` attacks everything.
    #[serde(default)]
    pub sample_limit: Option<usize>,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Attack repetitions for the timing columns; the median duration is
    /// reported. Results are identical across repetitions.
    #[serde(default = "default_timing_reps")]
    pub timing_reps: usize,
    /// How many attacked samples get original/adversarial/field image dumps.
    #[serde(default = "default_dump_images")]
    pub dump_images: usize,
}

fn default_timing_reps() -> usize {
    1
}

fn default_dump_images() -> usize {
    4
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, dataset: PathBuf, checkpoint: PathBuf, out_dir: PathBuf) -> Self {
        let attacks = match kind {
            ExperimentKind::PerRegion => vec![AttackConfig::flm(), AttackConfig::gflm()],
            // The defense comparison pits the landmark attacks against the
            // classic single-step intensity attack at the defense-scale eps.
            ExperimentKind::Defense => {
                let mut fgsm = AttackConfig::fgsm();
                fgsm.eps = 0.03;
                fgsm.max_iters = 1;
                vec![AttackConfig::flm(), AttackConfig::gflm(), fgsm]
            }
            _ => vec![AttackConfig::flm(), AttackConfig::gflm(), AttackConfig::fgsm()],
        };
        Self {
            kind,
            dataset,
            checkpoint,
            defended_checkpoints: Vec::new(),
            attacks,
            out_dir,
            seed: 0,
            sample_limit: None,
            sweep: SweepConfig::default(),
            timing_reps: default_timing_reps(),
            dump_images: default_dump_images(),
        }
    }
}

/// One attacked sample.
#[derive(Debug, Clone)]
pub struct PerSampleRow {
    pub sample_id: u32,
    pub class: usize,
    pub method: AttackMethod,
    pub region: String,
    pub success: bool,
    pub iterations: usize,
    pub p_true: f64,
    pub time_s: f64,
}

/// Aggregate metrics for one (method, region) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub region: String,
    /// Mean iterations over attacked samples.
    pub mean_iters: f64,
    /// Success rate in percent.
    pub success_rate: f64,
    /// Mean final true-class probability.
    pub p_true_mean: f64,
    /// Mean attack wall time in seconds.
    pub time_mean_s: f64,
    pub samples: usize,
}

/// Aggregates per-sample rows into one metrics row; pure so callers can
/// recount and compare.
pub fn aggregate_rows(method: &str, region: &str, rows: &[&PerSampleRow]) -> MetricsRow {
    let n = rows.len();
    let fnn = n.max(1) as f64;
    MetricsRow {
        method: method.to_string(),
        region: region.to_string(),
        mean_iters: rows.iter().map(|r| r.iterations as f64).sum::<f64>() / fnn,
        success_rate: 100.0 * rows.iter().filter(|r| r.success).count() as f64 / fnn,
        p_true_mean: rows.iter().map(|r| r.p_true).sum::<f64>() / fnn,
        time_mean_s: rows.iter().map(|r| r.time_s).sum::<f64>() / fnn,
        samples: n,
    }
}

struct LoadedInputs {
    dataset: Dataset,
    model: VictimModel,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<LoadedInputs> {
    if !cfg.dataset.exists() {
        return Err(Error::Config(format!("dataset path {} does not exist", cfg.dataset.display())));
    }
    if !cfg.checkpoint.exists() {
        return Err(Error::Config(format!(
            "checkpoint path {} does not exist",
            cfg.checkpoint.display()
        )));
    }
    Ok(LoadedInputs { dataset: load_dataset(&cfg.dataset)?, model: load_checkpoint(&cfg.checkpoint)? })
}

/// Test-set samples the model classifies correctly, in sample-id order,
/// truncated to the limit. The benchmark attacks only these.
pub fn correctly_classified<'d>(
    model: &VictimModel,
    samples: &[&'d Sample],
    limit: Option<usize>,
) -> Result<Vec<&'d Sample>> {
    let mut out = Vec::new();
    for s in samples {
        if model.forward(&s.image)?.argmax() == s.class_id {
            out.push(*s);
            if let Some(l) = limit {
                if out.len() >= l {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn median_duration(mut ds: Vec<Duration>) -> f64 {
    ds.sort();
    ds[ds.len() / 2].as_secs_f64()
}

/// Attacks every sample with one configuration; results are gathered in
/// sample order so output bytes never depend on scheduling.
pub fn attack_samples(
    model: &VictimModel,
    samples: &[&Sample],
    cfg: &AttackConfig,
    region_label: &str,
    timing_reps: usize,
) -> Result<Vec<(PerSampleRow, Image, Vec<NormalizedPoint>)>> {
    let reps = timing_reps.max(1);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let result = match run_attack(&s.image, &s.landmarks, s.class_id, model, cfg) {
            Ok(r) => r,
            Err(Error::Degenerate(msg)) => {
                // Abort this sample with a diagnostic failure row.
                eprintln!("sample {}: degenerate spline mid-attack: {msg}", s.sample_id);
                out.push((
                    PerSampleRow {
                        sample_id: s.sample_id,
                        class: s.class_id,
                        method: cfg.method,
                        region: region_label.to_string(),
                        success: false,
                        iterations: cfg.max_iters,
                        p_true: 1.0,
                        time_s: 0.0,
                    },
                    s.image.clone(),
                    s.landmarks.points().to_vec(),
                ));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut durations = vec![result.duration];
        for _ in 1..reps {
            durations.push(run_attack(&s.image, &s.landmarks, s.class_id, model, cfg)?.duration);
        }
        out.push((
            PerSampleRow {
                sample_id: s.sample_id,
                class: s.class_id,
                method: cfg.method,
                region: region_label.to_string(),
                success: result.success,
                iterations: result.iterations,
                p_true: result.true_class_prob,
                time_s: median_duration(durations),
            },
            result.adversarial,
            result.landmarks_adv,
        ))
    }
    Ok(out)
}

/// White-box benchmark: every configured attack on the correctly classified
/// test samples, with per-sample rows, aggregates, and image dumps.
pub fn run_whitebox(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let inputs = load_inputs(cfg)?;
    let test = inputs.dataset.test_samples();
    let targets = correctly_classified(&inputs.model, &test, cfg.sample_limit)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut sample_rows: Vec<PerSampleRow> = Vec::new();
    let mut aggregates = Vec::new();

    if targets.is_empty() {
        write_samples_csv(
            &cfg.out_dir.join("whitebox_samples.csv"),
            cfg.seed,
            &sample_rows,
            Some("no correctly classified samples to attack"),
        )?;
        write_metrics_csv(
            &cfg.out_dir.join("whitebox.csv"),
            cfg.seed,
            &aggregates,
            Some("no correctly classified samples to attack"),
        )?;
        return Ok(aggregates);
    }

    for attack in &cfg.attacks {
        let results = attack_samples(&inputs.model, &targets, attack, ALL_REGIONS, cfg.timing_reps)?;
        dump_attack_images(cfg, &results, &targets, attack.method)?;
        let rows: Vec<PerSampleRow> = results.into_iter().map(|(r, _, _)| r).collect();
        let refs: Vec<&PerSampleRow> = rows.iter().collect();
        aggregates.push(aggregate_rows(&attack.method.to_string(), ALL_REGIONS, &refs));
        sample_rows.extend(rows);
    }

    write_samples_csv(&cfg.out_dir.join("whitebox_samples.csv"), cfg.seed, &sample_rows, None)?;
    write_metrics_csv(&cfg.out_dir.join("whitebox.csv"), cfg.seed, &aggregates, None)?;
    Ok(aggregates)
}

/// Per-region benchmark: each attack restricted to each of the five groups,
/// then unrestricted.
pub fn run_per_region(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let inputs = load_inputs(cfg)?;
    let test = inputs.dataset.test_samples();
    let targets = correctly_classified(&inputs.model, &test, cfg.sample_limit)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut sample_rows: Vec<PerSampleRow> = Vec::new();
    let mut aggregates = Vec::new();
    for attack in &cfg.attacks {
        if attack.method == AttackMethod::Fgsm {
            continue; // intensity attack has no region structure
        }
        let mut regioned: Vec<(Option<Vec<u8>>, String)> = (1..=5u8)
            .map(|g| (Some(vec![g]), REGION_NAMES[g as usize - 1].to_string()))
            .collect();
        regioned.push((None, ALL_REGIONS.to_string()));
        for (regions, label) in regioned {
            let mut a = attack.clone();
            a.regions = regions;
            let results = attack_samples(&inputs.model, &targets, &a, &label, cfg.timing_reps)?;
            let rows: Vec<PerSampleRow> = results.into_iter().map(|(r, _, _)| r).collect();
            let refs: Vec<&PerSampleRow> = rows.iter().collect();
            aggregates.push(aggregate_rows(&a.method.to_string(), &label, &refs));
            sample_rows.extend(rows);
        }
    }
    write_samples_csv(&cfg.out_dir.join("per_region_samples.csv"), cfg.seed, &sample_rows, None)?;
    write_metrics_csv(&cfg.out_dir.join("per_region.csv"), cfg.seed, &aggregates, None)?;
    Ok(aggregates)
}

/// One sweep measurement: sample-averaged true-class probability per offset.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub variable: u8,
    pub offset: f64,
    pub mean_p_true: f64,
    pub samples: usize,
}

/// Edits landmarks along one of the eight geometric variables. Additive
/// formulation, so offset 0 returns the landmarks bitwise unchanged.
pub fn sweep_edit(landmarks: &LandmarkSet, variable: u8, offset: f64) -> Result<Vec<NormalizedPoint>> {
    let mut pts = landmarks.points().to_vec();
    let shift_groups = |pts: &mut [NormalizedPoint], groups: &[u8], targets: &[u8], du: f64, dv: f64| {
        for (p, g) in pts.iter_mut().zip(groups) {
            if targets.contains(g) {
                p.u += du;
                p.v += dv;
            }
        }
    };
    let scale_group = |pts: &mut [NormalizedPoint], lm: &LandmarkSet, g: u8, s: f64| {
        let c = lm.group_centroid(g);
        for &i in &lm.group_indices(g) {
            pts[i].u += s * (pts[i].u - c[0]);
            pts[i].v += s * (pts[i].v - c[1]);
        }
    };
    match variable {
        // Horizontal distance between the eyes/eyebrows.
        1 => {
            shift_groups(&mut pts, landmarks.groups(), &[2], -offset / 2.0, 0.0);
            shift_groups(&mut pts, landmarks.groups(), &[3], offset / 2.0, 0.0);
        }
        // Vertical location of the eyes/eyebrows.
        2 => shift_groups(&mut pts, landmarks.groups(), &[2, 3], 0.0, offset),
        // Horizontal location of the nose.
        3 => shift_groups(&mut pts, landmarks.groups(), &[4], offset, 0.0),
        // Horizontal location of the mouth.
        4 => shift_groups(&mut pts, landmarks.groups(), &[5], offset, 0.0),
        // Scales of jaw, mouth, nose, eyes.
        5 => scale_group(&mut pts, landmarks, 1, offset),
        6 => scale_group(&mut pts, landmarks, 5, offset),
        7 => scale_group(&mut pts, landmarks, 4, offset),
        8 => {
            scale_group(&mut pts, landmarks, 2, offset);
            scale_group(&mut pts, landmarks, 3, offset);
        }
        other => return Err(Error::Config(format!("sweep variable {other} outside 1..=8"))),
    }
    Ok(pts)
}

/// Interpolation sweep: for each variable, offsets span the configured range
/// and each correctly classified sample is warped and re-scored.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let inputs = load_inputs(cfg)?;
    if cfg.sweep.steps < 3 {
        return Err(Error::Config("sweep needs at least 3 steps".into()));
    }
    for v in &cfg.sweep.variables {
        if !(1..=8).contains(v) {
            return Err(Error::Config(format!("sweep variable {v} outside 1..=8")));
        }
    }
    let test = inputs.dataset.test_samples();
    let targets = correctly_classified(&inputs.model, &test, cfg.sample_limit)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let steps = cfg.sweep.steps;
    let center = (steps - 1) as f64 / 2.0;
    let unit = cfg.sweep.range / center;
    let mut points = Vec::new();
    for &variable in &cfg.sweep.variables {
        for i in 0..steps {
            // Exactly 0.0 at the center index, so the identity-warp fast path
            // makes the clean prediction literally exact.
            let offset = (i as f64 - center) * unit;
            let mut acc = 0.0;
            for s in &targets {
                let edited = sweep_edit(&s.landmarks, variable, offset)?;
                let warped = crate::tps::warp_image(&s.image, s.landmarks.points(), &edited)?;
                let pred = inputs.model.forward(&warped)?;
                acc += pred.probabilities[s.class_id];
            }
            points.push(SweepPoint {
                variable,
                offset,
                mean_p_true: if targets.is_empty() { 0.0 } else { acc / targets.len() as f64 },
                samples: targets.len(),
            });
        }
    }

    let path = cfg.out_dir.join("sweep.csv");
    let mut body = String::new();
    writeln!(body, "variable,offset,mean_p_true,samples").unwrap();
    for p in &points {
        writeln!(
            body,
            "{},{},{},{}",
            p.variable,
            fmt_sig(p.offset),
            fmt_sig(p.mean_p_true),
            p.samples
        )
        .unwrap();
    }
    write_with_header(&path, cfg.seed, &body, None)?;
    Ok(points)
}

/// Table-2-shaped defense evaluation: one row per (defended model, attack).
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseCsvRow {
    pub defense: String,
    pub method: String,
    pub success_rate: f64,
    pub attacked: usize,
    pub successes: usize,
}

pub fn run_defense_eval(cfg: &ExperimentConfig) -> Result<Vec<DefenseCsvRow>> {
    if cfg.defended_checkpoints.is_empty() {
        return Err(Error::Config("defense evaluation needs defended checkpoints".into()));
    }
    if !cfg.dataset.exists() {
        return Err(Error::Config(format!("dataset path {} does not exist", cfg.dataset.display())));
    }
    let dataset = load_dataset(&cfg.dataset)?;
    let test = dataset.test_samples();
    let capped: Vec<&Sample> =
        test.iter().take(cfg.sample_limit.unwrap_or(usize::MAX)).copied().collect();
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut rows = Vec::new();
    for ckpt in &cfg.defended_checkpoints {
        if !ckpt.exists() {
            return Err(Error::Config(format!("checkpoint path {} does not exist", ckpt.display())));
        }
        let model = load_checkpoint(ckpt)?;
        let report = evaluate_under_defense(&model, &capped, &cfg.attacks)?;
        for r in &report.rows {
            rows.push(DefenseCsvRow {
                defense: report.defense.clone(),
                method: r.method.to_string(),
                success_rate: r.success_rate,
                attacked: r.attacked,
                successes: r.successes,
            });
        }
    }

    let mut body = String::new();
    writeln!(body, "defense,method,success_rate,attacked,successes").unwrap();
    for r in &rows {
        writeln!(
            body,
            "{},{},{},{},{}",
            r.defense,
            r.method,
            fmt_sig(r.success_rate),
            r.attacked,
            r.successes
        )
        .unwrap();
    }
    write_with_header(&cfg.out_dir.join("defense.csv"), cfg.seed, &body, None)?;
    Ok(rows)
}

// --- image dumps ---------------------------------------------------------

fn dump_attack_images(
    cfg: &ExperimentConfig,
    results: &[(PerSampleRow, Image, Vec<NormalizedPoint>)],
    targets: &[&Sample],
    method: AttackMethod,
) -> Result<()> {
    if cfg.dump_images == 0 {
        return Ok(());
    }
    let dir = cfg.out_dir.join("images");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for ((row, adv, p_adv), sample) in results.iter().zip(targets).take(cfg.dump_images) {
        let id = row.sample_id;
        write_pgm(&sample.image, &dir.join(format!("{id:05}_orig.pgm")), cfg.seed)?;
        write_pgm(adv, &dir.join(format!("{id:05}_{method}_adv.pgm")), cfg.seed)?;
        if !p_adv.is_empty() {
            let field = warp_field_image(
                sample.image.height(),
                sample.image.width(),
                sample.landmarks.points(),
                p_adv,
            )?;
            write_pgm(&field, &dir.join(format!("{id:05}_{method}_field.pgm")), cfg.seed)?;
        }
    }
    Ok(())
}

/// Renders the displacement magnitude of the backward warp as a grayscale
/// image (white = large displacement), for visual inspection of the field.
pub fn warp_field_image(
    h: usize,
    w: usize,
    landmarks: &[NormalizedPoint],
    adversarial: &[NormalizedPoint],
) -> Result<Image> {
    let mut img = Image::new(h, w, 1)?;
    if landmarks == adversarial {
        return Ok(img);
    }
    let map = tps_fit(adversarial, landmarks)?;
    let full_scale = 0.25; // displacement, in normalized units, shown as white
    for r in 0..h {
        for c in 0..w {
            let q = pixel_to_norm(r, c, h, w)?;
            let src = map.eval(q);
            let d = ((src.u - q.u).powi(2) + (src.v - q.v).powi(2)).sqrt();
            img.set(r, c, 0, (d / full_scale).min(1.0));
        }
    }
    Ok(img)
}

// --- CSV plumbing ----------------------------------------------------------

const CSV_HEADER_TAG: &str = "geomadv-csv v1";

/// Floats are printed with six significant digits so identical runs emit
/// identical bytes.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..=8).contains(&mag) {
        format!("{x:.5e}")
    } else {
        let decimals = (5 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    }
}

fn write_with_header(path: &Path, seed: u64, body: &str, note: Option<&str>) -> Result<()> {
    let mut out = format!("# {CSV_HEADER_TAG} seed={seed}\n");
    if let Some(n) = note {
        out.push_str(&format!("# note: {n}\n"));
    }
    out.push_str(body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_samples_csv(
    path: &Path,
    seed: u64,
    rows: &[PerSampleRow],
    note: Option<&str>,
) -> Result<()> {
    let mut body = String::new();
    writeln!(body, "sample_id,class,method,region,success,iterations,p_true,time_s").unwrap();
    for r in rows {
        writeln!(
            body,
            "{},{},{},{},{},{},{},{}",
            r.sample_id,
            r.class,
            r.method,
            r.region,
            r.success as u8,
            r.iterations,
            fmt_sig(r.p_true),
            fmt_sig(r.time_s)
        )
        .unwrap();
    }
    write_with_header(path, seed, &body, note)
}

fn write_metrics_csv(
    path: &Path,
    seed: u64,
    rows: &[MetricsRow],
    note: Option<&str>,
) -> Result<()> {
    let mut body = String::new();
    writeln!(body, "method,region,mean_iters,success_rate,p_true,time_s,samples").unwrap();
    for r in rows {
        writeln!(
            body,
            "{},{},{},{},{},{},{}",
            r.method,
            r.region,
            fmt_sig(r.mean_iters),
            fmt_sig(r.success_rate),
            fmt_sig(r.p_true_mean),
            fmt_sig(r.time_mean_s),
            r.samples
        )
        .unwrap();
    }
    write_with_header(path, seed, &body, note)
}

// --- report ------------------------------------------------------------------

/// Renders text tables from the CSVs found in a results directory. Pure read;
/// regenerating from unchanged files is byte-identical.
pub fn report(dir: &Path) -> Result<String> {
    let known = ["whitebox.csv", "per_region.csv", "sweep.csv", "defense.csv"];
    let mut out = String::new();
    let mut found = false;
    for name in known {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        found = true;
        let table = parse_csv(&path)?;
        writeln!(out, "== {name}").unwrap();
        out.push_str(&render_table(&table));
        out.push('\n');
    }
    if !found {
        out.push_str("no results\n");
    }
    Ok(out)
}

struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn parse_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        match &header {
            None => header = Some(fields),
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(Error::Format(format!(
                        "{}:{}: expected {} fields, found {}",
                        path.display(),
                        lineno + 1,
                        h.len(),
                        fields.len()
                    )));
                }
                rows.push(fields);
            }
        }
    }
    let header = header.ok_or_else(|| {
        Error::Format(format!("{}: missing header row", path.display()))
    })?;
    Ok(CsvTable { header, rows })
}

fn render_table(t: &CsvTable) -> String {
    let mut widths: Vec<usize> = t.header.iter().map(|h| h.len()).collect();
    for row in &t.rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{c:>w$}"));
        }
        line
    };
    out.push_str(&fmt_row(&t.header, &widths));
    out.push('\n');
    for row in &t.rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::{build_dataset, make_classes, save_dataset, JitterParams, LandmarkLayout};
    use crate::victim::{save_checkpoint, train, ArchitectureDescriptor, LayerSpec, TrainParams};

    fn mini_world(dir: &Path) -> (PathBuf, PathBuf) {
        let templates = make_classes(3, LandmarkLayout::Compact, 14).unwrap();
        let ds = build_dataset(&templates, 10, 0.8, 24, &JitterParams::default(), 14).unwrap();
        let data_dir = dir.join("data");
        save_dataset(&ds, &data_dir).unwrap();
        let desc = ArchitectureDescriptor {
            input: (24, 24, 1),
            layers: vec![
                LayerSpec::Conv { filters: 6, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
            num_classes: 3,
        };
        let hp = TrainParams { epochs: 6, seed: 14, ..Default::default() };
        let model = train(&desc, &ds.train_refs(), &ds.test_refs(), &hp).unwrap();
        let ckpt = dir.join("model.fgck");
        save_checkpoint(&model, &ckpt).unwrap();
        (data_dir, ckpt)
    }

    #[test]
    fn fmt_sig_six_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(99.8611), "99.8611");
        assert_eq!(fmt_sig(2.8), "2.80000");
        assert_eq!(fmt_sig(0.0156), "0.0156000");
        assert_eq!(fmt_sig(123456.0), "123456");
        assert_eq!(fmt_sig(1e-7), "1.00000e-7");
    }

    #[test]
    fn sweep_edit_zero_offset_is_bitwise_identity() {
        let t = &make_classes(2, LandmarkLayout::Compact, 3).unwrap()[0];
        for v in 1..=8u8 {
            let edited = sweep_edit(&t.landmarks, v, 0.0).unwrap();
            assert_eq!(edited, t.landmarks.points(), "variable {v}");
        }
        assert!(sweep_edit(&t.landmarks, 9, 0.1).is_err());
    }

    #[test]
    fn sweep_edit_moves_the_right_groups() {
        let t = &make_classes(2, LandmarkLayout::Compact, 3).unwrap()[0];
        let lm = &t.landmarks;
        // Variable 3 moves only the nose horizontally.
        let edited = sweep_edit(lm, 3, 0.1).unwrap();
        for (i, (a, b)) in edited.iter().zip(lm.points()).enumerate() {
            if lm.groups()[i] == 4 {
                assert!((a.u - b.u - 0.1).abs() < 1e-12);
                assert_eq!(a.v, b.v);
            } else {
                assert_eq!(a, b);
            }
        }
        // Variable 1 spreads the eye groups apart symmetrically.
        let edited = sweep_edit(lm, 1, 0.2).unwrap();
        for (i, (a, b)) in edited.iter().zip(lm.points()).enumerate() {
            match lm.groups()[i] {
                2 => assert!((a.u - (b.u - 0.1)).abs() < 1e-12),
                3 => assert!((a.u - (b.u + 0.1)).abs() < 1e-12),
                _ => assert_eq!(a, b),
            }
        }
        // Variable 6 scales the mouth about its centroid.
        let edited = sweep_edit(lm, 6, 0.5).unwrap();
        let c = lm.group_centroid(5);
        for &i in &lm.group_indices(5) {
            let b = lm.points()[i];
            assert!((edited[i].u - (b.u + 0.5 * (b.u - c[0]))).abs() < 1e-12);
            assert!((edited[i].v - (b.v + 0.5 * (b.v - c[1]))).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_recomputable_from_rows() {
        let rows = vec![
            PerSampleRow {
                sample_id: 1,
                class: 0,
                method: AttackMethod::Flm,
                region: "all".into(),
                success: true,
                iterations: 3,
                p_true: 0.1,
                time_s: 0.01,
            },
            PerSampleRow {
                sample_id: 2,
                class: 1,
                method: AttackMethod::Flm,
                region: "all".into(),
                success: false,
                iterations: 50,
                p_true: 0.8,
                time_s: 0.2,
            },
        ];
        let refs: Vec<&PerSampleRow> = rows.iter().collect();
        let agg = aggregate_rows("flm", "all", &refs);
        assert_eq!(agg.samples, 2);
        assert!((agg.success_rate - 50.0).abs() < 1e-12);
        assert!((agg.mean_iters - 26.5).abs() < 1e-12);
        assert!((agg.p_true_mean - 0.45).abs() < 1e-12);
    }

    #[test]
    fn whitebox_writes_consistent_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let (data, ckpt) = mini_world(dir.path());
        let mut cfg = ExperimentConfig::new(
            ExperimentKind::Whitebox,
            data,
            ckpt,
            dir.path().join("out"),
        );
        cfg.sample_limit = Some(4);
        cfg.seed = 14;
        for a in &mut cfg.attacks {
            a.max_iters = 10;
        }
        let rows = run_whitebox(&cfg).unwrap();
        assert_eq!(rows.len(), 3); // flm, gflm, fgsm
        let agg = std::fs::read_to_string(dir.path().join("out/whitebox.csv")).unwrap();
        assert!(agg.starts_with("# geomadv-csv v1 seed=14\n"));
        assert!(agg.contains("method,region,mean_iters,success_rate,p_true,time_s,samples"));

        // Aggregate equals a recount over the per-sample file.
        let samples = std::fs::read_to_string(dir.path().join("out/whitebox_samples.csv")).unwrap();
        let flm_successes = samples
            .lines()
            .filter(|l| l.contains(",flm,"))
            .filter(|l| l.split(',').nth(4) == Some("1"))
            .count();
        let flm_total = samples.lines().filter(|l| l.contains(",flm,")).count();
        let flm_row = rows.iter().find(|r| r.method == "flm").unwrap();
        assert_eq!(flm_row.samples, flm_total);
        let want = 100.0 * flm_successes as f64 / flm_total.max(1) as f64;
        assert!((flm_row.success_rate - want).abs() < 1e-9);

        // Image dumps for the first samples exist.
        assert!(dir.path().join("out/images").read_dir().unwrap().count() > 0);
    }

    #[test]
    fn whitebox_missing_paths_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::new(
            ExperimentKind::Whitebox,
            dir.path().join("nope"),
            dir.path().join("nope.fgck"),
            dir.path().join("out"),
        );
        match run_whitebox(&cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("nope")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn sweep_offset_zero_equals_clean_probability() {
        let dir = tempfile::tempdir().unwrap();
        let (data, ckpt) = mini_world(dir.path());
        let mut cfg =
            ExperimentConfig::new(ExperimentKind::Sweep, data, ckpt, dir.path().join("out"));
        cfg.sample_limit = Some(3);
        cfg.sweep = SweepConfig { variables: vec![1, 5], range: 0.2, steps: 5 };
        let points = run_sweep(&cfg).unwrap();
        assert_eq!(points.len(), 2 * 5);

        // Recompute the clean mean probability directly.
        let inputs = load_inputs(&cfg).unwrap();
        let test = inputs.dataset.test_samples();
        let targets = correctly_classified(&inputs.model, &test, cfg.sample_limit).unwrap();
        let clean_mean: f64 = targets
            .iter()
            .map(|s| inputs.model.forward(&s.image).unwrap().probabilities[s.class_id])
            .sum::<f64>()
            / targets.len() as f64;
        for p in points.iter().filter(|p| p.offset == 0.0) {
            assert_eq!(p.mean_p_true, clean_mean, "variable {}", p.variable);
            assert_eq!(p.samples, targets.len());
        }
    }

    #[test]
    fn report_renders_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(report(dir.path()).unwrap(), "no results\n");

        let csv = "# geomadv-csv v1 seed=3\nmethod,region,mean_iters,success_rate,p_true,time_s,samples\nflm,all,2.80000,99.8600,0.00720000,0.126000,100\n";
        std::fs::write(dir.path().join("whitebox.csv"), csv).unwrap();
        let a = report(dir.path()).unwrap();
        let b = report(dir.path()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("flm"));
        assert!(a.contains("99.8600"));

        std::fs::write(dir.path().join("defense.csv"), "# x\nbad,row\nonly,two,fields\n").unwrap();
        match report(dir.path()) {
            Err(Error::Format(msg)) => assert!(msg.contains(":3:"), "message was {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn warp_field_image_is_zero_for_identity() {
        let pts: Vec<NormalizedPoint> = vec![
            NormalizedPoint::new(-0.5, -0.5),
            NormalizedPoint::new(0.5, -0.5),
            NormalizedPoint::new(0.0, 0.6),
        ];
        let img = warp_field_image(8, 8, &pts, &pts).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
        let mut moved = pts.clone();
        moved[2] = NormalizedPoint::new(0.1, 0.7);
        let img = warp_field_image(8, 8, &pts, &moved).unwrap();
        assert!(img.pixels().iter().any(|&v| v > 0.0));
    }
}
