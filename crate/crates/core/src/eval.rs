//! Metrics, experiment sweeps, results persistence (results.csv + per-run
//! run.json), embedding export, and a simple SVG line plot per sweep.

use crate::dataset::{PatchSet, Task};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sscl::{self, EncoderParams};
use crate::tensor::Tape;
use crate::training::{self, RunConfig, RunMetrics, Stage};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Example-based Jaccard accuracy (percent): mean over samples of
/// |P intersect T| / |P union T|; two empty sets count as a perfect match.
pub fn multilabel_accuracy(pred: &[Vec<u32>], truth: &[Vec<u32>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "multilabel_accuracy",
            format!("{} predictions", truth.len()),
            format!("{}", pred.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput(
            "multilabel_accuracy on zero samples".into(),
        ));
    }
    let mut acc = 0.0f64;
    for (p, t) in pred.iter().zip(truth) {
        let inter = p.iter().filter(|c| t.contains(c)).count();
        let union = p.len() + t.len() - inter;
        acc += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(100.0 * acc / pred.len() as f64)
}

/// Hamming-based alternative: mean over samples of the fraction of the C
/// classes whose on/off state matches.
pub fn multilabel_hamming(pred: &[Vec<u32>], truth: &[Vec<u32>], num_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "multilabel_hamming",
            format!("{} predictions", truth.len()),
            format!("{}", pred.len()),
        ));
    }
    if pred.is_empty() || num_classes == 0 {
        return Err(Error::DegenerateInput(
            "multilabel_hamming on zero samples or classes".into(),
        ));
    }
    let mut acc = 0.0f64;
    for (p, t) in pred.iter().zip(truth) {
        let inter = p.iter().filter(|c| t.contains(c)).count();
        let sym_diff = p.len() + t.len() - 2 * inter;
        acc += 1.0 - sym_diff as f64 / num_classes as f64;
    }
    Ok(100.0 * acc / pred.len() as f64)
}

/// Overall accuracy (percent) for single-label predictions.
pub fn singlelabel_accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "singlelabel_accuracy",
            format!("{} predictions", truth.len()),
            format!("{}", pred.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput(
            "singlelabel_accuracy on zero samples".into(),
        ));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / pred.len() as f64)
}

pub const RESULTS_HEADER: [&str; 10] = [
    "dataset",
    "task",
    "stage",
    "mode",
    "hidden",
    "reduction",
    "temperature",
    "seed",
    "accuracy",
    "wall_time_s",
];

#[derive(Serialize, Deserialize)]
struct RunRecord {
    config: RunConfig,
    metrics: RunMetrics,
}

fn metric_rows(m: &RunMetrics) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(m.per_seed.len() + 1);
    let fixed = |seed: String, accuracy: f64, wall: f64| {
        vec![
            m.dataset.clone(),
            m.task.to_string(),
            m.stage.to_string(),
            m.mode.clone(),
            m.hidden_size.to_string(),
            format!("{}", m.reduction),
            format!("{}", m.temperature),
            seed,
            format!("{accuracy:.4}"),
            format!("{wall:.3}"),
        ]
    };
    for s in &m.per_seed {
        rows.push(fixed(s.seed.to_string(), s.accuracy, s.wall_time_s));
    }
    let mean_wall =
        m.per_seed.iter().map(|s| s.wall_time_s).sum::<f64>() / m.per_seed.len() as f64;
    rows.push(fixed("mean".into(), m.mean_accuracy, mean_wall));
    rows
}

fn append_results(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut writer = csv::WriterBuilder::new().from_writer(file);
    if fresh {
        writer.write_record(RESULTS_HEADER)?;
    }
    for row in metric_rows(metrics) {
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Persist one experiment: a run.json under out/runs/ and appended
/// results.csv rows (per seed + mean) derived from it.
pub fn persist_run(metrics: &RunMetrics, config: &RunConfig, out: &Path) -> Result<()> {
    let runs = out.join("runs");
    std::fs::create_dir_all(&runs)?;
    let record = RunRecord {
        config: config.clone(),
        metrics: metrics.clone(),
    };
    let name = format!("{}_{}.json", metrics.run_name(), metrics.config_hash);
    std::fs::write(runs.join(name), serde_json::to_string_pretty(&record)?)?;
    append_results(&out.join("results.csv"), metrics)
}

/// Rebuild results.csv purely from the persisted run.json files, in sorted
/// filename order, with no recomputation.
pub fn report(out: &Path) -> Result<Vec<RunMetrics>> {
    let runs = out.join("runs");
    if !runs.exists() {
        return Err(Error::DataNotFound(runs));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let results_path = out.join("results.csv");
    if results_path.exists() {
        std::fs::remove_file(&results_path)?;
    }
    let mut all = Vec::with_capacity(files.len());
    for file in files {
        let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(&file)?)?;
        append_results(&results_path, &record.metrics)?;
        all.push(record.metrics);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Reduction,
    Hidden,
    Temperature,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduction" => Ok(SweepAxis::Reduction),
            "hidden" => Ok(SweepAxis::Hidden),
            "temperature" => Ok(SweepAxis::Temperature),
            other => Err(Error::InvalidArgument(format!(
                "unknown axis '{other}', expected reduction, hidden or temperature"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::Reduction => write!(f, "reduction"),
            SweepAxis::Hidden => write!(f, "hidden"),
            SweepAxis::Temperature => write!(f, "temperature"),
        }
    }
}

impl SweepAxis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            SweepAxis::Reduction => vec![1.0, 0.5, 0.4, 0.2],
            SweepAxis::Hidden => vec![32.0, 64.0],
            SweepAxis::Temperature => vec![0.01, 0.05, 0.1, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub base: RunConfig,
}

pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<(f64, RunMetrics)>,
}

fn apply_axis(config: &mut RunConfig, axis: SweepAxis, value: f64) {
    match axis {
        SweepAxis::Reduction => config.reduction = value,
        SweepAxis::Hidden => config.hidden_size = value as usize,
        SweepAxis::Temperature => config.temperature = value as f32,
    }
}

/// Run the base experiment once per axis value, everything else fixed.
/// When the base config is a fine-tune without an explicit checkpoint, each
/// point pretrains its own encoder first. Partial results are persisted
/// before an error from a later point propagates.
pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<SweepResult> {
    let mut points = Vec::new();
    let mut failure: Option<Error> = None;
    for value in spec.axis.values() {
        let mut config = spec.base.clone();
        apply_axis(&mut config, spec.axis, value);
        let outcome = (|| -> Result<RunMetrics> {
            if config.stage == Stage::Finetune && config.checkpoint_dir.is_none() {
                let mut pre = config.clone();
                pre.stage = Stage::Pretrain;
                training::run_experiment(&pre, out)?;
            }
            training::run_experiment(&config, out)
        })();
        match outcome {
            Ok(metrics) => points.push((value, metrics)),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }

    // Identical seeds must see identical test indices at every axis point.
    if let Some((_, first)) = points.first() {
        for (value, metrics) in &points[1..] {
            for (a, b) in first.per_seed.iter().zip(&metrics.per_seed) {
                if a.seed == b.seed && a.test_digest != b.test_digest {
                    return Err(Error::InvalidArgument(format!(
                        "test split drifted within sweep at {}={value}",
                        spec.axis
                    )));
                }
            }
        }
    }

    write_sweep_csv(spec.axis, &points, out)?;
    write_sweep_svg(spec.axis, &points, out)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(SweepResult {
            axis: spec.axis,
            points,
        }),
    }
}

fn write_sweep_csv(axis: SweepAxis, points: &[(f64, RunMetrics)], out: &Path) -> Result<()> {
    if points.is_empty() {
        return Ok(());
    }
    let path = out.join(format!("sweep_{axis}.csv"));
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["axis", "value", "seed", "accuracy"])?;
    for (value, metrics) in points {
        for s in &metrics.per_seed {
            writer.write_record([
                axis.to_string(),
                format!("{value}"),
                s.seed.to_string(),
                format!("{:.4}", s.accuracy),
            ])?;
        }
        writer.write_record([
            axis.to_string(),
            format!("{value}"),
            "mean".into(),
            format!("{:.4}", metrics.mean_accuracy),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn write_sweep_svg(axis: SweepAxis, points: &[(f64, RunMetrics)], out: &Path) -> Result<()> {
    if points.is_empty() {
        return Ok(());
    }
    let (w, h, ml, mb) = (480.0f64, 320.0f64, 60.0f64, 40.0f64);
    let xs: Vec<f64> = points.iter().map(|(v, _)| *v).collect();
    let ys: Vec<f64> = points.iter().map(|(_, m)| m.mean_accuracy).collect();
    let (xmin, xmax) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (ymin, ymax) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0,
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0,
    );
    let sx = |v: f64| {
        if xmax > xmin {
            ml + (v - xmin) / (xmax - xmin) * (w - ml - 20.0)
        } else {
            ml
        }
    };
    let sy = |v: f64| h - mb - (v - ymin) / (ymax - ymin) * (h - mb - 20.0);
    let poly: Vec<String> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y)))
        .collect();
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - 20.0
    ));
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        poly.join(" ")
    ));
    for (&x, &y) in xs.iter().zip(&ys) {
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>\n",
            sx(x),
            sy(y)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{x}</text>\n",
            sx(x),
            h - mb + 14.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{y:.1}</text>\n",
            sx(x),
            sy(y) - 8.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{axis}</text>\n",
        (w + ml) / 2.0,
        h - 6.0
    ));
    svg.push_str("<text x=\"16\" y=\"16\" font-size=\"12\">accuracy (%)</text>\n</svg>\n");
    let mut file = std::fs::File::create(out.join(format!("sweep_{axis}.svg")))?;
    file.write_all(svg.as_bytes())?;
    Ok(())
}

/// Write one CSV row per patch: patch_id, label(s), then the flattened
/// p*p*h hidden representation in evaluation mode.
pub fn export_embeddings(encoder: &EncoderParams, set: &PatchSet, out_path: &Path) -> Result<()> {
    if set.bands != encoder.bands {
        return Err(Error::CheckpointMismatch(format!(
            "encoder expects {} bands, patches have {}",
            encoder.bands, set.bands
        )));
    }
    let p = set.patch_size;
    let feat_h = p * p * encoder.hidden;
    let mut writer = csv::Writer::from_path(out_path)?;
    let mut header = vec!["patch_id".to_string(), "labels".to_string()];
    header.extend((0..feat_h).map(|i| format!("h{i}")));
    writer.write_record(&header)?;
    let mut rng = Rng::new(0); // eval mode: dropout is identity
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(512) {
        let n = chunk.len();
        let mut tape = Tape::new();
        let ids = sscl::encoder_leaves(&mut tape, encoder);
        let x = tape.leaf(training::batch_tensor(set, chunk)?);
        let hrep = sscl::encode(
            &mut tape,
            &ids,
            x,
            n,
            p,
            set.bands,
            encoder.hidden,
            0.0,
            &mut rng,
            false,
        )?;
        let data = tape.value(hrep).data();
        for (row, &patch_id) in chunk.iter().enumerate() {
            let patch = &set.patches[patch_id];
            let labels = match set.task {
                Task::Multi => patch
                    .label_multi
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                Task::Single => patch
                    .label_single
                    .map(|c| c.to_string())
                    .unwrap_or_default(),
            };
            let mut record = vec![patch_id.to_string(), labels];
            record.extend(
                data[row * feat_h..(row + 1) * feat_h]
                    .iter()
                    .map(|v| format!("{v}")),
            );
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn jaccard_trivial_cases() {
        let x = vec![vec![1, 2], vec![3]];
        assert_eq!(multilabel_accuracy(&x, &x).unwrap(), 100.0);
        let empty_pair = vec![vec![], vec![]];
        assert_eq!(multilabel_accuracy(&empty_pair, &empty_pair).unwrap(), 100.0);
        let half = multilabel_accuracy(&[vec![1], vec![2]], &[vec![1], vec![9]]).unwrap();
        assert_eq!(half, 50.0);
    }

    #[test]
    fn jaccard_partial_overlap() {
        // |{1,2} n {2,3}| / |{1,2,3}| = 1/3
        let acc = multilabel_accuracy(&[vec![1, 2]], &[vec![2, 3]]).unwrap();
        assert!((acc - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn jaccard_rejects_bad_input() {
        assert!(multilabel_accuracy(&[vec![1]], &[]).is_err());
        assert!(multilabel_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn hamming_counts_per_class_matches() {
        // 4 classes, pred {1}, truth {1,2}: 3 of 4 states agree.
        let acc = multilabel_hamming(&[vec![1]], &[vec![1, 2]], 4).unwrap();
        assert!((acc - 75.0).abs() < 1e-9);
    }

    #[test]
    fn single_label_accuracy_cases() {
        assert_eq!(singlelabel_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(singlelabel_accuracy(&[1, 2], &[1, 9]).unwrap(), 50.0);
        assert!(singlelabel_accuracy(&[], &[]).is_err());
        assert!(singlelabel_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn sweep_axis_value_sets() {
        assert_eq!(SweepAxis::Reduction.values(), vec![1.0, 0.5, 0.4, 0.2]);
        assert_eq!(SweepAxis::Hidden.values(), vec![32.0, 64.0]);
        assert_eq!(
            SweepAxis::Temperature.values(),
            vec![0.01, 0.05, 0.1, 0.5, 1.0]
        );
    }

    proptest! {
        #[test]
        fn jaccard_self_is_perfect(sets in proptest::collection::vec(
            proptest::collection::btree_set(1u32..10, 0..5), 1..20)) {
            let sets: Vec<Vec<u32>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
            prop_assert_eq!(multilabel_accuracy(&sets, &sets).unwrap(), 100.0);
        }

        #[test]
        fn jaccard_is_symmetric(
            a in proptest::collection::vec(proptest::collection::btree_set(1u32..10, 0..5), 1..20),
            b in proptest::collection::vec(proptest::collection::btree_set(1u32..10, 0..5), 1..20),
        ) {
            let n = a.len().min(b.len());
            let a: Vec<Vec<u32>> = a.into_iter().take(n).map(|s| s.into_iter().collect()).collect();
            let b: Vec<Vec<u32>> = b.into_iter().take(n).map(|s| s.into_iter().collect()).collect();
            let ab = multilabel_accuracy(&a, &b).unwrap();
            let ba = multilabel_accuracy(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn accuracies_stay_in_range(
            a in proptest::collection::vec(proptest::collection::btree_set(1u32..8, 0..4), 1..15),
            b in proptest::collection::vec(proptest::collection::btree_set(1u32..8, 0..4), 1..15),
        ) {
            let n = a.len().min(b.len());
            let a: Vec<Vec<u32>> = a.into_iter().take(n).map(|s| s.into_iter().collect()).collect();
            let b: Vec<Vec<u32>> = b.into_iter().take(n).map(|s| s.into_iter().collect()).collect();
            let j = multilabel_accuracy(&a, &b).unwrap();
            let h = multilabel_hamming(&a, &b, 8).unwrap();
            prop_assert!((0.0..=100.0).contains(&j));
            prop_assert!((0.0..=100.0).contains(&h));
        }
    }
}
