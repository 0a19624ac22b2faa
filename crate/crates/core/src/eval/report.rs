use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::interpret::{
    build_centroids, calibration_split, classification_accuracy, expert_usage, signatures_from_gates, BlockSel,
    GateSignature,
};
use super::metrics::{l2re, Operator};
use super::rollout::{error_accumulation, HorizonError};
use crate::data::{SampleWindow, TrainingSet};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::derive_seed;

pub const DEFAULT_HORIZONS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Rollout horizons (1-based) for the error-accumulation table.
    pub horizons: Vec<usize>,
    /// Seed of the calibration/test split.
    pub seed: u64,
    /// Predicted/ground-truth frame pairs kept per dataset for image dumps.
    pub dump_frames: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { horizons: DEFAULT_HORIZONS.to_vec(), seed: 0, dump_frames: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetReport {
    pub name: String,
    pub one_step_l2re: f64,
    pub horizons: Vec<HorizonError>,
    /// Accuracy within this dataset's test split, per block.
    pub accuracy: Vec<f64>,
    /// `[block][expert]`
    pub usage: Vec<Vec<f64>>,
    /// `(prediction, ground truth)` pairs of the first held-out windows.
    pub frames: Vec<(Tensor, Tensor)>,
}

/// Dataset classification results over all datasets' test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub per_block: Vec<f64>,
    pub all_blocks: f64,
    /// `[dataset]`, all blocks concatenated.
    pub all_blocks_per_dataset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub datasets: Vec<DatasetReport>,
    pub accuracy: Option<AccuracyTable>,
}

struct HeldOut {
    windows: Vec<SampleWindow>,
    preds: Vec<Tensor>,
    signatures: Vec<GateSignature>,
    usage: Vec<Vec<f64>>,
}

fn held_out_windows(data: &TrainingSet, id: usize, t_window: usize) -> Result<Vec<SampleWindow>> {
    let starts = data.set.window_starts(t_window);
    let mut out = Vec::new();
    for n in data.held_out() {
        for s in 0..starts {
            out.push(data.set.window(n, s, t_window, id)?);
        }
    }
    if out.is_empty() {
        return Err(Error::contract(format!("dataset {} has no held-out windows", data.name)));
    }
    Ok(out)
}

fn analyze(op: &Operator<'_>, data: &TrainingSet, id: usize) -> Result<HeldOut> {
    let windows = held_out_windows(data, id, op.cfg.t_window)?;
    let inputs: Vec<&Tensor> = windows.iter().map(|w| &w.input).collect();
    let mut preds = Vec::with_capacity(windows.len());
    let mut signatures = Vec::with_capacity(windows.len());
    let mut gates_per_block = vec![Vec::new(); op.cfg.n_blocks];
    for (p, gates) in op.run_chunks(&inputs)? {
        signatures.extend(signatures_from_gates(&gates, p.len())?);
        preds.extend(p);
        for (slot, g) in gates_per_block.iter_mut().zip(gates) {
            slot.push(g);
        }
    }
    let usage = gates_per_block.iter().map(|gs| expert_usage(&gs.iter().collect::<Vec<_>>())).collect::<Result<_>>()?;
    Ok(HeldOut { windows, preds, signatures, usage })
}

/// Classification over the held-out calibration/test split of each dataset.
fn accuracy_table(
    analyses: &[HeldOut],
    datasets: &[TrainingSet],
    n_blocks: usize,
    seed: u64,
) -> Result<(AccuracyTable, Vec<Vec<f64>>)> {
    let mut calib = Vec::with_capacity(datasets.len());
    let mut test = Vec::with_capacity(datasets.len());
    for (i, (a, d)) in analyses.iter().zip(datasets).enumerate() {
        let held: Vec<usize> = d.held_out().collect();
        let (c, _) = calibration_split(&held, derive_seed(seed, &[3, i as u64]));
        let (mut cs, mut ts) = (Vec::new(), Vec::new());
        for (w, s) in a.windows.iter().zip(&a.signatures) {
            if c.contains(&w.trajectory) {
                cs.push(s.clone());
            } else {
                ts.push(s.clone());
            }
        }
        calib.push(cs);
        test.push(ts);
    }
    let centroids = build_centroids(&calib)?;
    let mut per_block = Vec::with_capacity(n_blocks);
    let mut per_dataset = vec![Vec::with_capacity(n_blocks); datasets.len()];
    for b in 0..n_blocks {
        let (acc, per) = classification_accuracy(&centroids, &test, BlockSel::One(b))?;
        per_block.push(acc);
        for (slot, v) in per_dataset.iter_mut().zip(per) {
            slot.push(v);
        }
    }
    let (all_blocks, all_blocks_per_dataset) = classification_accuracy(&centroids, &test, BlockSel::All)?;
    Ok((AccuracyTable { per_block, all_blocks, all_blocks_per_dataset }, per_dataset))
}

/// Full held-out evaluation: one-step error, rollout error accumulation,
/// expert usage, and dataset classification when there are at least two
/// datasets.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    datasets: &[TrainingSet],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::contract("no datasets to evaluate"));
    }
    let op = Operator::new(params, cfg);
    let analyses = datasets.iter().enumerate().map(|(i, d)| analyze(&op, d, i)).collect::<Result<Vec<_>>>()?;
    let (accuracy, per_dataset) = if datasets.len() >= 2 {
        let (t, p) = accuracy_table(&analyses, datasets, cfg.n_blocks, opts.seed)?;
        (Some(t), p)
    } else {
        (None, vec![Vec::new(); datasets.len()])
    };
    let mut reports = Vec::with_capacity(datasets.len());
    for ((d, a), acc) in datasets.iter().zip(analyses).zip(per_dataset) {
        let mut total = 0.0;
        for (p, w) in a.preds.iter().zip(&a.windows) {
            total += l2re(p.data(), w.target.data())?;
        }
        let held: Vec<usize> = d.held_out().collect();
        let horizons = if opts.horizons.is_empty() {
            Vec::new()
        } else {
            error_accumulation(&op, &d.set, &held, cfg.t_window, &opts.horizons)?
        };
        let frames =
            a.preds.iter().zip(&a.windows).take(opts.dump_frames).map(|(p, w)| (p.clone(), w.target.clone())).collect();
        reports.push(DatasetReport {
            name: d.name.clone(),
            one_step_l2re: total / a.windows.len() as f64,
            horizons,
            accuracy: acc,
            usage: a.usage,
            frames,
        });
    }
    Ok(EvalReport { datasets: reports, accuracy })
}

/// Dataset classification and expert usage only.
pub fn interpret(params: &ModelParams, cfg: &ModelConfig, datasets: &[TrainingSet], seed: u64) -> Result<EvalReport> {
    if datasets.len() < 2 {
        return Err(Error::contract("dataset classification needs at least two datasets"));
    }
    let opts = EvalOptions { horizons: Vec::new(), seed, dump_frames: 0 };
    evaluate(params, cfg, datasets, &opts)
}

impl EvalReport {
    /// Sectioned CSV: one-step error, error accumulation, usage and accuracy.
    /// `with_errors = false` leaves out the first two sections.
    pub fn to_csv(&self, with_errors: bool) -> String {
        let mut out = String::new();
        if with_errors {
            out.push_str("# one_step\ndataset,l2re\n");
            for d in &self.datasets {
                let _ = writeln!(out, "{},{}", d.name, d.one_step_l2re);
            }
            out.push_str("\n# error_accumulation\ndataset,horizon,l2re\n");
            for d in &self.datasets {
                for h in &d.horizons {
                    let _ = writeln!(out, "{},{},{}", d.name, h.horizon, h.l2re);
                }
            }
            out.push('\n');
        }
        let experts = self.datasets.first().and_then(|d| d.usage.first()).map_or(0, Vec::len);
        out.push_str("# usage\ndataset,block");
        for e in 0..experts {
            let _ = write!(out, ",expert_{e}");
        }
        out.push('\n');
        for d in &self.datasets {
            for (b, row) in d.usage.iter().enumerate() {
                let _ = write!(out, "{},{b}", d.name);
                for v in row {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        if let Some(acc) = &self.accuracy {
            out.push_str("\n# accuracy\ndataset,block,accuracy\n");
            for (b, v) in acc.per_block.iter().enumerate() {
                let _ = writeln!(out, "all,{b},{v}");
            }
            let _ = writeln!(out, "all,all,{}", acc.all_blocks);
            for (i, d) in self.datasets.iter().enumerate() {
                for (b, v) in d.accuracy.iter().enumerate() {
                    let _ = writeln!(out, "{},{b},{v}", d.name);
                }
                let _ = writeln!(out, "{},all,{}", d.name, acc.all_blocks_per_dataset[i]);
            }
        }
        out
    }

    /// Writes each kept frame pair as `<dataset>_<i>_pred.pgm` and
    /// `<dataset>_<i>_gt.pgm`. Returns the written paths.
    pub fn write_frames(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for d in &self.datasets {
            for (i, (pred, gt)) in d.frames.iter().enumerate() {
                for (tag, t) in [("pred", pred), ("gt", gt)] {
                    let path = dir.join(format!("{}_{i}_{tag}.pgm", d.name));
                    write_pgm(&path, t)?;
                    paths.push(path);
                }
            }
        }
        Ok(paths)
    }
}

/// Encodes a `[C, H, W]` frame as an 8-bit binary PGM with channels stacked
/// vertically, min–max normalized.
pub fn pgm_bytes(frame: &Tensor) -> Result<Vec<u8>> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("expected a [C, H, W] frame, got {s:?}")));
    }
    let (lo, hi) = frame.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", s[2], s[0] * s[1]).into_bytes();
    out.extend(frame.data().iter().map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, frame: &Tensor) -> Result<()> {
    std::fs::write(path, pgm_bytes(frame)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_range() {
        let t = Tensor::new(&[1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = pgm_bytes(&t).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 51, 102, 153, 204, 255]);
        let flat = pgm_bytes(&Tensor::full(&[1, 1, 2], 7.0)).unwrap();
        assert!(flat.ends_with(&[0, 0]));
    }
}
