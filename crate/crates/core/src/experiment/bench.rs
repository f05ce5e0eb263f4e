use serde::Serialize;

use crate::error::Result;
use crate::losses::{BaseLoss, Extension};
use crate::pipeline::{self, TrainConfig};
use crate::tensor::Tensor;

/// Training time of one loss with and without the MMF extension.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchCell {
    pub loss: BaseLoss,
    /// Seconds of every repeat, standalone.
    pub regular_samples: Vec<f64>,
    pub mmf_samples: Vec<f64>,
    /// Medians of the samples.
    pub regular: f64,
    pub mmf: f64,
}

impl BenchCell {
    pub fn delta(&self) -> f64 {
        self.mmf - self.regular
    }

    /// `delta / regular`.
    pub fn relative_overhead(&self) -> f64 {
        self.delta() / self.regular
    }

    /// Largest relative spread `(max - min) / median` of either sample set.
    pub fn spread(&self) -> f64 {
        let s = |v: &[f64], m: f64| {
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            (hi - lo) / m
        };
        s(&self.regular_samples, self.regular).max(s(&self.mmf_samples, self.mmf))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchTable {
    pub iterations: usize,
    pub cells: Vec<BenchCell>,
}

impl BenchTable {
    pub fn cell(&self, loss: BaseLoss) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.loss == loss)
    }

    /// Plain-text table with columns `loss, regular, +mmf, delta, delta %`.
    pub fn render(&self) -> String {
        let mut out = format!("{:<8} {:>10} {:>10} {:>10} {:>8}\n", "loss", "regular", "+mmf", "delta", "delta %");
        for c in &self.cells {
            out += &format!(
                "{:<8} {:>10.3} {:>10.3} {:>+10.3} {:>+8.1}\n",
                c.loss.name(),
                c.regular,
                c.mmf,
                c.delta(),
                100.0 * c.relative_overhead()
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| crate::Error::Io(e.into()))?;
        let err = |e: csv::Error| crate::Error::Io(e.into());
        w.write_record(["loss", "iterations", "regular_seconds", "mmf_seconds", "delta_seconds", "relative_overhead"]).map_err(err)?;
        for c in &self.cells {
            w.write_record([
                c.loss.name().to_string(),
                self.iterations.to_string(),
                format!("{:.6}", c.regular),
                format!("{:.6}", c.mmf),
                format!("{:.6}", c.delta()),
                format!("{:.6}", c.relative_overhead()),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains every loss in `losses` standalone and with MMF for the same
/// iteration count, `repeats` times each, interleaving the two so drift in
/// machine load hits both alike. `make_config` supplies the training config
/// for a loss and extension.
pub fn benchtime(
    x: &Tensor,
    labels: &[usize],
    num_classes: usize,
    losses: &[BaseLoss],
    repeats: usize,
    make_config: impl Fn(BaseLoss, Extension) -> Result<TrainConfig>,
) -> Result<BenchTable> {
    let mut cells = Vec::new();
    let mut iterations = 0;
    for &loss in losses {
        let regular_cfg = make_config(loss, Extension::None)?;
        let mmf_cfg = make_config(loss, Extension::Mmf)?;
        iterations = regular_cfg.iterations;
        let (mut regular, mut mmf) = (Vec::new(), Vec::new());
        for _ in 0..repeats.max(1) {
            regular.push(pipeline::train_on(x, labels, num_classes, &regular_cfg, |_| {})?.log.seconds);
            mmf.push(pipeline::train_on(x, labels, num_classes, &mmf_cfg, |_| {})?.log.seconds);
        }
        cells.push(BenchCell {
            loss,
            regular: median(&mut regular.clone()),
            mmf: median(&mut mmf.clone()),
            regular_samples: regular,
            mmf_samples: mmf,
        });
    }
    Ok(BenchTable { iterations, cells })
}
