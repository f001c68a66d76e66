//! Analysis instruments: refinement traces over the loop states, decoding of
//! intermediate states, a global-attention probe and step-count sweeps.

use serde::Serialize;
use thiserror::Error;

use crate::eval::{evaluate_prediction, CameraSource};
use crate::losses::Target;
use crate::metrics::{MetricError, MetricReport};
use crate::model::{Binder, DepthHead, ForwardOptions, Model, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// How each state is reduced before computing the series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// All tokens of all views as one vector.
    #[default]
    Flatten,
    /// Series computed per token, then averaged over tokens.
    PerTokenMean,
}

/// Per-step series for states `z_0..z_K`; row `k` covers `k = 0..K-1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RefinementTrace {
    /// `cos(z_k, z_K)`.
    pub cosine_to_final: Vec<f64>,
    /// `‖z_{k+1} − z_k‖ / ‖z_k‖`.
    pub relative_update: Vec<f64>,
    /// `‖z_k‖₂`.
    pub norm: Vec<f64>,
}

impl RefinementTrace {
    pub fn len(&self) -> usize {
        self.norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("k\tcosine_to_final\trelative_update\tnorm\n");
        for k in 0..self.len() {
            s += &format!("{k}\t{}\t{}\t{}\n", self.cosine_to_final[k], self.relative_update[k], self.norm[k]);
        }
        s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn series(states: &[&[f64]]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let last = states[states.len() - 1];
    let nl = dot(last, last).sqrt();
    let mut cos = Vec::new();
    let mut rel = Vec::new();
    let mut norm = Vec::new();
    for k in 0..states.len() - 1 {
        let z = states[k];
        let n = dot(z, z).sqrt();
        let c = if n > 0.0 && nl > 0.0 { dot(z, last) / (n * nl) } else { 0.0 };
        cos.push(c.clamp(-1.0, 1.0));
        let d: f64 = z.iter().zip(states[k + 1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        rel.push(if n > 0.0 { d / n } else { 0.0 });
        norm.push(n);
    }
    (cos, rel, norm)
}

/// Trace of the loop states. `token_dim` is the channel count used by the
/// per-token reduction.
pub fn refinement_trace(states: &[Vec<f64>], token_dim: usize, reduction: Reduction) -> Result<RefinementTrace> {
    if states.len() < 2 {
        return Err(DiagnosticsError::Input(format!("need at least 2 states, got {}", states.len())));
    }
    let n = states[0].len();
    if states.iter().any(|s| s.len() != n) {
        return Err(DiagnosticsError::Input("states differ in size".into()));
    }
    match reduction {
        Reduction::Flatten => {
            let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
            let (cosine_to_final, relative_update, norm) = series(&refs);
            Ok(RefinementTrace { cosine_to_final, relative_update, norm })
        }
        Reduction::PerTokenMean => {
            if token_dim == 0 || n % token_dim != 0 {
                return Err(DiagnosticsError::Input(format!("state size {n} is not a multiple of {token_dim}")));
            }
            let tokens = n / token_dim;
            let k = states.len() - 1;
            let mut acc = RefinementTrace {
                cosine_to_final: vec![0.0; k],
                relative_update: vec![0.0; k],
                norm: vec![0.0; k],
            };
            for t in 0..tokens {
                let refs: Vec<&[f64]> = states.iter().map(|s| &s[t * token_dim..(t + 1) * token_dim]).collect();
                let (c, r, m) = series(&refs);
                for i in 0..k {
                    acc.cosine_to_final[i] += c[i] / tokens as f64;
                    acc.relative_update[i] += r[i] / tokens as f64;
                    acc.norm[i] += m[i] / tokens as f64;
                }
            }
            Ok(acc)
        }
    }
}

/// Options shared by the model-driven diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub depth_head: DepthHead,
    pub camera_source: CameraSource,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Loop states `z_0..z_K` of one traced forward, flattened.
pub fn loop_states<T: Scalar>(model: &Model<T>, images: &Tensor<T>, k: usize) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&model.params);
    let out = model.forward(&mut tape, &mut b, images, k, ForwardOptions { trace: true, ..Default::default() })?;
    Ok(out.states.iter().map(|&s| to_f64(tape.value(s))).collect())
}

/// Decode every intermediate state of one traced `K`-step forward.
///
/// Returns `K` reports for `k = 1..K`.
pub fn decode_at_every_step<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    target: &Target<T>,
    k: usize,
    opts: EvalOptions,
) -> Result<Vec<MetricReport>> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&model.params);
    let fwd = ForwardOptions { depth_head: opts.depth_head, trace: true };
    let out = model.forward(&mut tape, &mut b, images, k, fwd)?;
    let mut reports = Vec::with_capacity(k);
    for &z in &out.states[1..] {
        let pred = model.decode_heads(&mut tape, &mut b, z, opts.depth_head)?.values(&tape);
        reports.push(evaluate_prediction(&pred, target, opts.camera_source)?);
    }
    Ok(reports)
}

/// Head-averaged global-attention row of one query token.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionProbe {
    pub query: (usize, usize),
    pub iteration: usize,
    /// Over all `V·T` tokens.
    pub row: Vec<f64>,
    /// Per view, the patch-token slice as a row-major `grid.0 × grid.1` map.
    pub heatmaps: Vec<Vec<f64>>,
    pub grid: (usize, usize),
}

impl AttentionProbe {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("view\trow\tcol\tweight\n");
        for (v, map) in self.heatmaps.iter().enumerate() {
            for (i, w) in map.iter().enumerate() {
                s += &format!("{v}\t{}\t{}\t{w}\n", i / self.grid.1, i % self.grid.1);
            }
        }
        s
    }
}

/// Attention of patch `query.1` of view `query.0` during the global
/// sub-block of loop step `iteration` (0-based) of a `k`-step forward.
pub fn attention_probe<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    k: usize,
    query: (usize, usize),
    iteration: usize,
) -> Result<AttentionProbe> {
    let c = &model.config;
    let views = images.shape().first().copied().unwrap_or(0);
    if iteration >= k {
        return Err(DiagnosticsError::Input(format!("iteration {iteration} out of range for K = {k}")));
    }
    if query.0 >= views || query.1 >= c.patches() {
        return Err(DiagnosticsError::Input(format!(
            "query {query:?} out of range ({views} views, {} patches)",
            c.patches()
        )));
    }
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&model.params);
    let out = model.forward(&mut tape, &mut b, images, k, ForwardOptions::default())?;
    let probs = tape.value(out.global_attention[iteration]);
    let (heads, n) = (probs.shape()[1], probs.shape()[2]);
    let per_view = c.tokens_per_view();
    let specials = 1 + c.registers;
    let qi = query.0 * per_view + specials + query.1;
    let data = probs.data();
    let mut row = vec![0.0; n];
    for h in 0..heads {
        let base = (h * n + qi) * n;
        for (j, r) in row.iter_mut().enumerate() {
            *r += data[base + j].to_f64().unwrap_or(f64::NAN);
        }
    }
    row.iter_mut().for_each(|r| *r /= heads as f64);
    let heatmaps = (0..views)
        .map(|v| row[v * per_view + specials..(v + 1) * per_view].to_vec())
        .collect();
    Ok(AttentionProbe {
        query,
        iteration,
        row,
        heatmaps,
        grid: c.grid(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub report: MetricReport,
}

fn evaluate_forward<T: Scalar>(
    model: &Model<T>,
    samples: &[(Tensor<T>, Target<T>)],
    k: usize,
    opts: EvalOptions,
) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for (images, target) in samples {
        let pred = model.predict(images, k, opts.depth_head)?;
        reports.push(evaluate_prediction(&pred, target, opts.camera_source)?);
    }
    Ok(MetricReport::merge(&reports))
}

/// Independent forwards at each inference step count.
pub fn kinf_sweep<T: Scalar>(
    model: &Model<T>,
    samples: &[(Tensor<T>, Target<T>)],
    ks: &[usize],
    opts: EvalOptions,
) -> Result<Vec<SweepRow>> {
    ks.iter()
        .map(|&k| Ok(SweepRow { k, report: evaluate_forward(model, samples, k, opts)? }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub k: usize,
    /// State `z_k` of a single `K_max`-step forward, decoded.
    pub early_stop: MetricReport,
    /// Full forward with `K = k`.
    pub full_pass: MetricReport,
}

/// Early-stopped decoding of one `K_max` forward against full passes at each `k`.
pub fn early_stop_compare<T: Scalar>(
    model: &Model<T>,
    samples: &[(Tensor<T>, Target<T>)],
    k_max: usize,
    opts: EvalOptions,
) -> Result<Vec<CompareRow>> {
    let mut early: Vec<Vec<MetricReport>> = vec![Vec::new(); k_max];
    for (images, target) in samples {
        for (k, r) in decode_at_every_step(model, images, target, k_max, opts)?.into_iter().enumerate() {
            early[k].push(r);
        }
    }
    (1..=k_max)
        .map(|k| {
            Ok(CompareRow {
                k,
                early_stop: MetricReport::merge(&early[k - 1]),
                full_pass: evaluate_forward(model, samples, k, opts)?,
            })
        })
        .collect()
}

fn report_cols(r: &MetricReport) -> String {
    format!("{}\t{}\t{}\t{}", r.rel_l2, r.ir, r.auc3, r.auc30)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k\trel_l2\tir\tauc3\tauc30\n");
    for r in rows {
        s += &format!("{}\t{}\n", r.k, report_cols(&r.report));
    }
    s
}

pub fn compare_tsv(rows: &[CompareRow]) -> String {
    let mut s = String::from("k\tearly_rel_l2\tearly_ir\tearly_auc3\tearly_auc30\tfull_rel_l2\tfull_ir\tfull_auc3\tfull_auc30\n");
    for r in rows {
        s += &format!("{}\t{}\t{}\n", r.k, report_cols(&r.early_stop), report_cols(&r.full_pass));
    }
    s
}
