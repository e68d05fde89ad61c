//! Interpretability tables: per-layer |α|, summed token weights, and a PCA
//! of last-layer representation shifts.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::backbone::{forward, BackboneModel, ExampleTrace};
use crate::data::{batches, Dataset, Example, Vocab, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 200_000;
const PCA_SEED: u64 = 0;

/// Tokens left out of every token-level statistic.
pub fn is_excluded_token(token: &str) -> bool {
    token == CLS || token == SEP || token == PAD
}

/// Traced forward pass over `examples`, one trace per example in order,
/// paired with the example's unpadded tokens.
pub fn trace_examples(
    model: &BackboneModel,
    adapter: &AdapterState,
    vocab: &Vocab,
    examples: &[&Example],
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<(Vec<String>, ExampleTrace)>> {
    let batches = batches(vocab, examples, batch_size, max_len)?;
    let per_batch = batches
        .par_iter()
        .map(|batch| {
            let out = forward(model, adapter, batch, true)?;
            let traces = out.traces.expect("tracing requested");
            Ok(batch.raw_tokens.iter().cloned().zip(traces).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

fn require_weight_head(adapter: &AdapterState) -> Result<()> {
    let has = adapter.shift.as_ref().is_some_and(|s| s.alpha.is_some());
    if has {
        Ok(())
    } else {
        Err(Error::InvalidVariant(format!(
            "{:?} has no weight head; α analysis needs one",
            adapter.variant().kind
        )))
    }
}

/// Mean |α| per layer over every non-special token of every example.
pub fn alpha_stats_from_traces(traces: &[(Vec<String>, ExampleTrace)], num_layers: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; num_layers];
    let mut count = 0usize;
    for (tokens, trace) in traces {
        for (i, tok) in tokens.iter().enumerate() {
            if is_excluded_token(tok) {
                continue;
            }
            count += 1;
            for (l, layer) in trace.layers.iter().enumerate() {
                sums[l] += layer.alpha.data()[i].abs();
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("no non-special tokens to average over".into()));
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

pub fn layer_alpha_stats(
    model: &BackboneModel,
    adapter: &AdapterState,
    vocab: &Vocab,
    dataset: &Dataset,
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<f64>> {
    require_weight_head(adapter)?;
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let refs: Vec<&Example> = dataset.examples.iter().collect();
    let traces = trace_examples(model, adapter, vocab, &refs, batch_size, max_len)?;
    alpha_stats_from_traces(&traces, model.config().num_layers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    /// Sum over occurrences of the layer-summed α.
    pub sum: f64,
    pub count: usize,
}

impl TokenWeight {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

/// Per-occurrence weights `Σ_ℓ α_ℓ,i` grouped by token string.
pub fn token_occurrences(traces: &[(Vec<String>, ExampleTrace)]) -> BTreeMap<String, Vec<f64>> {
    let mut by_token: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (tokens, trace) in traces {
        for (i, tok) in tokens.iter().enumerate() {
            if is_excluded_token(tok) {
                continue;
            }
            let w: f64 = trace.layers.iter().map(|l| l.alpha.data()[i]).sum();
            by_token.entry(tok.clone()).or_default().push(w);
        }
    }
    by_token
}

/// Aggregates occurrences into a table ranked by mean weight (descending,
/// ties by token). Occurrences are summed in ascending order so the table
/// does not depend on dataset order.
pub fn token_table_from_traces(traces: &[(Vec<String>, ExampleTrace)]) -> Vec<TokenWeight> {
    let mut table: Vec<TokenWeight> = token_occurrences(traces)
        .into_iter()
        .map(|(token, mut ws)| {
            ws.sort_by(f64::total_cmp);
            TokenWeight {
                token,
                sum: ws.iter().sum(),
                count: ws.len(),
            }
        })
        .collect();
    table.sort_by(|a, b| b.mean().total_cmp(&a.mean()).then_with(|| a.token.cmp(&b.token)));
    table
}

pub fn token_weight_table(
    model: &BackboneModel,
    adapter: &AdapterState,
    vocab: &Vocab,
    dataset: &Dataset,
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<TokenWeight>> {
    require_weight_head(adapter)?;
    let refs: Vec<&Example> = dataset.examples.iter().collect();
    let traces = trace_examples(model, adapter, vocab, &refs, batch_size, max_len)?;
    let table = token_table_from_traces(&traces);
    if table.is_empty() {
        return Err(Error::Data("no non-special tokens in dataset".into()));
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[2 × d]`, orthonormal rows.
    pub components: Tensor,
    /// `[n × 2]`.
    pub coords: Tensor,
    pub explained_variance: [f64; 2],
}

impl Pca {
    /// Projects rows of `points` onto the fitted components.
    pub fn project(&self, points: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if points.rank() != 2 || points.shape()[1] != d {
            return Err(Error::shape("pca project", format!("{:?} for d = {d}", points.shape())));
        }
        let n = points.shape()[0];
        let c = self.components.data();
        let mut out = Vec::with_capacity(2 * n);
        for row in points.data().chunks(d) {
            for k in 0..2 {
                out.push((0..d).map(|j| (row[j] - self.mean[j]) * c[k * d + j]).sum());
            }
        }
        Tensor::matrix(n, 2, out)
    }
}

fn matvec_sym(c: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| c[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

fn orthogonalize(x: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let p: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
        x.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
    }
}

fn fix_sign(x: &mut [f64]) {
    if let Some(first) = x.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            x.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Leading unit eigenvector of the symmetric `c` orthogonal to `found`.
fn power_iteration(c: &[f64], d: usize, found: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let start = Tensor::randn(&[d], 1.0, rng);
    let mut x = start.into_data();
    orthogonalize(&mut x, found);
    normalize(&mut x);
    for _ in 0..PCA_MAX_ITERS {
        let mut y = matvec_sym(c, &x, d);
        orthogonalize(&mut y, found);
        if normalize(&mut y) <= f64::MIN_POSITIVE {
            break;
        }
        let delta = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        x = y;
        if delta < PCA_TOL {
            break;
        }
    }
    x
}

/// Unit vector orthogonal to `found`, from the standard basis.
fn orthogonal_completion(d: usize, found: &[Vec<f64>]) -> Vec<f64> {
    let mut best = Vec::new();
    let mut best_norm = -1.0;
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        orthogonalize(&mut e, found);
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > best_norm + 1e-12 {
            best_norm = n;
            best = e;
        }
    }
    normalize(&mut best);
    best
}

/// Top-2 principal components of the rows of `points` by power iteration
/// with deflation on the sample covariance.
pub fn pca_2d(points: &Tensor) -> Result<Pca> {
    if points.rank() != 2 {
        return Err(Error::shape("pca_2d", format!("expected a matrix, got {:?}", points.shape())));
    }
    let (n, d) = (points.shape()[0], points.shape()[1]);
    if n < 3 {
        return Err(Error::InvalidArgument(format!("pca_2d needs at least 3 points, got {n}")));
    }
    if d < 2 {
        return Err(Error::InvalidArgument("pca_2d needs at least 2 dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for row in points.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = points
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<_>>())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks(d) {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Err(Error::InvalidArgument("pca_2d input has rank 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(PCA_SEED);
    let rayleigh = |x: &[f64]| -> f64 { matvec_sym(&cov, x, d).iter().zip(x).map(|(a, b)| a * b).sum::<f64>().max(0.0) };
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut variances = [0.0; 2];
    for k in 0..2 {
        let mut c = power_iteration(&cov, d, &found, &mut rng);
        let mut var = rayleigh(&c);
        if var <= trace * 1e-14 {
            c = orthogonal_completion(d, &found);
            var = rayleigh(&c);
        }
        fix_sign(&mut c);
        variances[k] = var;
        found.push(c);
    }
    let components = Tensor::matrix(2, d, found.concat())?;
    let mut pca = Pca {
        mean,
        components,
        coords: Tensor::zeros(&[1, 2]),
        explained_variance: variances,
    };
    pca.coords = pca.project(points)?;
    Ok(pca)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Before,
    After,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub example: usize,
    pub token_index: usize,
    pub token: String,
    pub stage: Stage,
    pub x: f64,
    pub y: f64,
    pub label: usize,
}

/// Last-layer token representations before and after the shift, in
/// matching row order, with their shared PCA projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftExport {
    /// `h + f` per non-special token.
    pub before: Tensor,
    /// `LN2(h + f + Bᵀ)` per non-special token.
    pub after: Tensor,
    /// Example index, token index, token and label of each row.
    pub rows: Vec<(usize, usize, String, usize)>,
    /// Fitted on the union of before and after rows.
    pub pca: Pca,
    /// Before rows first, then after rows.
    pub points: Vec<PcaPoint>,
}

pub fn shift_trace_export(
    model: &BackboneModel,
    adapter: &AdapterState,
    vocab: &Vocab,
    sentences: &[&Example],
    batch_size: usize,
    max_len: usize,
) -> Result<ShiftExport> {
    if sentences.is_empty() {
        return Err(Error::Data("shift export needs at least one sentence".into()));
    }
    let traces = trace_examples(model, adapter, vocab, sentences, batch_size, max_len)?;
    let d = model.config().hidden_dim;
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut rows = Vec::new();
    for (e, ((tokens, trace), example)) in traces.iter().zip(sentences).enumerate() {
        let last = trace.layers.last().expect("at least one layer");
        for (i, tok) in tokens.iter().enumerate() {
            if is_excluded_token(tok) {
                continue;
            }
            let h = &last.hidden.data()[i * d..(i + 1) * d];
            let f = &last.ffn_out.data()[i * d..(i + 1) * d];
            before.extend(h.iter().zip(f).map(|(a, b)| a + b));
            after.extend_from_slice(&last.output.data()[i * d..(i + 1) * d]);
            rows.push((e, i, tok.clone(), example.label));
        }
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data("no non-special tokens to export".into()));
    }
    let before = Tensor::matrix(n, d, before)?;
    let after = Tensor::matrix(n, d, after)?;
    let union = Tensor::matrix(2 * n, d, [before.data(), after.data()].concat())?;
    let pca = pca_2d(&union)?;
    let coords = pca.coords.data();
    let points = [Stage::Before, Stage::After]
        .into_iter()
        .enumerate()
        .flat_map(|(s, stage)| {
            rows.iter().enumerate().map(move |(r, (e, i, tok, label))| {
                let k = s * n + r;
                PcaPoint {
                    example: *e,
                    token_index: *i,
                    token: tok.clone(),
                    stage,
                    x: coords[2 * k],
                    y: coords[2 * k + 1],
                    label: *label,
                }
            })
        })
        .collect();
    Ok(ShiftExport {
        before,
        after,
        rows,
        pca,
        points,
    })
}

impl ShiftExport {
    /// Mean `after − before` displacement of the rows with each label.
    pub fn mean_displacement_by_label(&self) -> BTreeMap<usize, Vec<f64>> {
        let d = self.before.shape()[1];
        let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (r, (_, _, _, label)) in self.rows.iter().enumerate() {
            let entry = acc.entry(*label).or_insert_with(|| (vec![0.0; d], 0));
            let b = &self.before.data()[r * d..(r + 1) * d];
            let a = &self.after.data()[r * d..(r + 1) * d];
            entry.0.iter_mut().zip(a.iter().zip(b)).for_each(|(s, (x, y))| *s += x - y);
            entry.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, c))| (k, s.into_iter().map(|v| v / c as f64).collect()))
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub per_layer_mean_abs_alpha: Vec<f64>,
    pub token_weight_table: Vec<TokenWeight>,
    pub pca_points: Vec<PcaPoint>,
    pub pca_explained_variance: [f64; 2],
    /// Which rows the PCA was fitted on.
    pub pca_fit: String,
}

/// Runs every analysis over `dataset`; the shift export uses its first
/// `max_shift_sentences` examples.
pub fn analyze(
    model: &BackboneModel,
    adapter: &AdapterState,
    vocab: &Vocab,
    dataset: &Dataset,
    max_shift_sentences: usize,
    batch_size: usize,
    max_len: usize,
) -> Result<AnalysisReport> {
    require_weight_head(adapter)?;
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let refs: Vec<&Example> = dataset.examples.iter().collect();
    let traces = trace_examples(model, adapter, vocab, &refs, batch_size, max_len)?;
    let per_layer = alpha_stats_from_traces(&traces, model.config().num_layers)?;
    let table = token_table_from_traces(&traces);
    let k = max_shift_sentences.clamp(1, refs.len());
    let shift = shift_trace_export(model, adapter, vocab, &refs[..k], batch_size, max_len)?;
    Ok(AnalysisReport {
        per_layer_mean_abs_alpha: per_layer,
        token_weight_table: table,
        pca_points: shift.points,
        pca_explained_variance: shift.pca.explained_variance,
        pca_fit: "union of before and after".into(),
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes report.json, token_weights.csv, pca_points.csv and
/// alpha_by_layer.csv into `dir`.
pub fn write_report(report: &AnalysisReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.json");
    serde_json::to_writer_pretty(create(&path)?, report)?;

    let path = dir.join("token_weights.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["token", "sum", "count", "mean"]).map_err(|e| csv_err(&path, e))?;
    for t in &report.token_weight_table {
        w.write_record([t.token.clone(), t.sum.to_string(), t.count.to_string(), t.mean().to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("pca_points.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["id", "token_idx", "token", "stage", "x", "y", "label"])
        .map_err(|e| csv_err(&path, e))?;
    for p in &report.pca_points {
        let stage = match p.stage {
            Stage::Before => "before",
            Stage::After => "after",
        };
        w.write_record([
            p.example.to_string(),
            p.token_index.to_string(),
            p.token.clone(),
            stage.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.label.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("alpha_by_layer.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["layer", "mean_abs_alpha"]).map_err(|e| csv_err(&path, e))?;
    for (l, a) in report.per_layer_mean_abs_alpha.iter().enumerate() {
        w.write_record([l.to_string(), a.to_string()]).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::VariantSpec;
    use crate::backbone::{init_backbone, BackboneConfig};

    fn setup() -> (BackboneModel, AdapterState, Vocab, Dataset) {
        let ds = Dataset {
            examples: vec![
                Example {
                    text: "good movie here".into(),
                    label: 1,
                },
                Example {
                    text: "bad plot".into(),
                    label: 0,
                },
            ],
            label_names: vec!["0".into(), "1".into()],
        };
        let vocab = Vocab::build(ds.texts());
        let model = init_backbone(&BackboneConfig::tiny(2, 8, 16, 2, vocab.len())).unwrap();
        let adapter = AdapterState::init(&model, &VariantSpec::adapter_bias(), 3).unwrap();
        (model, adapter, vocab, ds)
    }

    #[test]
    fn constant_weight_head_gives_bias_magnitude() {
        let (model, mut adapter, vocab, ds) = setup();
        let alpha = adapter.shift.as_mut().unwrap().alpha.as_mut().unwrap();
        for (w, b) in alpha.weights.iter_mut().zip(alpha.biases.iter_mut()) {
            w.data_mut().fill(0.0);
            b.data_mut()[0] = -0.37;
        }
        let stats = layer_alpha_stats(&model, &adapter, &vocab, &ds, 4, 16).unwrap();
        assert_eq!(stats, vec![0.37, 0.37]);
    }

    #[test]
    fn variant_without_weight_head_is_rejected() {
        let (model, _, vocab, ds) = setup();
        let adapter = AdapterState::init(&model, &VariantSpec::without_l_alpha(), 0).unwrap();
        assert!(matches!(
            layer_alpha_stats(&model, &adapter, &vocab, &ds, 4, 16),
            Err(Error::InvalidVariant(_))
        ));
    }

    #[test]
    fn empty_sentence_has_no_valid_tokens() {
        let (model, adapter, vocab, _) = setup();
        let ds = Dataset {
            examples: vec![Example {
                text: String::new(),
                label: 0,
            }],
            label_names: vec!["0".into(), "1".into()],
        };
        assert!(matches!(layer_alpha_stats(&model, &adapter, &vocab, &ds, 4, 16), Err(Error::Data(_))));
    }

    #[test]
    fn token_table_excludes_markers_and_is_deterministic() {
        let (model, adapter, vocab, ds) = setup();
        let a = token_weight_table(&model, &adapter, &vocab, &ds, 4, 16).unwrap();
        let b = token_weight_table(&model, &adapter, &vocab, &ds, 1, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|t| !is_excluded_token(&t.token) && t.count == 1));
    }

    #[test]
    fn pca_axis_aligned_points() {
        let pts = Tensor::matrix(4, 3, vec![1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
        let pca = pca_2d(&pts).unwrap();
        let c = pca.components.data();
        assert!((c[0].abs() - 1.0).abs() < 1e-12 && c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
        assert_eq!(pca.explained_variance[1], 0.0);
        let dot: f64 = (0..3).map(|j| c[j] * c[3 + j]).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn pca_square_corners_are_isotropic() {
        let pts = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let pca = pca_2d(&pts).unwrap();
        let [a, b] = pca.explained_variance;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn pca_rejects_rank_zero_and_tiny_inputs() {
        assert!(pca_2d(&Tensor::full(&[5, 3], 2.0)).is_err());
        assert!(pca_2d(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn shift_export_cardinality() {
        let (model, adapter, vocab, ds) = setup();
        let refs: Vec<&Example> = ds.examples.iter().collect();
        let ex = shift_trace_export(&model, &adapter, &vocab, &refs, 4, 16).unwrap();
        assert_eq!(ex.points.len(), 2 * 5);
        assert_eq!(ex.points.iter().filter(|p| p.stage == Stage::Before).count(), 5);
    }

    #[test]
    fn report_files_are_written() {
        let (model, adapter, vocab, ds) = setup();
        let report = analyze(&model, &adapter, &vocab, &ds, 2, 4, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        for f in ["report.json", "token_weights.csv", "pca_points.csv", "alpha_by_layer.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("alpha_by_layer.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
