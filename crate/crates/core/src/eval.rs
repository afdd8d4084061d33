//! Accuracy, label-fraction sweeps, feature export with a 2-D PCA
//! projection, nearest-neighbour generation reports and n-gram diversity.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::classifier::{Input, TextClassifier};
use crate::corpus::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::parallel;
use crate::trainer::{RunSummary, TrainConfig, TrainData, Trainer, Variant};

/// Fraction of inputs whose task-class argmax equals the gold label.
pub fn accuracy(classifier: &TextClassifier, inputs: &[(Input<'_>, usize)]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty test set".into()));
    }
    let hits = parallel::map(inputs, |(x, y)| classifier.predict(*x).map(|p| usize::from(p == *y)))
        .into_iter()
        .sum::<Result<usize>>()?;
    Ok(hits as f64 / inputs.len() as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Unique n-grams over total n-grams across whitespace-tokenized texts.
pub fn distinct_ngram_ratio<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    if !(n == 1 || n == 2) {
        return Err(Error::InvalidArgument(format!("n = {n}; expected 1 or 2")));
    }
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no texts".into()));
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        let toks = tokenize(t.as_ref());
        for w in toks.windows(n) {
            seen.insert(w.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(format!("texts contain no {n}-grams")));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Projection onto the top two principal components. Each component's
/// sign is fixed so that its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidArgument("PCA of no points".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidArgument("points differ in dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::new();
    for &c in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let proj = |a: &[f64]| row.iter().zip(a).map(|(r, w)| r * w).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::InvalidArgument("silhouette needs one label per point".into()));
    }
    let k = labels.iter().max().copied().unwrap_or(0) + 1;
    let sizes: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let scores = parallel::map_indices(points.len(), |i| {
        let own = labels[i];
        if sizes[own] < 2 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        for (j, p) in points.iter().enumerate() {
            if j != i {
                sums[labels[j]] += dist(&points[i], p);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m == 0.0 {
            0.0
        } else {
            (b - a) / m
        }
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Encoder features of `inputs`, written as `features.tsv`
/// (`gold_label<TAB>f_1,...,f_d`) and `features_2d.csv` (`label,x,y`).
/// Returns the 2-D projection.
pub fn export_features(
    classifier: &TextClassifier,
    inputs: &[(Input<'_>, usize)],
    label_names: &[String],
    dir: &Path,
) -> Result<Vec<[f64; 2]>> {
    let feats = parallel::map(inputs, |(x, _)| classifier.features(*x).map(|f| f.0))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let name = |y: usize| label_names.get(y).cloned().unwrap_or_else(|| y.to_string());
    let mut tsv = String::new();
    for (f, (_, y)) in feats.iter().zip(inputs) {
        let values: Vec<String> = f.iter().map(|v| v.to_string()).collect();
        writeln!(tsv, "{}\t{}", name(*y), values.join(",")).expect("write to string");
    }
    let proj = pca_2d(&feats)?;
    let mut csv = String::from("label,x,y\n");
    for (p, (_, y)) in proj.iter().zip(inputs) {
        writeln!(csv, "{},{},{}", name(*y), p[0], p[1]).expect("write to string");
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("features.tsv"), tsv.as_bytes())?;
    write_atomic(&dir.join("features_2d.csv"), csv.as_bytes())?;
    Ok(proj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReportRow {
    pub generated: String,
    pub nearest_real: String,
    pub cosine: f64,
}

/// For each of `generated`, the real text with the most similar encoder
/// feature (first one on ties).
pub fn nearest_real(classifier: &TextClassifier, vocab: &Vocabulary, max_len: usize, generated: &[String], real: &[String]) -> Result<Vec<GenReportRow>> {
    if real.is_empty() {
        return Err(Error::InvalidArgument("empty real corpus".into()));
    }
    if classifier.encoder.is_none() {
        return Err(Error::InvalidArgument("generation report needs the trainable encoder".into()));
    }
    let feature = |text: &String| {
        let tokens = vocab.encode(text, max_len);
        classifier.features(Input::Tokens(&tokens)).map(|f| f.0)
    };
    let real_feats = parallel::map(real, feature).into_iter().collect::<Result<Vec<_>>>()?;
    let gen_feats = parallel::map(generated, feature).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(generated
        .iter()
        .zip(&gen_feats)
        .map(|(g, gf)| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, rf) in real_feats.iter().enumerate() {
                let c = cosine(gf, rf);
                if c > best.1 {
                    best = (j, c);
                }
            }
            GenReportRow {
                generated: g.clone(),
                nearest_real: real[best.0].clone(),
                cosine: best.1,
            }
        })
        .collect())
}

/// Samples `n` texts from the generator and matches each to its nearest
/// real text; writes `gen_report.tsv` when `path` is given.
#[allow(clippy::too_many_arguments)]
pub fn generation_report(
    generator: &Generator,
    classifier: &TextClassifier,
    vocab: &Vocabulary,
    real: &[String],
    n: usize,
    max_len: usize,
    seed: u64,
    path: Option<&Path>,
) -> Result<Vec<GenReportRow>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if real.is_empty() {
        return Err(Error::InvalidArgument("empty real corpus".into()));
    }
    let generated: Vec<String> = generator
        .sample_trajectories(n, max_len, seed, 1.0)?
        .iter()
        .map(|t| vocab.decode(&t.tokens))
        .collect();
    let rows = nearest_real(classifier, vocab, max_len, &generated, real)?;
    if let Some(path) = path {
        let clean = |s: &str| s.replace(['\t', '\n'], " ");
        let mut tsv = String::from("generated\tnearest_real\tcosine\n");
        for r in &rows {
            writeln!(tsv, "{}\t{}\t{}", clean(&r.generated), clean(&r.nearest_real), r.cosine).expect("write to string");
        }
        write_atomic(path, tsv.as_bytes())?;
    }
    Ok(rows)
}

// -- sweeps -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub final_acc: f64,
    pub best_acc: f64,
    pub metrics_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub variant: Variant,
    pub fraction: f64,
    pub seed: u64,
    pub outcome: std::result::Result<CellResult, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Mean final accuracy per fraction for one variant, over successful
    /// cells, in the order fractions were requested.
    pub fn mean_final(&self, variant: Variant, fractions: &[f64]) -> Vec<Option<f64>> {
        fractions
            .iter()
            .map(|&f| {
                let accs: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.variant == variant && c.fraction == f)
                    .filter_map(|c| c.outcome.as_ref().ok().map(|r| r.final_acc))
                    .collect();
                (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
            })
            .collect()
    }
}

pub struct SweepSpec<'a> {
    pub base: TrainConfig,
    pub fractions: &'a [f64],
    pub variants: &'a [Variant],
    pub seeds: &'a [u64],
    pub jobs: usize,
}

/// Directory of one cell's run below the sweep root.
pub fn cell_dir(root: &Path, variant: Variant, fraction: f64, seed: u64) -> PathBuf {
    root.join(format!("{variant}-f{fraction}-s{seed}"))
}

/// Runs every (variant, fraction, seed) cell, up to `jobs` at a time.
/// `data` builds the dataset for a cell's configuration; `on_done` sees each
/// cell's run directory and outcome as soon as it finishes. A failing cell is
/// recorded with its reason and the sweep continues. Writes `sweep.csv`,
/// `sweep_failures.csv` when any cell failed, and one SVG plot per variant.
pub fn sweep<F, G>(spec: &SweepSpec<'_>, root: &Path, data: F, on_done: G) -> Result<SweepResult>
where
    F: Fn(&TrainConfig) -> Result<TrainData> + Sync,
    G: Fn(&TrainConfig, &Path, &Result<RunSummary>) + Sync,
{
    if spec.fractions.is_empty() || spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let mut grid = Vec::new();
    for &variant in spec.variants {
        for &fraction in spec.fractions {
            for &seed in spec.seeds {
                grid.push((variant, fraction, seed));
            }
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let results: Vec<Mutex<Option<SweepCell>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let run_cell = |(variant, fraction, seed): (Variant, f64, u64)| -> std::result::Result<CellResult, String> {
        let config = TrainConfig {
            variant,
            label_fraction: fraction,
            seed,
            ..spec.base.clone()
        };
        let dataset = data(&config).map_err(|e| e.to_string())?;
        let dir = cell_dir(root, variant, fraction, seed);
        let outcome = Trainer::new(config.clone(), &dataset).and_then(|t| t.run(&dir, None));
        on_done(&config, &dir, &outcome);
        let summary = outcome.map_err(|e| e.to_string())?;
        Ok(CellResult {
            final_acc: summary.final_accuracy,
            best_acc: summary.best_accuracy,
            metrics_path: summary.metrics_path,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..spec.jobs.clamp(1, grid.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = grid.get(i) else { break };
                let outcome = run_cell(cell);
                *results[i].lock().expect("unpoisoned") = Some(SweepCell {
                    variant: cell.0,
                    fraction: cell.1,
                    seed: cell.2,
                    outcome,
                });
            });
        }
    });
    let cells: Vec<SweepCell> = results
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every cell ran"))
        .collect();
    let result = SweepResult { cells };

    let mut csv = String::from("variant,fraction,seed,final_acc,best_acc\n");
    let mut failures = String::from("variant,fraction,seed,reason\n");
    let mut any_failed = false;
    for c in &result.cells {
        match &c.outcome {
            Ok(r) => writeln!(csv, "{},{},{},{},{}", c.variant, c.fraction, c.seed, r.final_acc, r.best_acc),
            Err(reason) => {
                any_failed = true;
                writeln!(failures, "{},{},{},\"{}\"", c.variant, c.fraction, c.seed, reason.replace('"', "'"))
            }
        }
        .expect("write to string");
    }
    write_atomic(&root.join("sweep.csv"), csv.as_bytes())?;
    if any_failed {
        write_atomic(&root.join("sweep_failures.csv"), failures.as_bytes())?;
    }
    for &variant in spec.variants {
        let means = result.mean_final(variant, spec.fractions);
        let points: Vec<(f64, f64)> = spec
            .fractions
            .iter()
            .zip(means)
            .filter_map(|(&f, m)| m.map(|m| (f, m)))
            .collect();
        let svg = line_chart_svg(&format!("{variant}: accuracy vs label fraction"), &points);
        write_atomic(&root.join(format!("accuracy_{variant}.svg")), svg.as_bytes())?;
    }
    Ok(result)
}

/// Minimal line chart with a log-scaled x axis when all x are positive.
pub fn line_chart_svg(title: &str, points: &[(f64, f64)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let log = pts.iter().all(|p| p.0 > 0.0);
    let tx = |x: f64| if log { x.log10() } else { x };
    let (x0, x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(tx(p.0)), hi.max(tx(p.0))));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let sx = |x: f64| m + (tx(x) - x0) / span * (w - 2.0 * m);
    let sy = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <text x=\"{m}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - m,
        r = w - m
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            "<text x=\"8\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">{tick}</text>",
            sy(tick) + 4.0
        );
    }
    for &(x, _) in &pts {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{x}</text>",
            sx(x),
            h - m + 14.0
        );
    }
    if !pts.is_empty() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for &(x, y) in &pts {
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>", sx(x), sy(y));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierHead, HeadConfig};
    use crate::rng::from_seed;

    #[test]
    fn distinct_ratio_examples() {
        let same = vec!["a b a c"; 3];
        assert_eq!(distinct_ngram_ratio(&same, 1).unwrap(), 3.0 / 12.0);
        assert_eq!(distinct_ngram_ratio(&["a b", "c d"], 1).unwrap(), 1.0);
        assert_eq!(distinct_ngram_ratio(&["a b", "c d"], 2).unwrap(), 1.0);
        assert!(distinct_ngram_ratio(&["a"], 3).is_err());
        assert!(distinct_ngram_ratio::<&str>(&[], 1).is_err());
        assert!(distinct_ngram_ratio(&["a", "b"], 2).is_err());
    }

    #[test]
    fn cosine_is_symmetric_and_bounded() {
        let a = [1.0, 2.0, -0.5];
        let b = [0.3, -1.0, 2.0];
        assert_eq!(cosine(&a, &b), cosine(&b, &a));
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        assert!(cosine(&a, &b).abs() <= 1.0);
    }

    #[test]
    fn pca_recovers_planar_points() {
        // points in a tilted plane of R^4
        let u = [0.5, 0.5, 0.5, 0.5];
        let v = [0.5, -0.5, 0.5, -0.5];
        let coords = [(0.0, 0.0), (3.0, 1.0), (-2.0, 0.5), (1.0, -2.0), (4.0, 4.0)];
        let pts: Vec<Vec<f64>> = coords
            .iter()
            .map(|&(a, b)| (0..4).map(|i| 1.0 + a * u[i] + b * v[i]).collect())
            .collect();
        let proj = pca_2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d_orig: f64 = pts[i].iter().zip(&pts[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let d_proj = ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert!((d_orig - d_proj).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn silhouette_of_separated_clusters_near_one() {
        let pts = [[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.98);
        let mixed = silhouette(&pts, &[0, 1, 0, 1]).unwrap();
        assert!(mixed < 0.0);
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn accuracy_excludes_fake_class() {
        let mut head = ClassifierHead::new(HeadConfig { d: 2, hidden: 2, k: 2 }, &mut from_seed(1));
        head.output.weight.fill(0.0);
        head.output.bias = vec![0.0, 1.0, 50.0];
        let clf = TextClassifier::new(None, head);
        let f = [0.0, 0.0];
        let inputs = vec![(Input::Features(&f), 1), (Input::Features(&f), 0)];
        assert_eq!(accuracy(&clf, &inputs).unwrap(), 0.5);
        assert!(accuracy(&clf, &[]).is_err());
    }

    #[test]
    fn svg_mentions_every_point() {
        let svg = line_chart_svg("t", &[(0.02, 0.6), (0.1, 0.7), (1.0, 0.9)]);
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
