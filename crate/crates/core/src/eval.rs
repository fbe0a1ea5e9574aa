//! Separation metrics, test-set aggregation and PCA export of embeddings.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::attractor::{AttractorSet, MembershipTensor};
use crate::data::{Dataset, MixtureRecord, Split};
use crate::infer::{self, AttractorCodebook, SeparateOptions, Strategy};
use crate::net::Model;
use crate::signal::{self, Waveform, HOP, WINDOW_LEN};
use crate::{Error, Result};

/// Upper bound on every log-ratio metric.
pub const DB_CAP: f64 = 120.0;

fn db_ratio(num: f64, den: f64) -> f64 {
    if den <= 0.0 || num / den > 10f64.powf(DB_CAP / 10.0) {
        return DB_CAP;
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("estimate has {} samples, reference {}", a.len(), b.len())));
    }
    Ok(())
}

/// Scale-invariant SNR in dB after removing the mean of both signals.
pub fn si_snr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let s = zero_mean(&reference.samples);
    let e = zero_mean(&estimate.samples);
    let ss = dot(&s, &s);
    if ss <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = dot(&e, &s) / ss;
    let target = alpha * alpha * ss;
    let noise: f64 = e.iter().zip(&s).map(|(e, s)| (e - alpha * s).powi(2)).sum();
    Ok(db_ratio(target, noise))
}

/// Orthogonal split of one estimate against a reference set.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interf: Vec<f64>,
    pub artif: Vec<f64>,
}

impl Decomposition {
    pub fn sir(&self) -> f64 {
        db_ratio(dot(&self.target, &self.target), dot(&self.interf, &self.interf))
    }

    pub fn sar(&self) -> f64 {
        let ti: Vec<f64> = self.target.iter().zip(&self.interf).map(|(a, b)| a + b).collect();
        db_ratio(dot(&ti, &ti), dot(&self.artif, &self.artif))
    }
}

/// Solves `G x = b` for a symmetric positive-definite Gram matrix; a pivot
/// below `1e-10` of the largest diagonal entry counts as rank deficiency.
fn gram_solve(g: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = g.nrows();
    let max_diag = (0..n).map(|i| g[[i, i]]).fold(0.0, f64::max);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let sum: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let d = g[[i, i]] - sum;
                if !(d > 1e-10 * max_diag) {
                    return Err(Error::DegenerateReferences);
                }
                l[[i, i]] = d.sqrt();
            } else {
                l[[i, j]] = (g[[i, j]] - sum) / l[[j, j]];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[[i, k]] * y[k]).sum::<f64>()) / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[[k, i]] * x[k]).sum::<f64>()) / l[[i, i]];
    }
    Ok(x)
}

struct RefSet {
    refs: Vec<Vec<f64>>,
    gram: Array2<f64>,
}

impl RefSet {
    fn new(references: &[Waveform]) -> Result<Self> {
        let refs: Vec<Vec<f64>> = references.iter().map(|r| zero_mean(&r.samples)).collect();
        let c = refs.len();
        let gram = Array2::from_shape_fn((c, c), |(i, j)| dot(&refs[i], &refs[j]));
        if (0..c).any(|i| gram[[i, i]] <= 0.0) {
            return Err(Error::ZeroReference);
        }
        // factorize once up front so degeneracy surfaces regardless of the estimates
        gram_solve(&gram, &vec![0.0; c])?;
        Ok(Self { refs, gram })
    }

    fn decompose(&self, est: &[f64], j: usize) -> Result<Decomposition> {
        let b: Vec<f64> = self.refs.iter().map(|r| dot(r, est)).collect();
        let coef = gram_solve(&self.gram, &b)?;
        let n = est.len();
        let mut all = vec![0.0; n];
        for (c, r) in coef.iter().zip(&self.refs) {
            for (a, x) in all.iter_mut().zip(r) {
                *a += c * x;
            }
        }
        let alpha = b[j] / self.gram[[j, j]];
        let target: Vec<f64> = self.refs[j].iter().map(|x| alpha * x).collect();
        let interf = all.iter().zip(&target).map(|(a, t)| a - t).collect();
        let artif = est.iter().zip(&all).map(|(e, a)| e - a).collect();
        Ok(Decomposition { target, interf, artif })
    }
}

/// Decomposes `estimate` into the part along `references[j]`, the rest of
/// its projection onto the span of all references, and the residual.
pub fn decompose(estimate: &Waveform, references: &[Waveform], j: usize) -> Result<Decomposition> {
    for r in references {
        check_lengths(estimate, r)?;
    }
    if j >= references.len() {
        return Err(Error::invalid(format!("reference index {j} out of range")));
    }
    RefSet::new(references)?.decompose(&zero_mean(&estimate.samples), j)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceScore {
    pub si_snr: f64,
    pub sir: f64,
    pub sar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BssReport {
    /// `perm[i]` is the estimate matched to reference `i`.
    pub perm: Vec<usize>,
    /// Indexed by reference.
    pub scores: Vec<SourceScore>,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Per-source SI-SNR, SIR and SAR under the estimate-to-reference matching
/// with the highest mean SI-SNR.
pub fn bss_metrics(estimates: &[Waveform], references: &[Waveform]) -> Result<BssReport> {
    let c = references.len();
    if c < 2 || estimates.len() != c {
        return Err(Error::invalid(format!(
            "need matching counts of at least 2 estimates and references, got {} and {c}",
            estimates.len()
        )));
    }
    for e in estimates {
        for r in references {
            check_lengths(e, r)?;
        }
    }
    let set = RefSet::new(references)?;
    let mut si = Array2::zeros((c, c));
    for (i, r) in references.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            si[[i, j]] = si_snr(e, r)?;
        }
    }
    let perm = permutations(c)
        .into_iter()
        .map(|p| {
            let mean = p.iter().enumerate().map(|(i, &j)| si[[i, j]]).sum::<f64>() / c as f64;
            (p, mean)
        })
        .fold(None::<(Vec<usize>, f64)>, |best, (p, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((p, m)),
        })
        .unwrap()
        .0;
    let mut scores = Vec::with_capacity(c);
    for (i, &j) in perm.iter().enumerate() {
        let d = set.decompose(&zero_mean(&estimates[j].samples), i)?;
        scores.push(SourceScore {
            si_snr: si[[i, j]],
            sir: d.sir(),
            sar: d.sar(),
        });
    }
    Ok(BssReport { perm, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureReport {
    pub id: String,
    /// Samples in the mixture; the aggregation weight.
    pub length: usize,
    pub bss: BssReport,
    /// SI-SNR of the unprocessed mixture against each reference.
    pub input_si_snr: Vec<f64>,
}

impl MixtureReport {
    pub fn new(id: impl Into<String>, estimates: &[Waveform], references: &[Waveform], mixture: &Waveform) -> Result<Self> {
        let bss = bss_metrics(estimates, references)?;
        let input_si_snr = references.iter().map(|r| si_snr(mixture, r)).collect::<Result<_>>()?;
        Ok(Self {
            id: id.into(),
            length: mixture.len(),
            bss,
            input_si_snr,
        })
    }

    pub fn nsdr(&self, i: usize) -> f64 {
        self.bss.scores[i].si_snr - self.input_si_snr[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub gnsdr: f64,
    pub gsar: f64,
    pub gsir: f64,
    pub mean_si_snr: f64,
    pub n_mixtures: usize,
    pub n_sources: usize,
}

/// Length-weighted means over every source of every mixture.
pub fn aggregate(reports: &[MixtureReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty report set"));
    }
    let (mut w, mut nsdr, mut sar, mut sir, mut si, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0);
    for r in reports {
        let l = r.length as f64;
        for (i, sc) in r.bss.scores.iter().enumerate() {
            w += l;
            nsdr += l * r.nsdr(i);
            sar += l * sc.sar;
            sir += l * sc.sir;
            si += sc.si_snr;
            n += 1;
        }
    }
    Ok(Aggregate {
        gnsdr: nsdr / w,
        gsar: sar / w,
        gsir: sir / w,
        mean_si_snr: si / n as f64,
        n_mixtures: reports.len(),
        n_sources: n,
    })
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mixtures: Vec<MixtureReport>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn new(mixtures: Vec<MixtureReport>) -> Result<Self> {
        let aggregate = aggregate(&mixtures)?;
        Ok(Self { mixtures, aggregate })
    }

    /// One row per mixture and source, then an `aggregate` row whose metric
    /// columns hold GNSDR, GSIR and GSAR.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mixture,source,estimate,length,si_snr_db,nsdr_db,sir_db,sar_db\n");
        for m in &self.mixtures {
            for (i, sc) in m.bss.scores.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
                    m.id,
                    i,
                    m.bss.perm[i],
                    m.length,
                    sc.si_snr,
                    m.nsdr(i),
                    sc.sir,
                    sc.sar
                );
            }
        }
        let a = &self.aggregate;
        let total: usize = self.mixtures.iter().map(|m| m.length).sum();
        let _ = writeln!(
            s,
            "aggregate,{},,{},{:.4},{:.4},{:.4},{:.4}",
            a.n_sources, total, a.mean_si_snr, a.gnsdr, a.gsir, a.gsar
        );
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Separates every mixture of a split and scores it against its sources.
pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    split: Split,
    strategy: Strategy,
    codebook: Option<&AttractorCodebook>,
    seed: u64,
) -> Result<MetricReport> {
    let entries: Vec<_> = ds.manifest.split(split).cloned().collect();
    let reports = entries
        .par_iter()
        .map(|e| {
            let rec = ds.record(e)?;
            let opts = SeparateOptions {
                codebook,
                references: Some(&rec.sources),
                seed,
                ..SeparateOptions::new(rec.n_sources(), strategy)
            };
            let sep = infer::separate(model, &rec.mixture, &opts)?;
            MixtureReport::new(&e.id, &sep.sources, &rec.sources, &rec.mixture)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(reports)
}

/// Resynthesis through the ground-truth dominance mask, the ceiling for any
/// binary-mask separator.
pub fn ideal_binary_mask(rec: &MixtureRecord) -> Result<Vec<Waveform>> {
    let mix = signal::stft(&rec.mixture, WINDOW_LEN, HOP)?;
    let (nf, nt) = (mix.n_freq(), mix.n_frames());
    let mut mags = ndarray::Array3::zeros((nf, nt, rec.n_sources()));
    for (c, s) in rec.sources.iter().enumerate() {
        mags.index_axis_mut(Axis(2), c).assign(&signal::stft(s, WINDOW_LEN, HOP)?.magnitude());
    }
    let y = crate::data::membership(&mags);
    (0..rec.n_sources())
        .map(|c| {
            let mut spec = mix.clone();
            for t in 0..nt {
                for f in 0..nf {
                    spec.bins[[f, t]] *= y.y[[crate::bin_index(f, t, nf), c]];
                }
            }
            let mut w = signal::istft(&spec)?;
            w.samples.truncate(rec.mixture.len());
            Ok(w)
        })
        .collect()
}

pub fn evaluate_ideal_binary_mask(ds: &Dataset, split: Split) -> Result<MetricReport> {
    let entries: Vec<_> = ds.manifest.split(split).cloned().collect();
    let reports = entries
        .par_iter()
        .map(|e| {
            let rec = ds.record(e)?;
            MixtureReport::new(&e.id, &ideal_binary_mask(&rec)?, &rec.sources, &rec.mixture)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(reports)
}

#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub mean: Array1<f64>,
    /// `K x 3`, orthonormal columns.
    pub components: Array2<f64>,
    /// `N x 3`.
    pub projected: Array2<f64>,
    pub explained_variance: [f64; 3],
}

impl PcaProjection {
    /// Projects further points (attractors, say) onto the same basis.
    pub fn project(&self, points: ArrayView2<f64>) -> Array2<f64> {
        (&points - &self.mean).dot(&self.components)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors (as columns), unsorted.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diag().to_owned(), v)
}

/// Top three principal components of the rows of `points` (population
/// covariance).
pub fn pca_project(points: ArrayView2<f64>) -> Result<PcaProjection> {
    let (n, k) = points.dim();
    if n < 4 {
        return Err(Error::invalid(format!("PCA needs at least 4 points, got {n}")));
    }
    if k < 3 {
        return Err(Error::invalid(format!("PCA to 3 components needs at least 3 dimensions, got {k}")));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("PCA input"));
    }
    let mean = points.mean_axis(Axis(0)).unwrap();
    let centered = &points - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let (vals, vecs) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut components = vecs.select(Axis(1), &order[..3]);
    for mut col in components.columns_mut() {
        let lead = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
    let projected = centered.dot(&components);
    let ev = |i: usize| vals[order[i]].max(0.0);
    Ok(PcaProjection {
        mean,
        components,
        projected,
        explained_variance: [ev(0), ev(1), ev(2)],
    })
}

/// Writes bins, then attractors, as `pc1,pc2,pc3,dominant_source,is_attractor`.
pub fn export_embedding_csv(
    v: ArrayView2<f64>,
    y: &MembershipTensor,
    attractors: &AttractorSet,
    pca: &PcaProjection,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, embedding_csv(v, y, attractors, pca)?).map_err(|e| Error::io(path, e))
}

pub fn embedding_csv(v: ArrayView2<f64>, y: &MembershipTensor, attractors: &AttractorSet, pca: &PcaProjection) -> Result<String> {
    if v.nrows() != y.n_bins() || v.ncols() != pca.mean.len() || attractors.a.ncols() != v.ncols() {
        return Err(Error::shape("embedding, membership, attractor and PCA shapes disagree"));
    }
    let bins = pca.project(v);
    let atts = pca.project(attractors.a.view());
    let mut s = String::from("pc1,pc2,pc3,dominant_source,is_attractor\n");
    for (i, r) in bins.rows().into_iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},0", r[0], r[1], r[2], y.label(i));
    }
    for (c, r) in atts.rows().into_iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},1", r[0], r[1], r[2], c);
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub pc: [f64; 3],
    pub dominant_source: usize,
    pub is_attractor: bool,
}

pub fn parse_embedding_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let bad = |line: usize, msg: &str| Error::Format {
        format: "embedding CSV",
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "pc1,pc2,pc3,dominant_source,is_attractor")) => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            Ok(EmbeddingRow {
                pc: [num(f[0])?, num(f[1])?, num(f[2])?],
                dominant_source: f[3].parse().map_err(|_| bad(i + 1, "bad source"))?,
                is_attractor: match f[4] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(i + 1, "bad flag")),
                },
            })
        })
        .collect()
}

/// Pairwise Euclidean distances between attractor rows.
pub fn attractor_distances(a: &AttractorSet) -> Array2<f64> {
    let c = a.a.nrows();
    Array2::from_shape_fn((c, c), |(i, j)| {
        let d = &a.a.row(i) - &a.a.row(j);
        d.dot(&d).sqrt()
    })
}

/// Attractors of every mixture in a split, by ground truth or clustering.
pub fn attractor_population(model: &Model, ds: &Dataset, split: Split, strategy: Strategy, seed: u64) -> Result<Vec<(String, AttractorSet)>> {
    if strategy == Strategy::Fixed {
        return Err(Error::invalid("attractor inspection uses the oracle or kmeans strategy"));
    }
    let entries: Vec<_> = ds.manifest.split(split).cloned().collect();
    entries
        .par_iter()
        .map(|e| {
            let rec = ds.record(e)?;
            let emb = infer::embed(model, &rec.mixture)?;
            let a = match strategy {
                Strategy::Oracle => infer::oracle_attractors(model, &emb, &rec.sources)?,
                _ => {
                    let opts = SeparateOptions {
                        seed,
                        ..SeparateOptions::new(rec.n_sources(), Strategy::KMeans)
                    };
                    infer::separate(model, &rec.mixture, &opts)?.attractors
                }
            };
            Ok((e.id.clone(), a))
        })
        .collect()
}

/// Smallest distance between two attractors of one set.
pub fn min_attractor_distance(a: &AttractorSet) -> f64 {
    let d = attractor_distances(a);
    let c = a.a.nrows();
    (0..c)
        .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
        .map(|(i, j)| d[[i, j]])
        .fold(f64::INFINITY, f64::min)
}

/// One row per mixture: the minimum within-set distance, then each
/// attractor's coordinates on the population's first three principal
/// components.
pub fn attractor_population_csv(pop: &[(String, AttractorSet)]) -> Result<(String, PcaProjection)> {
    let c = pop.first().ok_or_else(|| Error::invalid("empty attractor population"))?.1.a.nrows();
    let k = pop[0].1.a.ncols();
    let mut all = Array2::zeros((pop.len() * c, k));
    for (i, (_, a)) in pop.iter().enumerate() {
        if a.a.dim() != (c, k) {
            return Err(Error::shape("attractor sets differ in shape"));
        }
        all.slice_mut(ndarray::s![i * c..(i + 1) * c, ..]).assign(&a.a);
    }
    let pca = pca_project(all.view())?;
    let mut s = String::from("mixture,min_distance");
    for j in 0..c {
        let _ = write!(s, ",a{j}_pc1,a{j}_pc2,a{j}_pc3");
    }
    s.push('\n');
    for (i, (id, a)) in pop.iter().enumerate() {
        let _ = write!(s, "{id},{}", min_attractor_distance(a));
        for j in 0..c {
            let r = pca.projected.row(i * c + j);
            let _ = write!(s, ",{},{},{}", r[0], r[1], r[2]);
        }
        s.push('\n');
    }
    Ok((s, pca))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wav(x: Vec<f64>) -> Waveform {
        Waveform::new(x, 8000).unwrap()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Gram-Schmidt on zero-mean copies.
    fn orthogonal_pair(n: usize) -> (Vec<f64>, Vec<f64>) {
        let a = zero_mean(&noise(1, n));
        let b = zero_mean(&noise(2, n));
        let k = dot(&a, &b) / dot(&a, &a);
        let b: Vec<f64> = b.iter().zip(&a).map(|(b, a)| b - k * a).collect();
        (a, zero_mean(&b))
    }

    #[test]
    fn si_snr_cases() {
        let r = wav(noise(3, 4000));
        assert_eq!(si_snr(&r, &r).unwrap(), DB_CAP);
        let scaled = wav(r.samples.iter().map(|x| 3.0 * x).collect());
        assert_eq!(si_snr(&scaled, &r).unwrap(), DB_CAP);

        let (s, n) = orthogonal_pair(4000);
        let ratio = (dot(&s, &s) / dot(&n, &n)).sqrt() / 10.0;
        let est: Vec<f64> = s.iter().zip(&n).map(|(s, n)| s + ratio * n).collect();
        assert!((si_snr(&wav(est), &wav(s.clone())).unwrap() - 20.0).abs() < 1e-9);

        assert!(matches!(si_snr(&r, &wav(vec![0.25; 4000])), Err(Error::ZeroReference)));
        assert!(si_snr(&r, &wav(vec![1.0; 10])).is_err());
    }

    #[test]
    fn bss_identity_swap_and_orthogonal_leak() {
        let (a, b) = orthogonal_pair(3000);
        let refs = [wav(a.clone()), wav(b.clone())];
        let id = bss_metrics(&refs, &refs).unwrap();
        assert_eq!(id.perm, vec![0, 1]);
        for sc in &id.scores {
            assert_eq!(sc.sir, DB_CAP);
            assert_eq!(sc.sar, DB_CAP);
        }
        let swapped = [refs[1].clone(), refs[0].clone()];
        let sw = bss_metrics(&swapped, &refs).unwrap();
        assert_eq!(sw.perm, vec![1, 0]);
        assert_eq!(sw.scores, id.scores);

        // leak of 0.1 * ref_2, refs scaled to equal energy
        let kb = (dot(&a, &a) / dot(&b, &b)).sqrt();
        let b: Vec<f64> = b.iter().map(|x| kb * x).collect();
        let refs = [wav(a.clone()), wav(b.clone())];
        let e1: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a + 0.1 * b).collect();
        let r = bss_metrics(&[wav(e1), refs[1].clone()], &refs).unwrap();
        assert!((r.scores[0].sir - 20.0).abs() < 1e-9);
        assert_eq!(r.scores[0].sar, DB_CAP);
    }

    #[test]
    fn degenerate_references_rejected() {
        let a = noise(5, 1000);
        let b: Vec<f64> = a.iter().map(|x| -2.0 * x).collect();
        let err = bss_metrics(&[wav(a.clone()), wav(b.clone())], &[wav(a), wav(b)]).unwrap_err();
        assert_eq!(err.to_string(), "degenerate reference set");
    }

    #[test]
    fn aggregate_weighting() {
        let (a, b) = orthogonal_pair(2000);
        let refs = [wav(a.clone()), wav(b.clone())];
        let mix = wav(a.iter().zip(&b).map(|(x, y)| x + y).collect());
        let none = MixtureReport::new("m", &[mix.clone(), mix.clone()], &refs, &mix).unwrap();
        assert!(aggregate(&[none]).unwrap().gnsdr.abs() < 1e-12);

        let fake = |len: usize, nsdr: f64| MixtureReport {
            id: "x".into(),
            length: len,
            bss: BssReport {
                perm: vec![0, 1],
                scores: vec![SourceScore { si_snr: nsdr + 1.0, sir: 0.0, sar: 0.0 }; 2],
            },
            input_si_snr: vec![1.0, 1.0],
        };
        assert!((aggregate(&[fake(100, 5.0)]).unwrap().gnsdr - 5.0).abs() < 1e-12);
        assert!((aggregate(&[fake(100, 3.0), fake(200, 6.0)]).unwrap().gnsdr - 5.0).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_csv_has_aggregate_row() {
        let (a, b) = orthogonal_pair(1000);
        let refs = [wav(a.clone()), wav(b.clone())];
        let mix = wav(a.iter().zip(&b).map(|(x, y)| x + y).collect());
        let rep = MetricReport::new(vec![MixtureReport::new("m0", &refs, &refs, &mix).unwrap()]).unwrap();
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("aggregate,2,,1000,"));
    }

    #[test]
    fn pca_line_and_rank3() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dir: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ts: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pts = Array2::from_shape_fn((50, 6), |(i, k)| 0.5 + ts[i] * dir[k]);
        let p = pca_project(pts.view()).unwrap();
        let norm2: f64 = dir.iter().map(|x| x * x).sum();
        let tm = ts.iter().sum::<f64>() / 50.0;
        let var = ts.iter().map(|t| (t - tm).powi(2)).sum::<f64>() / 50.0 * norm2;
        assert!((p.explained_variance[0] - var).abs() < 1e-8);
        assert!(p.explained_variance[1].abs() < 1e-8 && p.explained_variance[2].abs() < 1e-8);

        let basis = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let coef = Array2::from_shape_fn((40, 3), |_| rng.gen_range(-1.0..1.0));
        let pts = coef.dot(&basis);
        let p = pca_project(pts.view()).unwrap();
        let centered = &pts - &p.mean;
        let back = p.projected.dot(&p.components.t());
        assert!((&back - &centered).iter().all(|d| d.abs() < 1e-8));
        assert!(pca_project(pts.slice(s![..3, ..])).is_err());
    }

    #[test]
    fn pca_isotropic_cloud() {
        use rand_distr_free::normal;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts = Array2::from_shape_fn((10000, 20), |_| normal(&mut rng));
        let p = pca_project(pts.view()).unwrap();
        let ev = p.explained_variance;
        assert!(ev[0] / ev[2] < 1.1, "{ev:?}");
    }

    /// Box-Muller, to avoid pulling in a distributions crate for one test.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal(rng: &mut impl Rng) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    #[test]
    fn embedding_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Array2::from_shape_fn((30, 5), |_| rng.gen_range(-1.0..1.0));
        let y = MembershipTensor::from_labels(&(0..30).map(|i| i % 2).collect::<Vec<_>>(), 2).unwrap();
        let a = AttractorSet { a: Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0..1.0)) };
        let p = pca_project(v.view()).unwrap();
        let rows = parse_embedding_csv(&embedding_csv(v.view(), &y, &a, &p).unwrap()).unwrap();
        assert_eq!(rows.len(), 32);
        assert_eq!(rows.iter().filter(|r| r.is_attractor).count(), 2);
        assert!(rows[30].is_attractor && rows[31].is_attractor && !rows[29].is_attractor);
        for (i, r) in rows[..30].iter().enumerate() {
            for d in 0..3 {
                assert!((r.pc[d] - p.projected[[i, d]]).abs() < 1e-6);
            }
            assert_eq!(r.dominant_source, i % 2);
        }
    }

    proptest! {
        #[test]
        fn si_snr_scale_invariant(seed in 0u64..1000, k in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let r = wav(noise(seed, 500));
            let e = wav(noise(seed + 1, 500).iter().zip(&r.samples).map(|(n, s)| s + 0.3 * n).collect());
            let scaled = wav(e.samples.iter().map(|x| k * x).collect());
            let a = si_snr(&e, &r).unwrap();
            let b = si_snr(&scaled, &r).unwrap();
            prop_assert!((a.abs() - b.abs()).abs() < 1e-9 || k < 0.0);
            if k > 0.0 { prop_assert!((a - b).abs() < 1e-9); }
        }

        #[test]
        fn decomposition_energy_identity(seed in 0u64..1000, c in 2usize..4) {
            let refs: Vec<Waveform> = (0..c).map(|i| wav(noise(seed * 7 + i as u64, 400))).collect();
            let est = wav(noise(seed * 7 + 50, 400));
            for j in 0..c {
                let d = decompose(&est, &refs, j).unwrap();
                let e = zero_mean(&est.samples);
                let total = dot(&e, &e);
                let parts = dot(&d.target, &d.target) + dot(&d.interf, &d.interf) + dot(&d.artif, &d.artif);
                prop_assert!((total - parts).abs() <= 1e-8 * total);
            }
        }

        #[test]
        fn bss_permutation_invariant(seed in 0u64..300) {
            let refs: Vec<Waveform> = (0..3).map(|i| wav(noise(seed * 5 + i, 300))).collect();
            let ests: Vec<Waveform> = refs
                .iter()
                .enumerate()
                .map(|(i, r)| wav(r.samples.iter().zip(noise(seed * 5 + 10 + i as u64, 300)).map(|(s, n)| s + 0.4 * n).collect()))
                .collect();
            let base = bss_metrics(&ests, &refs).unwrap();
            let p = [2usize, 0, 1];
            let re: Vec<Waveform> = p.iter().map(|&i| refs[i].clone()).collect();
            let es: Vec<Waveform> = p.iter().map(|&i| ests[i].clone()).collect();
            let moved = bss_metrics(&es, &re).unwrap();
            for (k, &i) in p.iter().enumerate() {
                let (a, b) = (moved.scores[k], base.scores[i]);
                prop_assert!((a.si_snr - b.si_snr).abs() < 1e-9);
                prop_assert!((a.sir - b.sir).abs() < 1e-9);
                prop_assert!((a.sar - b.sar).abs() < 1e-9);
            }
        }

        #[test]
        fn pca_basis_orthonormal(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_fn((60, 7), |(_, k)| rng.gen_range(-1.0..1.0) * (k + 1) as f64);
            let p = pca_project(pts.view()).unwrap();
            let g = p.components.t().dot(&p.components);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((g[[i, j]] - want).abs() < 1e-10);
                }
            }
            prop_assert!(p.explained_variance[0] >= p.explained_variance[1]);
            prop_assert!(p.explained_variance[1] >= p.explained_variance[2]);
        }
    }
}
