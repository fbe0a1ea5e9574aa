//! Test-time separation: embeddings, attractors by clustering, a fixed
//! codebook or ground truth, masks, and resynthesis with the mixture phase.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::attractor::{self, AttractorSet, MaskTensor, SalienceWeight};
use crate::data::{self, Dataset, MixtureRecord, Split};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::net::{self, EmbeddingTensor, Model};
use crate::signal::{self, ComplexSpectrogram, Waveform, HOP, LOG_EPS, WINDOW_LEN};
use crate::tensor_file::TensorFile;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    KMeans,
    Fixed,
    Oracle,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::KMeans => "kmeans",
            Strategy::Fixed => "fixed",
            Strategy::Oracle => "oracle",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Strategy::KMeans),
            "fixed" => Ok(Strategy::Fixed),
            "oracle" => Ok(Strategy::Oracle),
            _ => Err(Error::invalid(format!("unknown strategy {s:?} (kmeans, fixed or oracle)"))),
        }
    }
}

/// Attractor sets collected from training data, for separation without
/// clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorCodebook {
    pub entries: Vec<AttractorSet>,
    /// Where the entries came from: dataset, seed, cluster sizes.
    pub provenance: BTreeMap<String, String>,
}

impl AttractorCodebook {
    pub fn new(entries: Vec<AttractorSet>, provenance: BTreeMap<String, String>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::invalid("codebook needs at least one entry"))?;
        let shape = first.a.dim();
        if entries.iter().any(|e| e.a.dim() != shape) {
            return Err(Error::shape("codebook entries differ in shape"));
        }
        Ok(Self { entries, provenance })
    }

    pub fn n_sources(&self) -> usize {
        self.entries[0].a.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.entries[0].a.ncols()
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::new();
        tf.set_meta("kind", "codebook")
            .set_meta("entries", self.entries.len())
            .set_meta("n_sources", self.n_sources())
            .set_meta("embed_dim", self.embed_dim());
        for (k, v) in &self.provenance {
            tf.set_meta(&format!("prov.{k}"), v);
        }
        for (i, e) in self.entries.iter().enumerate() {
            let data: Vec<f64> = e.a.iter().copied().collect();
            tf.push(&format!("entry.{i}"), e.a.shape(), &data);
        }
        tf
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        let kind = tf.meta("kind")?;
        if kind != "codebook" {
            return Err(Error::Format {
                format: "codebook",
                msg: format!("file holds a {kind:?}, not a codebook"),
            });
        }
        let n: usize = tf.meta_parse("entries")?;
        let c: usize = tf.meta_parse("n_sources")?;
        let k: usize = tf.meta_parse("embed_dim")?;
        let entries = (0..n)
            .map(|i| {
                let t = tf.get(&format!("entry.{i}"))?;
                t.expect_shape(&[c, k])?;
                Ok(AttractorSet {
                    a: Array2::from_shape_vec((c, k), t.to_f64()).expect("checked shape"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let provenance = tf
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("prov.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Self::new(entries, provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n <= 1 {
        return vec![(0..n).collect()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Clusters attractor sets, every source ordering included, into
/// `n_clusters` representative sets.
pub fn codebook_from_sets(sets: &[AttractorSet], n_clusters: usize, seed: u64) -> Result<AttractorCodebook> {
    let first = sets.first().ok_or_else(|| Error::invalid("no attractor sets to cluster"))?;
    let (c, k) = first.a.dim();
    let perms = permutations(c);
    let mut rows = Vec::with_capacity(sets.len() * perms.len() * c * k);
    for s in sets {
        if s.a.dim() != (c, k) {
            return Err(Error::shape("attractor sets differ in shape"));
        }
        for p in &perms {
            for &src in p {
                rows.extend(s.a.row(src).iter().copied());
            }
        }
    }
    let data = Array2::from_shape_vec((sets.len() * perms.len(), c * k), rows).expect("row count");
    let (centers, sizes) = if n_clusters == 1 {
        (data.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)), vec![data.nrows()])
    } else {
        let r = kmeans(data.view(), &KMeansConfig::new(n_clusters, seed))?;
        (r.centroids, r.sizes)
    };
    let entries = centers
        .rows()
        .into_iter()
        .map(|r| AttractorSet {
            a: r.to_owned().into_shape_with_order((c, k)).expect("pair length"),
        })
        .collect();
    let mut prov = BTreeMap::new();
    prov.insert("n_sets".into(), sets.len().to_string());
    prov.insert("n_clusters".into(), n_clusters.to_string());
    prov.insert("cluster_sizes".into(), sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(":"));
    prov.insert("seed".into(), seed.to_string());
    AttractorCodebook::new(entries, prov)
}

/// Embedding of a whole utterance under a model.
pub struct UtteranceEmbedding {
    pub spec: ComplexSpectrogram,
    pub v: EmbeddingTensor,
    /// Mixture log-magnitude in bin order.
    pub log_bins: ndarray::Array1<f64>,
}

pub fn embed(model: &Model, mixture: &Waveform) -> Result<UtteranceEmbedding> {
    if mixture.sample_rate != signal::SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "mixture is {} Hz, expected {} Hz",
            mixture.sample_rate,
            signal::SAMPLE_RATE
        )));
    }
    if mixture.rms() == 0.0 {
        return Err(Error::invalid("silent mixture"));
    }
    let spec = signal::stft(mixture, WINDOW_LEN, HOP)?;
    let feats = signal::log_magnitude_features(&spec, Some(&model.stats))?;
    let (v, _) = net::forward_values(&model.params, &model.cfg, feats.values.view())?;
    let log_bins = attractor::flatten_bins(spec.magnitude().view()).mapv(|m| (m + LOG_EPS).ln());
    Ok(UtteranceEmbedding { spec, v, log_bins })
}

/// Oracle attractors of an utterance given its references.
pub fn oracle_attractors(model: &Model, emb: &UtteranceEmbedding, references: &[Waveform]) -> Result<AttractorSet> {
    let nf = emb.spec.n_freq();
    let nt = emb.spec.n_frames();
    let mut mags = Array3::zeros((nf, nt, references.len()));
    for (c, r) in references.iter().enumerate() {
        let s = signal::stft(r, WINDOW_LEN, HOP)?;
        if s.n_frames() != nt {
            return Err(Error::shape(format!(
                "reference {c} spans {} frames, mixture {nt}",
                s.n_frames()
            )));
        }
        mags.index_axis_mut(Axis(2), c).assign(&s.magnitude());
    }
    let y = data::membership(&mags);
    let w = SalienceWeight::from_log_magnitude(emb.log_bins.view(), model.threshold_pct)?;
    attractor::estimate_attractors(emb.v.v.view(), &y, &w)
}

#[derive(Debug, Clone)]
pub struct SeparateOptions<'a> {
    pub n_sources: usize,
    pub strategy: Strategy,
    pub codebook: Option<&'a AttractorCodebook>,
    pub references: Option<&'a [Waveform]>,
    pub seed: u64,
}

impl<'a> SeparateOptions<'a> {
    pub fn new(n_sources: usize, strategy: Strategy) -> Self {
        Self {
            n_sources,
            strategy,
            codebook: None,
            references: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub sources: Vec<Waveform>,
    pub masks: MaskTensor,
    pub attractors: AttractorSet,
    pub strategy: Strategy,
    /// Bin embeddings, `FT x K`.
    pub embedding: Array2<f64>,
}

/// Mean over bins of the largest mask value, the fixed-strategy score.
pub fn mask_confidence(m: &Array2<f64>) -> f64 {
    m.rows().into_iter().map(|r| r.iter().copied().fold(f64::MIN, f64::max)).sum::<f64>() / m.nrows() as f64
}

fn choose_attractors(model: &Model, emb: &UtteranceEmbedding, opts: &SeparateOptions) -> Result<AttractorSet> {
    let c = opts.n_sources;
    match opts.strategy {
        Strategy::KMeans => {
            let w = SalienceWeight::from_log_magnitude(emb.log_bins.view(), model.threshold_pct)?;
            let keep: Vec<usize> = (0..w.w.len()).filter(|&i| w.w[i] > 0.0).collect();
            let pts = emb.v.v.select(Axis(0), &keep);
            let r = kmeans(pts.view(), &KMeansConfig::new(c, opts.seed))?;
            Ok(AttractorSet { a: r.centroids })
        }
        Strategy::Fixed => {
            let cb = opts
                .codebook
                .ok_or_else(|| Error::invalid("fixed strategy needs a codebook"))?;
            if c > cb.n_sources() {
                return Err(Error::invalid(format!(
                    "{c} sources requested, codebook entries hold {}",
                    cb.n_sources()
                )));
            }
            if cb.embed_dim() != model.cfg.embed_dim {
                return Err(Error::shape(format!(
                    "codebook embedding dimension {} vs model {}",
                    cb.embed_dim(),
                    model.cfg.embed_dim
                )));
            }
            let mut best: Option<(f64, AttractorSet)> = None;
            for e in &cb.entries {
                let a = AttractorSet {
                    a: e.a.slice(ndarray::s![..c, ..]).to_owned(),
                };
                let score = mask_confidence(&attractor::masks(emb.v.v.view(), &a, model.head)?);
                if best.as_ref().map_or(true, |(s, _)| score > *s) {
                    best = Some((score, a));
                }
            }
            Ok(best.expect("non-empty codebook").1)
        }
        Strategy::Oracle => {
            let refs = opts
                .references
                .ok_or_else(|| Error::invalid("oracle strategy needs reference signals"))?;
            if refs.len() != c {
                return Err(Error::invalid(format!("{} references for {c} sources", refs.len())));
            }
            oracle_attractors(model, emb, refs)
        }
    }
}

/// Separates `mixture` into `opts.n_sources` waveforms of the mixture's
/// length.
pub fn separate(model: &Model, mixture: &Waveform, opts: &SeparateOptions) -> Result<SeparationResult> {
    if opts.n_sources == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    let emb = embed(model, mixture)?;
    let attractors = choose_attractors(model, &emb, opts)?;
    let m = attractor::masks(emb.v.v.view(), &attractors, model.head)?;
    let (nf, nt) = (emb.spec.n_freq(), emb.spec.n_frames());
    let masks = MaskTensor::new(m, nf, nt)?;
    let mut sources = Vec::with_capacity(opts.n_sources);
    for c in 0..opts.n_sources {
        let mut spec = emb.spec.clone();
        for t in 0..nt {
            for f in 0..nf {
                spec.bins[[f, t]] *= masks.get(f, t, c);
            }
        }
        let mut w = signal::istft(&spec)?;
        w.samples.truncate(mixture.len());
        sources.push(w);
    }
    Ok(SeparationResult {
        sources,
        masks,
        attractors,
        strategy: opts.strategy,
        embedding: emb.v.v,
    })
}

/// Builds a codebook from the oracle attractors of every training mixture.
pub fn build_codebook(model: &Model, ds: &Dataset, n_clusters: usize, seed: u64) -> Result<AttractorCodebook> {
    let entries: Vec<_> = ds.manifest.split(Split::Train).cloned().collect();
    let sets = entries
        .par_iter()
        .map(|e| {
            let rec: MixtureRecord = ds.record(e)?;
            let emb = embed(model, &rec.mixture)?;
            oracle_attractors(model, &emb, &rec.sources)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cb = codebook_from_sets(&sets, n_clusters, seed)?;
    cb.provenance.insert("dataset".into(), ds.root.display().to_string());
    cb.provenance.insert("dataset_seed".into(), ds.manifest.config.seed.to_string());
    cb.provenance.insert("split".into(), Split::Train.to_string());
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_record, DatasetConfig};
    use crate::eval::si_snr;
    use crate::net::{init_params, NetConfig};
    use crate::signal::NormStats;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model(threshold_pct: u32) -> Model {
        let cfg = NetConfig {
            n_layers: 1,
            hidden: 8,
            embed_dim: 4,
            n_freq: 129,
            activation: net::OutputActivation::Tanh,
        };
        Model {
            cfg,
            params: init_params(&cfg, 3).unwrap(),
            stats: NormStats {
                mean: vec![-4.0; 129],
                std: vec![2.0; 129],
            },
            head: attractor::MaskHead::Sigmoid,
            threshold_pct,
        }
    }

    fn record() -> MixtureRecord {
        let cfg = DatasetConfig {
            duration_s: 1.0,
            ..DatasetConfig::with_mixtures(5, 2, 100, 11, (0.0, 5.0))
        };
        generate_record(&cfg, Split::Test, 0).unwrap().0
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::KMeans, Strategy::Fixed, Strategy::Oracle] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("median".parse::<Strategy>().is_err());
    }

    #[test]
    fn output_lengths_match_for_every_strategy() {
        let model = toy_model(0);
        let rec = record();
        let cb = AttractorCodebook::new(
            vec![AttractorSet { a: Array2::from_shape_fn((2, 4), |(i, k)| if i == k { 1.0 } else { -0.2 }) }],
            BTreeMap::new(),
        )
        .unwrap();
        for strategy in [Strategy::KMeans, Strategy::Fixed, Strategy::Oracle] {
            let opts = SeparateOptions {
                codebook: Some(&cb),
                references: Some(&rec.sources),
                ..SeparateOptions::new(2, strategy)
            };
            let r = separate(&model, &rec.mixture, &opts).unwrap();
            assert_eq!(r.sources.len(), 2);
            for s in &r.sources {
                assert_eq!(s.len(), rec.mixture.len());
            }
            assert!(r.masks.m.iter().all(|&m| m > 0.0 && m < 1.0));
            assert!(r.masks.m.rows().into_iter().all(|row| row.sum() <= 2.0));
        }
    }

    #[test]
    fn softmax_masks_sum_to_one() {
        let mut model = toy_model(0);
        model.head = attractor::MaskHead::Softmax;
        let rec = record();
        let r = separate(&model, &rec.mixture, &SeparateOptions::new(2, Strategy::KMeans)).unwrap();
        for row in r.masks.m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn errors_surface() {
        let model = toy_model(0);
        let rec = record();
        let silent = Waveform::new(vec![0.0; 4000], 8000).unwrap();
        let msg = separate(&model, &silent, &SeparateOptions::new(2, Strategy::KMeans)).unwrap_err().to_string();
        assert!(msg.contains("silent"), "{msg}");
        assert!(separate(&model, &rec.mixture, &SeparateOptions::new(2, Strategy::Fixed)).is_err());
        assert!(separate(&model, &rec.mixture, &SeparateOptions::new(2, Strategy::Oracle)).is_err());
        let cb = AttractorCodebook::new(vec![AttractorSet { a: Array2::ones((2, 4)) }], BTreeMap::new()).unwrap();
        let opts = SeparateOptions {
            codebook: Some(&cb),
            ..SeparateOptions::new(3, Strategy::Fixed)
        };
        assert!(separate(&model, &rec.mixture, &opts).is_err());
    }

    /// With one source silent except for a faint floor, the oracle assigns
    /// nearly every bin to the active source and the mask passes it through.
    #[test]
    fn oracle_recovers_dominant_source() {
        let model = toy_model(0);
        let rec = record();
        let faint = Waveform::new(rec.sources[1].samples.iter().map(|x| x * 1e-4).collect(), 8000).unwrap();
        let mix = Waveform::new(
            rec.sources[0].samples.iter().zip(&faint.samples).map(|(a, b)| a + b).collect(),
            8000,
        )
        .unwrap();
        let refs = [rec.sources[0].clone(), faint];
        let opts = SeparateOptions {
            references: Some(&refs),
            ..SeparateOptions::new(2, Strategy::Oracle)
        };
        let r = separate(&model, &mix, &opts).unwrap();
        let best = r.sources.iter().map(|s| si_snr(s, &refs[0]).unwrap()).fold(f64::MIN, f64::max);
        assert!(best > 20.0, "{best}");
    }

    #[test]
    fn codebook_identical_and_planted() {
        let pair = AttractorSet { a: arr2(&[[1.0, 0.0, 0.5], [-1.0, 0.2, 0.0]]) };
        let cb = codebook_from_sets(&vec![pair.clone(); 20], 2, 1).unwrap();
        // both orderings of the single pair are the two clusters
        let swapped = arr2(&[[-1.0, 0.2, 0.0], [1.0, 0.0, 0.5]]);
        assert!(cb.entries.iter().any(|e| (&e.a - &pair.a).iter().all(|d| d.abs() < 1e-12)));
        assert!(cb.entries.iter().any(|e| (&e.a - &swapped).iter().all(|d| d.abs() < 1e-12)));

        let one = codebook_from_sets(&[pair.clone()], 1, 0).unwrap();
        let mean = (&pair.a.row(0) + &pair.a.row(1)) / 2.0;
        for r in one.entries[0].a.rows() {
            assert!((&r - &mean).iter().all(|d| d.abs() < 1e-12));
        }

        // two planted pair modes, jittered
        let modes = [arr2(&[[2.0, 0.0], [0.0, 2.0]]), arr2(&[[-2.0, -2.0], [2.0, -2.0]])];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sets: Vec<AttractorSet> = (0..200)
            .map(|i| AttractorSet { a: modes[i % 2].mapv(|x| x + rng.gen_range(-0.05..0.05)) })
            .collect();
        let cb = codebook_from_sets(&sets, 4, 3).unwrap();
        for m in &modes {
            for p in permutations(2) {
                let want = m.select(Axis(0), &p);
                let close = cb.entries.iter().any(|e| (&e.a - &want).iter().all(|d| d.abs() < 0.05));
                assert!(close, "mode {want:?} not recovered");
            }
        }
    }

    #[test]
    fn codebook_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.bin");
        let sets = vec![
            AttractorSet { a: arr2(&[[0.5, -0.25], [0.125, 1.0]]) },
            AttractorSet { a: arr2(&[[0.75, 0.5], [-1.0, 0.0]]) },
        ];
        let cb = codebook_from_sets(&sets, 2, 9).unwrap();
        cb.save(&path).unwrap();
        let back = AttractorCodebook::load(&path).unwrap();
        assert_eq!(back.provenance, cb.provenance);
        assert_eq!(back.entries.len(), 2);
        for (a, b) in back.entries.iter().zip(&cb.entries) {
            assert!((&a.a - &b.a).iter().all(|d| d.abs() < 1e-6));
        }
    }
}
