//! Single-shot retrieval evaluation: cosine ranking, CMC and mAP averaged over
//! random probe/gallery splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data_synth::{derive_seed, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::features::FeatureDump;
use crate::model::Model;

/// Ranks reported in `report.tsv`.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];
const EMBED_CHUNK: usize = 256;

/// Eval-mode embedding of every image, in manifest order.
pub fn embed_dataset(model: &Model, dataset: &Dataset) -> Result<FeatureDump> {
    let shape = dataset.manifest.shape;
    if shape != model.config.input {
        return Err(Error::Shape(format!(
            "checkpoint expects {} images, data has {}",
            model.config.input, shape
        )));
    }
    let n = dataset.len();
    let mut feats = Array2::<f64>::zeros((n, model.embedding_dim()));
    for start in (0..n).step_by(EMBED_CHUNK) {
        let end = (start + EMBED_CHUNK).min(n);
        let images = dataset.images.slice(s![start..end, .., .., ..]).to_owned();
        feats.slice_mut(s![start..end, ..]).assign(&model.embed(&images)?);
    }
    FeatureDump::from_f64(dataset.identities.clone(), dataset.domains.clone(), &feats)
}

/// Row indices of one probe/gallery split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub probe: Vec<usize>,
    pub gallery: Vec<usize>,
    pub seed: u64,
}

/// One gallery image per identity and one probe drawn from the remaining
/// images. Identities with any row tagged [`SplitTag::Distractor`] are
/// gallery-only.
pub fn single_shot_split(identities: &[u32], tags: &[SplitTag], seed: u64) -> Result<Split> {
    if tags.len() != identities.len() {
        return Err(Error::Shape(format!("{} rows but {} split tags", identities.len(), tags.len())));
    }
    let mut rows: BTreeMap<u32, (Vec<usize>, bool)> = BTreeMap::new();
    for (i, (&id, &tag)) in identities.iter().zip(tags).enumerate() {
        let e = rows.entry(id).or_default();
        e.0.push(i);
        e.1 |= tag == SplitTag::Distractor;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5350_4c54]));
    let mut split = Split {
        probe: Vec::new(),
        gallery: Vec::new(),
        seed,
    };
    for (id, (mut rows, distractor)) in rows {
        if distractor {
            split.gallery.push(rows[rng.random_range(0..rows.len())]);
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::Data(format!("identity {id} has a single image; the single-shot split needs two")));
        }
        rows.shuffle(&mut rng);
        split.gallery.push(rows[0]);
        split.probe.push(rows[1]);
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Gallery identities in ranked order, per probe.
    pub ranked: Vec<Vec<u32>>,
    /// `cmc[k-1]` is the fraction of probes matched within the top k.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_probes: usize,
    pub num_gallery: usize,
    pub seed: Option<u64>,
}

impl RetrievalResult {
    /// CMC at rank `k` (1-based), saturating at the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            len => self.cmc[k.clamp(1, len) - 1],
        }
    }
}

fn unit_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(crate::id_pool::NORM_FLOOR);
        row /= norm;
    }
    out
}

/// Cosine ranking of each probe against the gallery.
pub fn rank_and_score(
    probe: ArrayView2<f64>,
    probe_ids: &[u32],
    gallery: ArrayView2<f64>,
    gallery_ids: &[u32],
) -> Result<RetrievalResult> {
    if probe.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!("probe dim {} vs gallery dim {}", probe.ncols(), gallery.ncols())));
    }
    let sim = unit_rows(probe).dot(&unit_rows(gallery).t());
    score_similarities(sim.view(), probe_ids, gallery_ids)
}

/// CMC and mAP from a probe × gallery similarity matrix. Higher is closer;
/// ties go to the lower gallery index.
pub fn score_similarities(sim: ArrayView2<f64>, probe_ids: &[u32], gallery_ids: &[u32]) -> Result<RetrievalResult> {
    let (np, ng) = sim.dim();
    if np == 0 || ng == 0 {
        return Err(Error::InvalidArgument("probe and gallery must be nonempty".into()));
    }
    if probe_ids.len() != np || gallery_ids.len() != ng {
        return Err(Error::Shape(format!(
            "{np} x {ng} similarities for {} probes / {} gallery ids",
            probe_ids.len(),
            gallery_ids.len()
        )));
    }
    if sim.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN similarity".into()));
    }
    let mut hits = vec![0usize; ng];
    let mut ap_sum = 0.0;
    let mut ranked = Vec::with_capacity(np);
    for (p, row) in sim.axis_iter(Axis(0)).enumerate() {
        let pid = probe_ids[p];
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let ids: Vec<u32> = order.iter().map(|&g| gallery_ids[g]).collect();
        let mut relevant = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (r, &id) in ids.iter().enumerate() {
            if id == pid {
                relevant += 1;
                precision_sum += relevant as f64 / (r + 1) as f64;
                first.get_or_insert(r);
            }
        }
        let first = first.ok_or_else(|| Error::Data(format!("probe identity {pid} has no gallery match")))?;
        hits[first] += 1;
        ap_sum += precision_sum / relevant as f64;
        ranked.push(ids);
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / np as f64);
    }
    Ok(RetrievalResult {
        ranked,
        cmc,
        map: ap_sum / np as f64,
        num_probes: np,
        num_gallery: ng,
        seed: None,
    })
}

/// Scores one split of a feature dump.
pub fn evaluate_split(dump: &FeatureDump, split: &Split) -> Result<RetrievalResult> {
    let feats = dump.features_f64();
    let ids = |rows: &[usize]| rows.iter().map(|&r| dump.identities[r]).collect::<Vec<_>>();
    let mut result = rank_and_score(
        feats.select(Axis(0), &split.probe).view(),
        &ids(&split.probe),
        feats.select(Axis(0), &split.gallery).view(),
        &ids(&split.gallery),
    )?;
    result.seed = Some(split.seed);
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub splits: Vec<RetrievalResult>,
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl ProtocolReport {
    /// Averages per-split results in split order.
    pub fn from_splits(splits: Vec<RetrievalResult>) -> Result<Self> {
        let first = splits.first().ok_or_else(|| Error::InvalidArgument("no splits".into()))?;
        let len = first.cmc.len();
        if splits.iter().any(|s| s.cmc.len() != len) {
            return Err(Error::Shape("splits disagree on gallery size".into()));
        }
        let n = splits.len() as f64;
        let mut cmc = vec![0.0; len];
        let mut map = 0.0;
        for s in &splits {
            for (c, v) in cmc.iter_mut().zip(&s.cmc) {
                *c += v;
            }
            map += s.map;
        }
        cmc.iter_mut().for_each(|c| *c /= n);
        Ok(Self { splits, cmc, map: map / n })
    }

    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            len => self.cmc[k.clamp(1, len) - 1],
        }
    }

    /// One row per split plus a `mean` row; accuracies in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("split\tseed\tprobes\tgallery");
        for k in REPORT_RANKS {
            let _ = write!(out, "\tr{k}");
        }
        out.push_str("\tmap\n");
        let row = |out: &mut String, rank: &dyn Fn(usize) -> f64, map: f64| {
            for k in REPORT_RANKS {
                let _ = write!(out, "\t{:.4}", 100.0 * rank(k));
            }
            let _ = writeln!(out, "\t{:.4}", 100.0 * map);
        };
        for (i, s) in self.splits.iter().enumerate() {
            let _ = write!(
                out,
                "{i}\t{}\t{}\t{}",
                s.seed.map_or_else(|| "-".into(), |v| v.to_string()),
                s.num_probes,
                s.num_gallery
            );
            row(&mut out, &|k| s.rank(k), s.map);
        }
        let (np, ng) = self.splits.first().map_or((0, 0), |s| (s.num_probes, s.num_gallery));
        let _ = write!(out, "mean\t-\t{np}\t{ng}");
        row(&mut out, &|k| self.rank(k), self.map);
        out
    }
}

/// Seed of split `index` under protocol seed `seed`.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// Averages `num_splits` single-shot splits of a feature dump.
pub fn evaluate_features(dump: &FeatureDump, tags: &[SplitTag], num_splits: usize, seed: u64) -> Result<ProtocolReport> {
    if num_splits == 0 {
        return Err(Error::InvalidArgument("num_splits must be >= 1".into()));
    }
    let splits = (0..num_splits)
        .into_par_iter()
        .map(|i| {
            let split = single_shot_split(&dump.identities, tags, split_seed(seed, i))?;
            evaluate_split(dump, &split)
        })
        .collect::<Result<Vec<_>>>()?;
    ProtocolReport::from_splits(splits)
}

/// Embeds `dataset` with `model` and runs the split protocol on it.
pub fn evaluate_protocol(model: &Model, dataset: &Dataset, num_splits: usize, seed: u64) -> Result<ProtocolReport> {
    let dump = embed_dataset(model, dataset)?;
    let tags: Vec<SplitTag> = dataset.manifest.entries.iter().map(|e| e.split).collect();
    evaluate_features(&dump, &tags, num_splits, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_probe_cases() {
        let r = score_similarities(array![[0.9]].view(), &[3], &[3]).unwrap();
        assert_eq!((r.cmc.clone(), r.map), (vec![1.0], 1.0));
        let r = score_similarities(array![[0.9, 0.1]].view(), &[3], &[5, 3]).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0]);
        assert_eq!(r.map, 0.5);
        assert!(score_similarities(array![[0.9]].view(), &[3], &[4]).is_err());
    }

    #[test]
    fn ties_go_to_lower_gallery_index() {
        let r = score_similarities(array![[0.5, 0.5, 0.5]].view(), &[2], &[1, 2, 3]).unwrap();
        assert_eq!(r.ranked[0], vec![1, 2, 3]);
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ids: Vec<u32> = (0..60).flat_map(|i| [i, i, i]).collect();
        let tags = vec![SplitTag::Any; ids.len()];
        let a = single_shot_split(&ids, &tags, 1).unwrap();
        assert_eq!((a.probe.len(), a.gallery.len()), (60, 60));
        let b = single_shot_split(&ids, &tags, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!((b.probe.len(), b.gallery.len()), (60, 60));

        let small = single_shot_split(&[0, 0, 1, 1], &[SplitTag::Any; 4], 9).unwrap();
        let mut all: Vec<usize> = small.probe.iter().chain(&small.gallery).copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn distractors_are_gallery_only() {
        let ids = [0, 0, 1, 2, 2];
        let tags = [SplitTag::Any, SplitTag::Any, SplitTag::Distractor, SplitTag::Any, SplitTag::Any];
        let s = single_shot_split(&ids, &tags, 0).unwrap();
        assert_eq!((s.probe.len(), s.gallery.len()), (2, 3));
        assert!(s.gallery.contains(&2));
        assert!(single_shot_split(&[0, 1, 1], &[SplitTag::Any; 3], 0).is_err());
    }

    #[test]
    fn protocol_average_recomposes() {
        let feats = array![[1.0, 0.0], [0.9, 0.2], [0.0, 1.0], [0.3, 0.9], [-1.0, 0.1], [0.5, 0.5]];
        let dump = FeatureDump::from_f64(vec![0, 0, 1, 1, 2, 2], vec![0; 6], &feats).unwrap();
        let tags = vec![SplitTag::Any; 6];
        let report = evaluate_features(&dump, &tags, 3, 11).unwrap();
        let mut map = 0.0;
        let mut r1 = 0.0;
        for i in 0..3 {
            let split = single_shot_split(&dump.identities, &tags, split_seed(11, i)).unwrap();
            let r = evaluate_split(&dump, &split).unwrap();
            map += r.map / 3.0;
            r1 += r.cmc[0] / 3.0;
        }
        assert!((report.map - map).abs() < 1e-12);
        assert!((report.rank(1) - r1).abs() < 1e-12);
        let one = evaluate_features(&dump, &tags, 1, 11).unwrap();
        assert_eq!(one.splits[0].cmc, one.cmc);
        assert_eq!(evaluate_features(&dump, &tags, 3, 11).unwrap(), report);
        assert!(report.to_tsv().lines().last().unwrap().starts_with("mean\t-\t3\t3"));
    }
}
