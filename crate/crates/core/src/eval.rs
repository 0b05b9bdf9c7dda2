//! Rank-1 identification, verification ACC/AUC, illumination metrics and
//! qualitative dumps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, DatasetManifest, Record, Split};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nets::Embedder;
use crate::nn::Mode;
use crate::train::{load_batch, TrainState};
use crate::viz;

const CHUNK: usize = 16;
const FOLDS: usize = 10;

/// What a frontalizer produces for a batch.
#[derive(Debug, Clone)]
pub struct Frontalized {
    pub synth: Tensor,
    pub flow: Option<Tensor>,
    pub reverse_flow: Option<Tensor>,
    pub attention: Vec<Tensor>,
}

/// Anything that maps profile faces to frontal ones. Learned models read only
/// `batch.profile`; the oracle reads the ground truth.
pub trait Frontalizer {
    fn frontalize(&self, batch: &Batch) -> Result<Frontalized>;
}

impl Frontalizer for TrainState {
    fn frontalize(&self, batch: &Batch) -> Result<Frontalized> {
        let flow = self.flow_f.forward(&batch.profile, Mode::Frozen)?;
        let reverse = self.flow_r.forward(&batch.profile, Mode::Frozen)?;
        let out = self.gen.forward(&batch.profile, &flow, Mode::Frozen)?;
        Ok(Frontalized {
            synth: out.image.detach(),
            flow: Some(flow.detach()),
            reverse_flow: Some(reverse.detach()),
            attention: out.attention.iter().map(|a| a.detach()).collect(),
        })
    }
}

/// No frontalization: the profile itself is the output.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawProfile;

impl Frontalizer for RawProfile {
    fn frontalize(&self, batch: &Batch) -> Result<Frontalized> {
        Ok(Frontalized {
            synth: batch.profile.clone(),
            flow: None,
            reverse_flow: None,
            attention: Vec::new(),
        })
    }
}

/// Returns the ground-truth frontal and reverse flow (synthetic data only).
#[derive(Debug, Clone, Copy, Default)]
pub struct Oracle;

impl Frontalizer for Oracle {
    fn frontalize(&self, batch: &Batch) -> Result<Frontalized> {
        Ok(Frontalized {
            synth: batch.frontal.clone(),
            flow: batch.gt_forward.clone(),
            reverse_flow: batch.gt_reverse.clone(),
            attention: Vec::new(),
        })
    }
}

/// Per-|pose| rank-1 rates in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    pub per_pose: BTreeMap<i32, f64>,
    pub probe_counts: BTreeMap<i32, usize>,
    /// Unweighted mean over the pose bins.
    pub average: f64,
    pub gallery_size: usize,
}

impl RecognitionResult {
    /// Unweighted mean over the bins with `|pose| >= min_abs_pose`.
    pub fn average_from(&self, min_abs_pose: i32) -> Option<f64> {
        let v: Vec<f64> = self
            .per_pose
            .iter()
            .filter(|(p, _)| **p >= min_abs_pose)
            .map(|(_, r)| *r)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Test-split records at non-zero pose.
pub fn probe_records(manifest: &DatasetManifest) -> Vec<Record> {
    manifest
        .records_in(Split::Test)
        .into_iter()
        .filter(|r| r.pose_deg != 0)
        .collect()
}

/// Normalized pooled embeddings of the frontalized inputs, one row per record.
fn embed_records(model: &dyn Frontalizer, manifest: &DatasetManifest, records: &[Record], embedder: &Embedder) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let b = load_batch(manifest, chunk)?;
        let f = model.frontalize(&b)?;
        let e = embedder.forward(&f.synth.clamp(0f32, 1f32)?, Mode::Frozen)?;
        out.extend(e.pool.to_vec2::<f32>()?);
    }
    Ok(out)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Matches every frontalized probe to the nearest gallery embedding by cosine
/// similarity. The gallery images are embedded as they are.
pub fn rank1_recognition(
    model: &dyn Frontalizer,
    manifest: &DatasetManifest,
    probes: &[Record],
    embedder: &Embedder,
) -> Result<RecognitionResult> {
    if manifest.gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    if probes.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    for p in probes {
        if !manifest.gallery.iter().any(|g| g.identity == p.identity) {
            return Err(Error::Protocol(format!("identity {} has no gallery image", p.identity)));
        }
    }
    let gallery = embed_records(&RawProfile, manifest, &manifest.gallery, embedder)?;
    let probe_emb = embed_records(model, manifest, probes, embedder)?;
    let mut hits: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
    for (p, e) in probes.iter().zip(&probe_emb) {
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        for (g, ge) in manifest.gallery.iter().zip(&gallery) {
            let s = cosine(e, ge);
            if s > best.0 {
                best = (s, g.identity);
            }
        }
        let bin = hits.entry(p.pose_deg.abs()).or_default();
        bin.0 += usize::from(best.1 == p.identity);
        bin.1 += 1;
    }
    let per_pose: BTreeMap<i32, f64> = hits
        .iter()
        .map(|(&p, &(h, n))| (p, 100.0 * h as f64 / n as f64))
        .collect();
    let average = per_pose.values().sum::<f64>() / per_pose.len() as f64;
    Ok(RecognitionResult {
        probe_counts: hits.iter().map(|(&p, &(_, n))| (p, n)).collect(),
        per_pose,
        average,
        gallery_size: manifest.gallery.len(),
    })
}

/// Verification accuracy (percent, 10-fold) and ROC area in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub acc: f64,
    pub auc: f64,
    pub pairs: usize,
}

fn accuracy_at(scores: &[(f64, bool)], t: f64) -> f64 {
    let ok = scores.iter().filter(|(s, same)| (*s > t) == *same).count();
    ok as f64 / scores.len() as f64
}

/// Threshold maximizing accuracy; candidates are midpoints between distinct
/// scores plus both extremes. Ties go to the lowest candidate.
fn best_threshold(scores: &[(f64, bool)]) -> f64 {
    let mut s: Vec<f64> = scores.iter().map(|p| p.0).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut cands = vec![s[0] - 1.0];
    cands.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(s[s.len() - 1]);
    let mut best = (f64::NEG_INFINITY, cands[0]);
    for t in cands {
        let a = accuracy_at(scores, t);
        if a > best.0 {
            best = (a, t);
        }
    }
    best.1
}

/// Area under the ROC curve by trapezoids, with tied scores grouped.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<f64> {
    let pos = scores.iter().filter(|p| p.1).count() as f64;
    let neg = scores.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::invalid("ROC needs both same and different pairs"));
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < s.len() {
        let (ptp, pfp) = (tp, fp);
        let mut j = i;
        while j < s.len() && s[j].0 == s[i].0 {
            if s[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        area += (fp - pfp) / neg * (tp + ptp) / (2.0 * pos);
        i = j;
    }
    Ok(area)
}

/// ACC by leave-one-fold-out threshold selection over contiguous folds, AUC
/// over all pairs. Scores are `(similarity, same identity)`.
pub fn verification_from_scores(scores: &[(f64, bool)]) -> Result<VerificationResult> {
    if scores.len() < 2 {
        return Err(Error::invalid(format!("verification needs at least 2 pairs, got {}", scores.len())));
    }
    let auc = roc_auc(scores)?;
    let folds = FOLDS.min(scores.len());
    let n = scores.len();
    let mut acc = 0.0;
    for k in 0..folds {
        let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
        let train: Vec<(f64, bool)> = scores[..lo].iter().chain(&scores[hi..]).copied().collect();
        let t = best_threshold(&train);
        acc += accuracy_at(&scores[lo..hi], t);
    }
    Ok(VerificationResult {
        acc: 100.0 * acc / folds as f64,
        auc,
        pairs: n,
    })
}

/// Embeds both sides of every pair through the frontalizer and scores them.
pub fn verification(
    model: &dyn Frontalizer,
    manifest: &DatasetManifest,
    pairs: &[(Record, Record)],
    embedder: &Embedder,
) -> Result<VerificationResult> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!("verification needs at least 2 pairs, got {}", pairs.len())));
    }
    let left: Vec<Record> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<Record> = pairs.iter().map(|p| p.1).collect();
    let a = embed_records(model, manifest, &left, embedder)?;
    let b = embed_records(model, manifest, &right, embedder)?;
    let scores: Vec<(f64, bool)> = pairs
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(p, (x, y))| (cosine(x, y), p.0.identity == p.1.identity))
        .collect();
    verification_from_scores(&scores)
}

/// Each probe paired with its own gallery image and with the next test
/// identity's gallery image, alternating.
pub fn verification_pairs(manifest: &DatasetManifest, probes: &[Record]) -> Vec<(Record, Record)> {
    let g = &manifest.gallery;
    let mut out = Vec::with_capacity(2 * probes.len());
    for p in probes {
        let Some(i) = g.iter().position(|r| r.identity == p.identity) else {
            continue;
        };
        out.push((*p, g[i]));
        if g.len() > 1 {
            out.push((*p, g[(i + 1) % g.len()]));
        }
    }
    out
}

/// Per-|pose| masked L1 means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllumReport {
    /// `L1(W(synth, reverse flow), profile)` inside the profile mask.
    pub warped_vs_profile: BTreeMap<i32, f64>,
    /// `L1(synth, frontal)` inside the frontal mask.
    pub synth_vs_frontal: BTreeMap<i32, f64>,
}

impl IllumReport {
    fn mean(m: &BTreeMap<i32, f64>) -> f64 {
        if m.is_empty() {
            0.0
        } else {
            m.values().sum::<f64>() / m.len() as f64
        }
    }

    pub fn mean_warped_vs_profile(&self) -> f64 {
        Self::mean(&self.warped_vs_profile)
    }

    pub fn mean_synth_vs_frontal(&self) -> f64 {
        Self::mean(&self.synth_vs_frontal)
    }
}

/// Mean absolute difference over channels inside each sample's mask.
pub fn masked_l1_per_sample(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    let c = a.dim(1)? as f64;
    let diff = (a - b)?.abs()?.broadcast_mul(mask)?;
    let num = diff.flatten_from(1)?.sum(1)?.to_vec1::<f32>()?;
    let den = mask.flatten_from(1)?.sum(1)?.to_vec1::<f32>()?;
    Ok(num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| n as f64 / (c * (d as f64).max(1.0)))
        .collect())
}

/// Both illumination metrics over `records`, averaged per |pose| bin. A
/// frontalizer without a reverse flow is compared unwarped.
pub fn illumination_metrics(model: &dyn Frontalizer, manifest: &DatasetManifest, records: &[Record]) -> Result<IllumReport> {
    let mut warped: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    let mut synth: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for chunk in records.chunks(CHUNK) {
        let b = load_batch(manifest, chunk)?;
        let f = model.frontalize(&b)?;
        let back = match &f.reverse_flow {
            Some(r) => kernels::warp(&f.synth, r)?,
            None => f.synth.clone(),
        };
        let w = masked_l1_per_sample(&back, &b.profile, &b.profile_mask)?;
        let s = masked_l1_per_sample(&f.synth, &b.frontal, &b.frontal_mask)?;
        for (i, pose) in b.poses.iter().enumerate() {
            let e = warped.entry(pose.abs()).or_default();
            e.0 += w[i];
            e.1 += 1;
            let e = synth.entry(pose.abs()).or_default();
            e.0 += s[i];
            e.1 += 1;
        }
    }
    let avg = |m: BTreeMap<i32, (f64, usize)>| m.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect();
    Ok(IllumReport {
        warped_vs_profile: avg(warped),
        synth_vs_frontal: avg(synth),
    })
}

/// Writes, per record, `NNN_triptych.png` (profile | synth | frontal),
/// `NNN_flow.png` (forward | reverse flow) and `NNN_attention.png` (one gate
/// per skip, grayscale). Missing flows render as zero flow.
pub fn dump_qualitative(
    model: &dyn Frontalizer,
    manifest: &DatasetManifest,
    records: &[Record],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::with_capacity(3 * records.len());
    let mut idx = 0usize;
    for chunk in records.chunks(CHUNK) {
        let b = load_batch(manifest, chunk)?;
        let f = model.frontalize(&b)?;
        let (_, _, h, w) = b.profile.dims4()?;
        let zero = Tensor::zeros((b.len(), 2, h, w), candle_core::DType::F32, b.profile.device())?;
        let flow = f.flow.clone().unwrap_or_else(|| zero.clone());
        let rev = f.reverse_flow.clone().unwrap_or(zero);
        for i in 0..b.len() {
            let pick = |t: &Tensor| t.narrow(0, i, 1);
            let trip = out_dir.join(format!("{idx:03}_triptych.png"));
            viz::save_grid(&trip, &[vec![pick(&b.profile)?, pick(&f.synth)?, pick(&b.frontal)?]])?;
            let fp = out_dir.join(format!("{idx:03}_flow.png"));
            viz::save_grid(
                &fp,
                &[vec![
                    viz::flow_panel(&pick(&flow)?.squeeze(0)?)?,
                    viz::flow_panel(&pick(&rev)?.squeeze(0)?)?,
                ]],
            )?;
            let gates: Vec<Tensor> = f.attention.iter().map(|a| pick(a)).collect::<candle_core::Result<_>>()?;
            let tiles = if gates.is_empty() {
                vec![Tensor::zeros((1, h, w), candle_core::DType::F32, b.profile.device())?]
            } else {
                viz::attention_tiles(&gates, h)?
            };
            let ap = out_dir.join(format!("{idx:03}_attention.png"));
            viz::save_grid(&ap, &[tiles])?;
            files.extend([trip, fp, ap]);
            idx += 1;
        }
    }
    Ok(files)
}

/// Everything `eval` reports for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recognition: RecognitionResult,
    pub baseline: RecognitionResult,
    /// `None` when the gallery has a single identity (no negative pairs).
    pub verification: Option<VerificationResult>,
    pub illumination: IllumReport,
}

/// Full evaluation over the test split, with the raw-profile baseline.
pub fn evaluate(model: &dyn Frontalizer, manifest: &DatasetManifest, embedder: &Embedder) -> Result<EvalReport> {
    let probes = probe_records(manifest);
    let pairs = verification_pairs(manifest, &probes);
    Ok(EvalReport {
        recognition: rank1_recognition(model, manifest, &probes, embedder)?,
        baseline: rank1_recognition(&RawProfile, manifest, &probes, embedder)?,
        verification: if manifest.gallery.len() > 1 {
            Some(verification(model, manifest, &pairs, embedder)?)
        } else {
            None
        },
        illumination: illumination_metrics(model, manifest, &probes)?,
    })
}

/// Plain-text rank-1 table: one column per |pose| bin plus the average.
pub fn format_table(rows: &[(&str, &RecognitionResult)]) -> String {
    let poses: Vec<i32> = rows
        .iter()
        .flat_map(|(_, r)| r.per_pose.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = format!("{:<12}", "Method");
    for p in &poses {
        s.push_str(&format!("{:>8}", format!("±{p}°")));
    }
    s.push_str(&format!("{:>8}\n", "Avg"));
    for (name, r) in rows {
        s.push_str(&format!("{name:<12}"));
        for p in &poses {
            match r.per_pose.get(p) {
                Some(v) => s.push_str(&format!("{v:>8.2}")),
                None => s.push_str(&format!("{:>8}", "-")),
            }
        }
        s.push_str(&format!("{:>8.2}\n", r.average));
    }
    s
}
