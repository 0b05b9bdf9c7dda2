//! Embedder training, flow pretraining, the composite training step and the
//! checkpointed run loop.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{checkpoint_name, latest_checkpoint, Checkpoint};
use crate::config::Config;
use crate::data::{identity_seed, render_frontal, Batch, DatasetManifest, Record, Source, Split};
use crate::error::{Error, Result};
use crate::gfilter::{guided_filter_tensor, GuidedFilterParams};
use crate::kernels;
use crate::losses::{
    adversarial_from_scores, flow_regularization, identity_loss, illum_preserve_loss, landmark_flow_loss,
    perceptual_loss, pixel_loss, sampling_correctness_loss, scalar, total_loss, weighted_sum, LossReport,
    PerceptualBackbone,
};
use crate::nets::{Discriminator, Embedder, FlowEstimator, Generator};
use crate::nn::Mode;
use crate::optim::Adam;
use crate::viz;

/// Relative weights of the flow pretraining objective: landmark, sampling
/// correctness, smoothness.
pub const PRETRAIN_WEIGHTS: [f64; 3] = [1.0, 4.0, 0.5];
const EMBEDDER_BATCH: usize = 32;
const AUX_STREAM: u64 = 0x6175_7869_6c69_6172;
const SAMPLE_ROWS: usize = 4;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
}

/// Everything a run needs to continue bit-exactly.
#[derive(Debug)]
pub struct TrainState {
    pub cfg: Config,
    /// Completed composite steps.
    pub step: u64,
    pub flow_f: FlowEstimator,
    pub flow_r: FlowEstimator,
    pub gen: Generator,
    pub disc: Discriminator,
    pub embedder: Embedder,
    pub backbone: PerceptualBackbone,
    opt_d: Adam,
    opt_r: Adam,
    opt_flow: Adam,
}

impl TrainState {
    /// Fresh networks seeded from `cfg.seed`, around an already trained embedder.
    pub fn new(cfg: Config, embedder: Embedder) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.resolution;
        let mut rng = stream(cfg.seed, 1);
        let flow_f = FlowEstimator::new(r, &mut rng)?;
        let flow_r = FlowEstimator::new(r, &mut rng)?;
        let gen = Generator::new(r, &mut rng)?;
        let disc = Discriminator::new(r, &mut rng)?;
        let backbone = PerceptualBackbone::seeded(cfg.seed, cfg.vgg_layer_weights.clone())?;
        let betas = (cfg.adam_beta1, cfg.adam_beta2);
        let opt_d = Adam::new(&[("disc", &disc.store)], cfg.lr_main, betas)?;
        let opt_r = Adam::new(&[("gen", &gen.store)], cfg.lr_main, betas)?;
        let opt_flow = Adam::new(&[("flow_f", &flow_f.store), ("flow_r", &flow_r.store)], cfg.lr_flow, betas)?;
        Ok(Self {
            cfg,
            step: 0,
            flow_f,
            flow_r,
            gen,
            disc,
            embedder,
            backbone,
            opt_d,
            opt_r,
            opt_flow,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({
            "step": self.step,
            "embedder_classes": self.embedder.classes(),
            "config": self.cfg,
        }));
        c.insert_all("flow_f/", self.flow_f.store.named_tensors());
        c.insert_all("flow_r/", self.flow_r.store.named_tensors());
        c.insert_all("gen/", self.gen.store.named_tensors());
        c.insert_all("disc/", self.disc.store.named_tensors());
        c.insert_all("embedder/", self.embedder.store.named_tensors());
        c.insert_all("", self.opt_d.state("opt_d")?);
        c.insert_all("", self.opt_r.state("opt_r")?);
        c.insert_all("", self.opt_flow.state("opt_flow")?);
        Ok(c)
    }

    /// Rebuilds a state from a checkpoint, optionally under a different
    /// config (same resolution), e.g. to branch an ablation.
    pub fn from_checkpoint(c: &Checkpoint, cfg: Option<Config>) -> Result<Self> {
        let meta_cfg: Config = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config in checkpoint: {e}")))?;
        let cfg = cfg.unwrap_or(meta_cfg.clone());
        if cfg.resolution != meta_cfg.resolution {
            return Err(Error::Checkpoint(format!(
                "checkpoint resolution {} differs from requested {}",
                meta_cfg.resolution, cfg.resolution
            )));
        }
        let classes = c.meta["embedder_classes"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing embedder_classes".into()))? as usize;
        let step = c.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        let embedder = Embedder::new(cfg.resolution, classes, &mut stream(0, 0))?;
        embedder.store.load_named(&c.section("embedder/"))?;
        let mut s = Self::new(cfg, embedder)?;
        s.flow_f.store.load_named(&c.section("flow_f/"))?;
        s.flow_r.store.load_named(&c.section("flow_r/"))?;
        s.gen.store.load_named(&c.section("gen/"))?;
        s.disc.store.load_named(&c.section("disc/"))?;
        s.opt_d.load_state("opt_d", &c.tensors)?;
        s.opt_r.load_state("opt_r", &c.tensors)?;
        s.opt_flow.load_state("opt_flow", &c.tensors)?;
        s.step = step;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, None)
    }

    pub fn gfilter_params(&self) -> Result<GuidedFilterParams> {
        GuidedFilterParams::new(self.cfg.gfilter_radius(), self.cfg.gfilter_eps)
    }
}

/// Frontal images and labels the embedder is trained on: auxiliary synthetic
/// identities (synthetic manifests only) followed by the training identities.
pub fn embedder_gallery(cfg: &Config, manifest: &DatasetManifest) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    if manifest.source == Source::Synthetic {
        for i in 0..cfg.embedder_aux_identities as u32 {
            let seed = identity_seed(cfg.seed ^ AUX_STREAM, i);
            out.push(render_frontal(seed, manifest.resolution)?.into_tensor());
        }
    }
    for &id in &manifest.train_ids {
        out.push(manifest.frontal(id)?.into_tensor());
    }
    Ok(out)
}

/// Random horizontal gain ramp and a small translation, per item.
fn augment(imgs: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (b, _, h, w) = imgs.dims4()?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let gl = rng.gen_range(0.55f32..1.45);
        let gr = rng.gen_range(0.55f32..1.45);
        let ramp: Vec<f32> = (0..w).map(|x| gl + (gr - gl) * x as f32 / (w - 1) as f32).collect();
        let ramp = Tensor::from_vec(ramp, (1, 1, w), imgs.device())?;
        let flow = Tensor::from_vec(
            vec![rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0)],
            (1, 2, 1, 1),
            imgs.device(),
        )?
        .broadcast_as((1, 2, h, w))?
        .contiguous()?;
        let x = kernels::warp(&imgs.narrow(0, i, 1)?, &flow)?;
        out.push(x.broadcast_mul(&ramp)?.clamp(0f32, 1f32)?);
    }
    Ok(Tensor::cat(&out, 0)?)
}

/// Trains the identity embedder with a cosine-softmax objective on both
/// feature taps. Returns the network and the per-step losses.
pub fn train_embedder(cfg: &Config, manifest: &DatasetManifest) -> Result<(Embedder, Vec<f64>)> {
    let gallery = embedder_gallery(cfg, manifest)?;
    let classes = gallery.len();
    let images = Tensor::stack(&gallery, 0)?;
    let mut rng = stream(cfg.seed, 2);
    let embedder = Embedder::new(cfg.resolution, classes, &mut rng)?;
    let mut opt = Adam::new(&[("embedder", &embedder.store)], cfg.lr_embedder, (0.9, 0.999))?;
    let mut losses = Vec::with_capacity(cfg.embedder_steps as usize);
    for step in 0..cfg.embedder_steps {
        let mut r = stream(cfg.seed, 0x656d_6200 ^ step);
        let labels: Vec<u32> = (0..EMBEDDER_BATCH).map(|_| r.gen_range(0..classes as u32)).collect();
        let idx = Tensor::new(labels.as_slice(), &Device::Cpu)?;
        let x = augment(&images.index_select(&idx, 0)?, &mut r)?;
        let (lp, lf) = embedder.logits(&x, Mode::Train)?;
        let loss = (candle_nn::loss::cross_entropy(&lp, &idx)? + candle_nn::loss::cross_entropy(&lf, &idx)?)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                report: format!("embedder loss {v}"),
            });
        }
        opt.step(&loss.backward()?)?;
        losses.push(v);
    }
    Ok((embedder, losses))
}

/// Deterministic batch for composite step `step`.
pub fn train_batch(manifest: &DatasetManifest, seed: u64, step: u64, size: usize) -> Result<Batch> {
    let records = manifest.records_in(Split::Train);
    if records.is_empty() {
        return Err(Error::invalid("manifest has no training records"));
    }
    let mut r = stream(seed, 0x7374_6570_0000 ^ step);
    let picked: Vec<Record> = (0..size).map(|_| records[r.gen_range(0..records.len())]).collect();
    load_batch(manifest, &picked)
}

pub fn load_batch(manifest: &DatasetManifest, records: &[Record]) -> Result<Batch> {
    let samples = records.iter().map(|r| manifest.sample(r)).collect::<Result<Vec<_>>>()?;
    Batch::from_samples(&samples)
}

/// Per-epoch mean losses of flow pretraining.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub landmark: Vec<f64>,
    pub sampling: Vec<f64>,
    pub smoothness: Vec<f64>,
}

/// Flow objective of one estimator: landmark + sampling correctness + smoothness.
/// Returns the weighted total and the three unweighted terms.
pub fn flow_objective(
    backbone: &PerceptualBackbone,
    flow: &Tensor,
    src: &Tensor,
    dst: &Tensor,
    dst_mask: &Tensor,
    src_points: &[[f32; 2]],
    dst_points: &[[f32; 2]],
) -> Result<(Tensor, [f64; 3])> {
    let lm = landmark_flow_loss(flow, src_points, dst_points)?;
    let sc = sampling_correctness_loss(backbone, src, dst, flow, dst_mask)?;
    let tv = flow_regularization(flow)?;
    let terms = [scalar(&lm)?, scalar(&sc)?, scalar(&tv)?];
    let [a, b, c] = PRETRAIN_WEIGHTS;
    let total = ((lm * a)? + (sc * b)? + (tv * c)?)?;
    Ok((total, terms))
}

/// Pretrains `F` on the profile-to-frontal direction and `F'` on the reverse,
/// both from the profile image, for `epochs` passes over the training records.
pub fn pretrain_flows(state: &mut TrainState, manifest: &DatasetManifest, epochs: usize) -> Result<PretrainReport> {
    let cfg = state.cfg.clone();
    let betas = (cfg.adam_beta1, cfg.adam_beta2);
    let mut opt = Adam::new(
        &[("flow_f", &state.flow_f.store), ("flow_r", &state.flow_r.store)],
        cfg.lr_pretrain,
        betas,
    )?;
    let mut records = manifest.records_in(Split::Train);
    let mut report = PretrainReport::default();
    for epoch in 0..epochs {
        records.shuffle(&mut stream(cfg.seed, 0x7072_6500 ^ epoch as u64));
        let mut sums = [0.0; 3];
        let mut n = 0.0;
        for (bi, chunk) in records.chunks(cfg.batch_size).enumerate() {
            let b = load_batch(manifest, chunk)?;
            let phi = state.flow_f.forward(&b.profile, Mode::Train)?;
            let phi_r = state.flow_r.forward(&b.profile, Mode::Train)?;
            let (lf, tf) = flow_objective(
                &state.backbone,
                &phi,
                &b.profile,
                &b.frontal,
                &b.frontal_mask,
                &b.profile_landmarks,
                &b.frontal_landmarks,
            )?;
            let (lr, _) = flow_objective(
                &state.backbone,
                &phi_r,
                &b.frontal,
                &b.profile,
                &b.profile_mask,
                &b.frontal_landmarks,
                &b.profile_landmarks,
            )?;
            let loss = (lf + lr)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: (epoch * records.len().div_ceil(cfg.batch_size) + bi) as u64,
                    report: format!("pretrain loss {v}"),
                });
            }
            opt.step(&loss.backward()?)?;
            for k in 0..3 {
                sums[k] += tf[k];
            }
            n += 1.0;
        }
        report.landmark.push(sums[0] / n);
        report.sampling.push(sums[1] / n);
        report.smoothness.push(sums[2] / n);
    }
    Ok(report)
}

/// Tensors of one composite step, detached, for inspection and sample grids.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub flow: Tensor,
    pub reverse_flow: Tensor,
    pub synth: Tensor,
    pub warped_back: Tensor,
    pub filtered: Tensor,
    pub attention: Vec<Tensor>,
}

fn non_finite(step: u64, report: &LossReport) -> Error {
    Error::NonFinite {
        step,
        report: format!("{report:?}"),
    }
}

/// One composite step: discriminator update, then generator, flow and
/// reverse-flow updates from the weighted objective.
pub fn ffwm_step(state: &mut TrainState, b: &Batch) -> Result<StepOutput> {
    let cfg = &state.cfg;
    let step = state.step;
    let scales = cfg.scales;
    let phi_r = state.flow_r.forward(&b.profile, Mode::Train)?;
    let phi = state.flow_f.forward(&b.profile, Mode::Train)?;
    let out = state.gen.forward(&b.profile, &phi, Mode::Train)?;
    let synth = out.image;
    let warped_back = kernels::warp(&synth, &phi_r)?;
    let filtered = if step >= cfg.gfilter_warmup_steps {
        guided_filter_tensor(&b.frontal, &synth, state.gfilter_params()?)?
    } else {
        synth.clone()
    };

    let real_scores = state.disc.forward(&b.frontal, Mode::Train)?;
    let fake_scores = state.disc.forward(&filtered.detach(), Mode::Train)?;
    let (d_loss, _) = adversarial_from_scores(&real_scores, &fake_scores, &fake_scores)?;
    let d_value = scalar(&d_loss)?;
    if !d_value.is_finite() {
        let report = LossReport {
            d_loss: d_value,
            ..LossReport::default()
        };
        return Err(non_finite(step, &report));
    }
    state.opt_d.step(&d_loss.backward()?)?;

    let g_scores = state.disc.forward(&filtered, Mode::Frozen)?;
    let (_, adv) = adversarial_from_scores(&g_scores, &g_scores, &g_scores)?;
    let pixel = pixel_loss(&filtered, &b.frontal, &b.frontal_mask, scales)?;
    let (perc, skipped) = perceptual_loss(&state.backbone, &filtered, &b.frontal, &b.frontal_mask, &b.regions)?;
    let ip = illum_preserve_loss(&warped_back, &b.profile, &b.profile_mask, scales)?;
    let id = identity_loss(&state.embedder, &synth, &filtered, &b.frontal)?;
    let terms = [pixel, perc, adv, ip, id];
    let mut components = [0.0; 5];
    for (c, t) in components.iter_mut().zip(&terms) {
        *c = scalar(t)?;
    }
    let mut report = total_loss(components, cfg);
    report.d_loss = d_value;
    report.skipped_regions = skipped;
    if !report.is_finite() {
        return Err(non_finite(step, &report));
    }
    let total = weighted_sum(&terms, &cfg.lambdas)?;
    let grads = total.backward()?;
    state.opt_r.step(&grads)?;
    state.opt_flow.step(&grads)?;
    state.step += 1;
    Ok(StepOutput {
        report,
        flow: phi.detach(),
        reverse_flow: phi_r.detach(),
        synth: synth.detach(),
        warped_back: warped_back.detach(),
        filtered: filtered.detach(),
        attention: out.attention.iter().map(|a| a.detach()).collect(),
    })
}

/// Output directory layout of a training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        let d = Self { root: root.to_path_buf() };
        for sub in [d.checkpoints(), d.logs(), d.samples()] {
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        Ok(d)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.logs().join("losses.jsonl")
    }
}

/// Drops log lines at or after `step` so a resumed run rewrites them.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s < step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn save_samples(path: &Path, b: &Batch, o: &StepOutput) -> Result<()> {
    let n = b.len().min(SAMPLE_ROWS);
    let rows = (0..n)
        .map(|i| {
            let pick = |t: &Tensor| t.narrow(0, i, 1);
            Ok(vec![
                pick(&b.profile)?,
                pick(&o.synth)?,
                pick(&o.warped_back)?,
                pick(&o.filtered)?,
                pick(&b.frontal)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    viz::save_grid(path, &rows)
}

/// Runs composite steps until `state.step == until`, appending to the loss
/// log and writing checkpoints and sample grids on schedule.
pub fn run_training(
    state: &mut TrainState,
    manifest: &DatasetManifest,
    dir: &RunDir,
    until: u64,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<()> {
    truncate_log(&dir.loss_log(), state.step)?;
    let log_path = dir.loss_log();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    while state.step < until {
        let s = state.step;
        let batch = train_batch(manifest, state.cfg.seed, s, state.cfg.batch_size)?;
        let out = ffwm_step(state, &batch)?;
        writeln!(log, "{}", out.report.to_json_line(s)).map_err(|e| Error::io(&log_path, e))?;
        on_step(s, &out.report);
        let done = state.step;
        if done % state.cfg.sample_every == 0 || done == until {
            save_samples(&dir.samples().join(format!("step_{done:08}.png")), &batch, &out)?;
        }
        if done % state.cfg.checkpoint_every == 0 || done == until {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.save(&dir.checkpoints().join(checkpoint_name(done)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))
}

/// Builds the initial state: trains the embedder, creates the networks and
/// pretrains the flows.
pub fn initial_state(cfg: &Config, manifest: &DatasetManifest) -> Result<(TrainState, PretrainReport)> {
    if cfg.resolution != manifest.resolution {
        return Err(Error::invalid(format!(
            "config resolution {} differs from manifest resolution {}",
            cfg.resolution, manifest.resolution
        )));
    }
    let (embedder, _) = train_embedder(cfg, manifest)?;
    let mut state = TrainState::new(cfg.clone(), embedder)?;
    let report = pretrain_flows(&mut state, manifest, cfg.pretrain_epochs)?;
    Ok((state, report))
}

/// Full pipeline into `out`: resumes from the newest checkpoint when asked and
/// available, otherwise starts from scratch and saves the pretrained state as
/// step 0. Returns the final checkpoint path.
pub fn train_full(
    cfg: &Config,
    manifest: &DatasetManifest,
    out: &Path,
    resume: bool,
    on_step: impl FnMut(u64, &LossReport),
) -> Result<PathBuf> {
    let dir = RunDir::create(out)?;
    let latest = if resume { latest_checkpoint(&dir.checkpoints()) } else { None };
    let mut state = match latest {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(&p)?, Some(cfg.clone()))?,
        None => {
            let (state, _) = initial_state(cfg, manifest)?;
            state.save(&dir.checkpoints().join(checkpoint_name(0)))?;
            let _ = std::fs::remove_file(dir.loss_log());
            state
        }
    };
    run_training(&mut state, manifest, &dir, cfg.total_steps, on_step)?;
    Ok(dir.checkpoints().join(checkpoint_name(state.step)))
}

/// Mean predicted-flow statistics against the synthetic ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowAccuracy {
    /// Mean endpoint error inside the frontal mask over non-frontal records.
    pub epe: f64,
    /// Mean flow magnitude inside the mask on frontal inputs.
    pub frontal_magnitude: f64,
}

/// Evaluates `F` on the given records (synthetic manifests only).
pub fn flow_accuracy(flow_f: &FlowEstimator, manifest: &DatasetManifest, records: &[Record]) -> Result<FlowAccuracy> {
    let (mut epe, mut ne, mut mag, mut nm) = (0.0, 0.0, 0.0, 0.0);
    for chunk in records.chunks(16) {
        let b = load_batch(manifest, chunk)?;
        let gt = b
            .gt_forward
            .as_ref()
            .ok_or_else(|| Error::invalid("flow accuracy needs ground-truth flows"))?;
        let pred = flow_f.forward(&b.profile, Mode::Eval)?;
        let err = (&pred - gt)?.sqr()?.sum_keepdim(1)?.sqrt()?;
        let len = pred.sqr()?.sum_keepdim(1)?.sqrt()?;
        for (i, &pose) in b.poses.iter().enumerate() {
            let m = b.frontal_mask.narrow(0, i, 1)?;
            let count = scalar(&m.sum_all()?)?;
            if pose == 0 {
                mag += scalar(&(len.narrow(0, i, 1)? * &m)?.sum_all()?)? / count;
                nm += 1.0;
            } else {
                epe += scalar(&(err.narrow(0, i, 1)? * &m)?.sum_all()?)? / count;
                ne += 1.0;
            }
        }
    }
    Ok(FlowAccuracy {
        epe: if ne > 0.0 { epe / ne } else { 0.0 },
        frontal_magnitude: if nm > 0.0 { mag / nm } else { 0.0 },
    })
}

/// Parameter maps of every trainable network, for change detection.
pub fn fingerprints(state: &TrainState) -> Result<BTreeMap<&'static str, u64>> {
    Ok(BTreeMap::from([
        ("flow_f", state.flow_f.store.fingerprint()?),
        ("flow_r", state.flow_r.store.fingerprint()?),
        ("gen", state.gen.store.fingerprint()?),
        ("disc", state.disc.store.fingerprint()?),
        ("embedder", state.embedder.store.fingerprint()?),
    ]))
}

/// Casts a batch tensor to `f32` on the CPU (helper for callers comparing outputs).
pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}
