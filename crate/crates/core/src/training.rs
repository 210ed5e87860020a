//! Losses and the optimization loop.
//!
//! `L = L_rec + λ₁ L_sem + λ₂ L_eik`, where `L_rec` is the mean L1 color
//! error, `L_sem` the cross-entropy of the softmax-normalized rendered
//! semantics and `L_eik = Σ_k mean_p (‖∇d_k(p)‖ - 1)²`.
//!
//! A batch is split into chunks of rays, each recorded on its own tape and
//! differentiated independently. Chunk gradients are summed in chunk order,
//! so results do not depend on how many threads ran the chunks.

use objsdf_autodiff::{Matrix, Tape, TapeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::RaySampler;
use crate::error::{Error, Result};
use crate::fields::{gradient_norms, FieldModel, ModelDoc, SceneModel};
use crate::geometry::{Aabb, Vec3};
use crate::io::{decode_matrices, encode_matrices};
use crate::rendering::{render_on_tape, sample_rays, Ray, RenderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight `λ₁` of the semantic term.
    pub lambda_semantic: f64,
    /// Weight `λ₂` of the Eikonal term.
    pub lambda_eikonal: f64,
    pub rays_per_batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning rate reached by the cosine schedule at the last iteration.
    pub final_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Uniform bounding-box Eikonal points per on-ray sample.
    pub eikonal_uniform_ratio: f64,
    /// Rays recorded on one tape.
    pub chunk_rays: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Held-out PSNR is measured every this many iterations (0 disables it).
    pub validation_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_semantic: 0.04,
            lambda_eikonal: 0.1,
            rays_per_batch: 1024,
            iterations: 5000,
            learning_rate: 5e-4,
            final_learning_rate: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            eikonal_uniform_ratio: 1.0,
            chunk_rays: 16,
            seed: 0,
            checkpoint_every: 1000,
            validation_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 7] = [
            (
                self.lambda_semantic >= 0.0 && self.lambda_eikonal >= 0.0,
                "loss weights must be non-negative",
            ),
            (
                self.rays_per_batch >= 1,
                "rays_per_batch must be at least 1",
            ),
            (self.chunk_rays >= 1, "chunk_rays must be at least 1"),
            (
                self.learning_rate > 0.0 && self.final_learning_rate > 0.0,
                "learning rates must be positive",
            ),
            (
                (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
                "Adam betas must lie in [0,1)",
            ),
            (self.adam_epsilon > 0.0, "adam_epsilon must be positive"),
            (
                self.eikonal_uniform_ratio >= 0.0 && self.eikonal_uniform_ratio.is_finite(),
                "eikonal_uniform_ratio must be non-negative",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }

    /// Cosine decay from `learning_rate` at step 0 to `final_learning_rate`
    /// at step `iterations`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let total = self.iterations.max(1) as f64;
        let x = (step as f64 / total).min(1.0);
        self.final_learning_rate
            + 0.5
                * (self.learning_rate - self.final_learning_rate)
                * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// 1-based step number.
    pub iteration: usize,
    pub rec: f64,
    pub semantic: f64,
    pub eikonal: f64,
    pub total: f64,
    /// `β` used by this step.
    pub beta: f64,
    pub learning_rate: f64,
    pub psnr_val: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,rec,semantic,eikonal,total,beta,psnr_val";

    pub fn csv_row(&self) -> String {
        let psnr = self.psnr_val.map(|p| format!("{p:.6}")).unwrap_or_default();
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            self.iteration, self.rec, self.semantic, self.eikonal, self.total, self.beta, psnr
        )
    }
}

/// Mean over rays of `‖pred - gt‖₁`.
pub fn loss_rec(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss_rec",
            expected: format!("{} colors", pred.len()),
            found: format!("{}", gt.len()),
        });
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (0..3).map(|c| (p[c] - g[c]).abs()).sum::<f64>())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Probabilities below this are clamped before taking the logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean of `-ln max(p[label], 1e-12)`.
pub fn loss_semantic(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss_semantic",
            expected: format!("{} labels", probs.len()),
            found: format!("{}", labels.len()),
        });
    }
    let mut sum = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let v = p.get(l).ok_or(Error::LabelOutOfRange {
            label: l,
            num_objects: p.len(),
        })?;
        sum -= v.max(PROBABILITY_FLOOR).ln();
    }
    Ok(sum / probs.len() as f64)
}

/// `Σ_k mean_p (‖∇d_k(p)‖ - 1)²` over the given points.
pub fn loss_eikonal(model: &dyn SceneModel, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("loss_eikonal needs at least one point"));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false)?;
    let m = points_matrix(points);
    let g = model.geometry(&mut tape, &b, &m, true)?;
    let norms = gradient_norms(&mut tape, &g).map_err(|e| match e {
        Error::Tape(TapeError::NonFinite { .. }) => Error::NonFinite {
            what: "Eikonal gradient".into(),
        },
        other => other,
    })?;
    let sum: f64 = tape
        .value(norms)
        .data()
        .iter()
        .map(|n| (n - 1.0) * (n - 1.0))
        .sum();
    Ok(sum / points.len() as f64)
}

pub fn points_matrix(points: &[Vec3]) -> Matrix {
    Matrix::from_vec(
        points.len(),
        3,
        points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    )
}

/// Adam moments for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.m.iter().map(Matrix::shape).collect()
    }
}

/// One bias-corrected Adam step applied in place.
pub fn adam_update(
    weights: &mut [Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let same = weights.len() == grads.len()
        && weights.len() == state.m.len()
        && weights
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((w, g), m)| w.shape() == g.shape() && w.shape() == m.shape());
    if !same {
        return Err(Error::ShapeMismatch {
            op: "adam_update",
            expected: format!(
                "{:?}",
                weights.iter().map(Matrix::shape).collect::<Vec<_>>()
            ),
            found: format!("{:?}", grads.iter().map(Matrix::shape).collect::<Vec<_>>()),
        });
    }
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for ((w, g), (m, v)) in weights
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (w, g, m, v) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rays with their supervision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    fn validate(&self, num_objects: usize) -> Result<()> {
        if self.is_empty() || self.colors.len() != self.len() || self.labels.len() != self.len() {
            return Err(Error::invalid(format!(
                "batch has {} rays, {} colors and {} labels",
                self.len(),
                self.colors.len(),
                self.labels.len()
            )));
        }
        if self.rays.iter().any(Ray::is_vacuum) {
            return Err(Error::invalid(
                "training batches must not contain vacuum rays",
            ));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= num_objects) {
            return Err(Error::LabelOutOfRange { label, num_objects });
        }
        Ok(())
    }
}

/// Loss terms already divided by the batch-wide counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub semantic: f64,
    pub eikonal: f64,
    pub total: f64,
}

impl LossParts {
    fn accumulate(&mut self, other: &LossParts) {
        self.rec += other.rec;
        self.semantic += other.semantic;
        self.eikonal += other.eikonal;
        self.total += other.total;
    }
}

/// Loss and gradients for one batch with fixed sample depths and Eikonal
/// points. Gradients follow [`FieldModel::params`] with `log β` appended.
pub fn batch_loss(
    model: &FieldModel,
    batch: &TrainBatch,
    depths: &[Vec<f64>],
    eikonal_points: &[Vec3],
    train: &TrainConfig,
    render: &RenderConfig,
) -> Result<(LossParts, Vec<Matrix>)> {
    batch.validate(model.config().num_objects)?;
    let n = batch.len();
    let samples: usize = depths.iter().map(Vec::len).sum();
    let eik_total = samples + eikonal_points.len();
    let chunk = train.chunk_rays;
    let num_chunks = n.div_ceil(chunk);
    // Uniform points are split evenly across chunks.
    let per_chunk_uniform = eikonal_points.len().div_ceil(num_chunks.max(1));
    let results: Vec<Result<(LossParts, Vec<Matrix>)>> = (0..num_chunks)
        .into_par_iter()
        .map(|c| {
            let rays = c * chunk..((c + 1) * chunk).min(n);
            let up = (c * per_chunk_uniform).min(eikonal_points.len())
                ..((c + 1) * per_chunk_uniform).min(eikonal_points.len());
            chunk_loss(
                model,
                batch,
                rays,
                depths,
                &eikonal_points[up],
                n,
                eik_total,
                train,
                render,
            )
        })
        .collect();
    let mut parts = LossParts::default();
    let mut grads: Option<Vec<Matrix>> = None;
    for r in results {
        let (p, g) = r?;
        parts.accumulate(&p);
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
        }
    }
    Ok((parts, grads.expect("at least one chunk")))
}

#[allow(clippy::too_many_arguments)]
fn chunk_loss(
    model: &FieldModel,
    batch: &TrainBatch,
    rays: std::ops::Range<usize>,
    depths: &[Vec<f64>],
    uniform: &[Vec3],
    num_rays: usize,
    eik_total: usize,
    train: &TrainConfig,
    render: &RenderConfig,
) -> Result<(LossParts, Vec<Matrix>)> {
    let k = model.config().num_objects;
    let r = rays.len();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true)?;
    let extra = points_matrix(uniform);
    let out = render_on_tape(
        model,
        &mut tape,
        &binding,
        &batch.rays[rays.clone()],
        &depths[rays.clone()],
        Some(&extra),
        render,
        false,
    )?;

    let gt = tape.constant(Matrix::from_vec(
        r,
        3,
        batch.colors[rays.clone()]
            .iter()
            .flatten()
            .copied()
            .collect(),
    ))?;
    let diff = tape.sub(out.color, gt)?;
    let abs = tape.abs(diff)?;
    let rec = tape.sum(abs)?;
    let rec = tape.scale(rec, 1.0 / num_rays as f64)?;

    let probs = tape.softmax_rows(out.semantic)?;
    let picked = tape.gather(probs, batch.labels[rays].to_vec())?;
    let clamped = tape.clamp_min(picked, PROBABILITY_FLOOR)?;
    let logp = tape.log(clamped)?;
    let sem = tape.sum(logp)?;
    let sem = tape.scale(sem, -1.0 / num_rays as f64)?;

    let norms = gradient_norms(&mut tape, &out.geometry)?;
    let dev = tape.offset(norms, -1.0)?;
    let sq = tape.square(dev)?;
    let eik = tape.sum(sq)?;
    let eik = tape.scale(eik, 1.0 / eik_total as f64)?;
    debug_assert_eq!(tape.shape(norms).1, k);

    let ws = tape.scale(sem, train.lambda_semantic)?;
    let we = tape.scale(eik, train.lambda_eikonal)?;
    let total = tape.add(rec, ws)?;
    let total = tape.add(total, we)?;

    let grads = tape.backward(total)?;
    let log_beta = binding.log_beta.expect("field models carry log beta");
    let mut out_grads = Vec::with_capacity(binding.params.len() + 1);
    for (v, p) in binding.params.iter().zip(model.params()) {
        out_grads.push(
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())),
        );
    }
    out_grads.push(
        grads
            .get(log_beta)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(1, 1)),
    );
    Ok((
        LossParts {
            rec: tape.value(rec).item(),
            semantic: tape.value(sem).item(),
            eikonal: tape.value(eik).item(),
            total: tape.value(total).item(),
        },
        out_grads,
    ))
}

/// Uniform points in `bbox`.
pub fn uniform_points<R: Rng>(bbox: &Aabb, n: usize, rng: &mut R) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::from_fn(|i, _| rng.gen_range(bbox.min[i]..bbox.max[i])))
        .collect()
}

/// Model, optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FieldModel,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub render: RenderConfig,
    pub bbox: Aabb,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        model: FieldModel,
        config: TrainConfig,
        render: RenderConfig,
        bbox: Aabb,
    ) -> Result<Self> {
        config.validate()?;
        render.validate()?;
        bbox.validate()?;
        let optimizer = AdamState::new(&trainable_shapes(&model));
        Ok(Self {
            model,
            optimizer,
            config,
            render,
            bbox,
            iteration: 0,
        })
    }

    /// Steps completed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Generator for everything random in step `iteration`.
    pub fn step_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration as u64 + 1);
        rng
    }

    /// One render, loss assembly, reverse pass and Adam update. On a
    /// non-finite loss or gradient the model and optimizer are left untouched.
    pub fn step(&mut self, batch: &TrainBatch) -> Result<LossReport> {
        let mut rng = self.step_rng(self.iteration);
        let depths = sample_rays(&self.model, &batch.rays, &self.render, &mut rng)
            .map_err(|e| self.abort(e))?;
        let samples: usize = depths.iter().map(Vec::len).sum();
        let n_uniform = (self.config.eikonal_uniform_ratio * samples as f64).round() as usize;
        let eik_points = uniform_points(&self.bbox, n_uniform, &mut rng);
        let (parts, grads) = batch_loss(
            &self.model,
            batch,
            &depths,
            &eik_points,
            &self.config,
            &self.render,
        )
        .map_err(|e| self.abort(e))?;
        let lr = self.config.learning_rate_at(self.iteration);
        let report = LossReport {
            iteration: self.iteration + 1,
            rec: parts.rec,
            semantic: parts.semantic,
            eikonal: parts.eikonal,
            total: parts.total,
            beta: self.model.beta(),
            learning_rate: lr,
            psnr_val: None,
        };
        let finite = [parts.rec, parts.semantic, parts.eikonal, parts.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite || grads.iter().any(|g| g.first_non_finite().is_some()) {
            return Err(Error::NonFiniteLoss {
                iteration: report.iteration,
                detail: format!("{report:?}"),
            });
        }
        let mut weights: Vec<Matrix> = self.model.params().to_vec();
        weights.push(Matrix::scalar(self.model.log_beta()));
        let c = &self.config;
        adam_update(
            &mut weights,
            &grads,
            &mut self.optimizer,
            lr,
            c.adam_beta1,
            c.adam_beta2,
            c.adam_epsilon,
        )?;
        let log_beta = weights.pop().expect("log beta").item();
        self.model.params_mut().clone_from_slice(&weights);
        self.model.set_log_beta(log_beta);
        self.iteration += 1;
        Ok(report)
    }

    /// Draws the batch for the next step. Like [`Trainer::step_rng`] it
    /// depends only on the seed and the step number.
    pub fn next_batch(&self, sampler: &RaySampler) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((1u64 << 40) + self.iteration as u64);
        sampler.sample(self.config.rays_per_batch, &mut rng)
    }

    /// Steps until `config.iterations` is reached, calling `hook` after
    /// every step.
    pub fn fit(
        &mut self,
        sampler: &RaySampler,
        mut hook: impl FnMut(&Trainer, &mut LossReport) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.config.iterations {
            let batch = self.next_batch(sampler);
            let mut report = self.step(&batch)?;
            hook(self, &mut report)?;
        }
        Ok(())
    }

    fn abort(&self, e: Error) -> Error {
        match e {
            Error::Tape(TapeError::NonFinite { .. } | TapeError::NonFiniteGradient { .. })
            | Error::NonFiniteLayer { .. }
            | Error::NonFinite { .. } => Error::NonFiniteLoss {
                iteration: self.iteration + 1,
                detail: e.to_string(),
            },
            other => other,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            iteration: self.iteration,
            model: self.model.to_doc(),
            train: self.config.clone(),
            render: self.render.clone(),
            bbox: self.bbox,
            adam_step: self.optimizer.step,
            adam_m: encode_matrices(&self.optimizer.m),
            adam_v: encode_matrices(&self.optimizer.v),
        }
    }

    /// Restores a trainer; `config` may extend the iteration budget.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format {}",
                ck.format
            )));
        }
        let model = FieldModel::from_doc(&ck.model)?;
        let mut t = Trainer::new(model, ck.train.clone(), ck.render.clone(), ck.bbox)?;
        let shapes = trainable_shapes(&t.model);
        t.optimizer = AdamState {
            step: ck.adam_step,
            m: decode_matrices(&ck.adam_m, &shapes)?,
            v: decode_matrices(&ck.adam_v, &shapes)?,
        };
        t.iteration = ck.iteration;
        Ok(t)
    }
}

fn trainable_shapes(model: &FieldModel) -> Vec<(usize, usize)> {
    let mut s: Vec<(usize, usize)> = model.params().iter().map(Matrix::shape).collect();
    s.push((1, 1));
    s
}

const CHECKPOINT_FORMAT: &str = "objsdf-train-checkpoint-v1";

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub iteration: usize,
    pub model: ModelDoc,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub bbox: Aabb,
    pub adam_step: u64,
    pub adam_m: String,
    pub adam_v: String,
}
