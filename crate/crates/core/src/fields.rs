//! The geometry network `f_φ: p ↦ (d_1..d_K, z)` and the radiance network
//! `f_θ: (p, n, dir, z) ↦ rgb`, plus an analytic stand-in used as an oracle.
//!
//! Spatial gradients `∂d/∂p` are obtained by pushing three tangent directions
//! through `f_φ` alongside the primal values, on the same tape. A reverse pass
//! over anything built from those tangents (the Eikonal term, the normals fed
//! to `f_θ`) therefore differentiates the gradient itself.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use objsdf_autodiff::{Matrix, Tape, UnaryOp, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_min, SceneSpec, Vec3};
use crate::io::{decode_matrices, encode_matrices};

/// Hidden-layer nonlinearity. Parsed from names such as `softplus100` or `relu`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Softplus(f64),
    Relu,
    Tanh,
}

impl Activation {
    fn op(self) -> UnaryOp {
        match self {
            Activation::Softplus(k) => UnaryOp::Softplus(k),
            Activation::Relu => UnaryOp::Relu,
            Activation::Tanh => UnaryOp::Tanh,
        }
    }

    /// Records `act'(z)` given the pre-activation `z` and output `y`.
    fn derivative(self, tape: &mut Tape, z: Var, y: Var) -> Result<Var> {
        Ok(match self {
            Activation::Softplus(k) => tape.sigmoid(z, k)?,
            // Piecewise constant, so it contributes no second-order term.
            Activation::Relu => {
                let mask = tape.value(z).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                tape.constant(mask)?
            }
            Activation::Tanh => {
                let y2 = tape.square(y)?;
                let neg = tape.neg(y2)?;
                tape.offset(neg, 1.0)?
            }
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => {
                let k = s
                    .strip_prefix("softplus")
                    .and_then(|k| {
                        if k.is_empty() {
                            Some(1.0)
                        } else {
                            k.parse::<f64>().ok()
                        }
                    })
                    .filter(|k| k.is_finite() && *k > 0.0)
                    .ok_or_else(|| Error::config(format!("unsupported activation `{s}`")))?;
                Ok(Activation::Softplus(k))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Softplus(k) => write!(f, "softplus{k}"),
            Activation::Relu => f.write_str("relu"),
            Activation::Tanh => f.write_str("tanh"),
        }
    }
}

impl Serialize for Activation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Number of objects `K`, background included.
    pub num_objects: usize,
    /// Hidden width of both networks.
    pub width: usize,
    /// Affine layers in `f_φ`.
    pub phi_layers: usize,
    /// Affine layers in `f_θ`.
    pub theta_layers: usize,
    /// Length of the scene feature `z`.
    pub feature_dim: usize,
    pub pe_levels_pos: usize,
    pub pe_levels_dir: usize,
    pub phi_activation: Activation,
    pub theta_activation: Activation,
    /// Positionally encode `p` before `f_θ` (otherwise the raw point is used).
    pub encode_theta_position: bool,
    /// Radius of the sphere every SDF channel approximates after init.
    pub init_radius: f64,
    pub beta_init: f64,
    pub beta_min: f64,
    /// Semantic sharpness `γ`.
    pub gamma: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self::desk(3)
    }
}

impl FieldConfig {
    pub fn full(num_objects: usize) -> Self {
        Self {
            num_objects,
            width: 256,
            phi_layers: 6,
            theta_layers: 4,
            feature_dim: 256,
            pe_levels_pos: 6,
            pe_levels_dir: 4,
            phi_activation: Activation::Softplus(100.0),
            theta_activation: Activation::Relu,
            encode_theta_position: true,
            init_radius: 0.5,
            beta_init: 0.1,
            beta_min: 1e-4,
            gamma: 20.0,
        }
    }

    pub fn desk(num_objects: usize) -> Self {
        Self {
            width: 128,
            feature_dim: 128,
            ..Self::full(num_objects)
        }
    }

    pub fn compact(num_objects: usize) -> Self {
        Self {
            width: 64,
            feature_dim: 64,
            ..Self::full(num_objects)
        }
    }

    pub fn preset(name: &str, num_objects: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(num_objects)),
            "desk" => Ok(Self::desk(num_objects)),
            "compact" => Ok(Self::compact(num_objects)),
            _ => Err(Error::config(format!("unknown model preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 9] = [
            (self.num_objects >= 1, "num_objects must be at least 1"),
            (self.width >= 1, "width must be at least 1"),
            (self.phi_layers >= 2, "phi_layers must be at least 2"),
            (self.theta_layers >= 1, "theta_layers must be at least 1"),
            (
                self.init_radius.is_finite() && self.init_radius > 0.0,
                "init_radius must be positive",
            ),
            (
                self.beta_min.is_finite() && self.beta_min > 0.0,
                "beta_min must be positive",
            ),
            (
                self.beta_init.is_finite() && self.beta_init >= self.beta_min,
                "beta_init must be at least beta_min",
            ),
            (
                self.gamma.is_finite() && self.gamma > 0.0,
                "gamma must be positive",
            ),
            (
                self.pe_levels_pos <= 30 && self.pe_levels_dir <= 30,
                "too many encoding levels",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }

    pub fn phi_input_dim(&self) -> usize {
        encoded_dim(self.pe_levels_pos)
    }

    pub fn theta_input_dim(&self) -> usize {
        let p = if self.encode_theta_position {
            encoded_dim(self.pe_levels_pos)
        } else {
            3
        };
        p + 3 + encoded_dim(self.pe_levels_dir) + self.feature_dim
    }

    /// `(rows, cols)` of every weight and bias, `f_φ` first, then `f_θ`.
    /// The trailing `log β` scalar is not included.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut push_net = |input: usize, layers: usize, output: usize| {
            for l in 0..layers {
                let i = if l == 0 { input } else { self.width };
                let o = if l + 1 == layers { output } else { self.width };
                shapes.push((i, o));
                shapes.push((1, o));
            }
        };
        push_net(
            self.phi_input_dim(),
            self.phi_layers,
            self.num_objects + self.feature_dim,
        );
        push_net(self.theta_input_dim(), self.theta_layers, 3);
        shapes
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(r, c)| r * c)
            .sum::<usize>()
            + 1
    }
}

pub fn encoded_dim(levels: usize) -> usize {
    3 + 6 * levels
}

/// `[x, y, z, sin(2⁰πx), sin(2⁰πy), sin(2⁰πz), cos(2⁰πx), …, cos(2^{L-1}πz)]`.
pub fn positional_encode(x: &[f64; 3], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(levels));
    out.extend_from_slice(x);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

/// Encodes each row of an `n×3` matrix.
pub fn encode_rows(points: &Matrix, levels: usize) -> Matrix {
    let n = points.rows();
    let mut data = Vec::with_capacity(n * encoded_dim(levels));
    for r in 0..n {
        let p = points.row_slice(r);
        data.extend(positional_encode(&[p[0], p[1], p[2]], levels));
    }
    Matrix::from_vec(n, encoded_dim(levels), data)
}

/// Jacobian of [`encode_rows`] stacked as three `n`-row blocks, block `a`
/// holding `∂ enc(p) / ∂p_a`.
pub fn encode_tangents(points: &Matrix, levels: usize) -> Matrix {
    let n = points.rows();
    let dim = encoded_dim(levels);
    let mut out = Matrix::zeros(3 * n, dim);
    for a in 0..3 {
        for r in 0..n {
            let x = points.get(r, a);
            let row = out.row_slice_mut(a * n + r);
            row[a] = 1.0;
            for l in 0..levels {
                let f = (1u64 << l) as f64 * std::f64::consts::PI;
                row[3 + 6 * l + a] = f * (f * x).cos();
                row[6 + 6 * l + a] = -f * (f * x).sin();
            }
        }
    }
    out
}

/// Leaves of a model recorded on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    pub params: Vec<Var>,
    /// `log β` leaf, when the model has one.
    pub log_beta: Option<Var>,
    /// `β` as a `1×1` node.
    pub beta: Var,
}

/// `f_φ` evaluated at `n` points.
#[derive(Clone, Debug)]
pub struct GeometryOutput {
    /// `n×K` object distances.
    pub sdf: Var,
    /// `n×F` scene feature.
    pub feature: Var,
    /// `3n×K` spatial gradients; rows `a·n..(a+1)·n` hold `∂d/∂p_a`.
    pub gradient: Option<Var>,
    pub num_points: usize,
}

/// Anything the renderer and the losses can evaluate on a tape.
pub trait SceneModel: Send + Sync {
    fn num_objects(&self) -> usize;

    fn gamma(&self) -> f64;

    /// Records the model's leaves. With `trainable` the weights are parameters.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding>;

    /// Distances and features at the rows of an `n×3` matrix.
    fn geometry(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        points: &Matrix,
        with_gradient: bool,
    ) -> Result<GeometryOutput>;

    /// Colors in `[0,1]³` for `m` samples.
    fn radiance(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        points: &Matrix,
        normals: Var,
        dirs: &Matrix,
        feature: Var,
    ) -> Result<Var>;
}

/// Scene distance (`n×1`), its gradient (`n×3`) and the argmin object per row.
pub fn scene_sdf_and_normals(
    tape: &mut Tape,
    geometry: &GeometryOutput,
) -> Result<(Var, Var, Vec<usize>)> {
    let gradient = geometry
        .gradient
        .ok_or_else(|| Error::invalid("normals need geometry evaluated with gradients"))?;
    let d = tape.row_min(geometry.sdf)?;
    let arg = tape.row_argmin(d).expect("row_min node").to_vec();
    let n = geometry.num_points;
    let tiled: Vec<usize> = arg.iter().copied().cycle().take(3 * n).collect();
    let picked = tape.gather(gradient, tiled)?;
    let parts = (0..3)
        .map(|a| tape.slice_rows(picked, a * n, (a + 1) * n))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let normals = tape.concat_cols(&parts)?;
    Ok((d, normals, arg))
}

/// Per-object gradient norms `‖∇d_i‖` as an `n×K` node.
pub fn gradient_norms(tape: &mut Tape, geometry: &GeometryOutput) -> Result<Var> {
    let gradient = geometry
        .gradient
        .ok_or_else(|| Error::invalid("gradient norms need geometry evaluated with gradients"))?;
    let sq = tape.square(gradient)?;
    let sumsq = tape.sum_tiles(sq, 3)?;
    // The tiny offset keeps the square root differentiable at zero gradients.
    let shifted = tape.offset(sumsq, 1e-20)?;
    Ok(tape.sqrt(shifted)?)
}

/// Weights of `f_φ` and `f_θ` plus the unconstrained `log β`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    config: FieldConfig,
    params: Vec<Matrix>,
    log_beta: f64,
}

impl FieldModel {
    /// Geometric initialization with the configured radius.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        let radius = config.init_radius;
        init_geometric(&config, radius, seed)
    }

    pub fn from_parts(config: FieldConfig, params: Vec<Matrix>, log_beta: f64) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if params.len() != shapes.len() {
            return Err(Error::ShapeMismatch {
                op: "FieldModel::from_parts",
                expected: format!("{} tensors", shapes.len()),
                found: format!("{} tensors", params.len()),
            });
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != *s {
                return Err(Error::ShapeMismatch {
                    op: "FieldModel::from_parts",
                    expected: format!("tensor {i} of shape {s:?}"),
                    found: format!("{:?}", p.shape()),
                });
            }
            if p.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    what: format!("weight tensor {i}"),
                });
            }
        }
        if !log_beta.is_finite() {
            return Err(Error::NonFinite {
                what: "log beta".into(),
            });
        }
        let mut m = Self {
            config,
            params,
            log_beta,
        };
        m.clamp_beta();
        Ok(m)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn log_beta(&self) -> f64 {
        self.log_beta
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    /// Sets `log β`, clamped so that `β ≥ beta_min`.
    pub fn set_log_beta(&mut self, v: f64) {
        self.log_beta = v;
        self.clamp_beta();
    }

    fn clamp_beta(&mut self) {
        self.log_beta = self.log_beta.max(self.config.beta_min.ln());
    }

    fn phi_range(&self) -> std::ops::Range<usize> {
        0..2 * self.config.phi_layers
    }

    fn theta_range(&self) -> std::ops::Range<usize> {
        2 * self.config.phi_layers..2 * (self.config.phi_layers + self.config.theta_layers)
    }

    /// `(d, z)` at a single point.
    pub fn object_sdf_forward(&self, p: &Vec3) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let pts = Matrix::row(p.as_slice());
        let g = self.geometry(&mut tape, &b, &pts, false)?;
        Ok((
            tape.value(g.sdf).data().to_vec(),
            tape.value(g.feature).data().to_vec(),
        ))
    }

    /// Color at a single sample.
    pub fn radiance_forward(&self, p: &Vec3, n: &Vec3, dir: &Vec3, z: &[f64]) -> Result<[f64; 3]> {
        if z.len() != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "radiance_forward",
                expected: format!("feature of length {}", self.config.feature_dim),
                found: format!("{}", z.len()),
            });
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let normals = tape.constant(Matrix::row(n.as_slice()))?;
        let feature = tape.constant(Matrix::row(z))?;
        let c = self.radiance(
            &mut tape,
            &b,
            &Matrix::row(p.as_slice()),
            normals,
            &Matrix::row(dir.as_slice()),
            feature,
        )?;
        let v = tape.value(c).data();
        Ok([v[0], v[1], v[2]])
    }

    /// Distances for many points (`n×K`), evaluated in chunks without gradients.
    pub fn sdf_values(&self, points: &[Vec3]) -> Result<Matrix> {
        sdf_values(self, points)
    }

    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            shapes: self.params.iter().map(|p| [p.rows(), p.cols()]).collect(),
            weights: encode_matrices(&self.params),
            log_beta: self.log_beta,
            beta: self.beta(),
            gamma: self.config.gamma,
            num_objects: self.config.num_objects,
            pe_levels: [self.config.pe_levels_pos, self.config.pe_levels_dir],
        }
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format {} v{}",
                doc.format, doc.version
            )));
        }
        let shapes: Vec<(usize, usize)> = doc.shapes.iter().map(|[r, c]| (*r, *c)).collect();
        let params = decode_matrices(&doc.weights, &shapes)?;
        if doc.num_objects != doc.config.num_objects
            || doc.gamma != doc.config.gamma
            || doc.pe_levels != [doc.config.pe_levels_pos, doc.config.pe_levels_dir]
        {
            return Err(Error::invalid(
                "checkpoint header disagrees with its config",
            ));
        }
        Self::from_parts(doc.config.clone(), params, doc.log_beta)
    }

    fn mlp(
        &self,
        tape: &mut Tape,
        params: &[Var],
        mut h: Var,
        act: Activation,
        output_act: Option<UnaryOp>,
    ) -> Result<Var> {
        let layers = params.len() / 2;
        for l in 0..layers {
            let z = affine(tape, h, params[2 * l], params[2 * l + 1])?;
            h = if l + 1 < layers {
                tape.unary(z, act.op())?
            } else if let Some(op) = output_act {
                tape.unary(z, op)?
            } else {
                z
            };
        }
        Ok(h)
    }
}

const MODEL_FORMAT: &str = "objsdf-model";
const MODEL_VERSION: u32 = 1;

/// Serialized model: shapes plus little-endian `f64` weights in base64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub format: String,
    pub version: u32,
    pub config: FieldConfig,
    pub shapes: Vec<[usize; 2]>,
    pub weights: String,
    pub log_beta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub num_objects: usize,
    pub pe_levels: [usize; 2],
}

fn affine(tape: &mut Tape, h: Var, w: Var, b: Var) -> objsdf_autodiff::Result<Var> {
    let m = tape.matmul(h, w)?;
    tape.add(m, b)
}

/// Tags a tape failure inside a network with the layer it happened in.
fn at_layer<T>(network: &'static str, layer: usize, r: objsdf_autodiff::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        objsdf_autodiff::TapeError::NonFinite { .. } => Error::NonFiniteLayer { network, layer },
        other => Error::Tape(other),
    })
}

impl SceneModel for FieldModel {
    fn num_objects(&self) -> usize {
        self.config.num_objects
    }

    fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        let mut params = Vec::with_capacity(self.params.len());
        for p in &self.params {
            params.push(if trainable {
                tape.parameter(p.clone())?
            } else {
                tape.constant(p.clone())?
            });
        }
        let lb = Matrix::scalar(self.log_beta);
        let log_beta = if trainable {
            tape.parameter(lb)?
        } else {
            tape.constant(lb)?
        };
        let beta = tape.exp(log_beta)?;
        Ok(Binding {
            params,
            log_beta: Some(log_beta),
            beta,
        })
    }

    fn geometry(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        points: &Matrix,
        with_gradient: bool,
    ) -> Result<GeometryOutput> {
        let c = &self.config;
        let n = points.rows();
        let params = &binding.params[self.phi_range()];
        let act = c.phi_activation;
        let mut h = tape.constant(encode_rows(points, c.pe_levels_pos))?;
        let mut t = if with_gradient {
            Some(tape.constant(encode_tangents(points, c.pe_levels_pos))?)
        } else {
            None
        };
        let layers = c.phi_layers;
        for l in 0..layers - 1 {
            let (w, b) = (params[2 * l], params[2 * l + 1]);
            let z = at_layer("f_phi", l, affine(tape, h, w, b))?;
            h = at_layer("f_phi", l, tape.unary(z, act.op()))?;
            if let Some(tv) = t {
                let tw = at_layer("f_phi", l, tape.matmul(tv, w))?;
                let dact = act.derivative(tape, z, h)?;
                t = Some(at_layer("f_phi", l, tape.mul(tw, dact))?);
            }
        }
        let last = layers - 1;
        let (w, b) = (params[2 * last], params[2 * last + 1]);
        let out = at_layer("f_phi", last, affine(tape, h, w, b))?;
        let k = c.num_objects;
        let sdf = tape.slice_cols(out, 0, k)?;
        let feature = tape.slice_cols(out, k, k + c.feature_dim)?;
        let gradient = match t {
            Some(tv) => {
                let wk = tape.slice_cols(w, 0, k)?;
                Some(at_layer("f_phi", last, tape.matmul(tv, wk))?)
            }
            None => None,
        };
        Ok(GeometryOutput {
            sdf,
            feature,
            gradient,
            num_points: n,
        })
    }

    fn radiance(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        points: &Matrix,
        normals: Var,
        dirs: &Matrix,
        feature: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let p = if c.encode_theta_position {
            encode_rows(points, c.pe_levels_pos)
        } else {
            points.clone()
        };
        let p = tape.constant(p)?;
        let d = tape.constant(encode_rows(dirs, c.pe_levels_dir))?;
        let input = tape.concat_cols(&[p, normals, d, feature])?;
        let params = &binding.params[self.theta_range()];
        let out = self.mlp(
            tape,
            params,
            input,
            c.theta_activation,
            Some(UnaryOp::Sigmoid(1.0)),
        );
        out.map_err(|e| match e {
            Error::Tape(objsdf_autodiff::TapeError::NonFinite { .. }) => Error::NonFiniteLayer {
                network: "f_theta",
                layer: c.theta_layers - 1,
            },
            other => other,
        })
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, rows: usize, cols: usize) -> Matrix {
    let dist = Normal::new(mean, std).expect("finite normal parameters");
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
}

/// Weights for which every SDF channel approximates `‖p‖ - radius`.
///
/// Only the raw-coordinate inputs of the first layer are active at init; the
/// encoded frequencies start at zero. `f_θ` uses He-normal hidden layers.
pub fn init_geometric(config: &FieldConfig, radius: f64, seed: u64) -> Result<FieldModel> {
    let mut config = config.clone();
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::config(format!(
            "init radius must be positive, got {radius}"
        )));
    }
    config.init_radius = radius;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = config.layer_shapes();
    let mut params = Vec::with_capacity(shapes.len());
    let k = config.num_objects;
    let sqrt_pi = std::f64::consts::PI.sqrt();
    for l in 0..config.phi_layers {
        let (rows, cols) = shapes[2 * l];
        let w = if l + 1 == config.phi_layers {
            let mut w = Matrix::zeros(rows, cols);
            let sdf_cols = sample_normal(&mut rng, sqrt_pi / (rows as f64).sqrt(), 1e-4, rows, k);
            let feat_cols =
                sample_normal(&mut rng, 0.0, 1.0 / (rows as f64).sqrt(), rows, cols - k);
            for r in 0..rows {
                w.row_slice_mut(r)[..k].copy_from_slice(sdf_cols.row_slice(r));
                w.row_slice_mut(r)[k..].copy_from_slice(feat_cols.row_slice(r));
            }
            w
        } else if l == 0 {
            let mut w = Matrix::zeros(rows, cols);
            let raw = sample_normal(&mut rng, 0.0, 2f64.sqrt() / (cols as f64).sqrt(), 3, cols);
            for r in 0..3 {
                w.row_slice_mut(r).copy_from_slice(raw.row_slice(r));
            }
            w
        } else {
            sample_normal(
                &mut rng,
                0.0,
                2f64.sqrt() / (cols as f64).sqrt(),
                rows,
                cols,
            )
        };
        let mut b = Matrix::zeros(1, cols);
        if l + 1 == config.phi_layers {
            b.data_mut()[..k].fill(-radius);
        }
        params.push(w);
        params.push(b);
    }
    for l in 0..config.theta_layers {
        let (rows, cols) = shapes[2 * (config.phi_layers + l)];
        let std = if l + 1 == config.theta_layers {
            1.0 / (rows as f64).sqrt()
        } else {
            2f64.sqrt() / (rows as f64).sqrt()
        };
        params.push(sample_normal(&mut rng, 0.0, std, rows, cols));
        params.push(Matrix::zeros(1, cols));
    }
    let log_beta = config.beta_init.ln();
    FieldModel::from_parts(config, params, log_beta)
}

/// Points per tape when evaluating distances without gradients.
const EVAL_CHUNK: usize = 4096;

/// `n×K` distances of any model, evaluated in parallel chunks.
pub fn sdf_values(model: &dyn SceneModel, points: &[Vec3]) -> Result<Matrix> {
    use rayon::prelude::*;
    let k = model.num_objects();
    let chunks: Vec<Result<Vec<f64>>> = points
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, false)?;
            let m = Matrix::from_vec(
                chunk.len(),
                3,
                chunk.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
            );
            let g = model.geometry(&mut tape, &b, &m, false)?;
            Ok(tape.value(g.sdf).data().to_vec())
        })
        .collect();
    let mut data = Vec::with_capacity(points.len() * k);
    for c in chunks {
        data.extend(c?);
    }
    Ok(Matrix::from_vec(points.len(), k, data))
}

/// Gradient of `min_i d_i` at `p`; at ties the lowest-index object's gradient.
pub fn scene_normal(model: &dyn SceneModel, p: &Vec3) -> Result<Vec3> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false)?;
    let g = model.geometry(&mut tape, &b, &Matrix::row(p.as_slice()), true)?;
    let (_, normals, _) = scene_sdf_and_normals(&mut tape, &g)?;
    let v = tape.value(normals).data();
    let n = Vec3::new(v[0], v[1], v[2]);
    if n.iter().all(|x| x.is_finite()) {
        Ok(n)
    } else {
        Err(Error::NonFinite {
            what: "scene normal".into(),
        })
    }
}

/// Distance and gradient of one object channel.
pub type ChannelFn = Arc<dyn Fn(&Vec3) -> (f64, Vec3) + Send + Sync>;
/// Color from `(point, normal, view direction, closest object)`.
pub type ColorFn = Arc<dyn Fn(&Vec3, &Vec3, &Vec3, usize) -> [f64; 3] + Send + Sync>;

/// A closed-form stand-in for [`FieldModel`]: exact distances, analytic
/// gradients and a prescribed color, all recorded as constants.
#[derive(Clone)]
pub struct AnalyticField {
    channels: Vec<ChannelFn>,
    color: ColorFn,
    beta: f64,
    gamma: f64,
}

impl fmt::Debug for AnalyticField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticField")
            .field("channels", &self.channels.len())
            .field("beta", &self.beta)
            .field("gamma", &self.gamma)
            .finish()
    }
}

impl AnalyticField {
    pub fn new(channels: Vec<ChannelFn>, color: ColorFn, beta: f64, gamma: f64) -> Result<Self> {
        if channels.is_empty() || !(beta > 0.0) || !(gamma > 0.0) {
            return Err(Error::invalid(
                "analytic field needs channels and positive beta, gamma",
            ));
        }
        Ok(Self {
            channels,
            color,
            beta,
            gamma,
        })
    }

    /// One channel per object of `scene`, shaded with the scene light.
    pub fn from_scene(scene: &SceneSpec, beta: f64, gamma: f64) -> Result<Self> {
        let channels = (0..scene.num_objects())
            .map(|id| {
                let s = scene.clone();
                Arc::new(move |p: &Vec3| s.object_sdfs_with_gradient(p)[id]) as ChannelFn
            })
            .collect();
        let s = scene.clone();
        let color: ColorFn = Arc::new(move |p, n, _dir, _label| {
            let (_, prim) = s.closest_primitive(p);
            let len = n.norm();
            let unit = if len > 0.0 { n / len } else { Vec3::z() };
            s.light().shade(s.primitives()[prim].albedo, &unit)
        });
        Self::new(channels, color, beta, gamma)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn channel(&self, i: usize, p: &Vec3) -> (f64, Vec3) {
        (self.channels[i])(p)
    }
}

impl SceneModel for AnalyticField {
    fn num_objects(&self) -> usize {
        self.channels.len()
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn bind(&self, tape: &mut Tape, _trainable: bool) -> Result<Binding> {
        let beta = tape.constant(Matrix::scalar(self.beta))?;
        Ok(Binding {
            params: Vec::new(),
            log_beta: None,
            beta,
        })
    }

    fn geometry(
        &self,
        tape: &mut Tape,
        _binding: &Binding,
        points: &Matrix,
        with_gradient: bool,
    ) -> Result<GeometryOutput> {
        let n = points.rows();
        let k = self.channels.len();
        let mut sdf = Matrix::zeros(n, k);
        let mut grad = Matrix::zeros(3 * n, k);
        for r in 0..n {
            let p = Vec3::from_row_slice(points.row_slice(r));
            for (i, ch) in self.channels.iter().enumerate() {
                let (d, g) = ch(&p);
                sdf.set(r, i, d);
                for a in 0..3 {
                    grad.set(a * n + r, i, g[a]);
                }
            }
        }
        let sdf = tape.constant(sdf)?;
        let feature = tape.constant(Matrix::zeros(n, 0))?;
        let gradient = if with_gradient {
            Some(tape.constant(grad)?)
        } else {
            None
        };
        Ok(GeometryOutput {
            sdf,
            feature,
            gradient,
            num_points: n,
        })
    }

    fn radiance(
        &self,
        tape: &mut Tape,
        _binding: &Binding,
        points: &Matrix,
        normals: Var,
        dirs: &Matrix,
        _feature: Var,
    ) -> Result<Var> {
        let m = points.rows();
        let nv = tape.value(normals).clone();
        let mut out = Matrix::zeros(m, 3);
        for r in 0..m {
            let p = Vec3::from_row_slice(points.row_slice(r));
            let d: Vec<f64> = self.channels.iter().map(|ch| ch(&p).0).collect();
            let (_, label) = compose_min(&d)?;
            let c = (self.color)(
                &p,
                &Vec3::from_row_slice(nv.row_slice(r)),
                &Vec3::from_row_slice(dirs.row_slice(r)),
                label,
            );
            out.row_slice_mut(r).copy_from_slice(&c);
        }
        Ok(tape.constant(out)?)
    }
}
