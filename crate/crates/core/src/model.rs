//! Learnable state and the differentiable forward pipeline.
//!
//! Parameters live in one flat list whose order is a pure function of the
//! [`Architecture`]; that order is also the checkpoint block order.

use dcmcs_tensor::{Graph, Matrix, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    FusionLogits,
    SemanticHead,
    InstanceHead,
    AttentionQuery,
    AttentionOutput,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::FusionLogits,
        ParamGroup::SemanticHead,
        ParamGroup::InstanceHead,
        ParamGroup::AttentionQuery,
        ParamGroup::AttentionOutput,
    ];

    pub fn is_autoencoder(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::Decoder)
    }
}

/// Which per-view features feed the pair-weight attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    /// Semantic features `C^v` (and `Ĉ`).
    #[default]
    Semantic,
    /// Instance features `H^v` (and `Ĥ`).
    Instance,
}

/// Treatment of the attention output projection `W_O`, which no loss consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputProjection {
    /// Not allocated at all.
    Omitted,
    /// Allocated and evaluated, but kept out of the optimizer.
    #[default]
    Inert,
    /// Allocated and handed to the optimizer (receives zero gradient).
    Trained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub semantic_hidden: usize,
    pub instance_dim: usize,
    /// One semantic and one instance head for every view (false gives
    /// `V + 1` heads of each kind, the last serving the fusion view).
    pub shared_heads: bool,
    pub weight_source: WeightSource,
    /// Whether the fusion-view features join the attention input.
    pub weights_include_fusion: bool,
    /// Cut the gradient path from the pair weights into the features.
    pub detach_weights: bool,
    pub output_projection: OutputProjection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![500, 500, 2000],
            latent_dim: 512,
            semantic_hidden: 512,
            instance_dim: 256,
            shared_heads: true,
            weight_source: WeightSource::Semantic,
            weights_include_fusion: true,
            detach_weights: false,
            output_projection: OutputProjection::Inert,
        }
    }
}

/// Everything that determines parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub view_dims: Vec<usize>,
    pub n_clusters: usize,
    pub model: ModelConfig,
}

impl Architecture {
    pub fn new(view_dims: Vec<usize>, n_clusters: usize, model: ModelConfig) -> Result<Self> {
        let arch = Self {
            view_dims,
            n_clusters,
            model,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if self.view_dims.is_empty() || self.view_dims.contains(&0) {
            return Err(Error::Config(
                "view dims must be non-empty and positive".into(),
            ));
        }
        if self.n_clusters < 2 {
            return Err(Error::Config("n_clusters must be >= 2".into()));
        }
        if m.hidden_dims.contains(&0)
            || m.latent_dim == 0
            || m.semantic_hidden == 0
            || m.instance_dim == 0
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn n_heads(&self) -> usize {
        if self.model.shared_heads {
            1
        } else {
            self.n_views() + 1
        }
    }

    /// Side `m` of the attention matrices.
    pub fn attention_dim(&self) -> usize {
        let sources = self.n_views() + usize::from(self.model.weights_include_fusion);
        let width = match self.model.weight_source {
            WeightSource::Semantic => self.n_clusters,
            WeightSource::Instance => self.model.instance_dim,
        };
        sources * width
    }

    /// Encoder layer widths for view `v`, input first.
    pub fn encoder_dims(&self, v: usize) -> Vec<usize> {
        let mut dims = vec![self.view_dims[v]];
        dims.extend(&self.model.hidden_dims);
        dims.push(self.model.latent_dim);
        dims
    }

    pub fn decoder_dims(&self, v: usize) -> Vec<usize> {
        let mut dims = self.encoder_dims(v);
        dims.reverse();
        dims
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let dense = |dims: &[usize]| -> usize { dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum() };
        let m = &self.model;
        let autoencoders: usize = (0..self.n_views())
            .map(|v| dense(&self.encoder_dims(v)) + dense(&self.decoder_dims(v)))
            .sum();
        let semantic = dense(&[m.latent_dim, m.semantic_hidden, self.n_clusters]);
        let instance = dense(&[m.latent_dim, m.instance_dim]);
        let side = self.attention_dim();
        let n_attn = if m.output_projection == OutputProjection::Omitted {
            2
        } else {
            3
        };
        autoencoders
            + self.n_views()
            + self.n_heads() * (semantic + instance)
            + n_attn * side * side
    }

    /// Head serving view `v`, or the fusion view for `None`.
    pub fn head_index(&self, view: Option<usize>) -> usize {
        match (self.model.shared_heads, view) {
            (true, _) => 0,
            (false, Some(v)) => v,
            (false, None) => self.n_views(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    encoders: Vec<Vec<Dense>>,
    decoders: Vec<Vec<Dense>>,
    fusion: usize,
    semantic: Vec<[Dense; 2]>,
    instance: Vec<Dense>,
    query1: usize,
    query2: usize,
    output: Option<usize>,
}

/// Per-batch tensors consumed by the losses.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub inputs: Vec<Var>,
    pub reconstructions: Vec<Var>,
    pub z: Vec<Var>,
    pub z_hat: Var,
    pub c: Vec<Var>,
    pub c_hat: Var,
    pub h: Vec<Var>,
    pub h_hat: Var,
    /// `1 x V` effective fusion weights.
    pub fusion_weights: Var,
    pub pair_weights: Var,
    /// `O = C W_O`, computed when `W_O` exists but consumed by nothing.
    pub attention_output: Option<Var>,
}

/// Graph handles for every parameter, in model order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcmcsModel<T> {
    arch: Architecture,
    params: Vec<Param<T>>,
    layout: Layout,
}

struct Builder<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, group: ParamGroup, value: Matrix<T>) -> usize {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    fn dense(&mut self, prefix: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: self.push(
                format!("{prefix}.weight"),
                group,
                Matrix::zeros(fan_in, fan_out),
            ),
            bias: self.push(format!("{prefix}.bias"), group, Matrix::zeros(1, fan_out)),
        }
    }

    fn stack(&mut self, prefix: &str, group: ParamGroup, dims: &[usize]) -> Vec<Dense> {
        dims.windows(2)
            .enumerate()
            .map(|(l, w)| self.dense(&format!("{prefix}.layer{l}"), group, w[0], w[1]))
            .collect()
    }
}

impl<T: Scalar> DcmcsModel<T> {
    /// Allocates every parameter and fills weight matrices with
    /// Glorot-uniform draws from the run seed; biases and fusion logits start
    /// at zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut model = Self::zeroed(arch);
        let mut rng = rng(seed, Stream::Init);
        let weights: Vec<usize> = model.weight_indices();
        for i in weights {
            let value = &mut model.params[i].value;
            let (fan_in, fan_out) = value.shape();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in value.data_mut() {
                *x = T::from_f64_lossy(rng.random_range(-limit..limit));
            }
        }
        Ok(model)
    }

    /// Same layout as [`new`](Self::new) with every value zero.
    pub fn zeroed(arch: Architecture) -> Self {
        let mut b = Builder { params: Vec::new() };
        let v_count = arch.n_views();
        let encoders = (0..v_count)
            .map(|v| {
                b.stack(
                    &format!("encoder.{v}"),
                    ParamGroup::Encoder,
                    &arch.encoder_dims(v),
                )
            })
            .collect();
        let decoders = (0..v_count)
            .map(|v| {
                b.stack(
                    &format!("decoder.{v}"),
                    ParamGroup::Decoder,
                    &arch.decoder_dims(v),
                )
            })
            .collect();
        let fusion = b.push(
            "fusion.logits".into(),
            ParamGroup::FusionLogits,
            Matrix::zeros(1, v_count),
        );
        let m = &arch.model;
        let semantic = (0..arch.n_heads())
            .map(|h| {
                [
                    b.dense(
                        &format!("semantic.{h}.layer0"),
                        ParamGroup::SemanticHead,
                        m.latent_dim,
                        m.semantic_hidden,
                    ),
                    b.dense(
                        &format!("semantic.{h}.layer1"),
                        ParamGroup::SemanticHead,
                        m.semantic_hidden,
                        arch.n_clusters,
                    ),
                ]
            })
            .collect();
        let instance = (0..arch.n_heads())
            .map(|h| {
                b.dense(
                    &format!("instance.{h}"),
                    ParamGroup::InstanceHead,
                    m.latent_dim,
                    m.instance_dim,
                )
            })
            .collect();
        let side = arch.attention_dim();
        let query1 = b.push(
            "attention.q1".into(),
            ParamGroup::AttentionQuery,
            Matrix::zeros(side, side),
        );
        let query2 = b.push(
            "attention.q2".into(),
            ParamGroup::AttentionQuery,
            Matrix::zeros(side, side),
        );
        let output = (m.output_projection != OutputProjection::Omitted).then(|| {
            b.push(
                "attention.o".into(),
                ParamGroup::AttentionOutput,
                Matrix::zeros(side, side),
            )
        });
        Self {
            arch,
            params: b.params,
            layout: Layout {
                encoders,
                decoders,
                fusion,
                semantic,
                instance,
                query1,
                query2,
                output,
            },
        }
    }

    fn weight_indices(&self) -> Vec<usize> {
        let l = &self.layout;
        let dense = l
            .encoders
            .iter()
            .chain(&l.decoders)
            .flatten()
            .chain(l.semantic.iter().flatten())
            .chain(&l.instance)
            .map(|d| d.weight);
        let mut out: Vec<usize> = dense.collect();
        out.extend([l.query1, l.query2]);
        out.extend(l.output);
        out.sort_unstable();
        out
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Current `softmax(logits)` fusion weights.
    pub fn fusion_weights(&self) -> Vec<f64> {
        let logits: Vec<f64> = self.params[self.layout.fusion]
            .value
            .data()
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    /// Records every parameter on `g`; groups rejected by `trainable` become
    /// constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable(p.group)))
            .collect();
        Bound { vars }
    }

    fn check_cols(&self, g: &Graph<T>, x: Var, want: usize, what: &str) -> Result<()> {
        let got = g.shape(x).1;
        if got != want {
            return Err(Error::Shape(format!(
                "{what} expects {want} columns, got {got}"
            )));
        }
        Ok(())
    }

    fn dense(&self, g: &mut Graph<T>, b: &Bound, layer: Dense, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.vars[layer.weight])?;
        Ok(g.add_row_vector(y, b.vars[layer.bias])?)
    }

    fn mlp(&self, g: &mut Graph<T>, b: &Bound, layers: &[Dense], mut x: Var) -> Result<Var> {
        for (l, &layer) in layers.iter().enumerate() {
            x = self.dense(g, b, layer, x)?;
            if l + 1 < layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    fn check_view(&self, v: usize) -> Result<()> {
        if v >= self.arch.n_views() {
            return Err(Error::Shape(format!(
                "view {v} out of range for a {}-view model",
                self.arch.n_views()
            )));
        }
        Ok(())
    }

    /// `Z^v`: ReLU MLP with a linear final layer.
    pub fn encode(&self, g: &mut Graph<T>, b: &Bound, v: usize, x: Var) -> Result<Var> {
        self.check_view(v)?;
        self.check_cols(g, x, self.arch.view_dims[v], &format!("encoder {v}"))?;
        self.mlp(g, b, &self.layout.encoders[v], x)
    }

    pub fn decode(&self, g: &mut Graph<T>, b: &Bound, v: usize, z: Var) -> Result<Var> {
        self.check_view(v)?;
        self.check_cols(g, z, self.arch.model.latent_dim, &format!("decoder {v}"))?;
        self.mlp(g, b, &self.layout.decoders[v], z)
    }

    /// Returns `(Ẑ, w)` with `w = softmax(logits)` as a `1 x V` row.
    pub fn fuse(&self, g: &mut Graph<T>, b: &Bound, z: &[Var]) -> Result<(Var, Var)> {
        if z.len() != self.arch.n_views() {
            return Err(Error::Shape(format!(
                "{} view features for a {}-view model",
                z.len(),
                self.arch.n_views()
            )));
        }
        let w = g.softmax_rows(b.vars[self.layout.fusion]);
        let mut fused: Option<Var> = None;
        for (v, &zv) in z.iter().enumerate() {
            let wv = g.select(w, 0, v)?;
            let term = g.scale_by(zv, wv)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok((fused.expect("at least one view"), w))
    }

    /// Row-stochastic `N x K` cluster probabilities from head `head`.
    pub fn semantic_features(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        head: usize,
        z: Var,
    ) -> Result<Var> {
        self.check_cols(g, z, self.arch.model.latent_dim, "semantic head")?;
        let [l0, l1] = self.layout.semantic[head];
        let hidden = self.dense(g, b, l0, z)?;
        let logits = self.dense(g, b, l1, hidden)?;
        Ok(g.softmax_rows(logits))
    }

    /// Row-normalized `N x d_h` instance features from head `head`.
    pub fn instance_features(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        head: usize,
        z: Var,
    ) -> Result<Var> {
        self.check_cols(g, z, self.arch.model.latent_dim, "instance head")?;
        let h = self.dense(g, b, self.layout.instance[head], z)?;
        Ok(g.row_l2_normalize(h))
    }

    /// Attention over the concatenated per-view features: returns
    /// `(softmax_rows(Q1 Q2ᵀ / √m), O)`.
    ///
    /// `fused` is appended to the concatenation when the architecture says so.
    pub fn pair_weight_matrix(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        views: &[Var],
        fused: Var,
    ) -> Result<(Var, Option<Var>)> {
        let mut parts = views.to_vec();
        if self.arch.model.weights_include_fusion {
            parts.push(fused);
        }
        if self.arch.model.detach_weights {
            parts = parts.into_iter().map(|p| g.detach(p)).collect();
        }
        let c = g.concat_cols(&parts)?;
        let m = self.arch.attention_dim();
        self.check_cols(g, c, m, "attention")?;
        let q1 = g.matmul(c, b.vars[self.layout.query1])?;
        let q2 = g.matmul(c, b.vars[self.layout.query2])?;
        let q2t = g.transpose(q2);
        let logits = g.matmul(q1, q2t)?;
        let scaled = g.scale(logits, T::from_f64_lossy(1.0 / (m as f64).sqrt()));
        let r = g.softmax_rows(scaled);
        let o = match self.layout.output {
            Some(i) => Some(g.matmul(c, b.vars[i])?),
            None => None,
        };
        Ok((r, o))
    }

    fn inputs(&self, g: &mut Graph<T>, batch: &[Matrix<T>]) -> Result<Vec<Var>> {
        if batch.len() != self.arch.n_views() {
            return Err(Error::Shape(format!(
                "batch has {} views, model expects {}",
                batch.len(),
                self.arch.n_views()
            )));
        }
        let n = batch[0].rows();
        if batch.iter().any(|x| x.rows() != n) {
            return Err(Error::Shape("views in a batch differ in row count".into()));
        }
        Ok(batch.iter().map(|x| g.constant(x.clone())).collect())
    }

    /// Inputs, latent codes and reconstructions only; enough for pretraining.
    pub fn forward_autoencoders(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        batch: &[Matrix<T>],
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let inputs = self.inputs(g, batch)?;
        let mut z = Vec::with_capacity(inputs.len());
        let mut rec = Vec::with_capacity(inputs.len());
        for (v, &x) in inputs.iter().enumerate() {
            let zv = self.encode(g, b, v, x)?;
            rec.push(self.decode(g, b, v, zv)?);
            z.push(zv);
        }
        Ok((inputs, z, rec))
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        batch: &[Matrix<T>],
    ) -> Result<ForwardOutputs> {
        let (inputs, z, reconstructions) = self.forward_autoencoders(g, b, batch)?;
        let (z_hat, fusion_weights) = self.fuse(g, b, &z)?;
        let arch = &self.arch;
        let mut c = Vec::with_capacity(z.len());
        let mut h = Vec::with_capacity(z.len());
        for (v, &zv) in z.iter().enumerate() {
            let head = arch.head_index(Some(v));
            c.push(self.semantic_features(g, b, head, zv)?);
            h.push(self.instance_features(g, b, head, zv)?);
        }
        let fusion_head = arch.head_index(None);
        let c_hat = self.semantic_features(g, b, fusion_head, z_hat)?;
        let h_hat = self.instance_features(g, b, fusion_head, z_hat)?;
        let (pair_weights, attention_output) = match arch.model.weight_source {
            WeightSource::Semantic => self.pair_weight_matrix(g, b, &c, c_hat)?,
            WeightSource::Instance => self.pair_weight_matrix(g, b, &h, h_hat)?,
        };
        Ok(ForwardOutputs {
            inputs,
            reconstructions,
            z,
            z_hat,
            c,
            c_hat,
            h,
            h_hat,
            fusion_weights,
            pair_weights,
            attention_output,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture::new(
            vec![3, 5],
            2,
            ModelConfig {
                hidden_dims: vec![4],
                latent_dim: 6,
                semantic_hidden: 6,
                instance_dim: 3,
                ..ModelConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn layout_is_deterministic_and_named() {
        let a = DcmcsModel::<f64>::new(tiny(), 9).unwrap();
        let b = DcmcsModel::<f64>::new(tiny(), 9).unwrap();
        assert_eq!(a, b);
        let names: Vec<_> = a.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "encoder.0.layer0.weight");
        assert!(names.contains(&"fusion.logits"));
        assert_eq!(*names.last().unwrap(), "attention.o");
        assert_eq!(a.parameter_count(), a.architecture().parameter_count());
    }

    #[test]
    fn biases_and_logits_start_at_zero() {
        let m = DcmcsModel::<f64>::new(tiny(), 1).unwrap();
        for p in m.params() {
            if p.name.ends_with(".bias") || p.group == ParamGroup::FusionLogits {
                assert!(p.value.data().iter().all(|&x| x == 0.0), "{}", p.name);
            } else {
                assert!(p.value.data().iter().any(|&x| x != 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn attention_dim_follows_source() {
        let mut arch = tiny();
        assert_eq!(arch.attention_dim(), 6);
        arch.model.weights_include_fusion = false;
        assert_eq!(arch.attention_dim(), 4);
        arch.model.weight_source = WeightSource::Instance;
        assert_eq!(arch.attention_dim(), 6);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = DcmcsModel::<f64>::new(tiny(), 1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, |_| true);
        let x = g.constant(Matrix::zeros(2, 4));
        assert!(matches!(m.encode(&mut g, &b, 0, x), Err(Error::Shape(_))));
        assert!(m.encode(&mut g, &b, 2, x).is_err());
    }
}
