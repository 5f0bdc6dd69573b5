//! Forward-only dense network kernels: the per-parameter MLP branch and the
//! transformer encoder stack that feeds the rank-one preconditioner updates.
//!
//! All weights live in one flat `Vec<f64>` described by a [`Layout`], which
//! keeps evolution-strategies perturbations a plain vector operation. Inside
//! the kernels activations are stored feature-major (`width x tokens`) so that
//! every token is a contiguous column.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NUM_FEATURES;
use crate::optimus::StepConfig;
use crate::rng;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Network shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Input width of both branches.
    pub num_features: usize,
    /// Number of linear layers in the MLP branch.
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Number of stacked encoders, and of rank-one terms per step.
    pub encoders: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_features: NUM_FEATURES,
            mlp_layers: 4,
            mlp_hidden: 128,
            d_model: 128,
            heads: 4,
            ffn_width: 512,
            encoders: 3,
        }
    }
}

impl ArchConfig {
    /// Reduced network used for single-machine meta-training runs.
    pub fn desk() -> Self {
        Self {
            num_features: NUM_FEATURES,
            mlp_layers: 4,
            mlp_hidden: 32,
            d_model: 32,
            heads: 4,
            ffn_width: 64,
            encoders: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_features", self.num_features),
            ("mlp_hidden", self.mlp_hidden),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if self.mlp_layers < 1 {
            return Err(Error::Argument("mlp_layers must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }

    fn mlp_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.num_features];
        widths.extend(std::iter::repeat_n(self.mlp_hidden, self.mlp_layers - 1));
        widths.push(2);
        widths
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    /// `[rows, cols]` for matrices (stored column-major), `[len]` for vectors.
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names, shapes and offsets of every tensor in the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    index: HashMap<String, usize>,
    len: usize,
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut layout = Layout {
            specs: Vec::new(),
            index: HashMap::new(),
            len: 0,
        };
        let widths = arch.mlp_widths();
        for (i, pair) in widths.windows(2).enumerate() {
            layout.linear(&format!("mlp.{i}"), pair[0], pair[1]);
        }
        let d = arch.d_model;
        layout.linear("embed", arch.num_features, d);
        for l in 0..arch.encoders {
            layout.push(&format!("enc.{l}.ln1.scale"), vec![d]);
            layout.push(&format!("enc.{l}.ln1.shift"), vec![d]);
            for proj in ["q", "k", "v", "o"] {
                layout.linear(&format!("enc.{l}.attn.{proj}"), d, d);
            }
            layout.push(&format!("enc.{l}.ln2.scale"), vec![d]);
            layout.push(&format!("enc.{l}.ln2.shift"), vec![d]);
            layout.linear(&format!("enc.{l}.ffn.0"), d, arch.ffn_width);
            layout.linear(&format!("enc.{l}.ffn.1"), arch.ffn_width, d);
        }
        for l in 0..arch.encoders {
            layout.linear(&format!("proj.{l}"), d, 1);
        }
        Ok(layout)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>) {
        let spec = TensorSpec {
            name: name.to_string(),
            offset: self.len,
            shape,
        };
        self.len += spec.len();
        self.index.insert(spec.name.clone(), self.specs.len());
        self.specs.push(spec);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.push(&format!("{prefix}.w"), vec![fan_out, fan_in]);
        self.push(&format!("{prefix}.b"), vec![fan_out]);
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// All meta-learned weights of the optimizer plus its fixed step constants.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerParams {
    pub arch: ArchConfig,
    pub step: StepConfig,
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl OptimizerParams {
    /// All-zero parameters (layer-norm scales included).
    pub fn zeros(arch: ArchConfig, step: StepConfig) -> Result<Self> {
        let layout = Arc::new(Layout::new(&arch)?);
        let values = vec![0.0; layout.len()];
        Ok(Self {
            arch,
            step,
            layout,
            values,
        })
    }

    pub fn from_values(arch: ArchConfig, step: StepConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch, step)?;
        if values.len() != p.values.len() {
            return Err(Error::DimensionMismatch {
                expected: p.values.len(),
                got: values.len(),
            });
        }
        p.values = values;
        Ok(p)
    }

    /// Same network with a different flat weight vector.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            arch: self.arch.clone(),
            step: self.step,
            layout: Arc::clone(&self.layout),
            values,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let s = self.layout.get(name)?;
        Some(&self.values[s.offset..s.offset + s.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.layout.get(name)?;
        let range = s.offset..s.offset + s.len();
        Some(&mut self.values[range])
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        let ranges: Vec<_> = self
            .layout
            .specs()
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.offset..s.offset + s.len())
            .collect();
        for r in ranges {
            self.values[r].fill(0.0);
        }
    }

    fn lin(&self, prefix: &str) -> Linear<'_> {
        let w = self
            .layout
            .get(&format!("{prefix}.w"))
            .expect("layout tensor");
        let b = self.tensor(&format!("{prefix}.b")).expect("layout tensor");
        Linear {
            w: DMatrixView::from_slice(
                &self.values[w.offset..w.offset + w.len()],
                w.shape[0],
                w.shape[1],
            ),
            b,
        }
    }

    fn vector(&self, name: &str) -> &[f64] {
        self.tensor(name).expect("layout tensor")
    }

    pub fn mlp(&self) -> MlpParams<'_> {
        MlpParams {
            layers: (0..self.arch.mlp_layers)
                .map(|i| self.lin(&format!("mlp.{i}")))
                .collect(),
        }
    }

    pub fn encoders(&self) -> EncoderParams<'_> {
        let blocks = (0..self.arch.encoders)
            .map(|l| EncoderBlock {
                ln1: LayerNorm {
                    scale: self.vector(&format!("enc.{l}.ln1.scale")),
                    shift: self.vector(&format!("enc.{l}.ln1.shift")),
                },
                q: self.lin(&format!("enc.{l}.attn.q")),
                k: self.lin(&format!("enc.{l}.attn.k")),
                v: self.lin(&format!("enc.{l}.attn.v")),
                o: self.lin(&format!("enc.{l}.attn.o")),
                ln2: LayerNorm {
                    scale: self.vector(&format!("enc.{l}.ln2.scale")),
                    shift: self.vector(&format!("enc.{l}.ln2.shift")),
                },
                ffn_in: self.lin(&format!("enc.{l}.ffn.0")),
                ffn_out: self.lin(&format!("enc.{l}.ffn.1")),
                heads: self.arch.heads,
            })
            .collect();
        EncoderParams {
            embed: self.lin("embed"),
            blocks,
            projections: (0..self.arch.encoders)
                .map(|l| self.lin(&format!("proj.{l}")))
                .collect(),
        }
    }
}

/// Seeded initialization: weights from a normal truncated at two standard
/// deviations with std `1/sqrt(fan_in)`, zero biases, unit layer-norm scales.
pub fn init_params(seed: u64, arch: &ArchConfig, step: StepConfig) -> Result<OptimizerParams> {
    let mut params = OptimizerParams::zeros(arch.clone(), step)?;
    let mut rng = rng::stream(seed, &[0x1A17]);
    let specs = params.layout.specs().to_vec();
    for spec in specs {
        let slot = &mut params.values[spec.offset..spec.offset + spec.len()];
        if spec.name.ends_with(".w") {
            let std = 1.0 / (spec.shape[1] as f64).sqrt();
            for v in slot {
                *v = std * truncated_normal(&mut rng);
            }
        } else if spec.name.ends_with(".scale") {
            slot.fill(1.0);
        }
    }
    Ok(params)
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Affine map applied to every token column: `y = W x + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear<'a> {
    pub w: DMatrixView<'a, f64>,
    pub b: &'a [f64],
}

impl Linear<'_> {
    pub fn fan_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.nrows()
    }

    /// `x` is `fan_in x tokens`.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = self.w * x;
        for mut col in y.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(self.b) {
                *v += b;
            }
        }
        y
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNorm<'a> {
    scale: &'a [f64],
    shift: &'a [f64],
}

impl LayerNorm<'_> {
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        let n = x.nrows() as f64;
        for mut col in y.column_iter_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, s), b) in col.iter_mut().zip(self.scale).zip(self.shift) {
                *v = (*v - mean) * inv * s + b;
            }
        }
        y
    }
}

fn relu_in_place(x: &mut DMatrix<f64>) {
    x.apply(|v| *v = v.max(0.0));
}

/// Borrowed view of the per-parameter MLP branch.
#[derive(Clone, Debug)]
pub struct MlpParams<'a> {
    pub layers: Vec<Linear<'a>>,
}

impl MlpParams<'_> {
    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }
}

/// Applies the MLP to every row of `z` (`N x F`), returning `N x 2` with
/// column 0 the log learning rate and column 1 the direction.
pub fn mlp_forward(p: &MlpParams<'_>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.ncols() != p.input_width() {
        return Err(Error::DimensionMismatch {
            expected: p.input_width(),
            got: z.ncols(),
        });
    }
    Ok(mlp_forward_tokens(p, &z.transpose()).transpose())
}

/// Same as [`mlp_forward`] on feature-major input (`F x N`), output `2 x N`.
pub(crate) fn mlp_forward_tokens(p: &MlpParams<'_>, zt: &DMatrix<f64>) -> DMatrix<f64> {
    let last = p.layers.len() - 1;
    let mut h = p.layers[0].forward(zt);
    if last > 0 {
        relu_in_place(&mut h);
    }
    for (i, layer) in p.layers.iter().enumerate().skip(1) {
        h = layer.forward(&h);
        if i < last {
            relu_in_place(&mut h);
        }
    }
    h
}

#[derive(Clone, Debug)]
struct EncoderBlock<'a> {
    ln1: LayerNorm<'a>,
    q: Linear<'a>,
    k: Linear<'a>,
    v: Linear<'a>,
    o: Linear<'a>,
    ln2: LayerNorm<'a>,
    ffn_in: Linear<'a>,
    ffn_out: Linear<'a>,
    heads: usize,
}

impl EncoderBlock<'_> {
    fn attention(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, n) = x.shape();
        let dh = d / self.heads;
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = DMatrix::zeros(d, n);
        for h in 0..self.heads {
            let rows = h * dh;
            // column j holds query j's scores over all keys
            let mut scores = k.rows(rows, dh).tr_mul(&q.rows(rows, dh));
            scores *= scale;
            for mut col in scores.column_iter_mut() {
                softmax_in_place(col.as_mut_slice());
            }
            let head = v.rows(rows, dh) * &scores;
            concat.rows_mut(rows, dh).copy_from(&head);
        }
        self.o.forward(&concat)
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x + self.attention(&self.ln1.forward(x));
        let mut inner = self.ffn_in.forward(&self.ln2.forward(&h));
        relu_in_place(&mut inner);
        h += self.ffn_out.forward(&inner);
        h
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Borrowed view of the embedding, encoder stack and per-layer projections.
#[derive(Clone, Debug)]
pub struct EncoderParams<'a> {
    embed: Linear<'a>,
    blocks: Vec<EncoderBlock<'a>>,
    projections: Vec<Linear<'a>>,
}

impl EncoderParams<'_> {
    pub fn input_width(&self) -> usize {
        self.embed.fan_in()
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Runs the encoder stack over the `N` parameter positions of `z` (`N x F`)
/// and returns one length-`N` vector per encoder layer. No positional
/// encoding is added, so the map is permutation equivariant.
pub fn encoder_stack_forward(p: &EncoderParams<'_>, z: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    if z.ncols() != p.input_width() {
        return Err(Error::DimensionMismatch {
            expected: p.input_width(),
            got: z.ncols(),
        });
    }
    Ok(encoder_stack_forward_tokens(p, &z.transpose()))
}

pub(crate) fn encoder_stack_forward_tokens(
    p: &EncoderParams<'_>,
    zt: &DMatrix<f64>,
) -> Vec<Vec<f64>> {
    let mut e = p.embed.forward(zt);
    let mut out = Vec::with_capacity(p.blocks.len());
    for (block, proj) in p.blocks.iter().zip(&p.projections) {
        e = block.forward(&e);
        out.push(proj.forward(&e).as_slice().to_vec());
    }
    out
}
