//! Embedding backbones: the four-block convolutional network over log-Mel
//! patches, and a small MLP over pooled feature vectors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph, Params, Tensor, Var};
use crate::error::AutodiffError;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Conv4,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// `[mel_bins, frames]` for conv4, `[dim]` for mlp.
    pub input_shape: Vec<usize>,
    /// Conv4 channel widths, one per block.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// MLP hidden layer sizes.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Conv4 only: expected size of the time-pooled feature vector
    /// (`widths[3] * mel_bins / 16`). Checked when set.
    #[serde(default)]
    pub pre_projection_dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_widths() -> Vec<usize> {
    vec![64, 64, 64, 128]
}

fn default_embedding_dim() -> usize {
    128
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Conv4,
            input_shape: vec![128, 122],
            widths: default_widths(),
            hidden: Vec::new(),
            embedding_dim: default_embedding_dim(),
            pre_projection_dim: None,
            seed: 0,
        }
    }
}

fn bad(msg: String) -> AutodiffError {
    AutodiffError::InvalidArgument { op: "backbone", msg }
}

impl BackboneConfig {
    /// MLP with layer sizes `dims = [input, hidden.., embedding]`.
    pub fn mlp(dims: &[usize], seed: u64) -> Self {
        BackboneConfig {
            kind: BackboneKind::Mlp,
            input_shape: vec![dims[0]],
            widths: Vec::new(),
            hidden: dims[1..dims.len() - 1].to_vec(),
            embedding_dim: *dims.last().unwrap(),
            pre_projection_dim: None,
            seed,
        }
    }

    pub fn conv4(mel_bins: usize, frames: usize, widths: [usize; 4], embedding_dim: usize, seed: u64) -> Self {
        BackboneConfig {
            kind: BackboneKind::Conv4,
            input_shape: vec![mel_bins, frames],
            widths: widths.to_vec(),
            hidden: Vec::new(),
            embedding_dim,
            pre_projection_dim: None,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Shape after the last pooling block: `(channels, mel_rows, frames)`.
    pub fn final_feature_map(&self) -> Result<(usize, usize, usize), AutodiffError> {
        let (mut h, mut w) = match self.input_shape[..] {
            [h, w] => (h, w),
            _ => return Err(bad(format!("conv4 input must be [mel, frames], got {:?}", self.input_shape))),
        };
        for block in 0..4 {
            if h < 2 || w < 2 {
                return Err(bad(format!(
                    "input {:?} too small for block {} pooling ({h}x{w})",
                    self.input_shape,
                    block + 1
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok((self.widths[3], h, w))
    }

    /// Width of the time-pooled vector fed to the projection (conv4), or of
    /// the last hidden layer (mlp).
    pub fn projection_input(&self) -> Result<usize, AutodiffError> {
        match self.kind {
            BackboneKind::Conv4 => {
                let (c, h, _) = self.final_feature_map()?;
                Ok(c * h)
            }
            BackboneKind::Mlp => Ok(*self.hidden.last().unwrap_or(&self.input_shape[0])),
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        if self.embedding_dim == 0 {
            return Err(bad("embedding dim must be positive".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(bad(format!("input shape {:?} has a zero axis", self.input_shape)));
        }
        match self.kind {
            BackboneKind::Conv4 => {
                if self.widths.len() != 4 || self.widths.contains(&0) {
                    return Err(bad(format!("conv4 needs four positive widths, got {:?}", self.widths)));
                }
                let flat = self.projection_input()?;
                if let Some(expected) = self.pre_projection_dim {
                    if flat != expected {
                        return Err(bad(format!(
                            "channels x mel rows = {flat}, configured pre-projection dim is {expected}"
                        )));
                    }
                }
            }
            BackboneKind::Mlp => {
                if self.input_shape.len() != 1 {
                    return Err(bad(format!("mlp input must be 1-D, got {:?}", self.input_shape)));
                }
                if self.hidden.contains(&0) {
                    return Err(bad("mlp hidden sizes must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// He-uniform weights with fan-in scaling, zero biases, unit BN scale.
pub fn init_params(config: &BackboneConfig) -> Result<Params, AutodiffError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut he = |shape: &[usize], fan_in: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let mut p = Params::default();
    match config.kind {
        BackboneKind::Conv4 => {
            let mut cin = 1;
            for (i, &cout) in config.widths.iter().enumerate() {
                p.insert(format!("conv{i}.weight"), he(&[cout, cin, 3, 3], cin * 9));
                p.insert(format!("bn{i}.gamma"), Tensor::filled(&[cout], 1.0));
                p.insert(format!("bn{i}.beta"), Tensor::zeros(&[cout]));
                p.insert_buffer(format!("bn{i}.running_mean"), Tensor::zeros(&[cout]));
                p.insert_buffer(format!("bn{i}.running_var"), Tensor::filled(&[cout], 1.0));
                cin = cout;
            }
            let flat = config.projection_input()?;
            p.insert("proj.weight", he(&[flat, config.embedding_dim], flat));
            p.insert("proj.bias", Tensor::zeros(&[config.embedding_dim]));
        }
        BackboneKind::Mlp => {
            let mut dims = vec![config.input_shape[0]];
            dims.extend(&config.hidden);
            dims.push(config.embedding_dim);
            for (i, pair) in dims.windows(2).enumerate() {
                p.insert(format!("fc{i}.weight"), he(&[pair[0], pair[1]], pair[0]));
                p.insert(format!("fc{i}.bias"), Tensor::zeros(&[pair[1]]));
            }
        }
    }
    Ok(p)
}

/// Result of a forward pass: the `[B, embedding_dim]` output and the
/// train-mode batch-norm nodes whose statistics feed the running averages.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub output: Var,
    pub bn_nodes: Vec<(usize, Var)>,
}

/// Forward a batch through the backbone. `batch` is `[B, ..input_shape]`.
pub fn embed(
    config: &BackboneConfig,
    params: &Params,
    bound: &crate::autodiff::Bound,
    g: &mut Graph,
    batch: Var,
    mode: Mode,
) -> Result<Embedded, AutodiffError> {
    let shape = g.shape(batch).to_vec();
    if shape.len() != config.input_shape.len() + 1 || shape[1..] != config.input_shape[..] {
        return Err(AutodiffError::ShapeMismatch {
            op: "embed",
            left: shape,
            right: config.input_shape.clone(),
        });
    }
    let b = shape[0];
    let mut bn_nodes = Vec::new();
    let output = match config.kind {
        BackboneKind::Conv4 => {
            let mut x = g.reshape(batch, &[b, 1, shape[1], shape[2]])?;
            for i in 0..4 {
                x = g.conv2d(x, bound.var(&format!("conv{i}.weight")))?;
                let bn_mode = match mode {
                    Mode::Train => BatchNormMode::Train,
                    Mode::Eval => BatchNormMode::Eval {
                        mean: params.buffer(&format!("bn{i}.running_mean")).unwrap().data().to_vec(),
                        var: params.buffer(&format!("bn{i}.running_var")).unwrap().data().to_vec(),
                    },
                };
                x = g.batch_norm(
                    x,
                    bound.var(&format!("bn{i}.gamma")),
                    bound.var(&format!("bn{i}.beta")),
                    &bn_mode,
                )?;
                if mode == Mode::Train {
                    bn_nodes.push((i, x));
                }
                x = g.relu(x);
                x = g.max_pool2d(x)?;
            }
            // [B, C, mel, time] -> max over time -> [B, C * mel]
            let pooled = g.max_over_axis(x, 3)?;
            let s = g.shape(pooled).to_vec();
            let flat = g.reshape(pooled, &[b, s[1] * s[2]])?;
            g.linear(flat, bound.var("proj.weight"), bound.var("proj.bias"))?
        }
        BackboneKind::Mlp => {
            let layers = config.hidden.len() + 1;
            let mut x = batch;
            for i in 0..layers {
                x = g.linear(x, bound.var(&format!("fc{i}.weight")), bound.var(&format!("fc{i}.bias")))?;
                if i + 1 < layers {
                    x = g.relu(x);
                }
            }
            x
        }
    };
    Ok(Embedded { output, bn_nodes })
}

/// Fold the batch statistics of a train-mode pass into the running buffers
/// (momentum 0.1, unbiased variance).
pub fn update_running_stats(params: &mut Params, g: &Graph, embedded: &Embedded) {
    for &(i, node) in &embedded.bn_nodes {
        let Some((mean, var)) = g.batch_norm_stats(node) else { continue };
        let shape = g.shape(node);
        let count: usize = shape[0] * shape[2..].iter().product::<usize>();
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let rm = params.buffer_mut(&format!("bn{i}.running_mean")).unwrap();
        for (r, m) in rm.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = params.buffer_mut(&format!("bn{i}.running_var")).unwrap();
        for (r, v) in rv.data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

/// Eval-mode embedding of plain values, `[B, ..input] -> [B, embedding_dim]`.
pub fn embed_values(config: &BackboneConfig, params: &Params, batch: &Tensor) -> Result<Tensor, AutodiffError> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(batch.clone());
    let e = embed(config, params, &bound, &mut g, x, Mode::Eval)?;
    Ok(g.value(e.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_conv() -> BackboneConfig {
        BackboneConfig::conv4(16, 16, [2, 2, 2, 2], 8, 11)
    }

    #[test]
    fn init_is_deterministic() {
        let c = tiny_conv();
        assert_eq!(init_params(&c).unwrap(), init_params(&c).unwrap());
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(init_params(&c).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn full_scale_shape_trace() {
        let mut c = BackboneConfig::conv4(128, 126, [64, 64, 64, 128], 128, 0);
        c.pre_projection_dim = Some(1024);
        c.validate().unwrap();
        assert_eq!(c.final_feature_map().unwrap(), (128, 8, 7));
        assert_eq!(c.projection_input().unwrap(), 1024);
        assert_eq!(BackboneConfig::default().projection_input().unwrap(), 1024);
        c.widths = vec![64; 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn too_small_input_is_rejected() {
        let c = BackboneConfig::conv4(8, 64, [2, 2, 2, 2], 8, 0);
        assert!(init_params(&c).is_err());
        let mut c = tiny_conv();
        c.widths.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn mlp_parameter_count() {
        let p = init_params(&BackboneConfig::mlp(&[64, 256, 128], 0)).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.get("fc0.weight").unwrap().shape(), &[64, 256]);
        assert_eq!(p.get("fc1.bias").unwrap().shape(), &[128]);
        assert!(p.get("fc1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_embedding_is_rowwise() {
        let c = tiny_conv();
        let p = init_params(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![3, 16, 16], data.clone()).unwrap();
        let out = embed_values(&c, &p, &batch).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        assert_eq!(out, embed_values(&c, &p, &batch).unwrap());

        // Reverse the batch: rows come back reversed.
        let mut rev = Vec::new();
        for i in (0..3).rev() {
            rev.extend_from_slice(&data[i * 256..(i + 1) * 256]);
        }
        let out_rev = embed_values(&c, &p, &Tensor::new(vec![3, 16, 16], rev).unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), out_rev.row(2 - i));
        }
        let single = embed_values(&c, &p, &Tensor::new(vec![1, 16, 16], data[..256].to_vec()).unwrap()).unwrap();
        assert_eq!(single.row(0), out.row(0));
    }

    #[test]
    fn shape_mismatch_on_embed() {
        let c = tiny_conv();
        let p = init_params(&c).unwrap();
        assert!(embed_values(&c, &p, &Tensor::zeros(&[2, 16, 15])).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let c = tiny_conv();
        let mut p = init_params(&c).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let x = g.constant(Tensor::filled(&[2, 16, 16], 3.0));
        let e = embed(&c, &p, &bound, &mut g, x, Mode::Train).unwrap();
        assert_eq!(e.bn_nodes.len(), 4);
        update_running_stats(&mut p, &g, &e);
        let (node_idx, node) = e.bn_nodes[0];
        assert_eq!(node_idx, 0);
        let (mean, var) = g.batch_norm_stats(node).unwrap();
        let shape = g.shape(node);
        let n = (shape[0] * shape[2] * shape[3]) as f64;
        let rm = p.buffer("bn0.running_mean").unwrap().data();
        let rv = p.buffer("bn0.running_var").unwrap().data();
        for c in 0..rm.len() {
            assert!((rm[c] - 0.1 * mean[c]).abs() < 1e-15);
            assert!((rv[c] - (0.9 + 0.1 * var[c] * n / (n - 1.0))).abs() < 1e-12);
        }
    }
}
