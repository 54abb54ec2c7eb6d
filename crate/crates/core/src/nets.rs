//! Compact ReLU classifiers producing logits for the energy calculus.
//!
//! Both architectures are normalization-free, so a sample's logits never
//! depend on the other members of its batch.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::{Array, NdError, Tape, Var};

const MAGIC: &[u8; 4] = b"EBML";
const CHECKPOINT_VERSION: u32 = 1;
/// Rows per forward pass in [`ModelState::logits`].
const INFER_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Smallcnn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture description.
///
/// For `mlp`, `hidden` lists the hidden layer widths. For `smallcnn` it is the
/// plan `[conv1_channels, conv2_channels, dense_width]`; both convolutions are
/// 3×3, stride 2, padding 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape: vec![input_dim],
            hidden: hidden.to_vec(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    /// Default plan: 16 and 32 conv channels, a 64-wide dense layer.
    pub fn smallcnn(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Smallcnn,
            input_shape: input_shape.to_vec(),
            hidden: vec![16, 32, 64],
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidSpec(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad("input_shape extents must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.kind == ModelKind::Smallcnn {
            if self.input_shape.len() != 3 {
                return bad("smallcnn expects input_shape [channels, height, width]");
            }
            if self.hidden.len() != 3 {
                return bad("smallcnn expects hidden [conv1, conv2, dense]");
            }
            if self.input_shape[1] < 2 || self.input_shape[2] < 2 {
                return bad("smallcnn input must be at least 2x2");
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input_len();
                let widths = self.hidden.iter().chain(std::iter::once(&self.num_classes));
                for (i, &w) in widths.enumerate() {
                    out.push((format!("fc{}.weight", i + 1), vec![w, fan_in]));
                    out.push((format!("fc{}.bias", i + 1), vec![w]));
                    fan_in = w;
                }
            }
            ModelKind::Smallcnn => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let (c1, c2, d) = (self.hidden[0], self.hidden[1], self.hidden[2]);
                let (h2, w2) = (conv_out(conv_out(h)), conv_out(conv_out(w)));
                out.push(("conv1.weight".into(), vec![c1, c, 3, 3]));
                out.push(("conv1.bias".into(), vec![c1]));
                out.push(("conv2.weight".into(), vec![c2, c1, 3, 3]));
                out.push(("conv2.bias".into(), vec![c2]));
                out.push(("fc1.weight".into(), vec![d, c2 * h2 * w2]));
                out.push(("fc1.bias".into(), vec![d]));
                out.push(("fc2.weight".into(), vec![self.num_classes, d]));
                out.push(("fc2.bias".into(), vec![self.num_classes]));
            }
        }
        out
    }
}

fn conv_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

/// Trainable parameters together with the architecture that consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<(String, Array)>,
    pub rng_seed: u64,
}

impl ModelState {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Array::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Array::new(shape, data).expect("shape product")
                };
                (name, value)
            })
            .collect();
        Ok(ModelState {
            spec,
            params,
            rng_seed: seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|(_, a)| {
                if trainable {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), NetError> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(NetError::InputShape {
                expected,
                found: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits `[batch, K]` for `x: [batch, ...input_shape]`, using bound parameters.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, NetError> {
        self.check_input(&x.shape())?;
        let h = match self.spec.kind {
            ModelKind::Mlp => {
                let mut h = x.flatten()?;
                let layers = params.len() / 2;
                for (i, pair) in params.chunks(2).enumerate() {
                    h = h.linear(pair[0], pair[1])?;
                    if i + 1 < layers {
                        h = h.relu()?;
                    }
                }
                h
            }
            ModelKind::Smallcnn => {
                let h = x.conv2d(params[0], params[1], 2, 1)?.relu()?;
                let h = h.conv2d(params[2], params[3], 2, 1)?.relu()?;
                let h = h.flatten()?.linear(params[4], params[5])?.relu()?;
                h.linear(params[6], params[7])?
            }
        };
        Ok(h)
    }

    /// Plain inference; parameters are held constant.
    pub fn logits(&self, x: &Array) -> Result<Array, NetError> {
        self.check_input(x.shape())?;
        let n = x.rows();
        let mut parts = Vec::with_capacity(n.div_ceil(INFER_CHUNK));
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            let tape = Tape::new();
            let params = self.bind(&tape, false);
            let xv = tape.constant(x.select_rows(&idx));
            let out = self.forward(&params, xv)?;
            let value = out.value().clone();
            parts.push(value);
        }
        if parts.is_empty() {
            return Ok(Array::zeros(&[0, self.spec.num_classes]));
        }
        Ok(Array::concat_rows(&parts)?)
    }

    /// Argmax predictions (lowest index on ties).
    pub fn predict(&self, x: &Array) -> Result<Vec<usize>, NetError> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| crate::ndcore::argmax(logits.row(r))).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }

    /// `EBML` magic, version, JSON header, then one record per parameter.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), NetError> {
        let header = serde_json::to_vec(&CheckpointHeader {
            spec: self.spec.clone(),
            seed: self.rng_seed,
        })
        .map_err(|e| NetError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, a) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(a.ndim() as u32).to_le_bytes())?;
            for &e in a.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in a.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, NetError> {
        let bad = |m: &str| NetError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        header.spec.validate()?;
        let expected = header.spec.param_shapes();
        let mut params = Vec::with_capacity(expected.len());
        for (want_name, want_shape) in expected {
            let nlen = read_u32(r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            if name != want_name || shape != want_shape {
                return Err(NetError::Checkpoint(format!(
                    "parameter {name} {shape:?} does not match spec ({want_name} {want_shape:?})"
                )));
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Array::new(shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after last parameter"));
        }
        Ok(ModelState {
            spec: header.spec,
            params,
            rng_seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    #[serde(flatten)]
    spec: ModelSpec,
    seed: u64,
}

fn read_u32(r: &mut impl Read) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_matches, rng, uniform};

    fn zero_model(spec: ModelSpec, bias: f64) -> ModelState {
        let mut m = ModelState::init(spec, 0).unwrap();
        for (name, a) in &mut m.params {
            let fill = if name.ends_with("bias") && name.starts_with("fc") { bias } else { 0.0 };
            a.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        m
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::smallcnn([3, 8, 8], 10);
        let a = ModelState::init(spec.clone(), 7).unwrap();
        let b = ModelState::init(spec.clone(), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(spec, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn mlp_param_count() {
        let m = ModelState::init(ModelSpec::mlp(4, &[8], 3), 0).unwrap();
        assert_eq!(m.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert!(m.params.iter().filter(|(n, _)| n.ends_with("bias")).all(|(_, a)| a.max_abs() == 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelState::init(ModelSpec::mlp(4, &[8], 0), 0).is_err());
        assert!(ModelState::init(ModelSpec::mlp(0, &[8], 2), 0).is_err());
        let mut s = ModelSpec::smallcnn([3, 8, 8], 2);
        s.hidden = vec![4, 4];
        assert!(ModelState::init(s, 0).is_err());
    }

    #[test]
    fn zero_weight_model_gives_bias_logits() {
        let m = zero_model(ModelSpec::mlp(3, &[5], 4), 0.5);
        let x = uniform(&[6, 3], 0.0, 1.0, &mut rng(1));
        let l = m.logits(&x).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.5));
        let e = -crate::ndcore::logsumexp(l.row(0)).unwrap();
        assert!((e - (-(4f64).ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn batch_consistency() {
        let m = ModelState::init(ModelSpec::smallcnn([3, 8, 8], 5), 3).unwrap();
        let x = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(2));
        let both = m.logits(&x).unwrap();
        let a = m.logits(&x.select_rows(&[0])).unwrap();
        let b = m.logits(&x.select_rows(&[1])).unwrap();
        assert_eq!(both.row(0), a.row(0));
        assert_eq!(both.row(1), b.row(0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = ModelState::init(ModelSpec::mlp(3, &[5], 2), 0).unwrap();
        assert!(matches!(
            m.logits(&Array::zeros(&[2, 4])),
            Err(NetError::InputShape { .. })
        ));
    }

    #[test]
    fn permuting_output_rows_permutes_logits() {
        let m = ModelState::init(ModelSpec::mlp(3, &[6], 3), 4).unwrap();
        let mut p = m.clone();
        let perm = [2usize, 0, 1];
        let w = m.param("fc2.weight").unwrap().clone();
        let b = m.param("fc2.bias").unwrap().clone();
        let wp = w.select_rows(&perm);
        let mut bp = b.clone();
        for (i, &j) in perm.iter().enumerate() {
            bp.data_mut()[i] = b.data()[j] + 0.1 * j as f64;
        }
        let mut b2 = b.clone();
        for j in 0..3 {
            b2.data_mut()[j] += 0.1 * j as f64;
        }
        *p.param_mut("fc2.weight").unwrap() = wp;
        *p.param_mut("fc2.bias").unwrap() = bp;
        let mut m2 = m.clone();
        *m2.param_mut("fc2.bias").unwrap() = b2;
        let x = uniform(&[4, 3], 0.0, 1.0, &mut rng(9));
        let l = m2.logits(&x).unwrap();
        let lp = p.logits(&x).unwrap();
        for r in 0..4 {
            for (i, &j) in perm.iter().enumerate() {
                assert_eq!(lp.row(r)[i], l.row(r)[j]);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = ModelState::init(ModelSpec::smallcnn([2, 6, 6], 4), 11).unwrap();
        let x = uniform(&[2, 2, 6, 6], 0.0, 1.0, &mut rng(5));
        let tape = Tape::new();
        let params = m.bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let s = m.forward(&params, xv).unwrap().sum().unwrap();
        let g = tape.backward(s).unwrap().wrt(xv);
        assert_grad_matches(&mut |z| m.logits(z).unwrap().sum(), &x, &g, 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ModelState::init(ModelSpec::smallcnn([3, 8, 8], 10), 21).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"EBML");
        let back = ModelState::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let m = ModelState::init(ModelSpec::mlp(2, &[3], 2), 1).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(ModelState::read_checkpoint(&mut bad_magic.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(ModelState::read_checkpoint(&mut &truncated[..]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(ModelState::read_checkpoint(&mut trailing.as_slice()).is_err());
    }
}
