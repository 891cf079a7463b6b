//! Classifier types and their on-disk format.
//!
//! Two concrete models: a one-layer affine classifier (per-class scores
//! w_k.x + b_k) and a fully connected ReLU network with identity output.
//! Both expose their computation as a slice of `Layer`s, so every attack and
//! training routine works through the same forward/backward kernel.
//!
//! Model file layout (version 1), all integers and floats little-endian:
//!
//! ```text
//! magic   8 bytes  "DFMODEL\0"
//! version u32      1
//! arch    u8       0 = affine, 1 = mlp
//! n       u32      input dimension
//! c       u32      number of classes
//! affine: weight c*n f64 (row per class), bias c f64
//! mlp:    num_layers u32, then per layer (in u32, out u32, activation u8),
//!         then per layer weight out*in f64 and bias out f64
//! names   u8 flag; if 1: count u32, then per name (len u32, utf-8 bytes)
//! ```
//!
//! Weights are stored as raw f64 bits, so save -> load round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, DenseTensor, GradientTape, Layer};

const MAGIC: &[u8; 8] = b"DFMODEL\0";
const SCHEMA_VERSION: u32 = 1;

/// Anything that evaluates per-class scores through a stack of layers.
pub trait Classifier {
    fn layers(&self) -> &[Layer];

    fn input_dim(&self) -> usize {
        self.layers()[0].in_dim()
    }

    fn num_classes(&self) -> usize {
        self.layers().last().unwrap().out_dim()
    }

    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        tensor::forward_logits(self.layers(), x)
    }

    /// Forward pass that also records the tape needed for gradients.
    fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, GradientTape<'_>)> {
        tensor::forward(self.layers(), x)
    }
}

/// Predicted class: argmax of the logits, ties to the lowest index.
pub fn predict_label<C: Classifier + ?Sized>(f: &C, x: &DenseTensor) -> Result<usize> {
    let logits = f.logits(x)?;
    Ok(tensor::argmax(logits.data()))
}

/// Linear multiclass model: score_k(x) = w_k.x + b_k.
///
/// Stored as a single identity-activated layer whose weight row k is w_k.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineClassifier {
    layer: [Layer; 1],
}

impl AffineClassifier {
    /// `weight` has shape [c, n] (row per class), `bias` shape [c], c >= 2.
    pub fn new(weight: DenseTensor, bias: DenseTensor) -> Result<Self> {
        if weight.shape().len() != 2 || weight.shape()[0] < 2 {
            return Err(Error::invalid_argument(format!(
                "affine weight must be [c, n] with c >= 2, got shape {:?}",
                weight.shape()
            )));
        }
        let layer = Layer::new(weight, bias, Activation::Identity)?;
        Ok(AffineClassifier { layer: [layer] })
    }

    /// Weight row for class `k`, the normal of that class's score.
    pub fn class_weight(&self, k: usize) -> Result<&[f64]> {
        let c = self.num_classes();
        if k >= c {
            return Err(Error::IndexOutOfBounds(format!("class {k} of {c}")));
        }
        let n = self.input_dim();
        Ok(&self.layer[0].weight().data()[k * n..(k + 1) * n])
    }

    pub fn bias(&self) -> &[f64] {
        self.layer[0].bias().data()
    }
}

impl Classifier for AffineClassifier {
    fn layers(&self) -> &[Layer] {
        &self.layer
    }
}

/// Fully connected network: ReLU hidden layers, identity output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    layers: Vec<Layer>,
}

impl MlpClassifier {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid_argument("mlp needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dimension_mismatch(format!(
                    "layer {} output {} does not feed layer {} input {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if layers.last().unwrap().activation() != Activation::Identity {
            return Err(Error::invalid_argument(
                "mlp output layer must have identity activation (raw logits)",
            ));
        }
        Ok(MlpClassifier { layers })
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl Classifier for MlpClassifier {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// Either concrete model, for loading files without knowing the architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyClassifier {
    Affine(AffineClassifier),
    Mlp(MlpClassifier),
}

impl Classifier for AnyClassifier {
    fn layers(&self) -> &[Layer] {
        match self {
            AnyClassifier::Affine(m) => m.layers(),
            AnyClassifier::Mlp(m) => m.layers(),
        }
    }
}

impl From<AffineClassifier> for AnyClassifier {
    fn from(m: AffineClassifier) -> Self {
        AnyClassifier::Affine(m)
    }
}

impl From<MlpClassifier> for AnyClassifier {
    fn from(m: MlpClassifier) -> Self {
        AnyClassifier::Mlp(m)
    }
}

/// A model plus optional per-class names, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub classifier: AnyClassifier,
    pub class_names: Option<Vec<String>>,
}

impl ModelFile {
    pub fn bare(classifier: AnyClassifier) -> Self {
        ModelFile {
            classifier,
            class_names: None,
        }
    }
}

fn write_tensor<W: Write>(w: &mut W, t: &DenseTensor) -> Result<()> {
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Serializes a model to the version-1 byte layout.
pub fn model_to_bytes(file: &ModelFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(SCHEMA_VERSION)?;
    let classifier = &file.classifier;
    let n = classifier.input_dim() as u32;
    let c = classifier.num_classes() as u32;
    match classifier {
        AnyClassifier::Affine(m) => {
            out.write_u8(0)?;
            out.write_u32::<LittleEndian>(n)?;
            out.write_u32::<LittleEndian>(c)?;
            write_tensor(&mut out, m.layers()[0].weight())?;
            write_tensor(&mut out, m.layers()[0].bias())?;
        }
        AnyClassifier::Mlp(m) => {
            out.write_u8(1)?;
            out.write_u32::<LittleEndian>(n)?;
            out.write_u32::<LittleEndian>(c)?;
            out.write_u32::<LittleEndian>(m.layers().len() as u32)?;
            for layer in m.layers() {
                out.write_u32::<LittleEndian>(layer.in_dim() as u32)?;
                out.write_u32::<LittleEndian>(layer.out_dim() as u32)?;
                out.write_u8(match layer.activation() {
                    Activation::Identity => 0,
                    Activation::Relu => 1,
                })?;
            }
            for layer in m.layers() {
                write_tensor(&mut out, layer.weight())?;
                write_tensor(&mut out, layer.bias())?;
            }
        }
    }
    match &file.class_names {
        None => out.write_u8(0)?,
        Some(names) => {
            if names.len() != classifier.num_classes() {
                return Err(Error::dimension_mismatch(format!(
                    "{} class names for {} classes",
                    names.len(),
                    classifier.num_classes()
                )));
            }
            out.write_u8(1)?;
            out.write_u32::<LittleEndian>(names.len() as u32)?;
            for name in names {
                out.write_u32::<LittleEndian>(name.len() as u32)?;
                out.extend_from_slice(name.as_bytes());
            }
        }
    }
    Ok(out)
}

/// Reader wrapper that tracks the byte offset for parse errors.
struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, pos: 0 }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let got = self.inner.read(buf)?;
        self.pos += got as u64;
        Ok(got)
    }
}

fn read_exact_or_parse<R: Read>(r: &mut CountingReader<R>, buf: &mut [u8], what: &str) -> Result<()> {
    let offset = r.pos;
    r.read_exact(buf).map_err(|e| Error::Parse {
        offset,
        message: format!("reading {what}: {e}"),
    })
}

fn read_u32<R: Read>(r: &mut CountingReader<R>, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or_parse(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8<R: Read>(r: &mut CountingReader<R>, what: &str) -> Result<u8> {
    let mut buf = [0u8; 1];
    read_exact_or_parse(r, &mut buf, what)?;
    Ok(buf[0])
}

fn read_tensor<R: Read>(
    r: &mut CountingReader<R>,
    shape: Vec<usize>,
    what: &str,
) -> Result<DenseTensor> {
    let len: usize = shape.iter().product();
    let mut data = vec![0.0f64; len];
    for v in data.iter_mut() {
        let offset = r.pos;
        *v = r.read_f64::<LittleEndian>().map_err(|e| Error::Parse {
            offset,
            message: format!("reading {what}: {e}"),
        })?;
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(DenseTensor::from_parts(shape, data))
}

/// Parses a version-1 model byte stream, validating every declared dimension
/// against the weight blocks that follow. Trailing bytes are an error.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelFile> {
    let mut r = CountingReader::new(bytes);
    let mut magic = [0u8; 8];
    read_exact_or_parse(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, not a model file".into(),
        });
    }
    let version = read_u32(&mut r, "schema version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::UnsupportedSchema {
            found: version,
            supported: SCHEMA_VERSION,
        });
    }
    let arch = read_u8(&mut r, "architecture tag")?;
    let n = read_u32(&mut r, "input dimension")? as usize;
    let c = read_u32(&mut r, "class count")? as usize;
    if n == 0 || c == 0 {
        return Err(r.fail(format!("dimensions must be positive, got n={n} c={c}")));
    }
    let classifier = match arch {
        0 => {
            let weight = read_tensor(&mut r, vec![c, n], "affine weight")?;
            let bias = read_tensor(&mut r, vec![c], "affine bias")?;
            AnyClassifier::Affine(AffineClassifier::new(weight, bias)?)
        }
        1 => {
            let num_layers = read_u32(&mut r, "layer count")? as usize;
            if num_layers == 0 {
                return Err(r.fail("mlp must declare at least one layer"));
            }
            let mut descriptors = Vec::with_capacity(num_layers);
            for i in 0..num_layers {
                let in_dim = read_u32(&mut r, "layer input dimension")? as usize;
                let out_dim = read_u32(&mut r, "layer output dimension")? as usize;
                let act = match read_u8(&mut r, "layer activation")? {
                    0 => Activation::Identity,
                    1 => Activation::Relu,
                    other => return Err(r.fail(format!("unknown activation tag {other} in layer {i}"))),
                };
                if in_dim == 0 || out_dim == 0 {
                    return Err(r.fail(format!("layer {i} has zero dimension")));
                }
                descriptors.push((in_dim, out_dim, act));
            }
            if descriptors[0].0 != n {
                return Err(r.fail(format!(
                    "declared input dimension {n} does not match layer 0 input {}",
                    descriptors[0].0
                )));
            }
            if descriptors[num_layers - 1].1 != c {
                return Err(r.fail(format!(
                    "declared class count {c} does not match final layer output {}",
                    descriptors[num_layers - 1].1
                )));
            }
            let mut layers = Vec::with_capacity(num_layers);
            for (i, &(in_dim, out_dim, act)) in descriptors.iter().enumerate() {
                let weight = read_tensor(&mut r, vec![out_dim, in_dim], &format!("layer {i} weight"))?;
                let bias = read_tensor(&mut r, vec![out_dim], &format!("layer {i} bias"))?;
                layers.push(Layer::new(weight, bias, act)?);
            }
            AnyClassifier::Mlp(MlpClassifier::new(layers)?)
        }
        other => return Err(r.fail(format!("unknown architecture tag {other}"))),
    };
    let class_names = match read_u8(&mut r, "class names flag")? {
        0 => None,
        1 => {
            let count = read_u32(&mut r, "class name count")? as usize;
            if count != c {
                return Err(r.fail(format!("{count} class names for {c} classes")));
            }
            let mut names = Vec::with_capacity(count);
            for _ in 0..count {
                let len = read_u32(&mut r, "class name length")? as usize;
                let mut buf = vec![0u8; len];
                read_exact_or_parse(&mut r, &mut buf, "class name")?;
                let offset = r.pos;
                names.push(String::from_utf8(buf).map_err(|_| Error::Parse {
                    offset,
                    message: "class name is not valid utf-8".into(),
                })?);
            }
            Some(names)
        }
        other => return Err(r.fail(format!("invalid class names flag {other}"))),
    };
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(r.fail("trailing bytes after model payload"));
    }
    Ok(ModelFile {
        classifier,
        class_names,
    })
}

pub fn save_model(file: &ModelFile, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(file)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

/// Hex SHA-256 of the serialized model, used to tie reports to the exact
/// weights they were computed against.
pub fn model_hash(file: &ModelFile) -> Result<String> {
    let bytes = model_to_bytes(file)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write as _;
        let _ = write!(hex, "{byte:02x}");
    }
    Ok(hex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(dims: &[usize], seed: u64) -> MlpClassifier {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for i in 1..dims.len() {
            let act = if i + 1 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            let w: Vec<f64> = (0..dims[i] * dims[i - 1])
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..dims[i]).map(|_| rng.random_range(-0.5..0.5)).collect();
            layers.push(
                Layer::new(
                    DenseTensor::new(vec![dims[i], dims[i - 1]], w).unwrap(),
                    DenseTensor::new(vec![dims[i]], b).unwrap(),
                    act,
                )
                .unwrap(),
            );
        }
        MlpClassifier::new(layers).unwrap()
    }

    fn small_affine() -> AffineClassifier {
        AffineClassifier::new(
            DenseTensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap(),
            DenseTensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn predict_label_is_argmax_with_low_tie_break() {
        let m = small_affine();
        // x = (2, 0): scores are (2.1, -0.2, -2.0).
        let x = DenseTensor::from_vec(vec![2.0, 0.0]).unwrap();
        assert_eq!(predict_label(&m, &x).unwrap(), 0);
        // Tie between classes 0 and 1 at x = (0.0, 0.3): (0.1, 0.1, -0.3).
        let x = DenseTensor::from_vec(vec![0.0, 0.3]).unwrap();
        assert_eq!(predict_label(&m, &x).unwrap(), 0);
    }

    #[test]
    #[allow(clippy::neg_multiply)]
    fn affine_scores_match_direct_formula() {
        let m = small_affine();
        let x = DenseTensor::from_vec(vec![0.7, -1.3]).unwrap();
        let logits = m.logits(&x).unwrap();
        assert_eq!(logits.data()[0], 1.0 * 0.7 + 0.0 * -1.3 + 0.1);
        assert_eq!(logits.data()[1], 0.0 * 0.7 + 1.0 * -1.3 - 0.2);
        assert_eq!(logits.data()[2], -1.0 * 0.7 + -1.0 * -1.3 + 0.0);
        assert_eq!(m.class_weight(1).unwrap(), &[0.0, 1.0]);
        assert!(m.class_weight(3).is_err());
    }

    #[test]
    fn mlp_rejects_bad_shapes_and_activations() {
        let good = random_mlp(&[4, 6, 3], 0);
        assert_eq!(good.input_dim(), 4);
        assert_eq!(good.num_classes(), 3);

        let mut layers = good.layers().to_vec();
        layers.reverse();
        assert!(MlpClassifier::new(layers).is_err());

        let relu_out = vec![Layer::new(
            DenseTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            DenseTensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
            Activation::Relu,
        )
        .unwrap()];
        assert!(MlpClassifier::new(relu_out).is_err());
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cases: Vec<ModelFile> = vec![
            ModelFile::bare(small_affine().into()),
            ModelFile {
                classifier: random_mlp(&[7, 11, 5, 4], 42).into(),
                class_names: Some((0..4).map(|i| format!("class-{i}")).collect()),
            },
        ];
        for (i, file) in cases.iter().enumerate() {
            let path = dir.path().join(format!("m{i}.bin"));
            save_model(file, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(&loaded, file);
            // Hash is stable across the round trip.
            assert_eq!(model_hash(&loaded).unwrap(), model_hash(file).unwrap());
        }
    }

    #[test]
    fn load_rejects_corrupt_input() {
        let file = ModelFile::bare(random_mlp(&[3, 5, 2], 9).into());
        let bytes = model_to_bytes(&file).unwrap();

        // Truncation inside the weight block.
        let err = model_from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected error {other:?}"),
        }

        // Future schema version.
        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&versioned),
            Err(Error::UnsupportedSchema { found: 2, supported: 1 })
        ));

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));

        // Trailing garbage.
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(model_from_bytes(&long), Err(Error::Parse { .. })));

        // Non-finite weight: patch the first weight f64 to NaN.
        let mut nan = bytes;
        let weight_start = 8 + 4 + 1 + 4 + 4 + 4 + 2 * (4 + 4 + 1);
        nan[weight_start..weight_start + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(model_from_bytes(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn hash_distinguishes_models() {
        let a = ModelFile::bare(random_mlp(&[3, 4, 2], 1).into());
        let b = ModelFile::bare(random_mlp(&[3, 4, 2], 2).into());
        assert_ne!(model_hash(&a).unwrap(), model_hash(&b).unwrap());
        assert_eq!(model_hash(&a).unwrap().len(), 64);
    }
}
