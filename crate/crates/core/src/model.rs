//! Encoder and projector stand-ins, angular-margin logits, and checkpoint I/O.
//!
//! Both modality encoders are small GeLU MLPs; the projection heads are fixed
//! at four linear layers with an L2-normalized output. Real systems put
//! ECAPA-TDNN or a face CNN here; everything downstream only assumes "view in,
//! embedding out", so the MLPs keep the training dynamics while staying cheap.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, ValueId};

/// Magic string opening every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPPSSL01";
const CHECKPOINT_VERSION: u32 = 1;

/// Widths of the projection head, last entry is the projected dimension.
pub const PROJECTOR_LAYERS: usize = 4;

/// Architecture hyperparameters for one encoder/projector bundle.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Input dimension of speech views.
    pub speech_dim: usize,
    /// Input dimension of face views.
    pub face_dim: usize,
    /// Hidden widths of the speaker encoder (output layer excluded).
    pub speaker_hidden: Vec<usize>,
    /// Speaker embedding dimension.
    pub speaker_embed_dim: usize,
    /// Hidden widths of the face encoder (output layer excluded).
    pub face_hidden: Vec<usize>,
    /// Face embedding dimension.
    pub face_embed_dim: usize,
    /// Output widths of the four projector layers, shared by both modalities.
    pub projector_widths: [usize; PROJECTOR_LAYERS],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            speech_dim: 40,
            face_dim: 64,
            speaker_hidden: vec![256, 256],
            speaker_embed_dim: 192,
            face_hidden: vec![256, 256],
            face_embed_dim: 512,
            projector_widths: [1024, 1024, 256, 512],
        }
    }
}

impl ModelConfig {
    /// Shrunk architecture for fast experiment runs; same shape everywhere,
    /// just narrower layers.
    pub fn compact(speech_dim: usize, face_dim: usize) -> Self {
        ModelConfig {
            speech_dim,
            face_dim,
            speaker_hidden: vec![48],
            speaker_embed_dim: 24,
            face_hidden: vec![48],
            face_embed_dim: 32,
            projector_widths: [48, 48, 24, 32],
        }
    }

    fn validate(&self) -> Result<()> {
        let all_dims = [self.speech_dim, self.face_dim, self.speaker_embed_dim, self.face_embed_dim];
        if all_dims.iter().any(|&d| d == 0)
            || self.speaker_hidden.iter().any(|&d| d == 0)
            || self.face_hidden.iter().any(|&d| d == 0)
            || self.projector_widths.iter().any(|&d| d == 0)
        {
            return Err(Error::invalid("config", "all layer widths must be nonzero"));
        }
        Ok(())
    }
}

/// One dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for both
    /// weight and bias.
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        LinearLayer {
            weight: Tensor::matrix(fan_out, fan_in, weight).expect("finite init"),
            bias: Tensor::vector(bias).expect("finite init"),
        }
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// MLP encoder: GeLU between layers, raw affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<LinearLayer>,
}

/// Four-layer MLP projector: GeLU between layers, L2-normalized output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub layers: Vec<LinearLayer>,
}

fn init_mlp(rng: &mut ChaCha8Rng, dims: &[usize]) -> Vec<LinearLayer> {
    dims.windows(2).map(|w| LinearLayer::init(rng, w[0], w[1])).collect()
}

impl EncoderParams {
    pub fn init(rng: &mut ChaCha8Rng, input_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        EncoderParams { layers: init_mlp(rng, &dims) }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty encoder").fan_out()
    }
}

impl ProjectorParams {
    pub fn init(rng: &mut ChaCha8Rng, input_dim: usize, widths: &[usize; PROJECTOR_LAYERS]) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(widths);
        ProjectorParams { layers: init_mlp(rng, &dims) }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty projector").fan_out()
    }
}

/// Tape handles for one registered MLP, layer order preserved.
pub type MlpIds = Vec<(ValueId, ValueId)>;

fn register_mlp(tape: &mut GradTape, layers: &[LinearLayer]) -> Result<MlpIds> {
    layers
        .iter()
        .map(|l| Ok((tape.param(l.weight.clone())?, tape.param(l.bias.clone())?)))
        .collect()
}

fn apply_mlp(tape: &mut GradTape, ids: &MlpIds, input: ValueId) -> Result<ValueId> {
    let mut h = input;
    for (k, (w, b)) in ids.iter().enumerate() {
        let lin = tape.matvec(*w, h)?;
        h = tape.add(lin, *b)?;
        if k + 1 < ids.len() {
            h = tape.gelu(h)?;
        }
    }
    Ok(h)
}

impl EncoderParams {
    pub fn register(&self, tape: &mut GradTape) -> Result<MlpIds> {
        register_mlp(tape, &self.layers)
    }
}

impl ProjectorParams {
    pub fn register(&self, tape: &mut GradTape) -> Result<MlpIds> {
        register_mlp(tape, &self.layers)
    }
}

/// Encoder forward on the tape: affine + GeLU chain, no output activation.
pub fn encoder_apply(tape: &mut GradTape, ids: &MlpIds, input: ValueId) -> Result<ValueId> {
    apply_mlp(tape, ids, input)
}

/// Projector forward on the tape; output is L2-normalized.
pub fn projector_apply(tape: &mut GradTape, ids: &MlpIds, input: ValueId) -> Result<ValueId> {
    let h = apply_mlp(tape, ids, input)?;
    tape.l2_normalize(h)
}

/// All trainable parameters of the two-modality model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub speaker_encoder: EncoderParams,
    pub face_encoder: EncoderParams,
    pub speaker_projector: ProjectorParams,
    pub face_projector: ProjectorParams,
    /// Classification head over speaker embeddings, present in stage two.
    pub speaker_class_head: Option<Tensor>,
    /// Classification head over face embeddings, present in stage two.
    pub face_class_head: Option<Tensor>,
}

impl ModelBundle {
    /// Fresh bundle with seeded initialization; heads start absent.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speaker_encoder = EncoderParams::init(
            &mut rng,
            config.speech_dim,
            &config.speaker_hidden,
            config.speaker_embed_dim,
        );
        let face_encoder = EncoderParams::init(
            &mut rng,
            config.face_dim,
            &config.face_hidden,
            config.face_embed_dim,
        );
        let speaker_projector =
            ProjectorParams::init(&mut rng, config.speaker_embed_dim, &config.projector_widths);
        let face_projector =
            ProjectorParams::init(&mut rng, config.face_embed_dim, &config.projector_widths);
        Ok(ModelBundle {
            config: config.clone(),
            speaker_encoder,
            face_encoder,
            speaker_projector,
            face_projector,
            speaker_class_head: None,
            face_class_head: None,
        })
    }

    /// Installs freshly initialized classification heads with L2-normalized
    /// rows, one per pseudo class.
    pub fn init_class_heads(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::invalid(
                "num_classes",
                "classification needs at least 2 classes",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = |dim: usize, rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let bound = 1.0 / (dim as f64).sqrt();
            let mut rows = Vec::with_capacity(num_classes * dim);
            for _ in 0..num_classes {
                let mut row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-bound..bound)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
                rows.extend(row);
            }
            Tensor::matrix(num_classes, dim, rows)
        };
        self.speaker_class_head = Some(head(self.config.speaker_embed_dim, &mut rng)?);
        self.face_class_head = Some(head(self.config.face_embed_dim, &mut rng)?);
        Ok(())
    }

    /// Stable (name, tensor) listing of every present parameter; the order
    /// defines optimizer-state and checkpoint layout.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        fn mlp<'a>(prefix: &str, layers: &'a [LinearLayer], out: &mut Vec<(String, &'a Tensor)>) {
            for (k, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{k}.weight"), &l.weight));
                out.push((format!("{prefix}.{k}.bias"), &l.bias));
            }
        }
        let mut out = Vec::new();
        mlp("speaker_encoder", &self.speaker_encoder.layers, &mut out);
        mlp("face_encoder", &self.face_encoder.layers, &mut out);
        mlp("speaker_projector", &self.speaker_projector.layers, &mut out);
        mlp("face_projector", &self.face_projector.layers, &mut out);
        if let Some(h) = &self.speaker_class_head {
            out.push(("speaker_class_head".to_string(), h));
        }
        if let Some(h) = &self.face_class_head {
            out.push(("face_class_head".to_string(), h));
        }
        out
    }

    /// Mutable counterpart of [`ModelBundle::named_parameters`], same order.
    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn mlp<'a>(
            prefix: &str,
            layers: &'a mut [LinearLayer],
            out: &mut Vec<(String, &'a mut Tensor)>,
        ) {
            for (k, l) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{k}.weight"), &mut l.weight));
                out.push((format!("{prefix}.{k}.bias"), &mut l.bias));
            }
        }
        let mut out = Vec::new();
        mlp("speaker_encoder", &mut self.speaker_encoder.layers, &mut out);
        mlp("face_encoder", &mut self.face_encoder.layers, &mut out);
        mlp("speaker_projector", &mut self.speaker_projector.layers, &mut out);
        mlp("face_projector", &mut self.face_projector.layers, &mut out);
        if let Some(h) = &mut self.speaker_class_head {
            out.push(("speaker_class_head".to_string(), h));
        }
        if let Some(h) = &mut self.face_class_head {
            out.push(("face_class_head".to_string(), h));
        }
        out
    }

    /// Writes every parameter into one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_parameters();
        let entries: Vec<(&str, &Tensor)> =
            named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_checkpoint(path, &entries)
    }

    /// Rebuilds a bundle from a checkpoint written by [`ModelBundle::save`].
    /// The architecture is recovered from tensor shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        ModelBundle::from_entries(&entries)
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Option<&Tensor> {
            entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
        };
        let read_mlp = |prefix: &str| -> Result<Vec<LinearLayer>> {
            let mut layers = Vec::new();
            for k in 0.. {
                match (
                    find(&format!("{prefix}.{k}.weight")),
                    find(&format!("{prefix}.{k}.bias")),
                ) {
                    (Some(w), Some(b)) => layers.push(LinearLayer {
                        weight: w.clone(),
                        bias: b.clone(),
                    }),
                    (None, None) => break,
                    _ => {
                        return Err(Error::format(format!(
                            "checkpoint has a weight/bias mismatch in {prefix}.{k}"
                        )))
                    }
                }
            }
            if layers.is_empty() {
                return Err(Error::format(format!("checkpoint missing {prefix} layers")));
            }
            Ok(layers)
        };

        let speaker_encoder = EncoderParams { layers: read_mlp("speaker_encoder")? };
        let face_encoder = EncoderParams { layers: read_mlp("face_encoder")? };
        let speaker_projector = ProjectorParams { layers: read_mlp("speaker_projector")? };
        let face_projector = ProjectorParams { layers: read_mlp("face_projector")? };
        if speaker_projector.layers.len() != PROJECTOR_LAYERS
            || face_projector.layers.len() != PROJECTOR_LAYERS
        {
            return Err(Error::format("checkpoint projector is not four layers"));
        }

        let hidden = |enc: &EncoderParams| -> Vec<usize> {
            enc.layers[..enc.layers.len() - 1].iter().map(|l| l.fan_out()).collect()
        };
        let widths_of = |p: &ProjectorParams| -> [usize; PROJECTOR_LAYERS] {
            let mut w = [0; PROJECTOR_LAYERS];
            for (k, l) in p.layers.iter().enumerate() {
                w[k] = l.fan_out();
            }
            w
        };
        let sp_widths = widths_of(&speaker_projector);
        let fa_widths = widths_of(&face_projector);
        if sp_widths != fa_widths {
            return Err(Error::format("checkpoint projectors disagree in widths"));
        }

        let config = ModelConfig {
            speech_dim: speaker_encoder.input_dim(),
            face_dim: face_encoder.input_dim(),
            speaker_hidden: hidden(&speaker_encoder),
            speaker_embed_dim: speaker_encoder.output_dim(),
            face_hidden: hidden(&face_encoder),
            face_embed_dim: face_encoder.output_dim(),
            projector_widths: sp_widths,
        };
        config.validate()?;

        Ok(ModelBundle {
            config,
            speaker_encoder,
            face_encoder,
            speaker_projector,
            face_projector,
            speaker_class_head: find("speaker_class_head").cloned(),
            face_class_head: find("face_class_head").cloned(),
        })
    }
}

/// No-grad encoder forward for a single view.
pub fn encode(params: &EncoderParams, view: &[f64]) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let ids = params.register(&mut tape)?;
    let x = tape.leaf(Tensor::vector(view.to_vec())?)?;
    let y = encoder_apply(&mut tape, &ids, x)?;
    Ok(tape.value(y).data().to_vec())
}

/// No-grad encoder + projector forward for a single view.
pub fn encode_projected(
    params: &EncoderParams,
    projector: &ProjectorParams,
    view: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let enc_ids = params.register(&mut tape)?;
    let proj_ids = projector.register(&mut tape)?;
    let x = tape.leaf(Tensor::vector(view.to_vec())?)?;
    let y = encoder_apply(&mut tape, &enc_ids, x)?;
    let z = projector_apply(&mut tape, &proj_ids, y)?;
    Ok(tape.value(z).data().to_vec())
}

/// Joint representation used for clustering: projected speech embedding
/// concatenated with the projected face embedding, both from clean views.
pub fn multimodal_embed(bundle: &ModelBundle, speech: &[f64], face: &[f64]) -> Result<Vec<f64>> {
    let mut z = encode_projected(&bundle.speaker_encoder, &bundle.speaker_projector, speech)?;
    let zf = encode_projected(&bundle.face_encoder, &bundle.face_projector, face)?;
    z.extend(zf);
    Ok(z)
}

/// Additive-angular-margin logits on the tape.
///
/// Row j of the head gives logit scale * cos(theta_j), except the true class,
/// which gets scale * cos(theta + margin). Cosines make the head's row norms
/// irrelevant to the forward value, but rows are still kept unit-norm by the
/// optimizer for the usual angular reading.
pub fn aam_logits(
    tape: &mut GradTape,
    head: ValueId,
    embedding: ValueId,
    true_label: usize,
    margin: f64,
    scale: f64,
) -> Result<ValueId> {
    let shape = tape.value(head).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "aam_logits head",
            expected: vec![0, 0],
            found: shape,
        });
    }
    let num_classes = shape[0];
    if true_label >= num_classes {
        return Err(Error::invalid(
            "true_label",
            format!("label {true_label} outside {num_classes} classes"),
        ));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::invalid("margin", "margin must lie in [0, pi/2)"));
    }
    if scale <= 0.0 {
        return Err(Error::invalid("scale", "scale must be positive"));
    }
    let mut logits = Vec::with_capacity(num_classes);
    for j in 0..num_classes {
        let row = tape.row(head, j)?;
        let c = tape.cosine(embedding, row)?;
        let margined = if j == true_label {
            tape.cos_plus_margin(c, margin)?
        } else {
            c
        };
        logits.push(tape.scale(margined, scale)?);
    }
    tape.stack(&logits)
}

fn io_err(context: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{context} {}", path.display());
    move |e| Error::io(context, e)
}

/// Writes named tensors: magic, version, table of (name, shape), then all
/// values row-major as little-endian f64.
pub fn write_checkpoint(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(io_err("creating checkpoint", path))?;
    let mut w = BufWriter::new(file);
    let werr = |e| Error::io(format!("writing checkpoint {}", path.display()), e);

    w.write_all(CHECKPOINT_MAGIC).map_err(werr)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(werr)?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(name_bytes).map_err(werr)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes()).map_err(werr)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
        }
    }
    for (_, tensor) in entries {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

/// Reads a checkpoint written by [`write_checkpoint`], preserving entry order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(io_err("opening checkpoint", path))?;
    read_checkpoint_from(BufReader::new(file), &path.display().to_string())
}

/// Same as [`read_checkpoint`] for an in-memory byte image.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint_from(bytes, "embedded checkpoint")
}

fn read_checkpoint_from<R: Read>(mut r: R, what: &str) -> Result<Vec<(String, Tensor)>> {
    let rerr = |e| Error::io(format!("reading checkpoint {what}"), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("bad checkpoint magic in {what}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(rerr)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(rerr)?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(rerr)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(rerr)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint tensor name is not UTF-8"))?;
        r.read_exact(&mut u32buf).map_err(rerr)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u32buf).map_err(rerr)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        table.push((name, shape));
    }

    let mut entries = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for (name, shape) in table {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut f64buf).map_err(rerr)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(entries),
        Ok(_) => Err(Error::format(format!(
            "trailing bytes after checkpoint payload in {what}"
        ))),
        Err(e) => Err(rerr(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_l2_error};

    fn small_config() -> ModelConfig {
        ModelConfig {
            speech_dim: 6,
            face_dim: 7,
            speaker_hidden: vec![8],
            speaker_embed_dim: 5,
            face_hidden: vec![8],
            face_embed_dim: 4,
            projector_widths: [8, 8, 6, 5],
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelBundle::init(&small_config(), 9).unwrap();
        let b = ModelBundle::init(&small_config(), 9).unwrap();
        let c = ModelBundle::init(&small_config(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        for layer in &a.speaker_encoder.layers {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            assert!(layer.weight.data().iter().all(|v| v.abs() <= bound));
            assert!(layer.bias.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn default_dims_match_documented_architecture() {
        let cfg = ModelConfig::default();
        let bundle = ModelBundle::init(&cfg, 0).unwrap();
        assert_eq!(bundle.speaker_encoder.output_dim(), 192);
        assert_eq!(bundle.face_encoder.output_dim(), 512);
        assert_eq!(bundle.speaker_encoder.layers.len(), 3);
        assert_eq!(bundle.speaker_projector.layers.len(), PROJECTOR_LAYERS);
        assert_eq!(bundle.speaker_projector.output_dim(), 512);
        assert_eq!(cfg.projector_widths, [1024, 1024, 256, 512]);
    }

    #[test]
    fn encoder_output_dim_and_purity() {
        let bundle = ModelBundle::init(&small_config(), 3).unwrap();
        let view = vec![0.2; 6];
        let e1 = encode(&bundle.speaker_encoder, &view).unwrap();
        let e2 = encode(&bundle.speaker_encoder, &view).unwrap();
        assert_eq!(e1.len(), 5);
        assert_eq!(e1, e2);
    }

    #[test]
    fn projected_embedding_is_unit_norm() {
        let bundle = ModelBundle::init(&small_config(), 4).unwrap();
        let z = encode_projected(&bundle.speaker_encoder, &bundle.speaker_projector, &[0.4; 6])
            .unwrap();
        let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multimodal_embed_concatenates_both_projections() {
        let bundle = ModelBundle::init(&small_config(), 4).unwrap();
        let z = multimodal_embed(&bundle, &[0.4; 6], &[-0.1; 7]).unwrap();
        assert_eq!(z.len(), 2 * bundle.speaker_projector.output_dim());
        let (s, f) = z.split_at(bundle.speaker_projector.output_dim());
        let ns: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nf: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((ns - 1.0).abs() < 1e-12 && (nf - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aam_logits_aligned_and_zero_margin() {
        let mut tape = GradTape::new();
        // Two unit rows along the axes.
        let head = tape
            .param(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let emb = tape.leaf(Tensor::vector(vec![2.0, 0.0]).unwrap()).unwrap();

        // Embedding aligned with its class row: true logit is s * cos(m).
        let logits = aam_logits(&mut tape, head, emb, 0, 0.2, 30.0).unwrap();
        let vals = tape.value(logits).data();
        assert_eq!(vals[0], 30.0 * 0.2f64.cos());
        assert_eq!(vals[1], 0.0);

        // Zero margin degenerates to plain scaled cosines.
        let logits0 = aam_logits(&mut tape, head, emb, 0, 0.0, 30.0).unwrap();
        assert_eq!(tape.value(logits0).data(), &[30.0, 0.0]);
    }

    #[test]
    fn aam_logits_rejects_bad_label_and_margin() {
        let mut tape = GradTape::new();
        let head = tape
            .param(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let emb = tape.leaf(Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(aam_logits(&mut tape, head, emb, 2, 0.2, 30.0).is_err());
        assert!(aam_logits(&mut tape, head, emb, 0, -0.1, 30.0).is_err());
        assert!(aam_logits(&mut tape, head, emb, 0, 0.2, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let mut bundle = ModelBundle::init(&small_config(), 12).unwrap();
        bundle.init_class_heads(3, 5).unwrap();
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert_eq!(bundle, loaded);

        // Identical forward outputs, bit for bit.
        let view = vec![0.3, -0.2, 0.9, 0.0, 1.4, -2.2];
        assert_eq!(
            encode(&bundle.speaker_encoder, &view).unwrap(),
            encode(&loaded.speaker_encoder, &view).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let bundle = ModelBundle::init(&small_config(), 12).unwrap();
        bundle.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();

        // Wrong magic.
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::Format { .. })));

        // Truncated payload.
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(ModelBundle::load(&path).is_err());

        // Trailing garbage.
        let mut long = bytes.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn encoder_projector_gradient_matches_finite_differences() {
        let bundle = ModelBundle::init(&small_config(), 21).unwrap();
        let view = vec![0.5, -0.3, 0.8, 0.1, -0.9, 0.2];
        let target = vec![0.2, -0.4, 0.6, 0.3, 0.5];

        let eval = |w0: &Tensor| -> crate::error::Result<f64> {
            let mut tape = GradTape::new();
            let mut enc_ids = bundle.speaker_encoder.register(&mut tape)?;
            enc_ids[0].0 = tape.param(w0.clone())?;
            let proj_ids = bundle.speaker_projector.register(&mut tape)?;
            let x = tape.leaf(Tensor::vector(view.clone())?)?;
            let y = encoder_apply(&mut tape, &enc_ids, x)?;
            let z = projector_apply(&mut tape, &proj_ids, y)?;
            let t = tape.leaf(Tensor::vector(target.clone())?)?;
            let c = tape.cosine(z, t)?;
            tape.value(c).scalar_value()
        };

        let w0 = bundle.speaker_encoder.layers[0].weight.clone();
        let fd = finite_difference_gradient(|t| eval(t), &w0, 1e-6).unwrap();

        let mut tape = GradTape::new();
        let enc_ids = bundle.speaker_encoder.register(&mut tape).unwrap();
        let proj_ids = bundle.speaker_projector.register(&mut tape).unwrap();
        let x = tape.leaf(Tensor::vector(view).unwrap()).unwrap();
        let y = encoder_apply(&mut tape, &enc_ids, x).unwrap();
        let z = projector_apply(&mut tape, &proj_ids, y).unwrap();
        let t = tape.leaf(Tensor::vector(target).unwrap()).unwrap();
        let c = tape.cosine(z, t).unwrap();
        let grads = tape.backward(c).unwrap();
        let ad = grads.get(enc_ids[0].0).unwrap();
        assert!(relative_l2_error(ad.data(), fd.data()) < 1e-5);
    }
}
