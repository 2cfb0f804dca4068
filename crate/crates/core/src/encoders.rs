//! Frozen visual and text encoders.
//!
//! Two visual families feed the model: a pure-visual backbone and a
//! multimodal one whose patch vectors share a space with the text encoder.
//! Both are implemented here as a linear patch embedding plus a fixed
//! sinusoidal position table. The toy variant draws the projection from a
//! seeded Gaussian; the pretrained variant reads it from a weight file. The
//! text encoder mean-pools per-token vectors, either hashed from a seed
//! (toy) or looked up in a token table (pretrained).

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SeaError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    PureVisual,
    MultimodalVisual,
    Text,
}

impl EncoderFamily {
    fn code(self) -> u32 {
        match self {
            EncoderFamily::PureVisual => 0,
            EncoderFamily::MultimodalVisual => 1,
            EncoderFamily::Text => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(EncoderFamily::PureVisual),
            1 => Some(EncoderFamily::MultimodalVisual),
            2 => Some(EncoderFamily::Text),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    pub embed_dim: usize,
    pub patch_size: usize,
    /// Always true; nothing in this crate updates encoder weights.
    pub frozen: bool,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Pure,
    Multimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Exo,
    Ego,
}

/// Patch grid of `dim`-vectors, row-major over (row, col).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub source: FeatureSource,
    pub domain: Domain,
    /// Set once the map has passed through the fusion former.
    pub fused: bool,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f64>,
        source: FeatureSource,
        domain: Domain,
    ) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(SeaError::Shape(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
            source,
            domain,
            fused: false,
        })
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn vector(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Tokens as a (height·width) × dim matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.tokens(), self.dim, self.data.clone())
    }

    pub fn from_tensor(
        t: &Tensor,
        height: usize,
        width: usize,
        source: FeatureSource,
        domain: Domain,
    ) -> Result<Self> {
        if t.rows() != height * width {
            return Err(SeaError::Shape(format!(
                "{} tokens do not fill a {height}x{width} grid",
                t.rows()
            )));
        }
        Self::new(height, width, t.cols(), t.data().to_vec(), source, domain)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub prompt: String,
}

pub trait VisualEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    /// Canonical (height, width) every image is resized to.
    fn input_size(&self) -> (usize, usize);
    fn encode(&self, image: &RgbImage, domain: Domain) -> Result<FeatureMap>;
    fn checksum(&self) -> String;

    fn grid_size(&self) -> (usize, usize) {
        let (h, w) = self.input_size();
        let p = self.spec().patch_size;
        (h / p, w / p)
    }
}

pub trait TextEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, prompt: &str) -> Result<TextEmbedding>;
    fn checksum(&self) -> String;
}

/// Fixed 2-D sinusoidal table: the first half of the channels encode the
/// row, the second half the column.
pub fn sinusoidal_positions(height: usize, width: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut t = Tensor::zeros(height * width, dim);
    let enc = |pos: usize, i: usize, n: usize| -> f64 {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / n.max(1) as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for y in 0..height {
        for x in 0..width {
            let row = t.row_mut(y * width + x);
            for i in 0..half {
                row[i] = enc(y, i, half);
            }
            for i in half..dim {
                row[i] = enc(x, i - half, dim - half);
            }
        }
    }
    t
}

const POSITION_SCALE: f64 = 0.5;

/// Linear patch embedding followed by a scaled sinusoidal position table.
#[derive(Clone, Debug)]
pub struct LinearPatchEncoder {
    spec: EncoderSpec,
    input_size: (usize, usize),
    /// (patch·patch·3) × embed_dim
    weight: Tensor,
    bias: Vec<f64>,
    positions: Tensor,
}

impl LinearPatchEncoder {
    pub fn toy(
        family: EncoderFamily,
        embed_dim: usize,
        patch_size: usize,
        input_size: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let in_dim = patch_size * patch_size * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5EA0_0000 + family.code() as u64));
        let scale = 1.0 / (in_dim as f64).sqrt() * 2.0;
        let data = (0..in_dim * embed_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self::from_parts(
            EncoderSpec {
                family,
                embed_dim,
                patch_size,
                frozen: true,
                seed,
            },
            input_size,
            Tensor::new(in_dim, embed_dim, data),
            vec![0.0; embed_dim],
        )
    }

    fn from_parts(
        spec: EncoderSpec,
        input_size: (usize, usize),
        weight: Tensor,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let p = spec.patch_size;
        if p == 0 || spec.embed_dim == 0 {
            return Err(SeaError::Config("patch size and embed dim must be positive".into()));
        }
        if input_size.0 % p != 0 || input_size.1 % p != 0 || input_size.0 == 0 || input_size.1 == 0 {
            return Err(SeaError::Shape(format!(
                "input size {}x{} is not divisible by patch size {p}",
                input_size.0, input_size.1
            )));
        }
        if weight.shape() != (p * p * 3, spec.embed_dim) || bias.len() != spec.embed_dim {
            return Err(SeaError::Shape(format!(
                "patch projection must be {}x{}, got {:?}",
                p * p * 3,
                spec.embed_dim,
                weight.shape()
            )));
        }
        let positions = sinusoidal_positions(input_size.0 / p, input_size.1 / p, spec.embed_dim);
        Ok(Self {
            spec,
            input_size,
            weight,
            bias,
            positions,
        })
    }

    /// Reads a patch-embedding weight file (see [`LinearPatchEncoder::save`]).
    pub fn load(path: &Path, expected: EncoderFamily) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SeaError::io(path, e))?;
        let mut r = &bytes[..];
        let bad = |m: &str| SeaError::Load(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != VISUAL_MAGIC {
            return Err(bad("not a visual encoder weight file"));
        }
        let header = read_u32s(&mut r, 5).ok_or_else(|| bad("truncated header"))?;
        let family = EncoderFamily::from_code(header[0]).ok_or_else(|| bad("unknown family"))?;
        if family != expected {
            return Err(bad(&format!("weights are for {family:?}, expected {expected:?}")));
        }
        let (patch, dim, h, w) = (
            header[1] as usize,
            header[2] as usize,
            header[3] as usize,
            header[4] as usize,
        );
        let in_dim = patch * patch * 3;
        let weight = read_f32s(&mut r, in_dim * dim).ok_or_else(|| bad("truncated weights"))?;
        let bias = read_f32s(&mut r, dim).ok_or_else(|| bad("truncated bias"))?;
        Self::from_parts(
            EncoderSpec {
                family,
                embed_dim: dim,
                patch_size: patch,
                frozen: true,
                seed: 0,
            },
            (h, w),
            Tensor::new(in_dim, dim, weight),
            bias,
        )
    }

    /// Writes the weight file: 8-byte magic, five little-endian u32
    /// (family, patch, dim, input height, input width), the projection in
    /// row-major f32 and the bias in f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(VISUAL_MAGIC);
        for v in [
            self.spec.family.code(),
            self.spec.patch_size as u32,
            self.spec.embed_dim as u32,
            self.input_size.0 as u32,
            self.input_size.1 as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.weight.data().iter().chain(&self.bias) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| SeaError::io(path, e))
    }
}

const VISUAL_MAGIC: &[u8; 8] = b"SEAWVIS1";
const TEXT_MAGIC: &[u8; 8] = b"SEAWTXT1";

fn read_u32s(r: &mut &[u8], n: usize) -> Option<Vec<u32>> {
    (0..n)
        .map(|_| {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).ok()?;
            Some(u32::from_le_bytes(b))
        })
        .collect()
}

fn read_f32s(r: &mut &[u8], n: usize) -> Option<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).ok()?;
            Some(f32::from_le_bytes(b) as f64)
        })
        .collect()
}

impl VisualEncoder for LinearPatchEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn encode(&self, image: &RgbImage, domain: Domain) -> Result<FeatureMap> {
        let (h, w) = self.input_size;
        let p = self.spec.patch_size;
        let resized;
        let img = if image.dimensions() == (w as u32, h as u32) {
            image
        } else {
            resized = imageops::resize(image, w as u32, h as u32, FilterType::Triangle);
            &resized
        };
        if img.height() as usize % p != 0 || img.width() as usize % p != 0 {
            return Err(SeaError::Shape(format!(
                "image {}x{} not divisible by patch {p}",
                img.height(),
                img.width()
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let mut patches = Tensor::zeros(gh * gw, p * p * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = patches.row_mut(gy * gw + gx);
                let mut i = 0;
                for y in 0..p {
                    for x in 0..p {
                        let px = img.get_pixel((gx * p + x) as u32, (gy * p + y) as u32);
                        for c in 0..3 {
                            row[i] = px.0[c] as f64 / 255.0 - 0.5;
                            i += 1;
                        }
                    }
                }
            }
        }
        let mut feats = patches.matmul(&self.weight);
        for r in 0..feats.rows() {
            let pos = self.positions.row(r).to_vec();
            for ((f, b), q) in feats.row_mut(r).iter_mut().zip(&self.bias).zip(pos) {
                *f += b + POSITION_SCALE * q;
            }
        }
        let source = match self.spec.family {
            EncoderFamily::PureVisual => FeatureSource::Pure,
            _ => FeatureSource::Multimodal,
        };
        FeatureMap::new(gh, gw, self.spec.embed_dim, feats.into_data(), source, domain)
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.weight.data().iter().chain(&self.bias).chain(self.positions.data()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Mean of per-token vectors over whitespace-split tokens.
#[derive(Clone, Debug)]
pub struct TokenTextEncoder {
    spec: EncoderSpec,
    /// Present for pretrained tables; toy encoders hash tokens instead.
    table: Option<HashMap<String, Vec<f64>>>,
}

impl TokenTextEncoder {
    pub fn toy(embed_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 {
            return Err(SeaError::Config("text embed dim must be positive".into()));
        }
        Ok(Self {
            spec: EncoderSpec {
                family: EncoderFamily::Text,
                embed_dim,
                patch_size: 1,
                frozen: true,
                seed,
            },
            table: None,
        })
    }

    /// Token table file: 8-byte magic, u32 dim, u32 count, then per token a
    /// u32 byte length, the UTF-8 bytes and `dim` f32 values.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SeaError::io(path, e))?;
        let bad = |m: &str| SeaError::Load(format!("{}: {m}", path.display()));
        let mut r = &bytes[..];
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != TEXT_MAGIC {
            return Err(bad("not a text encoder weight file"));
        }
        let h = read_u32s(&mut r, 2).ok_or_else(|| bad("truncated header"))?;
        let (dim, count) = (h[0] as usize, h[1] as usize);
        let mut table = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = read_u32s(&mut r, 1).ok_or_else(|| bad("truncated token"))?[0] as usize;
            if r.len() < len {
                return Err(bad("truncated token"));
            }
            let (tok, rest) = r.split_at(len);
            r = rest;
            let tok = String::from_utf8(tok.to_vec()).map_err(|_| bad("token is not UTF-8"))?;
            let v = read_f32s(&mut r, dim).ok_or_else(|| bad("truncated vector"))?;
            table.insert(tok, v);
        }
        Ok(Self {
            spec: EncoderSpec {
                family: EncoderFamily::Text,
                embed_dim: dim,
                patch_size: 1,
                frozen: true,
                seed: 0,
            },
            table: Some(table),
        })
    }

    pub fn save_table(path: &Path, dim: usize, table: &[(String, Vec<f64>)]) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(TEXT_MAGIC);
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (tok, v) in table {
            if v.len() != dim {
                return Err(SeaError::Shape(format!("token {tok:?} vector has wrong dim")));
            }
            out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
            out.extend_from_slice(tok.as_bytes());
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| SeaError::io(path, e))
    }

    fn token_vector(&self, token: &str) -> Result<Vec<f64>> {
        match &self.table {
            Some(t) => t
                .get(token)
                .cloned()
                .ok_or_else(|| SeaError::Input(format!("token {token:?} not in text table"))),
            None => {
                let mut h = Sha256::new();
                h.update(self.spec.seed.to_le_bytes());
                h.update(token.as_bytes());
                let digest: [u8; 32] = h.finalize().into();
                let mut rng = ChaCha8Rng::from_seed(digest);
                Ok((0..self.spec.embed_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect())
            }
        }
    }
}

impl TextEncoder for TokenTextEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(SeaError::Input("empty prompt".into()));
        }
        let mut acc = vec![0.0; self.spec.embed_dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)?) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        if crate::tensor::l2_norm(&acc) == 0.0 {
            return Err(SeaError::Input(format!("prompt {prompt:?} embeds to the zero vector")));
        }
        Ok(TextEmbedding {
            vector: acc,
            prompt: prompt.to_string(),
        })
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        if let Some(t) = &self.table {
            let mut keys: Vec<_> = t.keys().collect();
            keys.sort();
            for k in keys {
                h.update(k.as_bytes());
                for v in &t[k] {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Toy,
    Pretrained,
}

/// The three frozen encoders used by the model.
pub struct Encoders {
    pub pure: Box<dyn VisualEncoder>,
    pub multimodal: Box<dyn VisualEncoder>,
    pub text: Box<dyn TextEncoder>,
}

impl Encoders {
    pub fn toy(
        pure_dim: usize,
        multimodal_dim: usize,
        patch: usize,
        input_size: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            pure: Box::new(LinearPatchEncoder::toy(
                EncoderFamily::PureVisual,
                pure_dim,
                patch,
                input_size,
                seed,
            )?),
            multimodal: Box::new(LinearPatchEncoder::toy(
                EncoderFamily::MultimodalVisual,
                multimodal_dim,
                patch,
                input_size,
                seed,
            )?),
            text: Box::new(TokenTextEncoder::toy(multimodal_dim, seed)?),
        })
    }

    /// Multimodal visual and text outputs must share a dimension for cosine scoring.
    pub fn validate(&self) -> Result<()> {
        let (mm, tx) = (self.multimodal.spec().embed_dim, self.text.spec().embed_dim);
        if mm != tx {
            return Err(SeaError::Config(format!(
                "multimodal visual dim {mm} differs from text dim {tx}"
            )));
        }
        if self.pure.grid_size() != self.multimodal.grid_size() {
            return Err(SeaError::Config(
                "pure and multimodal encoders produce different patch grids".into(),
            ));
        }
        Ok(())
    }

    pub fn encode_visual_pure(&self, image: &RgbImage, domain: Domain) -> Result<FeatureMap> {
        self.pure.encode(image, domain)
    }

    pub fn encode_visual_multimodal(&self, image: &RgbImage, domain: Domain) -> Result<FeatureMap> {
        self.multimodal.encode(image, domain)
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.text.encode(prompt)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.pure.checksum());
        h.update(self.multimodal.checksum());
        h.update(self.text.checksum());
        hex::encode(h.finalize())
    }

    pub fn grid_size(&self) -> (usize, usize) {
        self.pure.grid_size()
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.pure.input_size()
    }
}
