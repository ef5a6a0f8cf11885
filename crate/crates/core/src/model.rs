//! Network representation, fix assignments and the `.wfnm` model format.
//!
//! Parameters live in one flat vector in canonical order: layer by layer,
//! each layer's weights row-major followed by its bias (if any). A parameter's
//! position in that vector is its weight id, and every per-weight table
//! (fix assignment, usage counts, ...) is indexed the same way.
//!
//! # File layout
//!
//! All integers little-endian.
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 4                | magic `WFNM`                                         |
//! | 1                | format version (`1`)                                 |
//! | 4                | manifest length `M` (u32)                            |
//! | `M`              | UTF-8 JSON manifest (input shape, layers, codebook)  |
//! | `8·N`            | parameters, f64 in canonical order                   |
//! | `8·K`            | codebook values, f64                                 |
//! | `4·N`            | codebook index per parameter (u32, `0xFFFFFFFF` = free) |
//!
//! `N` and `K` are stated in the manifest; trailing bytes are rejected.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::apot::{parse_terms, ApotValue, Pow2Term};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"WFNM";
pub const FORMAT_VERSION: u8 = 1;
const FREE_SLOT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    First,
    Last,
    Norm,
}

/// Activation shape flowing between layers (channels × height × width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ActShape {
    pub fn flat(features: usize) -> Self {
        ActShape {
            channels: features,
            height: 1,
            width: 1,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        ActShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map_size(&self) -> usize {
        self.height * self.width
    }
}

/// One layer with its own parameter arrays.
///
/// Shapes: dense `[out, in]`, conv2d `[out_ch, in_ch, kh, kw]` (stride 1,
/// valid padding), norm `[channels]` with `weights` the per-channel scale and
/// `bias` the per-channel shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub tags: BTreeSet<LayerTag>,
}

impl Layer {
    pub fn dense(out: usize, inp: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Self {
        Layer {
            kind: LayerKind::Dense,
            shape: vec![out, inp],
            weights,
            bias,
            tags: BTreeSet::new(),
        }
    }

    pub fn conv2d(shape: [usize; 4], weights: Vec<f64>, bias: Option<Vec<f64>>) -> Self {
        Layer {
            kind: LayerKind::Conv2d,
            shape: shape.to_vec(),
            weights,
            bias,
            tags: BTreeSet::new(),
        }
    }

    pub fn norm(scale: Vec<f64>, shift: Option<Vec<f64>>) -> Self {
        Layer {
            kind: LayerKind::Norm,
            shape: vec![scale.len()],
            weights: scale,
            bias: shift,
            tags: BTreeSet::new(),
        }
    }
}

/// Layer metadata as stored inside a [`Network`]; the parameter values are
/// in the network's flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    kind: LayerKind,
    shape: Vec<usize>,
    has_bias: bool,
    tags: BTreeSet<LayerTag>,
    weights: Range<usize>,
    bias: Range<usize>,
    input: ActShape,
    output: ActShape,
}

impl LayerInfo {
    pub fn kind(&self) -> LayerKind {
        self.kind
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn has_bias(&self) -> bool {
        self.has_bias
    }
    pub fn tags(&self) -> &BTreeSet<LayerTag> {
        &self.tags
    }
    pub fn has_tag(&self, tag: LayerTag) -> bool {
        self.tags.contains(&tag)
    }
    /// Weight ids of this layer's weights.
    pub fn weight_ids(&self) -> Range<usize> {
        self.weights.clone()
    }
    /// Weight ids of this layer's bias (empty without bias).
    pub fn bias_ids(&self) -> Range<usize> {
        self.bias.clone()
    }
    /// Every weight id owned by the layer.
    pub fn ids(&self) -> Range<usize> {
        self.weights.start..self.bias.end
    }
    pub fn input(&self) -> ActShape {
        self.input
    }
    pub fn output(&self) -> ActShape {
        self.output
    }
}

/// A codebook value referenced by fixed weights. `terms` is `None` for
/// values that came from the full-precision fallback rather than from a
/// powers-of-two codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookEntry {
    pub value: f64,
    pub terms: Option<Vec<Pow2Term>>,
}

impl CodebookEntry {
    pub fn from_apot(v: &ApotValue) -> Self {
        CodebookEntry {
            value: v.value(),
            terms: Some(v.terms().to_vec()),
        }
    }

    pub fn full_precision(value: f64) -> Self {
        if value == 0.0 {
            return CodebookEntry {
                value: 0.0,
                terms: Some(Vec::new()),
            };
        }
        CodebookEntry { value, terms: None }
    }

    /// Number of power-of-two terms, `None` for full-precision values.
    pub fn order(&self) -> Option<usize> {
        self.terms.as_ref().map(Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input: ActShape,
    layers: Vec<LayerInfo>,
    params: Vec<f64>,
    assignment: Vec<Option<u32>>,
    codebook: Vec<CodebookEntry>,
}

impl Network {
    /// Builds a network from owned layers, validating shapes and assigning
    /// the positional tags (`first`/`last` on the first/last non-norm layer,
    /// `norm` on every norm layer). Nothing is fixed yet.
    pub fn new(input: ActShape, layers: Vec<Layer>) -> Result<Self> {
        let mut tagged = layers;
        let non_norm: Vec<usize> = tagged
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind != LayerKind::Norm)
            .map(|(i, _)| i)
            .collect();
        for layer in tagged.iter_mut() {
            layer.tags.clear();
            if layer.kind == LayerKind::Norm {
                layer.tags.insert(LayerTag::Norm);
            }
        }
        if let (Some(&first), Some(&last)) = (non_norm.first(), non_norm.last()) {
            tagged[first].tags.insert(LayerTag::First);
            tagged[last].tags.insert(LayerTag::Last);
        }
        let (infos, params) = assemble(input, &tagged)?;
        let n = params.len();
        Ok(Network {
            input,
            layers: infos,
            params,
            assignment: vec![None; n],
            codebook: Vec::new(),
        })
    }

    /// Dense ReLU network with He-normal weights and zero biases.
    pub fn mlp(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Param(format!("bad MLP widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (inp, out) = (pair[0], pair[1]);
                let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("finite std");
                let weights = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
                Layer::dense(out, inp, weights, Some(vec![0.0; out]))
            })
            .collect();
        Network::new(ActShape::flat(widths[0]), layers)
    }

    /// Rebuilds the owned layer list.
    pub fn layers(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|info| Layer {
                kind: info.kind,
                shape: info.shape.clone(),
                weights: self.params[info.weights.clone()].to_vec(),
                bias: info
                    .has_bias
                    .then(|| self.params[info.bias.clone()].to_vec()),
                tags: info.tags.clone(),
            })
            .collect()
    }

    pub fn layer_info(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn input(&self) -> ActShape {
        self.input
    }

    pub fn output(&self) -> ActShape {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// `(weight_id, value)` in canonical order.
    pub fn flatten_weights(&self) -> Vec<(usize, f64)> {
        self.params.iter().copied().enumerate().collect()
    }

    /// Layer index and in-layer offset of a weight id.
    pub fn locate(&self, id: usize) -> Option<(usize, usize)> {
        let layer = self.layers.partition_point(|l| l.ids().end <= id);
        let info = self.layers.get(layer)?;
        info.ids()
            .contains(&id)
            .then(|| (layer, id - info.ids().start))
    }

    pub fn is_fixed(&self, id: usize) -> bool {
        self.assignment[id].is_some()
    }

    pub fn fix_mask(&self) -> Vec<bool> {
        self.assignment.iter().map(Option::is_some).collect()
    }

    pub fn fixed_value_index(&self) -> &[Option<u32>] {
        &self.assignment
    }

    pub fn codebook(&self) -> &[CodebookEntry] {
        &self.codebook
    }

    pub fn fixed_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    pub fn free_ids(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| !self.is_fixed(i))
            .collect()
    }

    /// Overwrites free parameters from `values`; fixed ones keep their value.
    pub fn set_free_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (i, (p, &v)) in self.params.iter_mut().zip(values).enumerate() {
            if self.assignment[i].is_none() {
                *p = v;
            }
        }
        Ok(())
    }

    /// Same topology with new parameter values and nothing fixed.
    pub fn with_params(&self, values: Vec<f64>) -> Result<Network> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        Ok(Network {
            input: self.input,
            layers: self.layers.clone(),
            assignment: vec![None; values.len()],
            params: values,
            codebook: Vec::new(),
        })
    }

    /// Index of `entry` in the codebook, adding it if absent.
    pub fn intern(&mut self, entry: CodebookEntry) -> u32 {
        if let Some(pos) = self
            .codebook
            .iter()
            .position(|e| e.value.to_bits() == entry.value.to_bits())
        {
            // an exact powers-of-two decomposition beats a bare value
            if self.codebook[pos].terms.is_none() && entry.terms.is_some() {
                self.codebook[pos].terms = entry.terms;
            }
            return pos as u32;
        }
        self.codebook.push(entry);
        (self.codebook.len() - 1) as u32
    }

    /// Fixes weight `id` to codebook slot `slot`. Fixing is permanent: a
    /// second call for the same id is an error.
    pub fn fix(&mut self, id: usize, slot: u32) -> Result<()> {
        let value = self
            .codebook
            .get(slot as usize)
            .ok_or_else(|| Error::Param(format!("codebook slot {slot} out of range")))?
            .value;
        match self.assignment.get(id) {
            None => Err(Error::Param(format!("weight id {id} out of range"))),
            Some(Some(_)) => Err(Error::Param(format!("weight {id} is already fixed"))),
            Some(None) => {
                self.assignment[id] = Some(slot);
                self.params[id] = value;
                Ok(())
            }
        }
    }

    /// True when both networks have identical layer structure.
    pub fn same_topology(&self, other: &Network) -> bool {
        self.input == other.input
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.kind == b.kind && a.shape == b.shape && a.has_bias == b.has_bias)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            input: self.input,
            layers: self
                .layers
                .iter()
                .map(|l| LayerManifest {
                    kind: l.kind,
                    shape: l.shape.clone(),
                    bias: l.has_bias,
                    tags: l.tags.iter().copied().collect(),
                })
                .collect(),
            param_count: self.params.len(),
            codebook: self
                .codebook
                .iter()
                .map(|e| {
                    e.terms.as_ref().map(|t| {
                        t.iter()
                            .map(|x| x.to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                })
                .collect(),
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(
            9 + manifest.len() + 12 * self.params.len() + 8 * self.codebook.len(),
        );
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for e in &self.codebook {
            out.extend_from_slice(&e.value.to_le_bytes());
        }
        for a in &self.assignment {
            out.extend_from_slice(&a.unwrap_or(FREE_SLOT).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mlen = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)
            .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;

        let n = manifest.param_count;
        let k = manifest.codebook.len();
        let expected = n
            .checked_mul(12)
            .and_then(|x| x.checked_add(k.checked_mul(8)?))
            .ok_or_else(|| Error::Format("length overflow".into()))?;
        if r.remaining() < expected {
            return Err(Error::Format(format!(
                "truncated blob: need {expected} bytes, have {}",
                r.remaining()
            )));
        }
        if r.remaining() > expected {
            return Err(Error::Format("trailing bytes after blob".into()));
        }

        let params: Vec<f64> = (0..n).map(|_| r.f64()).collect();
        let values: Vec<f64> = (0..k).map(|_| r.f64()).collect();
        let slots: Vec<u32> = (0..n).map(|_| r.u32()).collect();

        let layers = manifest
            .layers
            .iter()
            .map(|l| {
                let bias_len = if l.bias { bias_len(&l.shape) } else { 0 };
                Layer {
                    kind: l.kind,
                    shape: l.shape.clone(),
                    weights: vec![0.0; l.shape.iter().product()],
                    bias: l.bias.then(|| vec![0.0; bias_len]),
                    tags: BTreeSet::new(),
                }
            })
            .collect();
        let mut net = Network::new(manifest.input, layers)?;
        if net.params.len() != n {
            return Err(Error::Format(format!(
                "manifest declares {n} parameters, layers hold {}",
                net.params.len()
            )));
        }
        for (info, stored) in net.layers.iter().zip(&manifest.layers) {
            let stored: BTreeSet<LayerTag> = stored.tags.iter().copied().collect();
            if stored != info.tags {
                return Err(Error::Format(format!(
                    "layer tags {stored:?} inconsistent with position {:?}",
                    info.tags
                )));
            }
        }
        net.params = params;
        net.codebook = values
            .iter()
            .zip(&manifest.codebook)
            .map(|(&value, terms)| {
                let terms = terms.as_deref().map(parse_terms).transpose()?;
                if let Some(t) = &terms {
                    let sum: f64 = t.iter().map(|x| x.value()).sum();
                    if sum.to_bits() != value.to_bits() && !(sum == 0.0 && value == 0.0) {
                        return Err(Error::Format(format!(
                            "codebook value {value} does not match its terms"
                        )));
                    }
                }
                Ok(CodebookEntry { value, terms })
            })
            .collect::<Result<_>>()?;
        for (i, slot) in slots.into_iter().enumerate() {
            if slot == FREE_SLOT {
                continue;
            }
            let entry = net
                .codebook
                .get(slot as usize)
                .ok_or_else(|| Error::Format(format!("weight {i} points past the codebook")))?;
            if entry.value.to_bits() != net.params[i].to_bits() {
                return Err(Error::Format(format!(
                    "fixed weight {i} differs from its codebook value"
                )));
            }
            net.assignment[i] = Some(slot);
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Network::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    net.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    Network::load(path)
}

fn bias_len(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(0)
}

fn assemble(input: ActShape, layers: &[Layer]) -> Result<(Vec<LayerInfo>, Vec<f64>)> {
    let mut infos = Vec::with_capacity(layers.len());
    let mut params = Vec::new();
    let mut current = input;
    for (idx, layer) in layers.iter().enumerate() {
        let shape_err = |msg: String| Error::Shape(format!("layer {idx}: {msg}"));
        let output = match (layer.kind, layer.shape.as_slice()) {
            (LayerKind::Dense, &[out, inp]) => {
                if inp != current.len() {
                    return Err(shape_err(format!(
                        "dense expects {inp} inputs, receives {}",
                        current.len()
                    )));
                }
                ActShape::flat(out)
            }
            (LayerKind::Conv2d, &[out, inc, kh, kw]) => {
                if inc != current.channels {
                    return Err(shape_err(format!(
                        "conv expects {inc} channels, receives {}",
                        current.channels
                    )));
                }
                if kh == 0 || kw == 0 || kh > current.height || kw > current.width {
                    return Err(shape_err(format!(
                        "kernel {kh}x{kw} does not fit a {}x{} map",
                        current.height, current.width
                    )));
                }
                ActShape::image(out, current.height - kh + 1, current.width - kw + 1)
            }
            (LayerKind::Norm, &[channels]) => {
                if channels != current.channels {
                    return Err(shape_err(format!(
                        "norm over {channels} channels, receives {}",
                        current.channels
                    )));
                }
                current
            }
            (kind, shape) => return Err(shape_err(format!("bad shape {shape:?} for {kind:?}"))),
        };
        if output.is_empty() {
            return Err(shape_err("empty output".into()));
        }
        let expected: usize = layer.shape.iter().product();
        if layer.weights.len() != expected {
            return Err(shape_err(format!(
                "weight array has {} values, shape needs {expected}",
                layer.weights.len()
            )));
        }
        let start = params.len();
        params.extend_from_slice(&layer.weights);
        let mid = params.len();
        if let Some(b) = &layer.bias {
            if b.len() != layer.shape[0] {
                return Err(shape_err(format!(
                    "bias has {} values, needs {}",
                    b.len(),
                    layer.shape[0]
                )));
            }
            params.extend_from_slice(b);
        }
        infos.push(LayerInfo {
            kind: layer.kind,
            shape: layer.shape.clone(),
            has_bias: layer.bias.is_some(),
            tags: layer.tags.clone(),
            weights: start..mid,
            bias: mid..params.len(),
            input: current,
            output,
        });
        current = output;
    }
    if !layers.is_empty() && !layers.iter().any(|l| l.kind != LayerKind::Norm) {
        return Err(Error::Shape(
            "a network needs at least one dense or conv layer".into(),
        ));
    }
    Ok((infos, params))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    input: ActShape,
    layers: Vec<LayerManifest>,
    param_count: usize,
    /// Term strings per codebook slot; `null` marks full-precision values.
    codebook: Vec<Option<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    kind: LayerKind,
    shape: Vec<usize>,
    bias: bool,
    tags: Vec<LayerTag>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    // callers check the length up front
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).unwrap().try_into().unwrap())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).unwrap().try_into().unwrap())
    }
}
