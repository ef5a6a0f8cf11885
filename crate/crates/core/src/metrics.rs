//! Size and entropy metrics for (compressed) networks.
//!
//! Model sizes in bytes:
//!
//! * `raw`: `N × 4` (32-bit floats).
//! * `huffman_payload`: `ceil(Σ_w B_w / 8)` with canonical Huffman lengths
//!   `B_w` over the value multiset.
//! * `huffman_codebook`: `K × 5` (a 32-bit value plus a one-byte length per
//!   distinct value).
//! * `lzw_payload`: LZW over the index stream. Every parameter in canonical
//!   order is replaced by the rank of its value among the `K` distinct
//!   values (ascending), written as `u8` when `K ≤ 256`, little-endian `u16`
//!   when `K ≤ 65536`, else little-endian `u32`. The bytes are LZW-coded with
//!   a 256-entry initial dictionary and fixed 12-bit codes packed MSB-first
//!   (last byte zero-padded); the dictionary is reset to 256 entries as soon
//!   as it would reach 4096.
//! * `lzw_codebook`: `K × 4`.
//!
//! The compression ratio is `raw` of the baseline divided by
//! `huffman_payload + huffman_codebook` of the compressed model.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::model::{LayerKind, LayerTag, Network};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Equality key for weight values (`-0.0` and `0.0` coincide).
fn key(v: f64) -> u64 {
    (v + 0.0).to_bits()
}

/// Distinct values with their multiplicities, ascending by value.
pub fn value_histogram(values: &[f64]) -> Vec<(f64, usize)> {
    let mut sorted: Vec<f64> = values.iter().map(|v| v + 0.0).collect();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, usize)> = Vec::new();
    for v in sorted {
        match out.last_mut() {
            Some((last, n)) if key(*last) == key(v) => *n += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

fn entropy_of_counts(counts: impl Iterator<Item = usize> + Clone) -> f64 {
    let n: usize = counts.clone().sum();
    let n = n as f64;
    counts
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Shannon entropy in bits of the empirical value distribution.
pub fn weight_entropy(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return param_err("entropy of an empty multiset");
    }
    let hist = value_histogram(values);
    Ok(entropy_of_counts(hist.iter().map(|&(_, c)| c)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuffmanEntry {
    pub value: f64,
    pub count: usize,
    pub length: u32,
    /// Canonical code word as a string of `0`/`1`.
    pub code: String,
}

/// Canonical Huffman code over weight values.
#[derive(Clone, Debug, PartialEq)]
pub struct HuffmanCode {
    entries: Vec<HuffmanEntry>,
    index: HashMap<u64, usize>,
}

impl HuffmanCode {
    /// Entries in canonical order: by code length, then by value.
    pub fn entries(&self) -> &[HuffmanEntry] {
        &self.entries
    }

    pub fn length_of(&self, value: f64) -> Option<u32> {
        self.index.get(&key(value)).map(|&i| self.entries[i].length)
    }

    pub fn total_bits(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| e.count as u64 * u64::from(e.length))
            .sum()
    }

    pub fn symbol_count(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn average_length(&self) -> f64 {
        self.total_bits() as f64 / self.symbol_count() as f64
    }

    /// `Σ 2^-B_w`; exactly 1 for two or more symbols.
    pub fn kraft_sum(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| 0.5f64.powi(e.length as i32))
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        entropy_of_counts(self.entries.iter().map(|e| e.count))
    }
}

/// Huffman code lengths for `counts` (all positive). Merges pop the two
/// lightest nodes, ties broken by creation order with leaves created first
/// in input order. A single symbol gets length 1.
pub fn huffman_lengths(counts: &[usize]) -> Vec<u32> {
    match counts.len() {
        0 => return Vec::new(),
        1 => return vec![1],
        _ => {}
    }
    let mut heap = BinaryHeap::new();
    let mut parent: Vec<usize> = Vec::with_capacity(2 * counts.len());
    for (i, &c) in counts.iter().enumerate() {
        heap.push(Reverse((c as u128, i)));
        parent.push(usize::MAX);
    }
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("two nodes");
        let Reverse((wb, b)) = heap.pop().expect("two nodes");
        let node = parent.len();
        parent.push(usize::MAX);
        parent[a] = node;
        parent[b] = node;
        heap.push(Reverse((wa + wb, node)));
    }
    (0..counts.len())
        .map(|leaf| {
            let mut depth = 0;
            let mut n = leaf;
            while parent[n] != usize::MAX {
                n = parent[n];
                depth += 1;
            }
            depth
        })
        .collect()
}

/// Builds the canonical code for `(value, count)` pairs with distinct values.
pub fn huffman_codebook(freqs: &[(f64, usize)]) -> Result<HuffmanCode> {
    if freqs.is_empty() {
        return param_err("Huffman code needs at least one symbol");
    }
    if freqs.iter().any(|&(_, c)| c == 0) {
        return param_err("Huffman symbol with zero count");
    }
    let mut symbols: Vec<(f64, usize)> = freqs.iter().map(|&(v, c)| (v + 0.0, c)).collect();
    symbols.sort_by(|a, b| a.0.total_cmp(&b.0));
    if symbols.windows(2).any(|w| key(w[0].0) == key(w[1].0)) {
        return param_err("duplicate Huffman symbol");
    }
    let lengths = huffman_lengths(&symbols.iter().map(|s| s.1).collect::<Vec<_>>());
    if lengths.iter().any(|&l| l > 127) {
        return param_err("Huffman code longer than 127 bits");
    }
    let mut order: Vec<usize> = (0..symbols.len()).collect();
    order.sort_by(|&a, &b| {
        lengths[a]
            .cmp(&lengths[b])
            .then(symbols[a].0.total_cmp(&symbols[b].0))
    });
    let mut entries = Vec::with_capacity(order.len());
    let mut code: u128 = 0;
    let mut prev_len = lengths[order[0]];
    for (k, &i) in order.iter().enumerate() {
        let len = lengths[i];
        if k > 0 {
            code = (code + 1) << (len - prev_len);
        }
        prev_len = len;
        entries.push(HuffmanEntry {
            value: symbols[i].0,
            count: symbols[i].1,
            length: len,
            code: format!("{code:0width$b}", width = len as usize),
        });
    }
    let index = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (key(e.value), i))
        .collect();
    Ok(HuffmanCode { entries, index })
}

/// Times each parameter is used in one inference: 1 for dense weights and
/// biases, the output map size for conv weights and biases, the channel map
/// size for norm parameters.
pub fn usage_counts(net: &Network) -> Vec<u64> {
    let mut counts = vec![0u64; net.num_params()];
    for layer in net.layer_info() {
        let uses = match layer.kind() {
            LayerKind::Dense => 1,
            LayerKind::Conv2d => layer.output().map_size() as u64,
            LayerKind::Norm => layer.input().map_size() as u64,
        };
        counts[layer.ids()].iter_mut().for_each(|c| *c = uses);
    }
    counts
}

/// `Σ_w N_w·B_w` over all parameters.
pub fn rep_mixed(net: &Network, code: &HuffmanCode) -> Result<u64> {
    let usage = usage_counts(net);
    net.params()
        .iter()
        .zip(&usage)
        .map(|(&v, &n)| {
            code.length_of(v)
                .map(|b| n * u64::from(b))
                .ok_or(Error::MissingCode(v))
        })
        .sum()
}

const LZW_WIDTH: u32 = 12;
const LZW_LIMIT: u16 = 1 << LZW_WIDTH;

/// LZW codes for `input` (see the module docs for the exact variant).
pub fn lzw_compress(input: &[u8]) -> Vec<u16> {
    let mut dict: HashMap<(u16, u8), u16> = HashMap::new();
    let mut next: u16 = 256;
    let mut out = Vec::new();
    let mut bytes = input.iter();
    let Some(&first) = bytes.next() else {
        return out;
    };
    let mut w = u16::from(first);
    for &b in bytes {
        if let Some(&code) = dict.get(&(w, b)) {
            w = code;
            continue;
        }
        out.push(w);
        dict.insert((w, b), next);
        next += 1;
        if next == LZW_LIMIT {
            dict.clear();
            next = 256;
        }
        w = u16::from(b);
    }
    out.push(w);
    out
}

pub fn lzw_decompress(codes: &[u16]) -> Result<Vec<u8>> {
    let bad = |c: u16| Error::Format(format!("invalid LZW code {c}"));
    let mut table: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut out = Vec::new();
    let mut prev: Option<Vec<u8>> = None;
    for &c in codes {
        let entry = match prev.take() {
            None => table.get(usize::from(c)).cloned().ok_or_else(|| bad(c))?,
            Some(p) => {
                if table.len() == usize::from(LZW_LIMIT) - 1 {
                    // the encoder's pending entry filled the table and it
                    // restarted before emitting this code
                    table.truncate(256);
                    table.get(usize::from(c)).cloned().ok_or_else(|| bad(c))?
                } else {
                    let e = if usize::from(c) < table.len() {
                        table[usize::from(c)].clone()
                    } else if usize::from(c) == table.len() {
                        let mut e = p.clone();
                        e.push(p[0]);
                        e
                    } else {
                        return Err(bad(c));
                    };
                    let mut added = p;
                    added.push(e[0]);
                    table.push(added);
                    e
                }
            }
        };
        out.extend_from_slice(&entry);
        prev = Some(entry);
    }
    Ok(out)
}

/// Packs 12-bit codes MSB-first, zero-padding the final byte.
pub fn lzw_pack(codes: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len() * 3 / 2 + 1);
    let mut acc: u32 = 0;
    let mut bits = 0;
    for &c in codes {
        acc = (acc << LZW_WIDTH) | u32::from(c);
        bits += LZW_WIDTH;
        while bits >= 8 {
            bits -= 8;
            out.push((acc >> bits) as u8);
        }
        acc &= (1 << bits) - 1;
    }
    if bits > 0 {
        out.push((acc << (8 - bits)) as u8);
    }
    out
}

pub fn lzw_unpack(bytes: &[u8]) -> Vec<u16> {
    let mut out = Vec::with_capacity(bytes.len() * 2 / 3);
    let mut acc: u32 = 0;
    let mut bits = 0;
    for &b in bytes {
        acc = (acc << 8) | u32::from(b);
        bits += 8;
        if bits >= LZW_WIDTH {
            bits -= LZW_WIDTH;
            out.push((acc >> bits) as u16);
            acc &= (1 << bits) - 1;
        }
    }
    out
}

/// Value ranks of every parameter, serialised at the narrowest width.
pub fn index_stream(values: &[f64]) -> Vec<u8> {
    let hist = value_histogram(values);
    let rank: HashMap<u64, usize> = hist
        .iter()
        .enumerate()
        .map(|(i, (v, _))| (key(*v), i))
        .collect();
    let k = hist.len();
    let mut out = Vec::new();
    for &v in values {
        let r = rank[&key(v)];
        if k <= 256 {
            out.push(r as u8);
        } else if k <= 65536 {
            out.extend_from_slice(&(r as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSizes {
    pub raw: u64,
    pub huffman: u64,
    pub huffman_payload: u64,
    pub huffman_codebook: u64,
    pub lzw: u64,
    pub lzw_payload: u64,
    pub lzw_codebook: u64,
}

pub fn model_sizes(net: &Network, code: &HuffmanCode) -> ModelSizes {
    let k = code.entries().len() as u64;
    let huffman_payload = code.total_bits().div_ceil(8);
    let lzw_payload = lzw_pack(&lzw_compress(&index_stream(net.params()))).len() as u64;
    ModelSizes {
        raw: net.num_params() as u64 * 4,
        huffman: huffman_payload + 5 * k,
        huffman_payload,
        huffman_codebook: 5 * k,
        lzw: lzw_payload + 4 * k,
        lzw_payload,
        lzw_codebook: 4 * k,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueCount {
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderCount {
    /// Power-of-two terms in the value; `null` for full-precision values.
    pub order: Option<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub num_params: usize,
    pub fixed_params: usize,
    pub entropy_bits: f64,
    pub unique_counts: BTreeMap<String, usize>,
    pub entropy_by_subset: BTreeMap<String, f64>,
    pub huffman: Vec<HuffmanEntry>,
    pub huffman_average_bits: f64,
    pub kraft_sum: f64,
    pub rep_mixed_bits: u64,
    /// Rep_Mixed of the same usage at 32 bits per parameter.
    pub rep_mixed_32bit: u64,
    pub compression_ratio: f64,
    pub model_size_bytes: ModelSizes,
    pub top_weights: Vec<ValueCount>,
    pub order_histogram: Vec<OrderCount>,
}

pub const SUBSETS: [&str; 3] = ["full", "no_norm", "no_norm_first_last"];

fn subset_values(net: &Network, subset: &str) -> Vec<f64> {
    let excluded: &[LayerTag] = match subset {
        "no_norm" => &[LayerTag::Norm],
        "no_norm_first_last" => &[LayerTag::Norm, LayerTag::First, LayerTag::Last],
        _ => &[],
    };
    net.layer_info()
        .iter()
        .filter(|l| !excluded.iter().any(|&t| l.has_tag(t)))
        .flat_map(|l| net.params()[l.ids()].iter().copied())
        .collect()
}

/// Fills every report field for `compressed`, measured against `baseline`.
pub fn build_report(baseline: &Network, compressed: &Network) -> Result<MetricsReport> {
    if !baseline.same_topology(compressed) {
        return Err(Error::Topology(
            "baseline and compressed networks differ in topology".into(),
        ));
    }
    let values = compressed.params();
    let hist = value_histogram(values);
    let code = huffman_codebook(&hist)?;
    let mut unique_counts = BTreeMap::new();
    let mut entropy_by_subset = BTreeMap::new();
    for name in SUBSETS {
        let v = subset_values(compressed, name);
        unique_counts.insert(name.to_string(), value_histogram(&v).len());
        let h = if v.is_empty() {
            0.0
        } else {
            weight_entropy(&v)?
        };
        entropy_by_subset.insert(name.to_string(), h);
    }
    let sizes = model_sizes(compressed, &code);
    let baseline_raw = baseline.num_params() as u64 * 4;
    let mut top: Vec<ValueCount> = hist
        .iter()
        .map(|&(value, count)| ValueCount { value, count })
        .collect();
    top.sort_by(|a, b| b.count.cmp(&a.count).then(a.value.total_cmp(&b.value)));

    let mut orders: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    for slot in compressed.fixed_value_index().iter().flatten() {
        *orders
            .entry(compressed.codebook()[*slot as usize].order())
            .or_insert(0) += 1;
    }
    let usage: u64 = usage_counts(compressed).iter().sum();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        num_params: compressed.num_params(),
        fixed_params: compressed.fixed_count(),
        entropy_bits: code.entropy(),
        unique_counts,
        entropy_by_subset,
        huffman_average_bits: code.average_length(),
        kraft_sum: code.kraft_sum(),
        rep_mixed_bits: rep_mixed(compressed, &code)?,
        rep_mixed_32bit: usage * 32,
        compression_ratio: baseline_raw as f64 / sizes.huffman as f64,
        model_size_bytes: sizes,
        top_weights: top,
        order_histogram: orders
            .into_iter()
            .map(|(order, count)| OrderCount { order, count })
            .collect(),
        huffman: code.entries,
    })
}

impl MetricsReport {
    /// Checks the report's internal invariants: counts add up, entropy
    /// bounds, Kraft equality and the source-coding bound.
    pub fn check(&self) -> Result<()> {
        let total: usize = self.top_weights.iter().map(|t| t.count).sum();
        if total != self.num_params {
            return Err(Error::Format(format!(
                "top_weights count {total} != {} parameters",
                self.num_params
            )));
        }
        let full = self.unique_counts.get("full").copied().unwrap_or(0);
        if self.entropy_bits > (full as f64).log2() + 1e-12 {
            return Err(Error::Format(
                "entropy exceeds log2 of the unique count".into(),
            ));
        }
        let kraft_ok = if self.huffman.len() >= 2 {
            (self.kraft_sum - 1.0).abs() < 1e-12
        } else {
            self.kraft_sum <= 1.0
        };
        if !kraft_ok {
            return Err(Error::Format(format!(
                "Kraft sum {} is not 1",
                self.kraft_sum
            )));
        }
        let h = self.entropy_bits;
        let avg = self.huffman_average_bits;
        let single = self.huffman.len() == 1;
        if !single && !(avg >= h - 1e-12 && avg < h + 1.0) {
            return Err(Error::Format(format!(
                "average code length {avg} outside [{h}, {h}+1)"
            )));
        }
        let monotone = SUBSETS
            .windows(2)
            .all(|w| self.unique_counts[w[0]] >= self.unique_counts[w[1]]);
        if !monotone {
            return Err(Error::Format(
                "subset unique counts are not monotone".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
