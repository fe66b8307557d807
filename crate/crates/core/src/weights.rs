//! Named parameter storage for the fusion network, deterministic
//! initialisation and the `MCIW` container format.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "MCIW" | version: u16 | entry count: u32
//! per entry: name length: u16 | UTF-8 name | rank: u8 | dims: u32 * rank | f32 * prod(dims)
//! ```
//!
//! Entries are written in lexicographic name order, so equal stores produce
//! identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::{BatchNorm, ConvKernel, Projection, ResizeMode, TensorError, WeightLayerParams};

pub const MAGIC: &[u8; 4] = b"MCIW";
pub const FORMAT_VERSION: u16 = 1;

/// Batch-norm epsilon of freshly initialised stores.
pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("bad magic bytes {0:?}, expected \"MCIW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("entry name is not valid UTF-8")]
    Name,
    #[error("duplicate entry {0}")]
    Duplicate(String),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
    #[error("missing weight entry {0}")]
    Missing(String),
    #[error("entry {name} has dims {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("entry {0} is too large for the container format")]
    TooLarge(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WeightError>;

/// SplitMix64 generator; the sole source of randomness for weights and the
/// backbone stand-in, so outputs are identical on every platform.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, bound: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * bound
    }
}

/// One mixing round of SplitMix64, for deriving sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    SplitMix64::new(seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightEntry {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }
}

/// What a named site in the network holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    /// 3×3 conv + batch norm (+ ReLU at run time).
    WeightLayer { out_channels: usize, in_channels: usize },
    /// 1×1 conv without normalisation.
    Projection { out_channels: usize, in_channels: usize },
    /// 3×3 conv to a single logit channel.
    Head { in_channels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub name: String,
    pub kind: SiteKind,
}

/// Shape parameters of the fusion network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkLayout {
    /// Channel count of every fused feature after the refinement module.
    pub channel_width: usize,
    /// Channel count of the backbone side outputs.
    pub backbone_channels: usize,
    /// Number of pyramid layers; features enter at levels `2..=layers + 1`.
    pub layers: usize,
}

impl Default for NetworkLayout {
    fn default() -> Self {
        Self {
            channel_width: 64,
            backbone_channels: 64,
            layers: 4,
        }
    }
}

impl NetworkLayout {
    pub fn new(channel_width: usize, layers: usize) -> Self {
        Self {
            channel_width,
            backbone_channels: channel_width,
            layers,
        }
    }

    pub fn levels(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.layers + 1
    }

    /// `(m, n)` pairs in execution order of the integration loops.
    pub fn mlfm_calls(&self) -> Vec<(usize, usize)> {
        let mut calls = Vec::new();
        for m in (2..=self.layers).rev() {
            for n in (2..=m).rev() {
                calls.push((m, n));
            }
        }
        calls
    }

    /// Every parameter site referenced by the network graph.
    pub fn sites(&self) -> Vec<Site> {
        let cw = self.channel_width;
        let bc = self.backbone_channels;
        let mut sites = Vec::new();
        let mut push = |name: String, kind: SiteKind| sites.push(Site { name, kind });
        let wl = |o, i| SiteKind::WeightLayer {
            out_channels: o,
            in_channels: i,
        };
        let pr = |o, i| SiteKind::Projection {
            out_channels: o,
            in_channels: i,
        };

        for level in self.levels() {
            let p = format!("cmrm.l{level}");
            push(format!("{p}.rgb"), wl(bc, bc));
            push(format!("{p}.hha"), wl(bc, bc));
            push(format!("{p}.fuse_proj"), pr(cw, bc));
            push(format!("{p}.res"), wl(cw, cw));
            push(format!("{p}.out_proj"), pr(cw, cw));
        }
        for (m, n) in self.mlfm_calls() {
            let p = mlfm_prefix(m, n);
            for k in 0..m - n + 2 {
                push(format!("{p}.in{k}.proj"), pr(cw, cw));
                push(format!("{p}.in{k}.w2a"), wl(cw, cw));
                push(format!("{p}.in{k}.w2b"), wl(cw, cw));
            }
            for x in ["low", "high"] {
                push(format!("{p}.{x}.inner"), wl(cw, cw));
                push(format!("{p}.{x}.outer"), wl(cw, cw));
            }
        }
        for m in (2..=self.layers).rev() {
            let p = format!("fim.m{m}");
            push(format!("{p}.trunk"), wl(cw, cw));
            for level in 2..=m {
                push(format!("{p}.fb.l{level}"), pr(cw, cw));
            }
            push(format!("{p}.side"), SiteKind::Head { in_channels: cw });
        }
        push("head".to_string(), SiteKind::Head { in_channels: cw });
        sites
    }
}

pub(crate) fn mlfm_prefix(m: usize, n: usize) -> String {
    format!("mlfm.m{m}.n{n}")
}

/// Named raw parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    entries: BTreeMap<String, WeightEntry>,
    seed: Option<u64>,
}

fn glorot_kernel(rng: &mut SplitMix64, out_c: usize, in_c: usize, k: usize) -> Vec<f32> {
    let taps = k * k;
    let bound = (6.0 / ((in_c * taps + out_c * taps) as f64)).sqrt();
    (0..out_c * in_c * taps).map(|_| rng.uniform(bound) as f32).collect()
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Glorot-uniform convolutions and identity batch norm, drawn from a
    /// SplitMix64 stream in site order.
    pub fn seeded(seed: u64, layout: &NetworkLayout) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut store = Self {
            entries: BTreeMap::new(),
            seed: Some(seed),
        };
        for site in layout.sites() {
            match site.kind {
                SiteKind::WeightLayer {
                    out_channels,
                    in_channels,
                } => {
                    let k = glorot_kernel(&mut rng, out_channels, in_channels, 3);
                    store.insert_weight_layer(&site.name, out_channels, in_channels, k, {
                        let mut bn = BatchNorm::identity(out_channels);
                        bn.var = vec![1.0; out_channels];
                        bn.eps = DEFAULT_BN_EPS;
                        bn
                    });
                }
                SiteKind::Projection {
                    out_channels,
                    in_channels,
                } => {
                    let k = glorot_kernel(&mut rng, out_channels, in_channels, 1);
                    store.insert(
                        format!("{}.kernel", site.name),
                        WeightEntry::new(vec![out_channels, in_channels, 1, 1], k),
                    );
                }
                SiteKind::Head { in_channels } => {
                    let k = glorot_kernel(&mut rng, 1, in_channels, 3);
                    store.insert(
                        format!("{}.kernel", site.name),
                        WeightEntry::new(vec![1, in_channels, 3, 3], k),
                    );
                }
            }
        }
        store
    }

    /// Every 3×3 kernel is a channel-matched Dirac tap, batch norm is the
    /// exact identity and projections copy channel `o % in_channels`.
    pub fn identity(layout: &NetworkLayout) -> Self {
        let mut store = Self::new();
        for site in layout.sites() {
            match site.kind {
                SiteKind::WeightLayer {
                    out_channels,
                    in_channels,
                } => {
                    let p = WeightLayerParams::identity(out_channels, in_channels);
                    store.insert_weight_layer(&site.name, out_channels, in_channels, p.conv.weights().to_vec(), p.bn);
                }
                SiteKind::Projection {
                    out_channels,
                    in_channels,
                } => {
                    let p = Projection::identity(out_channels, in_channels);
                    store.insert(
                        format!("{}.kernel", site.name),
                        WeightEntry::new(vec![out_channels, in_channels, 1, 1], p.kernel.weights().to_vec()),
                    );
                }
                SiteKind::Head { in_channels } => {
                    let k = ConvKernel::identity(1, in_channels, 3).expect("valid identity kernel");
                    store.insert(
                        format!("{}.kernel", site.name),
                        WeightEntry::new(vec![1, in_channels, 3, 3], k.weights().to_vec()),
                    );
                }
            }
        }
        store
    }

    fn insert_weight_layer(&mut self, name: &str, out_c: usize, in_c: usize, kernel: Vec<f32>, bn: BatchNorm) {
        self.insert(format!("{name}.kernel"), WeightEntry::new(vec![out_c, in_c, 3, 3], kernel));
        self.insert(format!("{name}.bn.gamma"), WeightEntry::new(vec![out_c], bn.gamma));
        self.insert(format!("{name}.bn.beta"), WeightEntry::new(vec![out_c], bn.beta));
        self.insert(format!("{name}.bn.mean"), WeightEntry::new(vec![out_c], bn.mean));
        self.insert(format!("{name}.bn.var"), WeightEntry::new(vec![out_c], bn.var));
        self.insert(format!("{name}.bn.eps"), WeightEntry::new(vec![1], vec![bn.eps]));
    }

    pub fn insert(&mut self, name: String, entry: WeightEntry) -> Option<WeightEntry> {
        self.entries.insert(name, entry)
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<WeightEntry> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Seed used by [`WeightStore::seeded`]; `None` for loaded or identity stores.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    fn entry(&self, name: &str, expected: &[usize]) -> Result<&WeightEntry> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| WeightError::Missing(name.to_string()))?;
        if e.dims != expected {
            return Err(WeightError::Shape {
                name: name.to_string(),
                found: e.dims.clone(),
                expected: expected.to_vec(),
            });
        }
        Ok(e)
    }

    pub fn weight_layer(&self, site: &str, out_c: usize, in_c: usize) -> Result<WeightLayerParams> {
        let kernel = self.entry(&format!("{site}.kernel"), &[out_c, in_c, 3, 3])?;
        let vec_of = |field: &str| -> Result<Vec<f32>> {
            Ok(self.entry(&format!("{site}.bn.{field}"), &[out_c])?.data.clone())
        };
        let eps = self.entry(&format!("{site}.bn.eps"), &[1])?.data[0];
        let bn = BatchNorm {
            gamma: vec_of("gamma")?,
            beta: vec_of("beta")?,
            mean: vec_of("mean")?,
            var: vec_of("var")?,
            eps,
        };
        let conv = ConvKernel::new(out_c, in_c, 3, kernel.data.clone())?;
        Ok(WeightLayerParams::new(conv, bn)?)
    }

    pub fn projection(&self, site: &str, out_c: usize, in_c: usize) -> Result<Projection> {
        let kernel = self.entry(&format!("{site}.kernel"), &[out_c, in_c, 1, 1])?;
        Ok(Projection::new(ConvKernel::new(out_c, in_c, 1, kernel.data.clone())?)?)
    }

    pub fn head(&self, site: &str, in_c: usize) -> Result<ConvKernel> {
        let kernel = self.entry(&format!("{site}.kernel"), &[1, in_c, 3, 3])?;
        Ok(ConvKernel::new(1, in_c, 3, kernel.data.clone())?)
    }

    /// Checks that every site of `layout` is present with consistent shapes.
    pub fn validate(&self, layout: &NetworkLayout) -> Result<()> {
        for site in layout.sites() {
            match site.kind {
                SiteKind::WeightLayer {
                    out_channels,
                    in_channels,
                } => {
                    self.weight_layer(&site.name, out_channels, in_channels)?;
                }
                SiteKind::Projection {
                    out_channels,
                    in_channels,
                } => {
                    self.projection(&site.name, out_channels, in_channels)?;
                }
                SiteKind::Head { in_channels } => {
                    self.head(&site.name, in_channels)?;
                }
            }
        }
        Ok(())
    }

    /// Infers the layout from the entries of a store produced for some layout.
    pub fn infer_layout(&self) -> Result<NetworkLayout> {
        let head = self
            .entries
            .get("head.kernel")
            .ok_or_else(|| WeightError::Missing("head.kernel".into()))?;
        let channel_width = head.dims.get(1).copied().unwrap_or(0);
        let layers = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix("fim.m")?.split('.').next()?.parse::<usize>().ok())
            .max()
            .ok_or_else(|| WeightError::Missing("fim.m*".into()))?;
        let backbone_channels = self
            .entries
            .get("cmrm.l2.rgb.kernel")
            .and_then(|e| e.dims.get(1).copied())
            .ok_or_else(|| WeightError::Missing("cmrm.l2.rgb.kernel".into()))?;
        let layout = NetworkLayout {
            channel_width,
            backbone_channels,
            layers,
        };
        self.validate(&layout)?;
        Ok(layout)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.entries.len()).map_err(|_| WeightError::TooLarge("store".into()))?;
        out.write_all(&count.to_le_bytes())?;
        for (name, entry) in &self.entries {
            let too_large = || WeightError::TooLarge(name.clone());
            let name_len = u16::try_from(name.len()).map_err(|_| too_large())?;
            out.write_all(&name_len.to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            let rank = u8::try_from(entry.dims.len()).map_err(|_| too_large())?;
            out.write_all(&[rank])?;
            for &d in &entry.dims {
                let d = u32::try_from(d).map_err(|_| too_large())?;
                out.write_all(&d.to_le_bytes())?;
            }
            for v in &entry.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(WeightError::BadMagic(magic));
        }
        let version = cur.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(WeightError::Version(version));
        }
        let count = cur.u32("entry count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|_| WeightError::Name)?
                .to_string();
            let rank = cur.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32("dims")? as usize);
            }
            let n: usize = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(WeightError::Truncated("payload"))?;
            let payload = cur.take(n.checked_mul(4).ok_or(WeightError::Truncated("payload"))?, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if entries.insert(name.clone(), WeightEntry { dims, data }).is_some() {
                return Err(WeightError::Duplicate(name));
            }
        }
        if cur.pos != bytes.len() {
            return Err(WeightError::Trailing(bytes.len() - cur.pos));
        }
        Ok(Self { entries, seed: None })
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(WeightError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(WeightError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Typed parameters of one refinement-module site.
#[derive(Debug, Clone)]
pub struct CmrmWeights {
    pub rgb: WeightLayerParams,
    pub hha: WeightLayerParams,
    pub fuse_proj: Projection,
    pub residual: WeightLayerParams,
    pub out_proj: Projection,
}

#[derive(Debug, Clone)]
pub struct MlfmInputWeights {
    pub proj: Projection,
    pub first: WeightLayerParams,
    pub second: WeightLayerParams,
}

#[derive(Debug, Clone)]
pub struct MlfmWeights {
    /// One entry per input, low level first.
    pub inputs: Vec<MlfmInputWeights>,
    pub low_inner: WeightLayerParams,
    pub low_outer: WeightLayerParams,
    pub high_inner: WeightLayerParams,
    pub high_outer: WeightLayerParams,
}

#[derive(Debug, Clone)]
pub struct FimWeights {
    pub trunk: WeightLayerParams,
    /// Projection per feedback target level.
    pub feedback: BTreeMap<usize, Projection>,
    pub side: ConvKernel,
}

/// All network parameters, resolved and shape-checked once.
#[derive(Debug, Clone)]
pub struct NetworkWeights {
    pub layout: NetworkLayout,
    pub resize_mode: ResizeMode,
    pub cmrm: BTreeMap<usize, CmrmWeights>,
    pub mlfm: BTreeMap<(usize, usize), MlfmWeights>,
    pub fim: BTreeMap<usize, FimWeights>,
    pub head: ConvKernel,
}

impl NetworkWeights {
    pub fn from_store(store: &WeightStore, layout: &NetworkLayout) -> Result<Self> {
        let cw = layout.channel_width;
        let bc = layout.backbone_channels;
        let mut cmrm = BTreeMap::new();
        for level in layout.levels() {
            let p = format!("cmrm.l{level}");
            cmrm.insert(
                level,
                CmrmWeights {
                    rgb: store.weight_layer(&format!("{p}.rgb"), bc, bc)?,
                    hha: store.weight_layer(&format!("{p}.hha"), bc, bc)?,
                    fuse_proj: store.projection(&format!("{p}.fuse_proj"), cw, bc)?,
                    residual: store.weight_layer(&format!("{p}.res"), cw, cw)?,
                    out_proj: store.projection(&format!("{p}.out_proj"), cw, cw)?,
                },
            );
        }
        let mut mlfm = BTreeMap::new();
        for (m, n) in layout.mlfm_calls() {
            let p = mlfm_prefix(m, n);
            let inputs = (0..m - n + 2)
                .map(|k| {
                    Ok(MlfmInputWeights {
                        proj: store.projection(&format!("{p}.in{k}.proj"), cw, cw)?,
                        first: store.weight_layer(&format!("{p}.in{k}.w2a"), cw, cw)?,
                        second: store.weight_layer(&format!("{p}.in{k}.w2b"), cw, cw)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mlfm.insert(
                (m, n),
                MlfmWeights {
                    inputs,
                    low_inner: store.weight_layer(&format!("{p}.low.inner"), cw, cw)?,
                    low_outer: store.weight_layer(&format!("{p}.low.outer"), cw, cw)?,
                    high_inner: store.weight_layer(&format!("{p}.high.inner"), cw, cw)?,
                    high_outer: store.weight_layer(&format!("{p}.high.outer"), cw, cw)?,
                },
            );
        }
        let mut fim = BTreeMap::new();
        for m in 2..=layout.layers {
            let p = format!("fim.m{m}");
            let feedback = (2..=m)
                .map(|level| Ok((level, store.projection(&format!("{p}.fb.l{level}"), cw, cw)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            fim.insert(
                m,
                FimWeights {
                    trunk: store.weight_layer(&format!("{p}.trunk"), cw, cw)?,
                    feedback,
                    side: store.head(&format!("{p}.side"), cw)?,
                },
            );
        }
        Ok(Self {
            layout: *layout,
            resize_mode: ResizeMode::default(),
            cmrm,
            mlfm,
            fim,
            head: store.head("head", cw)?,
        })
    }

    pub fn identity(layout: &NetworkLayout) -> Self {
        Self::from_store(&WeightStore::identity(layout), layout).expect("identity store matches its layout")
    }

    pub fn seeded(seed: u64, layout: &NetworkLayout) -> Self {
        Self::from_store(&WeightStore::seeded(seed, layout), layout).expect("seeded store matches its layout")
    }

    pub fn with_resize_mode(mut self, mode: ResizeMode) -> Self {
        self.resize_mode = mode;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkLayout {
        NetworkLayout::new(4, 4)
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 0 from the reference C implementation
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn site_counts_for_default_layers() {
        let layout = small();
        let sites = layout.sites();
        assert_eq!(layout.mlfm_calls().len(), 6);
        let fim = sites.iter().filter(|s| s.name.ends_with(".trunk")).count();
        assert_eq!(fim, 3);
        let names: std::collections::HashSet<_> = sites.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), sites.len());
    }

    #[test]
    fn seeded_store_is_deterministic_and_valid() {
        let a = WeightStore::seeded(7, &small());
        let b = WeightStore::seeded(7, &small());
        let c = WeightStore::seeded(8, &small());
        assert_eq!(a, b);
        assert_ne!(a.get("head.kernel"), c.get("head.kernel"));
        a.validate(&small()).unwrap();
        assert_eq!(a.infer_layout().unwrap(), small());
    }

    #[test]
    fn glorot_bounds_hold() {
        let store = WeightStore::seeded(3, &small());
        let k = store.get("cmrm.l2.rgb.kernel").unwrap();
        let bound = (6.0f64 / (4.0 * 9.0 * 2.0)).sqrt() as f32;
        assert!(k.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn container_round_trip_bytes() {
        let store = WeightStore::seeded(11, &small());
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..4], b"MCIW");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), FORMAT_VERSION);
        assert_eq!(
            u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize,
            store.len()
        );
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.seed(), None);
    }

    #[test]
    fn container_single_entry_layout() {
        let mut store = WeightStore::new();
        store.insert("ab".into(), WeightEntry::new(vec![2], vec![1.0, -2.0]));
        let bytes = store.to_bytes();
        let mut expected = b"MCIW".to_vec();
        expected.extend(1u16.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.push(1);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn container_errors() {
        let bytes = WeightStore::seeded(1, &small()).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(WeightError::BadMagic(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(WeightStore::from_bytes(&ver), Err(WeightError::Version(9))));
        assert!(matches!(
            WeightStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(WeightError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(WeightStore::from_bytes(&extra), Err(WeightError::Trailing(1))));
    }

    #[test]
    fn missing_and_misshapen_sites() {
        let layout = small();
        let mut store = WeightStore::identity(&layout);
        store.remove("head.kernel");
        assert!(matches!(store.validate(&layout), Err(WeightError::Missing(_))));
        let mut store = WeightStore::identity(&layout);
        store.insert("fim.m2.side.kernel".into(), WeightEntry::new(vec![1, 3, 3, 3], vec![0.0; 27]));
        assert!(matches!(store.validate(&layout), Err(WeightError::Shape { .. })));
    }
}
