//! Patch embedding, four-direction 2-D selective scanning and the stacked
//! visual state space encoder.
//!
//! Grids are channel-major `[d, r, r]` tensors. Scan sequences are
//! token-major `[r*r, d]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::ssm::{selective_scan, SsmParams};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    /// Channel width of each stage.
    pub stage_dims: Vec<usize>,
    /// Number of state space blocks in each stage.
    pub stage_depths: Vec<usize>,
    /// State size `N` of every selective scan.
    pub state_dim: usize,
    /// Hidden width of the block MLP as a multiple of the channel width.
    pub mlp_ratio: usize,
    /// Exact ZOH input matrix; `false` uses `B_bar = delta B`.
    pub zoh_exact: bool,
    /// Separate scan parameters per direction instead of one shared set.
    pub per_direction_params: bool,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 4,
            stage_dims: vec![16, 32],
            stage_depths: vec![2, 2],
            state_dim: 8,
            mlp_ratio: 2,
            zoh_exact: true,
            per_direction_params: false,
            norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Checks the configuration against an image of `channels x height x width`
    /// and returns the side of the final feature grid.
    pub fn validate(&self, channels: usize, height: usize, width: usize) -> Result<usize> {
        if self.stage_dims.is_empty() || self.stage_dims.len() != self.stage_depths.len() {
            return Err(invalid!(
                "stage_dims {:?} and stage_depths {:?} must be non-empty and equally long",
                self.stage_dims,
                self.stage_depths
            ));
        }
        if self.patch_size == 0 || self.state_dim == 0 || self.mlp_ratio == 0 || channels == 0 {
            return Err(invalid!("patch_size, state_dim, mlp_ratio and channels must be positive"));
        }
        if self.stage_dims.iter().any(|&d| d == 0) {
            return Err(invalid!("stage widths must be positive: {:?}", self.stage_dims));
        }
        for w in self.stage_dims.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(invalid!(
                    "each stage must double the width of the previous one: {:?}",
                    self.stage_dims
                ));
            }
        }
        if height != width {
            return Err(invalid!("images must be square, got {height}x{width}"));
        }
        if height % self.patch_size != 0 {
            return Err(invalid!(
                "image side {height} is not divisible by patch size {}",
                self.patch_size
            ));
        }
        let side = height / self.patch_size;
        let shrink = 1usize << (self.stage_dims.len() - 1);
        if side % shrink != 0 {
            return Err(invalid!(
                "patch grid side {side} is not divisible by {shrink} for {} stages",
                self.stage_dims.len()
            ));
        }
        Ok(side / shrink)
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_dims.last().expect("validated")
    }
}

/// Encoder output: `values` is a `[channels, side, side]` node.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub channels: usize,
    pub side: usize,
    pub values: Var,
}

impl FeatureMap {
    /// Number of spatial regions `side * side`.
    pub fn regions(&self) -> usize {
        self.side * self.side
    }
}

/// Traversal order of a square grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::RowForward,
        ScanOrder::RowBackward,
        ScanOrder::ColForward,
        ScanOrder::ColBackward,
    ];

    /// `perm[t]` is the row-major cell index visited at step `t`.
    pub fn permutation(self, side: usize) -> Vec<usize> {
        let n = side * side;
        let col_major = |t: usize| (t % side) * side + t / side;
        match self {
            ScanOrder::RowForward => (0..n).collect(),
            ScanOrder::RowBackward => (0..n).rev().collect(),
            ScanOrder::ColForward => (0..n).map(col_major).collect(),
            ScanOrder::ColBackward => (0..n).rev().map(col_major).collect(),
        }
    }

    /// `inv[cell]` is the step at which `cell` is visited.
    pub fn inverse(self, side: usize) -> Vec<usize> {
        let perm = self.permutation(side);
        let mut inv = vec![0; perm.len()];
        for (t, &cell) in perm.iter().enumerate() {
            inv[cell] = t;
        }
        inv
    }

    /// The order visiting cells of the transposed grid in the same sequence.
    pub fn transposed(self) -> ScanOrder {
        match self {
            ScanOrder::RowForward => ScanOrder::ColForward,
            ScanOrder::RowBackward => ScanOrder::ColBackward,
            ScanOrder::ColForward => ScanOrder::RowForward,
            ScanOrder::ColBackward => ScanOrder::RowBackward,
        }
    }
}

fn grid_dims<T: Scalar>(tape: &Tape<T>, grid: Var) -> Result<(usize, usize)> {
    let s = tape.shape(grid);
    if s.len() != 3 || s[1] != s[2] {
        return Err(shape_err!("expected a square grid [d, r, r], got {s:?}"));
    }
    Ok((s[0], s[1]))
}

/// Flattens a `[d, r, r]` grid into the `[r*r, d]` sequence visited by `order`.
pub fn scan_expand<T: Scalar>(tape: &mut Tape<T>, grid: Var, order: ScanOrder) -> Result<Var> {
    let (d, r) = grid_dims(tape, grid)?;
    let cells = r * r;
    let perm = order.permutation(r);
    let index: Arc<[usize]> = perm
        .iter()
        .flat_map(|&cell| (0..d).map(move |c| c * cells + cell))
        .collect();
    tape.gather(grid, index, &[cells, d])
}

/// Returns each `[r*r, d]` sequence to grid layout and sums the grids.
pub fn scan_merge<T: Scalar>(
    tape: &mut Tape<T>,
    seqs: &[Var],
    orders: &[ScanOrder],
    side: usize,
) -> Result<Var> {
    if seqs.is_empty() || seqs.len() != orders.len() {
        return Err(shape_err!(
            "scan_merge needs one order per sequence, got {} and {}",
            seqs.len(),
            orders.len()
        ));
    }
    let cells = side * side;
    let d = tape.shape(seqs[0]).get(1).copied().unwrap_or(0);
    let mut total: Option<Var> = None;
    for (&seq, &order) in seqs.iter().zip(orders) {
        if tape.shape(seq) != [cells, d] {
            return Err(shape_err!(
                "scan_merge: sequence shape {:?}, expected [{cells}, {d}]",
                tape.shape(seq)
            ));
        }
        let inv = order.inverse(side);
        let index: Arc<[usize]> = (0..d)
            .flat_map(|c| inv.iter().map(move |&t| t * d + c))
            .collect();
        let grid = tape.gather(seq, index, &[d, side, side])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, grid)?,
            None => grid,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Learned map applied along the channel axis of a `[d_in, r, r]` grid.
#[derive(Clone, Debug)]
pub struct ChannelLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl ChannelLinear {
    pub fn init(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        ChannelLinear {
            weight: pb.weight(format!("{name}.weight"), &[d_out, d_in], d_in),
            bias: pb.full(format!("{name}.bias"), &[d_out], 0.0),
            d_in,
            d_out,
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, grid: Var) -> Result<Var> {
        let s = tape.shape(grid).to_vec();
        let cells: usize = s[1..].iter().product();
        let flat = tape.reshape(grid, &[s[0], cells])?;
        let y = tape.linear_channels(bound[self.weight], flat, Some(bound[self.bias]))?;
        let mut out = s.clone();
        out[0] = self.d_out;
        tape.reshape(y, &out)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        Norm {
            gain: pb.full(format!("{name}.gain"), &[d], 1.0),
            bias: pb.full(format!("{name}.bias"), &[d], 0.0),
        }
    }

    /// LayerNorm over channels at every spatial site.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, grid: Var, eps: f64) -> Result<Var> {
        tape.layernorm(grid, 0, bound[self.gain], bound[self.bias], eps)
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: ChannelLinear,
    pub patch_size: usize,
    pub in_channels: usize,
}

/// Splits a `[C, H, W]` image into non-overlapping `p x p` patches and maps
/// each flattened patch (`C*p*p` values) to `d0` channels.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    pe: &PatchEmbed,
    image: Var,
) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    let p = pe.patch_size;
    if s.len() != 3 || s[0] != pe.in_channels || s[1] % p != 0 || s[2] % p != 0 {
        return Err(shape_err!(
            "patch_embed: image {s:?} incompatible with {} channels and patch {p}",
            pe.in_channels
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for di in 0..p {
            for dj in 0..p {
                for pi in 0..gh {
                    for pj in 0..gw {
                        index.push(ch * h * w + (pi * p + di) * w + pj * p + dj);
                    }
                }
            }
        }
    }
    let patches = tape.gather(image, index.into(), &[c * p * p, gh, gw])?;
    pe.proj.apply(tape, bound, patches)
}

/// Selective-scan parameters of one SS2D block: either one set shared by all
/// four directions or one set per direction.
#[derive(Clone, Debug)]
pub struct Ss2dParams {
    pub in_proj: ChannelLinear,
    pub scans: Vec<SsmParams>,
    pub out_proj: ChannelLinear,
    pub zoh_exact: bool,
}

impl Ss2dParams {
    pub fn init(pb: &mut ParamBuilder, name: &str, d: usize, cfg: &EncoderConfig) -> Self {
        let in_proj = ChannelLinear::init(pb, &format!("{name}.in_proj"), d, d);
        let scans = if cfg.per_direction_params {
            (0..4)
                .map(|k| SsmParams::init(pb, &format!("{name}.scan{k}"), d, cfg.state_dim))
                .collect()
        } else {
            vec![SsmParams::init(pb, &format!("{name}.scan"), d, cfg.state_dim)]
        };
        let out_proj = ChannelLinear::init(pb, &format!("{name}.out_proj"), d, d);
        Ss2dParams {
            in_proj,
            scans,
            out_proj,
            zoh_exact: cfg.zoh_exact,
        }
    }

    fn scan_for(&self, k: usize) -> &SsmParams {
        &self.scans[k % self.scans.len()]
    }
}

/// Input projection, selective scan along the four orders, summed merge,
/// output projection.
pub fn ss2d_block<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, p: &Ss2dParams, grid: Var) -> Result<Var> {
    let (_, r) = grid_dims(tape, grid)?;
    let x = p.in_proj.apply(tape, bound, grid)?;
    let mut seqs = Vec::with_capacity(4);
    for (k, &order) in ScanOrder::ALL.iter().enumerate() {
        let seq = scan_expand(tape, x, order)?;
        seqs.push(selective_scan(tape, bound, p.scan_for(k), seq, p.zoh_exact)?);
    }
    let merged = scan_merge(tape, &seqs, &ScanOrder::ALL, r)?;
    p.out_proj.apply(tape, bound, merged)
}

/// Visual state space block: `x + ss2d(norm(x))`, then `y + mlp(norm(y))`.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub norm1: Norm,
    pub ss2d: Ss2dParams,
    pub norm2: Norm,
    pub fc1: ChannelLinear,
    pub fc2: ChannelLinear,
    pub eps: f64,
}

impl VssBlock {
    pub fn init(pb: &mut ParamBuilder, name: &str, d: usize, cfg: &EncoderConfig) -> Self {
        let hidden = cfg.mlp_ratio * d;
        VssBlock {
            norm1: Norm::init(pb, &format!("{name}.norm1"), d),
            ss2d: Ss2dParams::init(pb, &format!("{name}.ss2d"), d, cfg),
            norm2: Norm::init(pb, &format!("{name}.norm2"), d),
            fc1: ChannelLinear::init(pb, &format!("{name}.mlp.fc1"), d, hidden),
            fc2: ChannelLinear::init(pb, &format!("{name}.mlp.fc2"), hidden, d),
            eps: cfg.norm_eps,
        }
    }
}

pub fn vssb_forward<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, b: &VssBlock, grid: Var) -> Result<Var> {
    let n1 = b.norm1.apply(tape, bound, grid, b.eps)?;
    let s = ss2d_block(tape, bound, &b.ss2d, n1)?;
    let y = tape.add(grid, s)?;
    let n2 = b.norm2.apply(tape, bound, y, b.eps)?;
    let h = b.fc1.apply(tape, bound, n2)?;
    let h = tape.relu(h)?;
    let m = b.fc2.apply(tape, bound, h)?;
    tape.add(y, m)
}

/// 2x2 neighbourhood concatenation (`4d` channels) and a learned map to `2d`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub proj: ChannelLinear,
}

impl Downsample {
    pub fn init(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        Downsample {
            proj: ChannelLinear::init(pb, &format!("{name}.proj"), 4 * d, 2 * d),
        }
    }
}

/// Channel `q*d + c` of the concatenated grid holds channel `c` of neighbour
/// `q = 2*di + dj` of the 2x2 block.
pub fn downsample<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, ds: &Downsample, grid: Var) -> Result<Var> {
    let (d, r) = grid_dims(tape, grid)?;
    if r % 2 != 0 {
        return Err(shape_err!("downsample needs an even grid side, got {r}"));
    }
    let h = r / 2;
    let mut index = Vec::with_capacity(4 * d * h * h);
    for q in 0..4 {
        let (di, dj) = (q / 2, q % 2);
        for c in 0..d {
            for i in 0..h {
                for j in 0..h {
                    index.push(c * r * r + (2 * i + di) * r + 2 * j + dj);
                }
            }
        }
    }
    let cat = tape.gather(grid, index.into(), &[4 * d, h, h])?;
    ds.proj.apply(tape, bound, cat)
}

/// Parameter layout of the whole encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch: PatchEmbed,
    pub stages: Vec<Vec<VssBlock>>,
    /// `downsamples[i]` sits between stage `i` and `i + 1`.
    pub downsamples: Vec<Downsample>,
}

impl Encoder {
    pub fn init(pb: &mut ParamBuilder, cfg: &EncoderConfig, in_channels: usize) -> Self {
        let p = cfg.patch_size;
        let patch = PatchEmbed {
            proj: ChannelLinear::init(pb, "patch_embed", in_channels * p * p, cfg.stage_dims[0]),
            patch_size: p,
            in_channels,
        };
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for (s, (&d, &depth)) in cfg.stage_dims.iter().zip(&cfg.stage_depths).enumerate() {
            if s > 0 {
                downsamples.push(Downsample::init(pb, &format!("down{}", s - 1), d / 2));
            }
            stages.push(
                (0..depth)
                    .map(|b| VssBlock::init(pb, &format!("stage{s}.block{b}"), d, cfg))
                    .collect(),
            );
        }
        Encoder {
            config: cfg.clone(),
            patch,
            stages,
            downsamples,
        }
    }

    /// Image `[C, H, W]` to the final feature grid.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<FeatureMap> {
        let mut x = patch_embed(tape, bound, &self.patch, image)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = downsample(tape, bound, &self.downsamples[s - 1], x)?;
            }
            for b in blocks {
                x = vssb_forward(tape, bound, b, x)?;
            }
        }
        let (channels, side) = grid_dims(tape, x)?;
        Ok(FeatureMap {
            channels,
            side,
            values: x,
        })
    }
}
