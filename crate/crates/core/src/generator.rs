//! A progressive-growing style generator that can be split at any pyramid
//! level.
//!
//! Level 1 is the input latent vector `z`. An initial block projects `z` to a
//! `4x4` map (level 2) and refines it with one 3x3 convolution; every further
//! block doubles the resolution (nearest-neighbour upsampling followed by two
//! 3x3 convolutions), so level `l` has spatial size `2^l`. A 1x1 projection
//! turns the level-`n` features into RGB.
//!
//! [`Generator::g_a`] runs the head up to level `l`; [`Generator::g_b`] runs
//! the tail from level `l` on a tensor of any spatial size, which is what lets
//! a grid of latent tiles render as one seamless image.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, format_err, shape_err};
use crate::tensor::{
    conv2d, leaky_relu_in_place, pixel_norm_in_place, upsample2x, Kernel, Rng, Tensor, PIXEL_NORM_EPSILON,
};
use crate::wire::{sha256, Reader, Writer};
use crate::Result;

const TGW_MAGIC: &[u8; 4] = b"TGW1";
const TGW_VERSION: u32 = 1;

const BLOCK_INITIAL: u32 = 0;
const BLOCK_LEVEL: u32 = 1;
const BLOCK_TO_RGB: u32 = 2;

/// Side length of the initial block's output map.
const BASE_SIZE: usize = 4;

/// Architecture of a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Top level; the output is `2^levels` pixels square.
    pub levels: usize,
    pub latent_dim: usize,
    /// Feature channels for levels `2..=levels`, lowest level first.
    pub channels: Vec<usize>,
    pub leaky_slope: f32,
    pub use_pixel_norm: bool,
}

impl GeneratorSpec {
    /// The stock architecture used for desk-scale runs: 512-d latents and a
    /// channel count that tapers from 32 at level 3 to 4 from level 6 up.
    pub fn toy(levels: usize) -> Self {
        let channels = (2..=levels)
            .map(|l| match l {
                0..=3 => 32,
                4 => 16,
                5 => 8,
                _ => 4,
            })
            .collect();
        Self { levels, latent_dim: 512, channels, leaky_slope: 0.2, use_pixel_norm: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 {
            return Err(arg_err!("need at least 3 levels, got {}", self.levels));
        }
        if self.levels > 20 {
            return Err(arg_err!("{} levels is beyond any supported output size", self.levels));
        }
        if self.channels.len() != self.levels - 1 {
            return Err(arg_err!("{} channel counts for levels 2..={}", self.channels.len(), self.levels));
        }
        if self.latent_dim == 0 || self.channels.contains(&0) {
            return Err(arg_err!("latent and channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(arg_err!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.channels[level - 2]
    }

    /// Spatial size of one latent tile at `level`.
    pub fn tile_size(level: usize) -> usize {
        1 << level
    }

    /// Output pixels per latent unit when rendering from `level`.
    pub fn scale_from(&self, level: usize) -> usize {
        1 << (self.levels - level)
    }

    pub fn output_size(&self) -> usize {
        1 << self.levels
    }

    /// Checks that `level` is a valid split point.
    pub fn check_split(&self, level: usize) -> Result<()> {
        if level < 2 || level + 1 > self.levels {
            return Err(arg_err!("split level {level} outside [2, {}]", self.levels - 1));
        }
        Ok(())
    }

    /// Pixel size of the image rendered from a `w x h` field at `level`.
    pub fn image_size(&self, level: usize, w: usize, h: usize) -> (usize, usize) {
        let s = self.scale_from(level);
        (s * w, s * h)
    }
}

/// Receptive-field margin, in latent units at `level`, that makes every
/// output pixel of a chunk exact.
///
/// Walks the tail backwards: the 1x1 projection needs no context, each block's
/// two 3x3 convolutions need two more pixels at the block's output resolution,
/// and the nearest upsample halves that (rounding up) at its input.
pub fn halo_for(spec: &GeneratorSpec, level: usize) -> usize {
    let mut margin: usize = 0;
    for _ in level..spec.levels {
        margin = (margin + 2).div_ceil(2);
    }
    margin
}

/// Axis-aligned rectangle in cell, latent, or pixel units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const EMPTY: Rect = Rect { x: 0, y: 0, w: 0, h: 0 };

    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn fits_within(&self, w: usize, h: usize) -> bool {
        self.right() <= w && self.bottom() <= h
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            return Rect::EMPTY;
        }
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn union(&self, other: &Rect) -> Rect {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn scale(&self, s: usize) -> Rect {
        Rect::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    /// Grow by `m` on every side, clipped to `[0, w) x [0, h)`.
    pub fn dilate_within(&self, m: usize, w: usize, h: usize) -> Rect {
        if self.is_empty() {
            return Rect::EMPTY;
        }
        let x0 = self.x.saturating_sub(m);
        let y0 = self.y.saturating_sub(m);
        let x1 = (self.right() + m).min(w);
        let y1 = (self.bottom() + m).min(h);
        Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y..self.bottom()).flat_map(move |y| (self.x..self.right()).map(move |x| (x, y)))
    }
}

/// Where a field cell's latent values came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellProvenance {
    pub sample: Option<u32>,
    pub cluster: Option<u32>,
    /// The latent values were modified after being copied from `sample`.
    pub edited: bool,
}

/// A grid of `cells_x x cells_y` cells, each `cell_size` latent units
/// square, holding level-`level` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentField {
    level: usize,
    cell_size: usize,
    cells_x: usize,
    cells_y: usize,
    values: Tensor,
    provenance: Vec<CellProvenance>,
}

impl LatentField {
    pub fn new(level: usize, cell_size: usize, cells_x: usize, cells_y: usize, channels: usize) -> Result<Self> {
        if cell_size == 0 || cells_x == 0 || cells_y == 0 {
            return Err(arg_err!("field {cells_x}x{cells_y} cells of size {cell_size} is empty"));
        }
        Ok(Self {
            level,
            cell_size,
            cells_x,
            cells_y,
            values: Tensor::zeros(channels, cells_y * cell_size, cells_x * cell_size),
            provenance: vec![CellProvenance::default(); cells_x * cells_y],
        })
    }

    /// A field holding raw latent values with no cell structure beyond
    /// `cell_size`; the tensor extents must be multiples of it.
    pub fn from_values(level: usize, cell_size: usize, values: Tensor) -> Result<Self> {
        if cell_size == 0
            || !values.width().is_multiple_of(cell_size)
            || !values.height().is_multiple_of(cell_size)
            || values.width() == 0
            || values.height() == 0
        {
            return Err(arg_err!(
                "{}x{} latent values are not a grid of {cell_size}-unit cells",
                values.width(),
                values.height()
            ));
        }
        let cells_x = values.width() / cell_size;
        let cells_y = values.height() / cell_size;
        Ok(Self {
            level,
            cell_size,
            cells_x,
            cells_y,
            values,
            provenance: vec![CellProvenance::default(); cells_x * cells_y],
        })
    }

    /// A single uncropped tile as a one-cell field.
    pub fn from_tile(level: usize, tile: Tensor) -> Result<Self> {
        let size = tile.width();
        if tile.height() != size {
            return Err(shape_err!("tile {}x{} is not square", tile.width(), tile.height()));
        }
        Self::from_values(level, size, tile)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn cells_x(&self) -> usize {
        self.cells_x
    }

    pub fn cells_y(&self) -> usize {
        self.cells_y
    }

    pub fn cell_count(&self) -> usize {
        self.cells_x * self.cells_y
    }

    pub fn cell_bounds(&self) -> Rect {
        Rect::new(0, 0, self.cells_x, self.cells_y)
    }

    /// Extent in latent units.
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn cell_index(&self, cx: usize, cy: usize) -> usize {
        cy * self.cells_x + cx
    }

    pub fn provenance(&self, cx: usize, cy: usize) -> CellProvenance {
        self.provenance[self.cell_index(cx, cy)]
    }

    pub fn provenance_all(&self) -> &[CellProvenance] {
        &self.provenance
    }

    pub fn set_provenance(&mut self, cx: usize, cy: usize, p: CellProvenance) {
        let i = self.cell_index(cx, cy);
        self.provenance[i] = p;
    }

    pub fn cell_values(&self, cx: usize, cy: usize) -> Tensor {
        let c = self.cell_size;
        self.values.crop(cx * c, cy * c, c, c).expect("cell inside field")
    }

    pub fn set_cell(&mut self, cx: usize, cy: usize, latent: &Tensor, p: CellProvenance) -> Result<()> {
        if cx >= self.cells_x || cy >= self.cells_y {
            return Err(arg_err!("cell ({cx}, {cy}) outside {}x{} field", self.cells_x, self.cells_y));
        }
        let c = self.cell_size;
        if latent.shape() != (self.channels(), c, c) {
            return Err(shape_err!("cell latent {:?}, expected {:?}", latent.shape(), (self.channels(), c, c)));
        }
        self.values.paste(latent, cx * c, cy * c)?;
        self.set_provenance(cx, cy, p);
        Ok(())
    }

    /// Latent-unit rectangle covered by a cell rectangle.
    pub fn latent_rect(&self, cells: &Rect) -> Rect {
        cells.scale(self.cell_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct InitialBlock {
    /// `[base_channels * 16, latent_dim]`, row-major.
    projection: Vec<f32>,
    projection_bias: Vec<f32>,
    conv: Kernel,
}

#[derive(Clone, Debug, PartialEq)]
struct LevelBlock {
    conv1: Kernel,
    conv2: Kernel,
}

/// Immutable generator weights plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    initial: InitialBlock,
    /// `blocks[i]` produces level `i + 3`.
    blocks: Vec<LevelBlock>,
    to_rgb: Kernel,
}

fn he_kernel(o: usize, i: usize, k: usize, gain: f32, rng: &mut Rng) -> Kernel {
    let std = (gain / (i * k * k) as f32).sqrt();
    let weights = (0..o * i * k * k).map(|_| rng.normal() * std).collect();
    let bias = (0..o).map(|_| rng.normal() * 0.1).collect();
    Kernel::new(o, i, k, k, weights, bias).expect("consistent kernel shape")
}

impl Generator {
    /// Seeded, untrained weights: He-normal (`N(0, 2 / fan_in)`) for every
    /// convolution and the latent projection, `N(0, 1 / fan_in)` for the RGB
    /// projection, and `N(0, 0.01)` biases. Draw order is projection,
    /// initial conv, level blocks ascending, RGB projection.
    pub fn toy(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let base = spec.channels_at(2);
        let proj_out = base * BASE_SIZE * BASE_SIZE;
        let std = (2.0 / spec.latent_dim as f32).sqrt();
        let projection = (0..proj_out * spec.latent_dim).map(|_| rng.normal() * std).collect();
        let projection_bias = (0..proj_out).map(|_| rng.normal() * 0.1).collect();
        let conv = he_kernel(base, base, 3, 2.0, &mut rng);
        let mut blocks = Vec::with_capacity(spec.levels - 2);
        for level in 3..=spec.levels {
            let cin = spec.channels_at(level - 1);
            let cout = spec.channels_at(level);
            let conv1 = he_kernel(cout, cin, 3, 2.0, &mut rng);
            let conv2 = he_kernel(cout, cout, 3, 2.0, &mut rng);
            blocks.push(LevelBlock { conv1, conv2 });
        }
        let to_rgb = he_kernel(3, spec.channels_at(spec.levels), 1, 1.0, &mut rng);
        Ok(Self { spec, initial: InitialBlock { projection, projection_bias, conv }, blocks, to_rgb })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn activate(&self, t: &mut Tensor) {
        leaky_relu_in_place(t, self.spec.leaky_slope);
        if self.spec.use_pixel_norm {
            pixel_norm_in_place(t, PIXEL_NORM_EPSILON);
        }
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.shape() != (self.spec.latent_dim, 1, 1) {
            return Err(shape_err!("latent {:?}, expected ({}, 1, 1)", z.shape(), self.spec.latent_dim));
        }
        Ok(())
    }

    fn initial_map(&self, z: &Tensor) -> Tensor {
        let mut z = z.clone();
        if self.spec.use_pixel_norm {
            pixel_norm_in_place(&mut z, PIXEL_NORM_EPSILON);
        }
        let d = self.spec.latent_dim;
        let zv = z.values();
        let mapped: Vec<f32> = self
            .initial
            .projection
            .chunks_exact(d)
            .zip(&self.initial.projection_bias)
            .map(|(row, b)| b + row.iter().zip(zv).map(|(w, x)| w * x).sum::<f32>())
            .collect();
        let base = self.spec.channels_at(2);
        let mut t = Tensor::new(base, BASE_SIZE, BASE_SIZE, mapped).expect("projection shape");
        self.activate(&mut t);
        let mut t = conv2d(&t, &self.initial.conv, 1).expect("initial conv shape");
        self.activate(&mut t);
        t
    }

    fn run_block(&self, level: usize, input: &Tensor) -> Tensor {
        let block = &self.blocks[level - 3];
        let up = upsample2x(input);
        let mut t = conv2d(&up, &block.conv1, 1).expect("block conv shape");
        self.activate(&mut t);
        let mut t = conv2d(&t, &block.conv2, 1).expect("block conv shape");
        self.activate(&mut t);
        t
    }

    /// Head of the split: latent `z` (`latent_dim x 1 x 1`) to a
    /// `channels(l) x 2^l x 2^l` tile.
    pub fn g_a(&self, z: &Tensor, level: usize) -> Result<Tensor> {
        self.check_latent(z)?;
        self.spec.check_split(level)?;
        let mut t = self.initial_map(z);
        for l in 3..=level {
            t = self.run_block(l, &t);
        }
        Ok(t)
    }

    /// Tail of the split on raw level-`level` activations of any extent.
    pub fn render_latent(&self, latent: &Tensor, level: usize) -> Result<Tensor> {
        self.spec.check_split(level)?;
        if latent.channels() != self.spec.channels_at(level) {
            return Err(shape_err!(
                "{} latent channels, level {level} has {}",
                latent.channels(),
                self.spec.channels_at(level)
            ));
        }
        Ok(self.run_tail(latent, level))
    }

    fn run_tail(&self, latent: &Tensor, level: usize) -> Tensor {
        let mut t = self.run_block(level + 1, latent);
        for l in level + 2..=self.spec.levels {
            t = self.run_block(l, &t);
        }
        conv2d(&t, &self.to_rgb, 0).expect("rgb projection shape")
    }

    /// Renders a latent field; the image is `2^(n-l)` times the field extent.
    pub fn g_b(&self, field: &LatentField) -> Result<Tensor> {
        self.render_latent(field.values(), field.level())
    }

    /// The unsplit generator, `3 x 2^n x 2^n`.
    pub fn g_full(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let mut t = self.initial_map(z);
        for l in 3..=self.spec.levels {
            t = self.run_block(l, &t);
        }
        Ok(conv2d(&t, &self.to_rgb, 0).expect("rgb projection shape"))
    }

    pub fn halo(&self, level: usize) -> usize {
        halo_for(&self.spec, level)
    }

    /// Renders only `pixels` of the image of `latent`, evaluating the tail on
    /// the latent window that covers `pixels` plus `halo` units of context.
    ///
    /// Exact (bitwise equal to the full render) when `halo >= halo_for`.
    pub fn render_region(&self, latent: &Tensor, level: usize, pixels: Rect, halo: usize) -> Result<Tensor> {
        let s = self.spec.scale_from(level);
        let (iw, ih) = (latent.width() * s, latent.height() * s);
        if pixels.is_empty() {
            return Ok(Tensor::zeros(3, pixels.h, pixels.w));
        }
        if !pixels.fits_within(iw, ih) {
            return Err(arg_err!("pixel rect {pixels:?} outside {iw}x{ih} image"));
        }
        let x0 = (pixels.x / s).saturating_sub(halo);
        let y0 = (pixels.y / s).saturating_sub(halo);
        let x1 = (pixels.right().div_ceil(s) + halo).min(latent.width());
        let y1 = (pixels.bottom().div_ceil(s) + halo).min(latent.height());
        let window = latent.crop(x0, y0, x1 - x0, y1 - y0)?;
        let out = self.render_latent(&window, level)?;
        out.crop(pixels.x - x0 * s, pixels.y - y0 * s, pixels.w, pixels.h)
    }

    /// Renders the field in `chunk x chunk` latent blocks with `halo` units of
    /// overlapping context each, discarding the overlap.
    ///
    /// Refuses halos smaller than [`halo_for`], which would silently corrupt
    /// chunk borders.
    pub fn g_b_chunked(&self, field: &LatentField, chunk: usize, halo: usize) -> Result<Tensor> {
        self.check_halo(field.level(), halo)?;
        self.g_b_chunked_unchecked(field, chunk, halo)
    }

    /// [`Generator::g_b_chunked`] without the halo check, for probing what
    /// too little context does.
    pub fn g_b_chunked_unchecked(&self, field: &LatentField, chunk: usize, halo: usize) -> Result<Tensor> {
        let plan = self.chunk_plan(field, chunk)?;
        let mut out = self.blank_image(field);
        for r in plan {
            let px = r.scale(self.spec.scale_from(field.level()));
            let part = self.render_region(field.values(), field.level(), px, halo)?;
            out.paste(&part, px.x, px.y)?;
        }
        Ok(out)
    }

    /// Chunked rendering with chunks evaluated on a dedicated pool of
    /// `threads` workers. Chunks write disjoint output, so the result does not
    /// depend on scheduling.
    pub fn g_b_chunked_parallel(
        &self,
        field: &LatentField,
        chunk: usize,
        halo: usize,
        threads: usize,
    ) -> Result<Tensor> {
        self.check_halo(field.level(), halo)?;
        let plan = self.chunk_plan(field, chunk)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| arg_err!("thread pool: {e}"))?;
        let s = self.spec.scale_from(field.level());
        let parts: Vec<(Rect, Tensor)> = pool.install(|| {
            plan.par_iter()
                .map(|r| {
                    let px = r.scale(s);
                    self.render_region(field.values(), field.level(), px, halo).map(|t| (px, t))
                })
                .collect::<Result<_>>()
        })?;
        let mut out = self.blank_image(field);
        for (px, part) in parts {
            out.paste(&part, px.x, px.y)?;
        }
        Ok(out)
    }

    fn check_halo(&self, level: usize, halo: usize) -> Result<()> {
        self.spec.check_split(level)?;
        let need = self.halo(level);
        if halo < need {
            return Err(arg_err!("halo {halo} below the {need} units level {level} needs"));
        }
        Ok(())
    }

    fn chunk_plan(&self, field: &LatentField, chunk: usize) -> Result<Vec<Rect>> {
        if chunk == 0 {
            return Err(arg_err!("chunk size must be positive"));
        }
        let (w, h) = (field.width(), field.height());
        let mut plan = Vec::new();
        for y in (0..h).step_by(chunk) {
            for x in (0..w).step_by(chunk) {
                plan.push(Rect::new(x, y, chunk.min(w - x), chunk.min(h - y)));
            }
        }
        Ok(plan)
    }

    fn blank_image(&self, field: &LatentField) -> Tensor {
        let (w, h) = self.spec.image_size(field.level(), field.width(), field.height());
        Tensor::zeros(3, h, w)
    }

    /// Serialises to the `TGW1` layout:
    ///
    /// ```text
    /// "TGW1" | version u32 = 1
    /// levels u32 | latent_dim u32 | channel count u32 | channels u32...
    /// leaky_slope f32 | flags u32 (bit 0: pixel norm)
    /// blocks: kind u32 (0 initial, 1 level, 2 rgb) | level u32 | tensor count u32
    ///         | per tensor: rank u32 | dims u32... | f32 values
    /// ```
    ///
    /// All integers and reals little-endian. Blocks appear as initial
    /// (level 2: projection weight, projection bias, conv weight, conv bias),
    /// then one block per level `3..=n` (conv1 weight, bias, conv2 weight,
    /// bias), then the RGB projection at level `n` (weight, bias).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TGW_MAGIC);
        w.u32(TGW_VERSION);
        w.usize(self.spec.levels);
        w.usize(self.spec.latent_dim);
        w.usize(self.spec.channels.len());
        for c in &self.spec.channels {
            w.usize(*c);
        }
        w.f32(self.spec.leaky_slope);
        w.u32(u32::from(self.spec.use_pixel_norm));

        let base = self.spec.channels_at(2);
        block_header(&mut w, BLOCK_INITIAL, 2, 4);
        put_array(&mut w, &[base * BASE_SIZE * BASE_SIZE, self.spec.latent_dim], &self.initial.projection);
        put_array(&mut w, &[base * BASE_SIZE * BASE_SIZE], &self.initial.projection_bias);
        put_kernel(&mut w, &self.initial.conv);
        for (i, b) in self.blocks.iter().enumerate() {
            block_header(&mut w, BLOCK_LEVEL, i + 3, 4);
            put_kernel(&mut w, &b.conv1);
            put_kernel(&mut w, &b.conv2);
        }
        block_header(&mut w, BLOCK_TO_RGB, self.spec.levels, 2);
        put_kernel(&mut w, &self.to_rgb);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TGW_MAGIC)?;
        let version = r.u32("version")?;
        if version != TGW_VERSION {
            return Err(format_err!("unsupported TGW version {version}"));
        }
        let levels = r.usize("levels")?;
        let latent_dim = r.usize("latent_dim")?;
        let nch = r.usize("channel count")?;
        if nch > 64 {
            return Err(format_err!("implausible channel count {nch}"));
        }
        let channels = (0..nch).map(|_| r.usize("channels")).collect::<Result<Vec<_>>>()?;
        let leaky_slope = r.f32("leaky_slope")?;
        let flags = r.u32("flags")?;
        if flags & !1 != 0 {
            return Err(format_err!("unknown flags {flags:#x}"));
        }
        let spec = GeneratorSpec { levels, latent_dim, channels, leaky_slope, use_pixel_norm: flags & 1 == 1 };
        spec.validate().map_err(|e| format_err!("header: {e}"))?;

        let base = spec.channels_at(2);
        let proj_out = base * BASE_SIZE * BASE_SIZE;
        expect_block(&mut r, BLOCK_INITIAL, 2, 4)?;
        let projection = take_array(&mut r, &[proj_out, latent_dim], "initial projection")?;
        let projection_bias = take_array(&mut r, &[proj_out], "initial projection bias")?;
        let conv = take_kernel(&mut r, base, base, 3, "initial conv")?;
        let mut blocks = Vec::new();
        for level in 3..=levels {
            expect_block(&mut r, BLOCK_LEVEL, level, 4)?;
            let cin = spec.channels_at(level - 1);
            let cout = spec.channels_at(level);
            let conv1 = take_kernel(&mut r, cout, cin, 3, &format!("level {level} conv1"))?;
            let conv2 = take_kernel(&mut r, cout, cout, 3, &format!("level {level} conv2"))?;
            blocks.push(LevelBlock { conv1, conv2 });
        }
        expect_block(&mut r, BLOCK_TO_RGB, levels, 2)?;
        let to_rgb = take_kernel(&mut r, 3, spec.channels_at(levels), 1, "rgb projection")?;
        r.finish()?;
        Ok(Self { spec, initial: InitialBlock { projection, projection_bias, conv }, blocks, to_rgb })
    }

    /// SHA-256 of the `TGW1` serialisation.
    pub fn fingerprint(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }
}

/// Standard-normal latent vector reproducible from its seed.
pub fn latent_from_seed(spec: &GeneratorSpec, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::randn(spec.latent_dim, 1, 1, &mut rng)
}

fn block_header(w: &mut Writer, kind: u32, level: usize, tensors: u32) {
    w.u32(kind);
    w.usize(level);
    w.u32(tensors);
}

fn put_array(w: &mut Writer, dims: &[usize], values: &[f32]) {
    w.usize(dims.len());
    for d in dims {
        w.usize(*d);
    }
    w.f32s(values);
}

fn put_kernel(w: &mut Writer, k: &Kernel) {
    put_array(w, &[k.out_channels, k.in_channels, k.kh, k.kw], &k.weights);
    put_array(w, &[k.out_channels], &k.bias);
}

fn block_name(kind: u32, level: usize) -> String {
    match kind {
        BLOCK_INITIAL => "initial block".into(),
        BLOCK_LEVEL => format!("block for level {level}"),
        _ => "rgb projection".into(),
    }
}

fn expect_block(r: &mut Reader, kind: u32, level: usize, tensors: u32) -> Result<()> {
    let name = block_name(kind, level);
    if r.remaining() == 0 {
        return Err(format_err!("missing {name}"));
    }
    let k = r.u32(&name)?;
    let l = r.usize(&name)?;
    let n = r.u32(&name)?;
    if k != kind || l != level {
        return Err(format_err!("missing {name}: found {} instead", block_name(k, l)));
    }
    if n != tensors {
        return Err(format_err!("{name}: {n} tensors, expected {tensors}"));
    }
    Ok(())
}

fn take_array(r: &mut Reader, dims: &[usize], what: &str) -> Result<Vec<f32>> {
    let rank = r.usize(what)?;
    if rank != dims.len() {
        return Err(format_err!("{what}: rank {rank}, expected {}", dims.len()));
    }
    let found = (0..rank).map(|_| r.usize(what)).collect::<Result<Vec<_>>>()?;
    if found != dims {
        return Err(format_err!("{what}: shape {found:?}, header implies {dims:?}"));
    }
    r.f32s(dims.iter().product(), what)
}

fn take_kernel(r: &mut Reader, o: usize, i: usize, k: usize, what: &str) -> Result<Kernel> {
    let weights = take_array(r, &[o, i, k, k], what)?;
    let bias = take_array(r, &[o], &format!("{what} bias"))?;
    Kernel::new(o, i, k, k, weights, bias).map_err(|e| format_err!("{what}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(levels: usize) -> GeneratorSpec {
        GeneratorSpec {
            levels,
            latent_dim: 16,
            channels: (2..=levels).map(|l| if l < 4 { 6 } else { 3 }).collect(),
            leaky_slope: 0.2,
            use_pixel_norm: true,
        }
    }

    #[test]
    fn toy_generator_is_deterministic() {
        let a = Generator::toy(small_spec(5), 3).unwrap();
        let b = Generator::toy(small_spec(5), 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = Generator::toy(small_spec(5), 4).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn output_sizes_follow_levels() {
        let g = Generator::toy(GeneratorSpec::toy(7), 1).unwrap();
        let z = latent_from_seed(g.spec(), 5);
        assert_eq!(g.g_full(&z).unwrap().shape(), (3, 128, 128));
        assert_eq!(g.g_a(&z, 3).unwrap().shape(), (32, 8, 8));
        assert_eq!(g.g_a(&z, 2).unwrap().shape(), (32, 4, 4));
        assert_eq!(g.g_a(&z, 3).unwrap(), g.g_a(&z, 3).unwrap());
    }

    #[test]
    fn split_level_is_range_checked() {
        let g = Generator::toy(small_spec(5), 1).unwrap();
        let z = latent_from_seed(g.spec(), 5);
        assert!(matches!(g.g_a(&z, 1), Err(crate::Error::Argument(_))));
        assert!(matches!(g.g_a(&z, 5), Err(crate::Error::Argument(_))));
        assert!(g.g_a(&Tensor::zeros(3, 1, 1), 3).is_err());
    }

    #[test]
    fn split_matches_full() {
        let g = Generator::toy(small_spec(6), 9).unwrap();
        let z = latent_from_seed(g.spec(), 1);
        let full = g.g_full(&z).unwrap();
        for l in 2..6 {
            let tile = g.g_a(&z, l).unwrap();
            let field = LatentField::from_tile(l, tile).unwrap();
            assert_eq!(g.g_b(&field).unwrap(), full, "level {l}");
        }
    }

    #[test]
    fn halo_recursion() {
        let spec = small_spec(9);
        assert_eq!(halo_for(&spec, 8), 1);
        assert_eq!(halo_for(&spec, 7), 2);
        for l in 2..7 {
            assert_eq!(halo_for(&spec, l), 2);
        }
    }

    #[test]
    fn chunked_refuses_short_halo() {
        let g = Generator::toy(small_spec(5), 2).unwrap();
        let mut rng = Rng::new(0);
        let field = LatentField::from_values(3, 2, Tensor::randn(6, 8, 8, &mut rng)).unwrap();
        assert!(matches!(g.g_b_chunked(&field, 4, 1), Err(crate::Error::Argument(_))));
        assert!(g.g_b_chunked(&field, 0, 2).is_err());
    }

    #[test]
    fn chunked_equals_full_including_strips() {
        let g = Generator::toy(small_spec(6), 2).unwrap();
        let mut rng = Rng::new(7);
        for (w, h) in [(16, 16), (1, 13), (11, 1), (7, 5)] {
            let field = LatentField::from_values(3, 1, Tensor::randn(6, h, w, &mut rng)).unwrap();
            let full = g.g_b(&field).unwrap();
            let halo = g.halo(3);
            for chunk in [1, 3, 8, 64] {
                assert_eq!(g.g_b_chunked(&field, chunk, halo).unwrap(), full, "{w}x{h} chunk {chunk}");
            }
            assert_eq!(g.g_b_chunked_parallel(&field, 4, halo, 3).unwrap(), full);
        }
    }

    #[test]
    fn weights_round_trip() {
        let g = Generator::toy(small_spec(5), 7).unwrap();
        let bytes = g.to_bytes();
        let back = Generator::from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        let z = latent_from_seed(g.spec(), 2);
        assert_eq!(back.g_full(&z).unwrap(), g.g_full(&z).unwrap());
    }

    #[test]
    fn weight_format_errors() {
        let g = Generator::toy(small_spec(5), 7).unwrap();
        let bytes = g.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Generator::from_bytes(&bad), Err(crate::Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Generator::from_bytes(&bad).is_err());
        for cut in [3, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Generator::from_bytes(&bytes[..cut]), Err(crate::Error::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Generator::from_bytes(&extra).is_err());
    }

    #[test]
    fn missing_level_block_is_named() {
        let g = Generator::toy(small_spec(5), 7).unwrap();
        let bytes = g.to_bytes();
        // Drop the level-5 block by cutting right where it starts.
        let mut w = Writer::default();
        block_header(&mut w, BLOCK_LEVEL, 5, 4);
        let start = bytes.windows(12).position(|win| win == w.buf.as_slice()).unwrap();
        let err = Generator::from_bytes(&bytes[..start]).unwrap_err().to_string();
        assert!(err.contains("level 5"), "{err}");
    }

    #[test]
    fn rect_helpers() {
        let r = Rect::new(2, 3, 4, 5);
        assert_eq!(r.dilate_within(3, 8, 9), Rect::new(0, 0, 8, 9));
        assert_eq!(r.intersect(&Rect::new(5, 7, 10, 10)), Rect::new(5, 7, 1, 1));
        assert!(r.intersect(&Rect::new(6, 0, 1, 1)).is_empty());
        assert_eq!(r.cells().count(), 20);
    }
}
