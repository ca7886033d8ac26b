//! Latent field synthesis: guided initial tiling followed by randomised
//! local refinement of a Markov random field energy.
//!
//! The energy of a field is `E = E_m + E_n`. The matching term `E_m` sums,
//! over cells, the distance between the cell sample's representative and the
//! guidance map resampled over the sample's full tile footprint. The
//! neighbour term `E_n` sums, over unordered 4-connected cell pairs,
//! `lambda_V * D_V + lambda_L * D_L + lambda_C * D_C`: distances between the
//! two samples' representatives and latent tiles over the band where their
//! full footprints overlap at stride `crop`, plus a 0/1 cluster mismatch.

use serde::{Deserialize, Serialize};

use crate::bank::{Sample, SampleBank, DEFAULT_TOP_K};
use crate::error::{arg_err, format_err, shape_err};
use crate::generator::{CellProvenance, Generator, LatentField, Rect};
use crate::tensor::{l2_distance, Rng, Tensor};
use crate::wire::{Reader, Writer};
use crate::{Error, Result};

const TGF_MAGIC: &[u8; 4] = b"TGF1";
const TGF_VERSION: u32 = 1;
const NONE: u32 = u32::MAX;

/// Latent units per render chunk used by [`generate_texture_map`].
pub const RENDER_CHUNK: usize = 32;

/// A low-resolution RGB target and its per-cell resampled crops.
///
/// Field latent units map linearly onto the map. Each cell is compared
/// against the map region under its sample's full (uncropped) tile, so the
/// windows of neighbouring cells overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap {
    image: Tensor,
    cells_x: usize,
    cells_y: usize,
    crop: usize,
    tile: usize,
    r: usize,
    crops: Vec<Tensor>,
}

impl GuidanceMap {
    pub fn new(image: Tensor, cells_x: usize, cells_y: usize, crop: usize, tile: usize, r: usize) -> Result<Self> {
        if image.channels() != 3 || image.width() == 0 || image.height() == 0 {
            return Err(shape_err!("guidance must be a non-empty RGB image, got {:?}", image.shape()));
        }
        if cells_x == 0 || cells_y == 0 || crop == 0 || crop > tile || r == 0 {
            return Err(arg_err!("guidance geometry: {cells_x}x{cells_y} cells, crop {crop}, tile {tile}, r {r}"));
        }
        let mut g = Self { image, cells_x, cells_y, crop, tile, r, crops: Vec::new() };
        g.crops = (0..cells_y)
            .flat_map(|cy| (0..cells_x).map(move |cx| (cx, cy)))
            .map(|(cx, cy)| g.resample(cx, cy))
            .collect();
        Ok(g)
    }

    /// Guidance laid out for fields drawn from `bank`.
    pub fn for_bank(image: Tensor, cells_x: usize, cells_y: usize, bank: &SampleBank) -> Result<Self> {
        Self::new(image, cells_x, cells_y, bank.crop(), bank.tile_size(), bank.representative_size())
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn cells_x(&self) -> usize {
        self.cells_x
    }

    pub fn cells_y(&self) -> usize {
        self.cells_y
    }

    /// The `3 x r x r` target for one cell.
    pub fn crop_for(&self, cx: usize, cy: usize) -> &Tensor {
        &self.crops[cy * self.cells_x + cx]
    }

    /// Map-pixel origin and extent of a cell's full tile footprint.
    fn footprint(&self, cx: usize, cy: usize) -> [(f64, f64); 2] {
        let offset = ((self.tile - self.crop) / 2) as f64;
        let sx = self.image.width() as f64 / (self.cells_x * self.crop) as f64;
        let sy = self.image.height() as f64 / (self.cells_y * self.crop) as f64;
        [
            (((cx * self.crop) as f64 - offset) * sx, self.tile as f64 * sx),
            (((cy * self.crop) as f64 - offset) * sy, self.tile as f64 * sy),
        ]
    }

    /// Bilinear sample taps along one axis: `(i0, i1, frac)` per output pixel.
    fn taps(&self, origin: f64, extent: f64, len: usize) -> Vec<(usize, usize, f32)> {
        (0..self.r)
            .map(|j| {
                let u = (origin + (j as f64 + 0.5) * extent / self.r as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (u - i0 as f64) as f32)
            })
            .collect()
    }

    fn resample(&self, cx: usize, cy: usize) -> Tensor {
        let [(x0, ex), (y0, ey)] = self.footprint(cx, cy);
        let tx = self.taps(x0, ex, self.image.width());
        let ty = self.taps(y0, ey, self.image.height());
        Tensor::from_fn(3, self.r, self.r, |c, j, i| {
            let (ya, yb, fy) = ty[j];
            let (xa, xb, fx) = tx[i];
            let top = self.image.get(c, ya, xa) * (1.0 - fx) + self.image.get(c, ya, xb) * fx;
            let bottom = self.image.get(c, yb, xa) * (1.0 - fx) + self.image.get(c, yb, xb) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    /// Map pixels a cell's crop depends on: the integer cover of its
    /// footprint together with every bilinear tap, clipped to the map.
    pub fn crop_region(&self, cx: usize, cy: usize) -> Rect {
        let [(x0, ex), (y0, ey)] = self.footprint(cx, cy);
        let axis = |origin: f64, extent: f64, len: usize| {
            let lo_cover = origin.floor().max(0.0) as usize;
            let hi_cover = ((origin + extent).ceil().max(0.0) as usize).min(len);
            let taps = self.taps(origin, extent, len);
            let lo_tap = taps.iter().map(|t| t.0).min().unwrap_or(0);
            let hi_tap = taps.iter().map(|&(a, b, f)| if f > 0.0 { b } else { a }).max().unwrap_or(0) + 1;
            let lo = lo_cover.min(lo_tap).min(len - 1);
            let hi = hi_cover.max(hi_tap).min(len);
            (lo, hi - lo)
        };
        let (x, w) = axis(x0, ex, self.image.width());
        let (y, h) = axis(y0, ey, self.image.height());
        Rect::new(x, y, w, h)
    }

    /// Writes `patch` at (`x`, `y`), refreshes the affected crops and
    /// returns the affected cells in raster order.
    pub fn update(&mut self, patch: &Tensor, x: usize, y: usize) -> Result<Vec<(usize, usize)>> {
        if patch.channels() != 3 {
            return Err(shape_err!("guidance patch has {} channels", patch.channels()));
        }
        let rect = Rect::new(x, y, patch.width(), patch.height());
        if !rect.fits_within(self.image.width(), self.image.height()) {
            return Err(arg_err!(
                "patch {rect:?} outside the {}x{} guidance map",
                self.image.width(),
                self.image.height()
            ));
        }
        if rect.is_empty() {
            return Ok(Vec::new());
        }
        self.image.paste(patch, x, y)?;
        let affected = self.cells_touching(&rect);
        for &(cx, cy) in &affected {
            self.crops[cy * self.cells_x + cx] = self.resample(cx, cy);
        }
        Ok(affected)
    }

    /// Cells whose crop region intersects `rect` (map pixels).
    pub fn cells_touching(&self, rect: &Rect) -> Vec<(usize, usize)> {
        Rect::new(0, 0, self.cells_x, self.cells_y)
            .cells()
            .filter(|&(cx, cy)| !self.crop_region(cx, cy).intersect(rect).is_empty())
            .collect()
    }
}

/// When refinement stops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    /// Stop once `E <= fraction * E_initial`.
    Relative(f64),
    Absolute(f64),
}

impl Threshold {
    pub fn resolve(&self, initial: f64) -> f64 {
        match *self {
            Threshold::Relative(f) if f.is_infinite() => f,
            Threshold::Relative(f) => f * initial,
            Threshold::Absolute(v) => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub lambda_visual: f64,
    pub lambda_latent: f64,
    pub lambda_cluster: f64,
    pub threshold: Threshold,
    /// Refinement step cap; `None` means 20 steps per cell.
    pub max_refine_steps: Option<usize>,
    pub top_k: usize,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            lambda_visual: 1.0,
            lambda_latent: 0.5,
            lambda_cluster: 0.5,
            threshold: Threshold::Relative(0.85),
            max_refine_steps: None,
            top_k: DEFAULT_TOP_K,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_visual", self.lambda_visual),
            ("lambda_latent", self.lambda_latent),
            ("lambda_cluster", self.lambda_cluster),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(arg_err!("{name} = {v} must be a non-negative real"));
            }
        }
        Ok(())
    }

    pub fn step_cap(&self, cells: usize) -> usize {
        self.max_refine_steps.unwrap_or(20 * cells)
    }
}

/// Which neighbour of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::North, Direction::East, Direction::South, Direction::West];

    pub fn step(self, cx: usize, cy: usize, cells_x: usize, cells_y: usize) -> Option<(usize, usize)> {
        match self {
            Direction::North => cy.checked_sub(1).map(|y| (cx, y)),
            Direction::South => (cy + 1 < cells_y).then_some((cx, cy + 1)),
            Direction::West => cx.checked_sub(1).map(|x| (x, cy)),
            Direction::East => (cx + 1 < cells_x).then_some((cx + 1, cy)),
        }
    }
}

/// Dissimilarities across one edge and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeTerms {
    pub visual: f32,
    pub latent: f32,
    pub cluster: f32,
    pub weighted: f64,
}

/// Euclidean distance between the `band`-wide right strip of `a` and the
/// left strip of `b` (or bottom/top when `vertical`).
fn strip_distance(a: &Tensor, b: &Tensor, band: usize, vertical: bool) -> f32 {
    let (c, h, w) = a.shape();
    if band == 0 {
        return 0.0;
    }
    let mut sum = 0.0f32;
    for ch in 0..c {
        if vertical {
            let off = h - band;
            for y in 0..band {
                let ra = &a.values()[a.index(ch, y + off, 0)..a.index(ch, y + off, 0) + w];
                let rb = &b.values()[b.index(ch, y, 0)..b.index(ch, y, 0) + w];
                sum += ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum::<f32>();
            }
        } else {
            let off = w - band;
            for y in 0..h {
                let ra = &a.values()[a.index(ch, y, off)..a.index(ch, y, off) + band];
                let rb = &b.values()[b.index(ch, y, 0)..b.index(ch, y, 0) + band];
                sum += ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum::<f32>();
            }
        }
    }
    sum.sqrt()
}

/// Neighbour energy between `a` at some cell and `b` at the neighbouring
/// cell in `direction`, for tiles placed at stride `crop`.
///
/// Full tiles of size `T` at stride `crop` overlap in a `T - crop` band; `D_L`
/// compares the latent tiles over that band and `D_V` the representatives
/// over the proportional pixel band (`r - floor(crop * r / T)` wide).
pub fn binary_energy(a: &Sample, b: &Sample, crop: usize, direction: Direction, params: &EnergyParams) -> EdgeTerms {
    let (first, second, vertical) = match direction {
        Direction::East => (a, b, false),
        Direction::West => (b, a, false),
        Direction::South => (a, b, true),
        Direction::North => (b, a, true),
    };
    let tile = first.tile.width();
    let r = first.representative.width();
    let latent_band = tile.saturating_sub(crop);
    let visual_band = r - (crop * r / tile).min(r);
    let latent = strip_distance(&first.tile, &second.tile, latent_band, vertical);
    let visual = strip_distance(&first.representative, &second.representative, visual_band, vertical);
    let cluster = if first.cluster == second.cluster { 0.0 } else { 1.0 };
    let weighted = params.lambda_visual * visual as f64
        + params.lambda_latent * latent as f64
        + params.lambda_cluster * cluster as f64;
    EdgeTerms { visual, latent, cluster, weighted }
}

/// Matching energy of `sample` at cell (`cx`, `cy`).
pub fn unary_energy(sample: &Sample, guidance: &GuidanceMap, cx: usize, cy: usize) -> Result<f32> {
    l2_distance(&sample.representative, guidance.crop_for(cx, cy))
}

/// Per-term decomposition of a field's energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// `E = E_m + E_n`.
    pub total: f64,
    /// `E_m`.
    pub matching: f64,
    /// `E_n`, each unordered edge counted once.
    pub neighbour: f64,
    /// Per-cell matching energy, raster order.
    pub unary: Vec<f64>,
    /// Edge between (x, y) and (x + 1, y) at index `y * (cells_x - 1) + x`.
    pub horizontal: Vec<EdgeTerms>,
    /// Edge between (x, y) and (x, y + 1) at index `y * cells_x + x`.
    pub vertical: Vec<EdgeTerms>,
}

/// A field under synthesis: latents, guidance, and cached energy and image.
#[derive(Clone, Debug)]
pub struct FieldState {
    field: LatentField,
    guidance: GuidanceMap,
    params: EnergyParams,
    energy: Option<EnergyBreakdown>,
    image: Option<Tensor>,
}

fn sample_at<'b>(field: &LatentField, bank: &'b SampleBank, cx: usize, cy: usize) -> Result<&'b Sample> {
    let id = field.provenance(cx, cy).sample.ok_or_else(|| Error::State(format!("cell ({cx}, {cy}) is unassigned")))?;
    bank.sample(id)
}

/// Full recomputation of the field energy by enumerating every cell and
/// every unordered edge.
pub fn total_energy(
    field: &LatentField,
    bank: &SampleBank,
    guidance: &GuidanceMap,
    params: &EnergyParams,
) -> Result<EnergyBreakdown> {
    let (nx, ny) = (field.cells_x(), field.cells_y());
    if (guidance.cells_x(), guidance.cells_y()) != (nx, ny) {
        return Err(shape_err!(
            "guidance laid out for {}x{} cells, field has {nx}x{ny}",
            guidance.cells_x(),
            guidance.cells_y()
        ));
    }
    let mut unary = Vec::with_capacity(nx * ny);
    for (cx, cy) in field.cell_bounds().cells() {
        unary.push(unary_energy(sample_at(field, bank, cx, cy)?, guidance, cx, cy)? as f64);
    }
    let mut horizontal = Vec::with_capacity(ny * nx.saturating_sub(1));
    for cy in 0..ny {
        for cx in 0..nx.saturating_sub(1) {
            let a = sample_at(field, bank, cx, cy)?;
            let b = sample_at(field, bank, cx + 1, cy)?;
            horizontal.push(binary_energy(a, b, field.cell_size(), Direction::East, params));
        }
    }
    let mut vertical = Vec::with_capacity(nx * ny.saturating_sub(1));
    for cy in 0..ny.saturating_sub(1) {
        for cx in 0..nx {
            let a = sample_at(field, bank, cx, cy)?;
            let b = sample_at(field, bank, cx, cy + 1)?;
            vertical.push(binary_energy(a, b, field.cell_size(), Direction::South, params));
        }
    }
    let matching: f64 = unary.iter().sum();
    let neighbour: f64 = horizontal.iter().chain(&vertical).map(|e| e.weighted).sum();
    Ok(EnergyBreakdown { total: matching + neighbour, matching, neighbour, unary, horizontal, vertical })
}

/// Outcome of one [`better_match`] evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub cell: (usize, usize),
    pub incumbent: u32,
    pub chosen: u32,
    pub incumbent_energy: f64,
    pub chosen_energy: f64,
    /// The incumbent's local energy was already within the local threshold.
    pub early_out: bool,
}

impl MatchDecision {
    pub fn changed(&self) -> bool {
        self.chosen != self.incumbent
    }
}

impl FieldState {
    /// Wraps an existing field. Energy is available once every cell holds a
    /// bank sample.
    pub fn new(field: LatentField, guidance: GuidanceMap, bank: &SampleBank, params: EnergyParams) -> Result<Self> {
        params.validate()?;
        check_field_fits(&field, bank)?;
        if (guidance.cells_x(), guidance.cells_y()) != (field.cells_x(), field.cells_y()) {
            return Err(shape_err!("guidance and field cell grids differ"));
        }
        let mut s = Self { field, guidance, params, energy: None, image: None };
        s.recompute_energy(bank);
        Ok(s)
    }

    pub fn field(&self) -> &LatentField {
        &self.field
    }

    pub fn guidance(&self) -> &GuidanceMap {
        &self.guidance
    }

    pub fn params(&self) -> &EnergyParams {
        &self.params
    }

    pub fn energy(&self) -> Option<&EnergyBreakdown> {
        self.energy.as_ref()
    }

    pub fn image(&self) -> Option<&Tensor> {
        self.image.as_ref()
    }

    pub fn cell_count(&self) -> usize {
        self.field.cell_count()
    }

    pub fn is_fully_assigned(&self) -> bool {
        self.field.provenance_all().iter().all(|p| p.sample.is_some())
    }

    pub(crate) fn field_mut(&mut self) -> &mut LatentField {
        &mut self.field
    }

    pub(crate) fn guidance_mut(&mut self) -> &mut GuidanceMap {
        &mut self.guidance
    }

    pub(crate) fn image_mut(&mut self) -> Option<&mut Tensor> {
        self.image.as_mut()
    }

    pub fn set_image(&mut self, image: Option<Tensor>) {
        self.image = image;
    }

    /// Renders the whole field into the image cache.
    pub fn render(&mut self, gen: &Generator) -> Result<&Tensor> {
        let img = gen.g_b_chunked(&self.field, RENDER_CHUNK, gen.halo(self.field.level()))?;
        self.image = Some(img);
        Ok(self.image.as_ref().unwrap())
    }

    /// Recomputes the energy from scratch; `None` while any cell is
    /// unassigned.
    pub fn recompute_energy(&mut self, bank: &SampleBank) {
        self.energy = total_energy(&self.field, bank, &self.guidance, &self.params).ok();
    }

    pub fn total_energy(&self, bank: &SampleBank) -> Result<EnergyBreakdown> {
        total_energy(&self.field, bank, &self.guidance, &self.params)
    }

    /// Local energy of `sample` placed at a cell: its matching term plus the
    /// weighted terms of every edge to an assigned neighbour.
    pub fn local_energy(&self, bank: &SampleBank, sample: &Sample, cx: usize, cy: usize) -> Result<f64> {
        let mut e = unary_energy(sample, &self.guidance, cx, cy)? as f64;
        for d in Direction::ALL {
            if let Some((nx, ny)) = d.step(cx, cy, self.field.cells_x(), self.field.cells_y()) {
                if let Some(id) = self.field.provenance(nx, ny).sample {
                    e += binary_energy(sample, bank.sample(id)?, self.field.cell_size(), d, &self.params).weighted;
                }
            }
        }
        Ok(e)
    }

    /// Copies `sample`'s cropped tile into a cell and updates the cached
    /// energy incrementally (one matching term and up to four edges).
    pub fn place_sample(&mut self, bank: &SampleBank, cx: usize, cy: usize, id: u32) -> Result<()> {
        let sample = bank.sample(id)?;
        let latent = sample.cropped(self.field.cell_size());
        let prov = CellProvenance { sample: Some(id), cluster: sample.cluster, edited: false };
        self.field.set_cell(cx, cy, &latent, prov)?;
        self.refresh_cells(bank, &[(cx, cy)]);
        Ok(())
    }

    /// Brings cached energy up to date after the samples of `cells` changed.
    pub(crate) fn refresh_cells(&mut self, bank: &SampleBank, cells: &[(usize, usize)]) {
        let Some(energy) = self.energy.as_mut() else {
            if self.is_fully_assigned() {
                self.recompute_energy(bank);
            }
            return;
        };
        let (nx, ny) = (self.field.cells_x(), self.field.cells_y());
        let crop = self.field.cell_size();
        let mut horizontal = std::collections::BTreeSet::new();
        let mut vertical = std::collections::BTreeSet::new();
        for &(cx, cy) in cells {
            let Ok(s) = sample_at(&self.field, bank, cx, cy) else {
                self.energy = None;
                return;
            };
            let i = cy * nx + cx;
            let new = unary_energy(s, &self.guidance, cx, cy).unwrap_or(f32::NAN) as f64;
            energy.matching += new - energy.unary[i];
            energy.unary[i] = new;
            if cx > 0 {
                horizontal.insert((cx - 1, cy));
            }
            if cx + 1 < nx {
                horizontal.insert((cx, cy));
            }
            if cy > 0 {
                vertical.insert((cx, cy - 1));
            }
            if cy + 1 < ny {
                vertical.insert((cx, cy));
            }
        }
        for (x, y) in horizontal {
            let (Ok(a), Ok(b)) = (sample_at(&self.field, bank, x, y), sample_at(&self.field, bank, x + 1, y)) else {
                self.energy = None;
                return;
            };
            let e = binary_energy(a, b, crop, Direction::East, &self.params);
            let idx = y * (nx - 1) + x;
            energy.neighbour += e.weighted - energy.horizontal[idx].weighted;
            energy.horizontal[idx] = e;
        }
        for (x, y) in vertical {
            let (Ok(a), Ok(b)) = (sample_at(&self.field, bank, x, y), sample_at(&self.field, bank, x, y + 1)) else {
                self.energy = None;
                return;
            };
            let e = binary_energy(a, b, crop, Direction::South, &self.params);
            let idx = y * nx + x;
            energy.neighbour += e.weighted - energy.vertical[idx].weighted;
            energy.vertical[idx] = e;
        }
        energy.total = energy.matching + energy.neighbour;
    }

    /// Refreshes matching terms after the guidance crops of `cells` changed.
    pub(crate) fn refresh_guidance(&mut self, bank: &SampleBank, cells: &[(usize, usize)]) {
        self.refresh_cells(bank, cells);
    }
}

fn check_field_fits(field: &LatentField, bank: &SampleBank) -> Result<()> {
    if field.level() != bank.level() || field.cell_size() != bank.crop() || field.channels() != bank.channels() {
        return Err(Error::Compatibility(format!(
            "field (level {}, crop {}, {} channels) does not match bank (level {}, crop {}, {} channels)",
            field.level(),
            field.cell_size(),
            field.channels(),
            bank.level(),
            bank.crop(),
            bank.channels()
        )));
    }
    Ok(())
}

/// Assigns every cell, in raster order, its single best matching sample
/// (ties to the lowest id).
pub fn initial_tiling(bank: &SampleBank, guidance: GuidanceMap, params: EnergyParams) -> Result<FieldState> {
    if bank.is_empty() {
        return Err(arg_err!("cannot tile from an empty bank"));
    }
    let field = LatentField::new(bank.level(), bank.crop(), guidance.cells_x(), guidance.cells_y(), bank.channels())?;
    let mut state = FieldState::new(field, guidance, bank, params)?;
    let cells: Vec<(usize, usize)> = state.field.cell_bounds().cells().collect();
    for &(cx, cy) in &cells {
        let best = bank.top_k_unary(state.guidance.crop_for(cx, cy), 1)?[0].0;
        let sample = bank.sample(best)?;
        let prov = CellProvenance { sample: Some(best), cluster: sample.cluster, edited: false };
        state.field.set_cell(cx, cy, &sample.cropped(bank.crop()), prov)?;
    }
    state.recompute_energy(bank);
    Ok(state)
}

/// Looks for a replacement for one cell.
///
/// Keeps the incumbent when its local energy is within `local_threshold`.
/// Otherwise scores the incumbent and the `top_k` best matching samples by
/// full local energy and picks the minimum (ties to the lowest id); since the
/// incumbent competes, the field energy never increases.
pub fn better_match(
    state: &FieldState,
    bank: &SampleBank,
    cx: usize,
    cy: usize,
    local_threshold: f64,
) -> Result<MatchDecision> {
    let incumbent = state
        .field
        .provenance(cx, cy)
        .sample
        .ok_or_else(|| Error::State(format!("cell ({cx}, {cy}) is unassigned")))?;
    let incumbent_energy = state.local_energy(bank, bank.sample(incumbent)?, cx, cy)?;
    let mut decision = MatchDecision {
        cell: (cx, cy),
        incumbent,
        chosen: incumbent,
        incumbent_energy,
        chosen_energy: incumbent_energy,
        early_out: incumbent_energy <= local_threshold,
    };
    if decision.early_out {
        return Ok(decision);
    }
    for (id, _) in bank.top_k_unary(state.guidance.crop_for(cx, cy), state.params.top_k)? {
        if id == incumbent {
            continue;
        }
        let e = state.local_energy(bank, bank.sample(id)?, cx, cy)?;
        if e < decision.chosen_energy || (e == decision.chosen_energy && id < decision.chosen) {
            decision.chosen = id;
            decision.chosen_energy = e;
        }
    }
    Ok(decision)
}

/// Why refinement ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    StepCap,
}

/// One refinement step's result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub step: usize,
    pub decision: MatchDecision,
    pub energy: f64,
}

/// Drives randomised refinement one step at a time so callers can
/// interleave other work between steps.
#[derive(Clone, Debug)]
pub struct Refiner {
    rng: Rng,
    threshold: f64,
    local_threshold: f64,
    cap: usize,
    steps: usize,
    previous: Option<usize>,
    trace: Vec<f64>,
}

impl Refiner {
    pub fn new(state: &FieldState, seed: u64) -> Result<Self> {
        let e0 =
            state.energy.as_ref().ok_or_else(|| Error::State("refinement needs a fully assigned field".into()))?.total;
        let threshold = state.params.threshold.resolve(e0);
        let cells = state.cell_count();
        Ok(Self {
            rng: Rng::new(seed),
            threshold,
            local_threshold: threshold / cells as f64,
            cap: state.params.step_cap(cells),
            steps: 0,
            previous: None,
            trace: vec![e0],
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Total energy before the first step and after every step.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    /// `Some` once refinement should stop.
    pub fn finished(&self, state: &FieldState) -> Option<StopReason> {
        let e = state.energy.as_ref().map_or(f64::INFINITY, |e| e.total);
        if e <= self.threshold {
            Some(StopReason::Threshold)
        } else if self.steps >= self.cap {
            Some(StopReason::StepCap)
        } else {
            None
        }
    }

    /// Uniform over cells, excluding the one picked by the previous step.
    fn pick_cell(&mut self, cells: usize) -> usize {
        match self.previous {
            Some(prev) if cells > 1 => {
                let i = self.rng.below(cells - 1);
                if i >= prev {
                    i + 1
                } else {
                    i
                }
            }
            _ => self.rng.below(cells),
        }
    }

    /// Runs one step unless finished.
    pub fn step(&mut self, state: &mut FieldState, bank: &SampleBank) -> Result<Option<RefineStep>> {
        if self.finished(state).is_some() {
            return Ok(None);
        }
        let i = self.pick_cell(state.cell_count());
        self.previous = Some(i);
        let nx = state.field.cells_x();
        let (cx, cy) = (i % nx, i / nx);
        let decision = better_match(state, bank, cx, cy, self.local_threshold)?;
        if decision.changed() {
            state.place_sample(bank, cx, cy, decision.chosen)?;
        }
        self.steps += 1;
        let energy = state.energy.as_ref().map_or(f64::NAN, |e| e.total);
        self.trace.push(energy);
        Ok(Some(RefineStep { step: self.steps, decision, energy }))
    }
}

/// Result of [`generate_texture_map`].
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub state: FieldState,
    pub image: Tensor,
    pub trace: Vec<f64>,
    pub stop: StopReason,
}

/// Initial tiling, refinement until the threshold or the step cap, then a
/// chunked render of the final field.
pub fn generate_texture_map(
    gen: &Generator,
    bank: &SampleBank,
    guidance: GuidanceMap,
    params: EnergyParams,
    seed: u64,
) -> Result<Synthesis> {
    let mut state = initial_tiling(bank, guidance, params)?;
    let mut refiner = Refiner::new(&state, seed)?;
    while refiner.step(&mut state, bank)?.is_some() {}
    let stop = refiner.finished(&state).expect("loop ran to completion");
    let image = state.render(gen)?.clone();
    Ok(Synthesis { state, image, trace: refiner.trace, stop })
}

/// `TGF1` layout, little-endian:
///
/// ```text
/// "TGF1" | version u32 = 1 | bank fingerprint [32]
/// level u32 | crop u32 | cells_x u32 | cells_y u32 | channels u32
/// per cell (raster): sample u32 | cluster u32 (0xFFFFFFFF = none) | flags u32 (bit 0: edited)
/// latent values: channels * (cells_y * crop) * (cells_x * crop) f32
/// ```
pub fn field_to_bytes(field: &LatentField, bank_fingerprint: &[u8; 32]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(TGF_MAGIC);
    w.u32(TGF_VERSION);
    w.bytes(bank_fingerprint);
    w.usize(field.level());
    w.usize(field.cell_size());
    w.usize(field.cells_x());
    w.usize(field.cells_y());
    w.usize(field.channels());
    for p in field.provenance_all() {
        w.u32(p.sample.unwrap_or(NONE));
        w.u32(p.cluster.unwrap_or(NONE));
        w.u32(u32::from(p.edited));
    }
    w.f32s(field.values().values());
    w.buf
}

/// Parses a `TGF1` file, returning the bank fingerprint it was saved with.
pub fn field_from_bytes(bytes: &[u8]) -> Result<([u8; 32], LatentField)> {
    let mut r = Reader::new(bytes);
    r.magic(TGF_MAGIC)?;
    let version = r.u32("version")?;
    if version != TGF_VERSION {
        return Err(format_err!("unsupported TGF version {version}"));
    }
    let fp: [u8; 32] = r.take(32, "bank fingerprint")?.try_into().unwrap();
    let level = r.usize("level")?;
    let crop = r.usize("crop")?;
    let cells_x = r.usize("cells_x")?;
    let cells_y = r.usize("cells_y")?;
    let channels = r.usize("channels")?;
    if crop == 0 || cells_x == 0 || cells_y == 0 || channels == 0 {
        return Err(format_err!("empty field header"));
    }
    let cells = cells_x.checked_mul(cells_y).ok_or_else(|| format_err!("cell count overflow"))?;
    let latent_len = channels
        .checked_mul(cells_y * crop)
        .and_then(|v| v.checked_mul(cells_x * crop))
        .ok_or_else(|| format_err!("latent size overflow"))?;
    if r.remaining() != cells * 12 + latent_len * 4 {
        return Err(format_err!("{} body bytes, header implies {}", r.remaining(), cells * 12 + latent_len * 4));
    }
    let mut prov = Vec::with_capacity(cells);
    for i in 0..cells {
        let sample = r.u32("cell sample")?;
        let cluster = r.u32("cell cluster")?;
        let flags = r.u32("cell flags")?;
        if flags & !1 != 0 {
            return Err(format_err!("cell {i}: unknown flags {flags:#x}"));
        }
        prov.push(CellProvenance {
            sample: (sample != NONE).then_some(sample),
            cluster: (cluster != NONE).then_some(cluster),
            edited: flags & 1 == 1,
        });
    }
    let values = r.f32s(latent_len, "latent values")?;
    r.finish()?;
    let mut field =
        LatentField::from_values(level, crop, Tensor::new(channels, cells_y * crop, cells_x * crop, values)?)?;
    for (i, p) in prov.into_iter().enumerate() {
        field.set_provenance(i % cells_x, i / cells_x, p);
    }
    Ok((fp, field))
}

/// Parses a `TGF1` file saved against `bank`.
pub fn field_from_bytes_for(bytes: &[u8], bank: &SampleBank) -> Result<LatentField> {
    let (fp, field) = field_from_bytes(bytes)?;
    if fp != bank.fingerprint() {
        return Err(Error::Compatibility("field was saved against a different bank".into()));
    }
    check_field_fits(&field, bank)?;
    for p in field.provenance_all() {
        if let Some(id) = p.sample {
            if id as usize >= bank.len() {
                return Err(format_err!("cell references sample {id} beyond the bank"));
            }
        }
    }
    Ok(field)
}
