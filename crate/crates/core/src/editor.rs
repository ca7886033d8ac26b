//! Latent field editing with undo, local re-rendering and replayable
//! command logs.
//!
//! Command log format: one record per line, `kind key=value ...`, blank lines
//! and `#` comments ignored. Rects are `x,y,w,h` in cells.
//!
//! ```text
//! brush rect=0,0,2,2 cluster=3 seed=7
//! clone src=0,0,2,1 dst=4,4 seed=0
//! shuffle-clone src=0,0,3,3 dst=5,0 seed=11
//! noise rect=1,1,1,1 sigma=0.05 seed=2
//! interpolate cell=3,2 a=sample:17 b=cell:0,0 t=0.25
//! guidance at=12,8 size=4,4 data=<base64 of 3*h*w little-endian f32, CHW>
//! undo
//! redo
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! formatted log parses back to identical commands.

use std::collections::VecDeque;
use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use crate::bank::SampleBank;
use crate::error::{arg_err, format_err};
use crate::generator::{CellProvenance, Generator, Rect};
use crate::synthesis::FieldState;
use crate::tensor::{Rng, Tensor};
use crate::{Error, Result};

pub const DEFAULT_HISTORY: usize = 64;

/// Where an interpolation endpoint's latent comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    /// A bank sample's cropped tile.
    Sample(u32),
    /// The current content of a field cell.
    Cell(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditCommand {
    /// Fills every cell of `cells` with an independent draw from `cluster`.
    Brush { cells: Rect, cluster: u32, seed: u64 },
    /// Copies the cells of `source` to the same-sized rect at `dest`,
    /// optionally in a seeded random arrangement.
    Clone { source: Rect, dest: (usize, usize), shuffle: bool, seed: u64 },
    /// Adds `sigma`-scaled standard normal noise to every latent value.
    Noise { cells: Rect, sigma: f32, seed: u64 },
    /// Sets one cell to `(1 - t) * a + t * b`.
    Interpolate { cell: (usize, usize), a: LatentSource, b: LatentSource, t: f32 },
    /// Overwrites guidance pixels with `patch` at `at`.
    Guidance { at: (usize, usize), patch: Tensor },
}

/// A log record.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Edit(EditCommand),
    Undo,
    Redo,
}

/// What an edit touched: field cells and output pixels.
///
/// `pixels` is the cells' footprint dilated by the renderer's pixel halo and
/// clipped to the image; it is empty when no latent value changed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DirtyRegion {
    pub cells: Rect,
    pub pixels: Rect,
}

impl DirtyRegion {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty() && self.pixels.is_empty()
    }
}

#[derive(Clone, Debug)]
struct CellSnapshot {
    cell: (usize, usize),
    values: Tensor,
    provenance: CellProvenance,
}

#[derive(Clone, Debug)]
enum Change {
    Cells { before: Vec<CellSnapshot>, after: Vec<CellSnapshot> },
    Guidance { at: (usize, usize), before: Tensor, after: Tensor },
}

/// A field plus its edit history.
#[derive(Clone, Debug)]
pub struct Editor {
    state: FieldState,
    undo: VecDeque<Change>,
    redo: Vec<Change>,
    capacity: usize,
    log: Vec<Action>,
}

/// Pixel rect affected by changing the latents of `cells`.
pub fn dirty_pixels(gen: &Generator, state: &FieldState, cells: &Rect) -> Rect {
    let field = state.field();
    if cells.is_empty() {
        return Rect::EMPTY;
    }
    let s = gen.spec().scale_from(field.level());
    let halo = gen.halo(field.level());
    field.latent_rect(cells).scale(s).dilate_within(s * halo, field.width() * s, field.height() * s)
}

fn bounding(cells: &[(usize, usize)]) -> Rect {
    cells.iter().fold(Rect::EMPTY, |acc, &(x, y)| acc.union(&Rect::new(x, y, 1, 1)))
}

impl Editor {
    pub fn new(state: FieldState) -> Self {
        Self::with_capacity(state, DEFAULT_HISTORY)
    }

    pub fn with_capacity(state: FieldState, capacity: usize) -> Self {
        Self { state, undo: VecDeque::new(), redo: Vec::new(), capacity, log: Vec::new() }
    }

    pub fn state(&self) -> &FieldState {
        &self.state
    }

    /// Direct access for refinement. Clears redo history since the redo
    /// snapshots may no longer describe the field.
    pub fn state_mut(&mut self) -> &mut FieldState {
        self.redo.clear();
        &mut self.state
    }

    pub fn into_state(self) -> FieldState {
        self.state
    }

    /// Actions applied so far, in order.
    pub fn log(&self) -> &[Action] {
        &self.log
    }

    pub fn can_undo(&self) -> bool {
        !self.undo.is_empty()
    }

    pub fn can_redo(&self) -> bool {
        !self.redo.is_empty()
    }

    fn check_rect(&self, r: &Rect, what: &str) -> Result<()> {
        let f = self.state.field();
        if r.is_empty() || !r.fits_within(f.cells_x(), f.cells_y()) {
            return Err(arg_err!("{what} {r:?} outside the {}x{} cell field", f.cells_x(), f.cells_y()));
        }
        Ok(())
    }

    fn source_latent(&self, bank: &SampleBank, src: LatentSource) -> Result<(Tensor, CellProvenance)> {
        match src {
            LatentSource::Sample(id) => {
                let s = bank.sample(id)?;
                Ok((s.cropped(bank.crop()), CellProvenance { sample: Some(id), cluster: s.cluster, edited: false }))
            }
            LatentSource::Cell(x, y) => {
                self.check_rect(&Rect::new(x, y, 1, 1), "source cell")?;
                Ok((self.state.field().cell_values(x, y), self.state.field().provenance(x, y)))
            }
        }
    }

    /// Computes the new content of every cell a command writes, without
    /// touching the field. All validation happens here.
    fn plan(&self, bank: &SampleBank, cmd: &EditCommand) -> Result<Vec<CellSnapshot>> {
        let field = self.state.field();
        match cmd {
            EditCommand::Brush { cells, cluster, seed } => {
                self.check_rect(cells, "brush rect")?;
                if !bank.is_clustered() {
                    return Err(Error::State("bank has not been clustered".into()));
                }
                if *cluster as usize >= bank.cluster_count() {
                    return Err(arg_err!("cluster {cluster} out of range 0..{}", bank.cluster_count()));
                }
                let mut rng = Rng::new(*seed);
                cells
                    .cells()
                    .map(|cell| {
                        let s = bank.sample_from_cluster(*cluster as usize, &mut rng)?;
                        Ok(CellSnapshot {
                            cell,
                            values: s.cropped(bank.crop()),
                            provenance: CellProvenance { sample: Some(s.id), cluster: Some(*cluster), edited: true },
                        })
                    })
                    .collect()
            }
            EditCommand::Clone { source, dest, shuffle, seed } => {
                self.check_rect(source, "clone source")?;
                let target = Rect::new(dest.0, dest.1, source.w, source.h);
                self.check_rect(&target, "clone destination")?;
                let mut src: Vec<(usize, usize)> = source.cells().collect();
                if *shuffle {
                    let mut rng = Rng::new(*seed);
                    for i in (1..src.len()).rev() {
                        src.swap(i, rng.below(i + 1));
                    }
                }
                Ok(target
                    .cells()
                    .zip(src)
                    .map(|(cell, (sx, sy))| CellSnapshot {
                        cell,
                        values: field.cell_values(sx, sy),
                        provenance: CellProvenance { edited: true, ..field.provenance(sx, sy) },
                    })
                    .collect())
            }
            EditCommand::Noise { cells, sigma, seed } => {
                self.check_rect(cells, "noise rect")?;
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(arg_err!("noise sigma {sigma} must be a non-negative real"));
                }
                if *sigma == 0.0 {
                    return Ok(Vec::new());
                }
                let mut rng = Rng::new(*seed);
                Ok(cells
                    .cells()
                    .map(|cell| {
                        let mut values = field.cell_values(cell.0, cell.1);
                        for v in values.values_mut() {
                            *v += sigma * rng.normal();
                        }
                        let provenance = CellProvenance { edited: true, ..field.provenance(cell.0, cell.1) };
                        CellSnapshot { cell, values, provenance }
                    })
                    .collect())
            }
            EditCommand::Interpolate { cell, a, b, t } => {
                self.check_rect(&Rect::new(cell.0, cell.1, 1, 1), "interpolation cell")?;
                if !(0.0..=1.0).contains(t) {
                    return Err(arg_err!("blend t = {t} outside [0, 1]"));
                }
                let (la, pa) = self.source_latent(bank, *a)?;
                let (lb, pb) = self.source_latent(bank, *b)?;
                let values = la.values().iter().zip(lb.values()).map(|(x, y)| (1.0 - t) * x + t * y).collect();
                let values = Tensor::new(la.channels(), la.height(), la.width(), values)?;
                // Energy is defined over bank assignments; a blend is scored
                // as its nearer endpoint.
                let nearer = if *t < 0.5 { pa } else { pb };
                let provenance = CellProvenance { edited: *t != 0.0 && *t != 1.0 || nearer.edited, ..nearer };
                Ok(vec![CellSnapshot { cell: *cell, values, provenance }])
            }
            EditCommand::Guidance { .. } => Ok(Vec::new()),
        }
    }

    fn write_cells(
        &mut self,
        gen: Option<&Generator>,
        bank: &SampleBank,
        cells: &[CellSnapshot],
    ) -> Result<DirtyRegion> {
        let mut changed = Vec::new();
        for snap in cells {
            let f = self.state.field();
            let (x, y) = snap.cell;
            if f.cell_values(x, y) == snap.values && f.provenance(x, y) == snap.provenance {
                continue;
            }
            self.state.field_mut().set_cell(x, y, &snap.values, snap.provenance)?;
            changed.push((x, y));
        }
        self.state.refresh_cells(bank, &changed);
        let cells = bounding(&changed);
        let pixels = match gen {
            Some(gen) => dirty_pixels(gen, &self.state, &cells),
            None => Rect::EMPTY,
        };
        let dirty = DirtyRegion { cells, pixels };
        if let Some(gen) = gen {
            self.resynthesize(gen, &dirty)?;
        }
        Ok(dirty)
    }

    fn write_guidance(&mut self, bank: &SampleBank, at: (usize, usize), patch: &Tensor) -> Result<DirtyRegion> {
        let affected = self.state.guidance_mut().update(patch, at.0, at.1)?;
        self.state.refresh_guidance(bank, &affected);
        Ok(DirtyRegion { cells: bounding(&affected), pixels: Rect::EMPTY })
    }

    /// Applies a command atomically: on error the field is unchanged.
    ///
    /// With a generator the cached image (if any) is re-rendered over the
    /// dirty pixels; without one the cache is dropped when latents change.
    pub fn apply(&mut self, gen: Option<&Generator>, bank: &SampleBank, cmd: EditCommand) -> Result<DirtyRegion> {
        let change = match &cmd {
            EditCommand::Guidance { at, patch } => {
                let img = self.state.guidance().image();
                let rect = Rect::new(at.0, at.1, patch.width(), patch.height());
                if patch.channels() != 3 || !rect.fits_within(img.width(), img.height()) {
                    return Err(arg_err!(
                        "guidance patch {}x{}x{} at {at:?} outside the {}x{} map",
                        patch.channels(),
                        patch.height(),
                        patch.width(),
                        img.width(),
                        img.height()
                    ));
                }
                let before = img.crop(at.0, at.1, patch.width(), patch.height())?;
                Change::Guidance { at: *at, before, after: patch.clone() }
            }
            _ => {
                let after = self.plan(bank, &cmd)?;
                let f = self.state.field();
                let before = after
                    .iter()
                    .map(|s| CellSnapshot {
                        cell: s.cell,
                        values: f.cell_values(s.cell.0, s.cell.1),
                        provenance: f.provenance(s.cell.0, s.cell.1),
                    })
                    .collect();
                Change::Cells { before, after }
            }
        };
        let dirty = self.perform(gen, bank, &change, false)?;
        self.undo.push_back(change);
        if self.undo.len() > self.capacity {
            self.undo.pop_front();
        }
        self.redo.clear();
        self.log.push(Action::Edit(cmd));
        Ok(dirty)
    }

    fn perform(
        &mut self,
        gen: Option<&Generator>,
        bank: &SampleBank,
        change: &Change,
        reverse: bool,
    ) -> Result<DirtyRegion> {
        if gen.is_none() {
            if let Change::Cells { .. } = change {
                self.state.set_image(None);
            }
        }
        match change {
            Change::Cells { before, after } => self.write_cells(gen, bank, if reverse { before } else { after }),
            Change::Guidance { at, before, after } => {
                self.write_guidance(bank, *at, if reverse { before } else { after })
            }
        }
    }

    /// Reverts the most recent edit; `None` when there is nothing to undo.
    pub fn undo(&mut self, gen: Option<&Generator>, bank: &SampleBank) -> Result<Option<DirtyRegion>> {
        let Some(change) = self.undo.pop_back() else { return Ok(None) };
        let dirty = self.perform(gen, bank, &change, true)?;
        self.redo.push(change);
        self.log.push(Action::Undo);
        Ok(Some(dirty))
    }

    pub fn redo(&mut self, gen: Option<&Generator>, bank: &SampleBank) -> Result<Option<DirtyRegion>> {
        let Some(change) = self.redo.pop() else { return Ok(None) };
        let dirty = self.perform(gen, bank, &change, false)?;
        self.undo.push_back(change);
        self.log.push(Action::Redo);
        Ok(Some(dirty))
    }

    pub fn act(&mut self, gen: Option<&Generator>, bank: &SampleBank, action: Action) -> Result<Option<DirtyRegion>> {
        match action {
            Action::Edit(cmd) => self.apply(gen, bank, cmd).map(Some),
            Action::Undo => self.undo(gen, bank),
            Action::Redo => self.redo(gen, bank),
        }
    }

    /// Re-renders `dirty.pixels` into the cached image. Does nothing when
    /// no image is cached or the region is empty.
    pub fn resynthesize(&mut self, gen: &Generator, dirty: &DirtyRegion) -> Result<()> {
        if dirty.pixels.is_empty() || self.state.image().is_none() {
            return Ok(());
        }
        let field = self.state.field();
        let patch = gen.render_region(field.values(), field.level(), dirty.pixels, gen.halo(field.level()))?;
        let image = self.state.image_mut().expect("checked above");
        image.paste(&patch, dirty.pixels.x, dirty.pixels.y)
    }
}

/// Replays `log` on `editor`, stopping at the first failing action.
pub fn replay(editor: &mut Editor, gen: Option<&Generator>, bank: &SampleBank, log: &[Action]) -> Result<()> {
    for (i, a) in log.iter().enumerate() {
        editor.act(gen, bank, a.clone()).map_err(|e| Error::Argument(format!("log record {}: {e}", i + 1)))?;
    }
    Ok(())
}

struct Fields<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|p| p.0 == key)
            .map(|p| p.1)
            .ok_or_else(|| format_err!("line {}: missing {key}=", self.line))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| format_err!("line {}: bad {key}={v}", self.line))
    }

    fn list(&self, key: &str, n: usize) -> Result<Vec<usize>> {
        let v = self.get(key)?;
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err!("line {}: bad {key}={v}", self.line))?;
        if parts.len() != n {
            return Err(format_err!("line {}: {key} needs {n} values", self.line));
        }
        Ok(parts)
    }

    fn rect(&self, key: &str) -> Result<Rect> {
        let v = self.list(key, 4)?;
        Ok(Rect::new(v[0], v[1], v[2], v[3]))
    }

    fn pair(&self, key: &str) -> Result<(usize, usize)> {
        let v = self.list(key, 2)?;
        Ok((v[0], v[1]))
    }

    fn source(&self, key: &str) -> Result<LatentSource> {
        let v = self.get(key)?;
        let bad = || format_err!("line {}: bad {key}={v}", self.line);
        if let Some(id) = v.strip_prefix("sample:") {
            return id.parse().map(LatentSource::Sample).map_err(|_| bad());
        }
        let (x, y) = v.strip_prefix("cell:").and_then(|c| c.split_once(',')).ok_or_else(bad)?;
        Ok(LatentSource::Cell(x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?))
    }
}

fn parse_line(line: usize, text: &str) -> Result<Option<Action>> {
    let text = text.trim();
    if text.is_empty() || text.starts_with('#') {
        return Ok(None);
    }
    let mut tokens = text.split_whitespace();
    let kind = tokens.next().unwrap();
    let pairs = tokens
        .map(|t| t.split_once('=').ok_or_else(|| format_err!("line {line}: expected key=value, got {t:?}")))
        .collect::<Result<Vec<_>>>()?;
    let f = Fields { line, pairs };
    let action = match kind {
        "undo" => Action::Undo,
        "redo" => Action::Redo,
        "brush" => Action::Edit(EditCommand::Brush {
            cells: f.rect("rect")?,
            cluster: f.num("cluster")?,
            seed: f.num("seed")?,
        }),
        "clone" | "shuffle-clone" => Action::Edit(EditCommand::Clone {
            source: f.rect("src")?,
            dest: f.pair("dst")?,
            shuffle: kind == "shuffle-clone",
            seed: f.num("seed")?,
        }),
        "noise" => {
            Action::Edit(EditCommand::Noise { cells: f.rect("rect")?, sigma: f.num("sigma")?, seed: f.num("seed")? })
        }
        "interpolate" => Action::Edit(EditCommand::Interpolate {
            cell: f.pair("cell")?,
            a: f.source("a")?,
            b: f.source("b")?,
            t: f.num("t")?,
        }),
        "guidance" => {
            let (w, h) = f.pair("size")?;
            let bytes = BASE64.decode(f.get("data")?).map_err(|e| format_err!("line {line}: guidance data: {e}"))?;
            if bytes.len() != 3 * w * h * 4 {
                return Err(format_err!(
                    "line {line}: guidance data holds {} bytes, size needs {}",
                    bytes.len(),
                    3 * w * h * 4
                ));
            }
            let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let patch = Tensor::new(3, h, w, values).map_err(|e| format_err!("line {line}: {e}"))?;
            Action::Edit(EditCommand::Guidance { at: f.pair("at")?, patch })
        }
        other => return Err(format_err!("line {line}: unknown command {other:?}")),
    };
    Ok(Some(action))
}

/// Parses a command log.
pub fn parse_log(text: &str) -> Result<Vec<Action>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(a) = parse_line(i + 1, line)? {
            out.push(a);
        }
    }
    Ok(out)
}

fn fmt_rect(r: &Rect) -> String {
    format!("{},{},{},{}", r.x, r.y, r.w, r.h)
}

impl fmt::Display for LatentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatentSource::Sample(id) => write!(f, "sample:{id}"),
            LatentSource::Cell(x, y) => write!(f, "cell:{x},{y}"),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Undo => write!(f, "undo"),
            Action::Redo => write!(f, "redo"),
            Action::Edit(cmd) => write!(f, "{cmd}"),
        }
    }
}

impl fmt::Display for EditCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditCommand::Brush { cells, cluster, seed } => {
                write!(f, "brush rect={} cluster={cluster} seed={seed}", fmt_rect(cells))
            }
            EditCommand::Clone { source, dest, shuffle, seed } => write!(
                f,
                "{} src={} dst={},{} seed={seed}",
                if *shuffle { "shuffle-clone" } else { "clone" },
                fmt_rect(source),
                dest.0,
                dest.1
            ),
            EditCommand::Noise { cells, sigma, seed } => {
                write!(f, "noise rect={} sigma={sigma:?} seed={seed}", fmt_rect(cells))
            }
            EditCommand::Interpolate { cell, a, b, t } => {
                write!(f, "interpolate cell={},{} a={a} b={b} t={t:?}", cell.0, cell.1)
            }
            EditCommand::Guidance { at, patch } => {
                let bytes: Vec<u8> = patch.values().iter().flat_map(|v| v.to_le_bytes()).collect();
                write!(
                    f,
                    "guidance at={},{} size={},{} data={}",
                    at.0,
                    at.1,
                    patch.width(),
                    patch.height(),
                    BASE64.encode(bytes)
                )
            }
        }
    }
}

/// Formats actions one per line.
pub fn format_log(actions: &[Action]) -> String {
    actions.iter().map(|a| format!("{a}\n")).collect()
}
