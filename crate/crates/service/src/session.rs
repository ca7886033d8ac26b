//! Fields held by a running service and their single-writer discipline.
//!
//! Every mutation of a field (edits, undo/redo, refinement steps) runs under
//! the field's mutex, so they apply in a single total order. Tile requests
//! copy the pixels they need under the same lock and encode outside it.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use tokio::sync::broadcast;

use tilegan_api::{ChangeSource, Dirty, Energy, Event, FieldInfo, RefineState, RefineStatus, StopCause};
use tilegan_core::bank::SampleBank;
use tilegan_core::editor::{dirty_pixels, Action, DirtyRegion, Editor};
use tilegan_core::generator::{Generator, Rect};
use tilegan_core::synthesis::{FieldState, Refiner, StopReason};
use tilegan_core::Error;

use crate::convert::{energy_of, region};
use crate::tiles;

pub const DEFAULT_TILE_SIZE: usize = 256;
/// Largest image `GET /fields/{id}/image` will encode; bigger fields are
/// viewed through tiles.
pub const DEFAULT_MAX_IMAGE_PIXELS: usize = 1 << 24;
const EVENT_BUFFER: usize = 1024;
/// Refinement steps taken per lock acquisition.
const REFINE_BATCH: usize = 8;

/// Generator, bank and the live fields of one service instance.
pub struct Session {
    pub gen: Arc<Generator>,
    pub bank: Arc<SampleBank>,
    pub tile_size: usize,
    pub max_image_pixels: usize,
    fields: RwLock<HashMap<u64, Arc<FieldHandle>>>,
    next_id: AtomicU64,
}

pub struct FieldInner {
    pub editor: Editor,
    pub revision: u64,
    pub refine: RefineStatus,
}

pub struct FieldHandle {
    pub id: u64,
    inner: Mutex<FieldInner>,
    events: broadcast::Sender<Event>,
    stop: AtomicBool,
}

impl Session {
    pub fn new(gen: Generator, bank: SampleBank, tile_size: usize) -> Result<Self, Error> {
        bank.check_generator(&gen)?;
        if !tile_size.is_power_of_two() || tile_size < 2 {
            return Err(Error::Argument(format!("tile size {tile_size} must be a power of two")));
        }
        Ok(Self {
            gen: Arc::new(gen),
            bank: Arc::new(bank),
            tile_size,
            max_image_pixels: DEFAULT_MAX_IMAGE_PIXELS,
            fields: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    /// Loads `generator.tgw` and `bank.tgb` from `dir`.
    pub fn open(dir: &Path, tile_size: usize) -> Result<Self, Error> {
        let gen = Generator::from_bytes(&std::fs::read(dir.join("generator.tgw"))?)?;
        let bank = SampleBank::from_bytes_for(&std::fs::read(dir.join("bank.tgb"))?, &gen)?;
        Self::new(gen, bank, tile_size)
    }

    pub fn insert(&self, state: FieldState) -> Arc<FieldHandle> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let handle = Arc::new(FieldHandle {
            id,
            inner: Mutex::new(FieldInner {
                editor: Editor::new(state),
                revision: 0,
                refine: RefineStatus { state: RefineState::Idle, steps: 0, last_stop: None },
            }),
            events,
            stop: AtomicBool::new(false),
        });
        self.fields.write().unwrap().insert(id, handle.clone());
        handle
    }

    pub fn get(&self, id: u64) -> Option<Arc<FieldHandle>> {
        self.fields.read().unwrap().get(&id).cloned()
    }

    pub fn remove(&self, id: u64) -> Option<Arc<FieldHandle>> {
        let h = self.fields.write().unwrap().remove(&id)?;
        h.stop.store(true, Ordering::SeqCst);
        Some(h)
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.fields.read().unwrap().keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

impl FieldHandle {
    pub fn lock(&self) -> MutexGuard<'_, FieldInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    fn emit(&self, ev: Event) {
        // No subscribers is fine.
        let _ = self.events.send(ev);
    }

    pub fn info(&self, session: &Session) -> FieldInfo {
        let inner = self.lock();
        let state = inner.editor.state();
        let f = state.field();
        let (width, height) = session.gen.spec().image_size(f.level(), f.width(), f.height());
        FieldInfo {
            id: self.id,
            revision: inner.revision,
            level: f.level(),
            crop: f.cell_size(),
            cells_x: f.cells_x(),
            cells_y: f.cells_y(),
            width,
            height,
            tile_size: session.tile_size,
            max_zoom: tiles::max_zoom(width, height, session.tile_size),
            energy: state.energy().map(energy_of),
            refine: inner.refine,
            can_undo: inner.editor.can_undo(),
            can_redo: inner.editor.can_redo(),
        }
    }

    /// Applies one editor action, publishing dirty and energy events.
    pub fn act(&self, session: &Session, action: Action) -> Result<(Option<DirtyRegion>, u64, Option<Energy>), Error> {
        let source = match action {
            Action::Edit(_) => ChangeSource::Edit,
            Action::Undo => ChangeSource::Undo,
            Action::Redo => ChangeSource::Redo,
        };
        let mut inner = self.lock();
        let dirty = inner.editor.act(Some(&session.gen), &session.bank, action)?;
        if dirty.is_some() {
            inner.revision += 1;
        }
        let revision = inner.revision;
        let energy = inner.editor.state().energy().map(energy_of);
        if let Some(d) = dirty {
            self.emit(Event::Dirty {
                field: self.id,
                revision,
                source,
                dirty: Dirty { cells: region(&d.cells), pixels: region(&d.pixels) },
            });
            if let Some(e) = energy {
                self.emit(Event::Energy { field: self.id, revision, energy: e });
            }
        }
        Ok((dirty, revision, energy))
    }

    /// Starts background refinement unless already running. Returns the
    /// status after the call.
    pub fn start_refine(self: &Arc<Self>, session: &Arc<Session>, seed: u64) -> Result<RefineStatus, Error> {
        let mut inner = self.lock();
        if inner.refine.state == RefineState::Running {
            return Ok(inner.refine);
        }
        let refiner = Refiner::new(inner.editor.state(), seed)?;
        self.stop.store(false, Ordering::SeqCst);
        inner.refine = RefineStatus { state: RefineState::Running, steps: 0, last_stop: None };
        let status = inner.refine;
        self.emit(Event::Refine { field: self.id, revision: inner.revision, status });
        drop(inner);
        let (handle, session) = (self.clone(), session.clone());
        tokio::task::spawn_blocking(move || handle.refine_loop(&session, refiner));
        Ok(status)
    }

    /// Asks a running refinement to stop; returns once it has.
    pub fn stop_refine(&self) -> RefineStatus {
        self.stop.store(true, Ordering::SeqCst);
        loop {
            let inner = self.lock();
            if inner.refine.state != RefineState::Running {
                return inner.refine;
            }
            drop(inner);
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
    }

    fn refine_loop(&self, session: &Session, mut refiner: Refiner) {
        let cause = loop {
            if self.stop.load(Ordering::SeqCst) {
                break StopCause::Requested;
            }
            let mut inner = self.lock();
            let mut result = None;
            let mut changed = false;
            for _ in 0..REFINE_BATCH {
                if let Some(reason) = refiner.finished(inner.editor.state()) {
                    result = Some(match reason {
                        StopReason::Threshold => StopCause::Threshold,
                        StopReason::StepCap => StopCause::StepCap,
                    });
                    break;
                }
                match self.refine_step(session, &mut inner, &mut refiner) {
                    Ok(c) => changed |= c,
                    Err(_) => {
                        result = Some(StopCause::Error);
                        break;
                    }
                }
            }
            inner.refine.steps = refiner.steps();
            if changed {
                if let Some(e) = inner.editor.state().energy().map(energy_of) {
                    self.emit(Event::Energy { field: self.id, revision: inner.revision, energy: e });
                }
            }
            drop(inner);
            if let Some(cause) = result {
                break cause;
            }
            std::thread::yield_now();
        };
        let mut inner = self.lock();
        inner.refine = RefineStatus { state: RefineState::Idle, steps: refiner.steps(), last_stop: Some(cause) };
        self.emit(Event::Refine { field: self.id, revision: inner.revision, status: inner.refine });
    }

    fn refine_step(&self, session: &Session, inner: &mut FieldInner, refiner: &mut Refiner) -> Result<bool, Error> {
        let Some(step) = refiner.step(inner.editor.state_mut(), &session.bank)? else {
            return Ok(false);
        };
        if !step.decision.changed() {
            return Ok(false);
        }
        let (cx, cy) = step.decision.cell;
        let cells = Rect::new(cx, cy, 1, 1);
        let pixels = dirty_pixels(&session.gen, inner.editor.state(), &cells);
        let dirty = DirtyRegion { cells, pixels };
        inner.editor.resynthesize(&session.gen, &dirty)?;
        inner.revision += 1;
        self.emit(Event::Dirty {
            field: self.id,
            revision: inner.revision,
            source: ChangeSource::Refine,
            dirty: Dirty { cells: region(&cells), pixels: region(&pixels) },
        });
        Ok(true)
    }
}
