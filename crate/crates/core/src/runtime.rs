//! Sanitizer runtime: protected allocation and deallocation, id generation,
//! the global pointer table, pointer checks, standard-function wrappers and
//! violation classification.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::memspace::{AlignmentError, FaultKind, LayoutError, MemSpace, MemoryFault, Region, RegionKind, RegionLayout};
use crate::pacore::{pac_auth, pac_sign, pac_verifies, AddressConfig, ObjectId, PacError, PacKey, PtrWord};

/// Smallest positive multiple of 4 that is at least `max(size, 1)`.
pub fn padded_size(size: u64) -> u64 {
    size.max(1).div_ceil(4) * 4
}

/// How many retired objects are remembered for diagnostics.
const RETIRED_HISTORY: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ViolationKind {
    SpatialOOB,
    UseAfterFree,
    DoubleFree,
    FreeInsideBuffer,
    UseAfterScope,
    PoisonedDeref,
    ShadowAccess,
    CraftedPac,
    InvalidFree,
    UnmappedAccess,
}

impl ViolationKind {
    pub const ALL: [ViolationKind; 10] = [
        ViolationKind::SpatialOOB,
        ViolationKind::UseAfterFree,
        ViolationKind::DoubleFree,
        ViolationKind::FreeInsideBuffer,
        ViolationKind::UseAfterScope,
        ViolationKind::PoisonedDeref,
        ViolationKind::ShadowAccess,
        ViolationKind::CraftedPac,
        ViolationKind::InvalidFree,
        ViolationKind::UnmappedAccess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::SpatialOOB => "SpatialOOB",
            ViolationKind::UseAfterFree => "UseAfterFree",
            ViolationKind::DoubleFree => "DoubleFree",
            ViolationKind::FreeInsideBuffer => "FreeInsideBuffer",
            ViolationKind::UseAfterScope => "UseAfterScope",
            ViolationKind::PoisonedDeref => "PoisonedDeref",
            ViolationKind::ShadowAccess => "ShadowAccess",
            ViolationKind::CraftedPac => "CraftedPac",
            ViolationKind::InvalidFree => "InvalidFree",
            ViolationKind::UnmappedAccess => "UnmappedAccess",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn from_fault(kind: FaultKind) -> Self {
        match kind {
            FaultKind::PoisonedPointer => ViolationKind::PoisonedDeref,
            FaultKind::ShadowAccess => ViolationKind::ShadowAccess,
            FaultKind::Unmapped => ViolationKind::UnmappedAccess,
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A detected memory-safety violation, not yet attributed to an instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub pointer: PtrWord,
    pub found_id: ObjectId,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, pointer: PtrWord, found_id: ObjectId, message: impl Into<String>) -> Self {
        Violation {
            kind,
            pointer,
            found_id,
            message: message.into(),
        }
    }
}

impl From<MemoryFault> for Violation {
    fn from(fault: MemoryFault) -> Self {
        Violation::new(
            ViolationKind::from_fault(fault.kind),
            fault.addr,
            ObjectId::FREED,
            format!("hardware trap: {} fault on dereference", fault.kind),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("heap budget exhausted allocating {0} bytes")]
    HeapExhausted(u64),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Pac(#[from] PacError),
    #[error("global pointer table: {0}")]
    Gppt(String),
}

/// Anything that stops a runtime operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trap {
    Violation(Violation),
    Error(RuntimeError),
}

impl From<Violation> for Trap {
    fn from(v: Violation) -> Self {
        Trap::Violation(v)
    }
}

impl From<RuntimeError> for Trap {
    fn from(e: RuntimeError) -> Self {
        Trap::Error(e)
    }
}

impl From<MemoryFault> for Trap {
    fn from(f: MemoryFault) -> Self {
        Trap::Violation(f.into())
    }
}

impl From<AlignmentError> for Trap {
    fn from(e: AlignmentError) -> Self {
        Trap::Error(e.into())
    }
}

impl From<PacError> for Trap {
    fn from(e: PacError) -> Self {
        Trap::Error(e.into())
    }
}

/// Global allocation counter. Starts at a random value and skips zero.
#[derive(Debug, Clone)]
pub struct IdGenerator {
    counter: u32,
}

impl IdGenerator {
    pub fn starting_at(counter: u32) -> Self {
        IdGenerator { counter }
    }

    pub fn from_rng<R: Rng + ?Sized>(rng: &mut R) -> Self {
        IdGenerator { counter: rng.gen() }
    }

    pub fn next_id(&mut self) -> ObjectId {
        if self.counter == 0 {
            self.counter = 1;
        }
        let id = self.counter;
        self.counter = self.counter.wrapping_add(1);
        ObjectId(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ObjectKind {
    Heap,
    /// Heap object allocated through the external-allocation interceptor.
    External,
    Stack,
    Global,
}

impl ObjectKind {
    fn is_heap(self) -> bool {
        matches!(self, ObjectKind::Heap | ObjectKind::External)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectRecord {
    pub base: u64,
    /// Extent after padding.
    pub size: u64,
    pub id: ObjectId,
    pub kind: ObjectKind,
}

impl ObjectRecord {
    pub fn contains(&self, addr: u64) -> bool {
        (self.base..self.base + self.size).contains(&addr)
    }
}

/// Live protected objects by base address, plus a bounded history of
/// objects that have been freed or gone out of scope.
#[derive(Debug, Clone, Default)]
pub struct AllocTable {
    live: BTreeMap<u64, ObjectRecord>,
    retired: VecDeque<ObjectRecord>,
}

impl AllocTable {
    pub fn insert(&mut self, record: ObjectRecord) {
        self.live.insert(record.base, record);
    }

    pub fn get(&self, base: u64) -> Option<&ObjectRecord> {
        self.live.get(&base)
    }

    pub fn retire(&mut self, base: u64) -> Option<ObjectRecord> {
        let record = self.live.remove(&base)?;
        if self.retired.len() == RETIRED_HISTORY {
            self.retired.pop_back();
        }
        self.retired.push_front(record);
        Some(record)
    }

    pub fn live_containing(&self, addr: u64) -> Option<&ObjectRecord> {
        self.live
            .range(..=addr)
            .next_back()
            .map(|(_, r)| r)
            .filter(|r| r.contains(addr))
    }

    pub fn live(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.live.values()
    }

    /// Most recently retired first.
    pub fn retired(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.retired.iter()
    }

    pub fn live_heap_objects(&self) -> usize {
        self.live.values().filter(|r| r.kind.is_heap()).count()
    }
}

/// Bump allocator with exact-size free lists reused eagerly (LIFO).
#[derive(Debug, Clone)]
pub struct HeapAllocator {
    region: Region,
    bump: u64,
    free: HashMap<u64, Vec<u64>>,
}

impl HeapAllocator {
    pub fn new(region: Region) -> Self {
        // the first word stays unallocated: a zero guard below the first object
        HeapAllocator {
            region,
            bump: region.base + 4,
            free: HashMap::new(),
        }
    }

    pub fn alloc(&mut self, padded: u64) -> Option<u64> {
        if let Some(base) = self.free.get_mut(&padded).and_then(Vec::pop) {
            return Some(base);
        }
        let base = self.bump;
        let end = base.checked_add(padded)?;
        if end > self.region.limit {
            return None;
        }
        self.bump = end;
        Some(base)
    }

    pub fn release(&mut self, base: u64, padded: u64) {
        self.free.entry(padded).or_default().push(base);
    }

    pub fn high_water(&self) -> u64 {
        self.bump - self.region.base
    }
}

/// Signed pointers to unsafe globals, built once at program start.
#[derive(Debug, Clone, Default)]
pub struct Gppt {
    entries: BTreeMap<String, PtrWord>,
}

impl Gppt {
    pub fn insert(&mut self, symbol: &str, ptr: PtrWord) -> Result<(), RuntimeError> {
        if self.entries.contains_key(symbol) {
            return Err(RuntimeError::Gppt(format!("@{symbol} initialized twice")));
        }
        self.entries.insert(symbol.to_string(), ptr);
        Ok(())
    }

    pub fn get(&self, symbol: &str) -> Option<PtrWord> {
        self.entries.get(symbol).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Standard-library routines the runtime can execute on simulated memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builtin {
    Memcpy,
    Memmove,
    Memset,
    Strlen,
    Strcpy,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "memcpy" => Builtin::Memcpy,
            "memmove" => Builtin::Memmove,
            "memset" => Builtin::Memset,
            "strlen" => Builtin::Strlen,
            "strcpy" => Builtin::Strcpy,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Memcpy => "memcpy",
            Builtin::Memmove => "memmove",
            Builtin::Memset => "memset",
            Builtin::Strlen => "strlen",
            Builtin::Strcpy => "strcpy",
        }
    }
}

/// How wrappers validate the byte ranges they touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeCheck {
    /// Full check at the first and last byte.
    Endpoints,
    /// Full check at every byte.
    EveryByte,
}

/// The per-run sanitizer state.
#[derive(Debug)]
pub struct Runtime {
    cfg: AddressConfig,
    key: PacKey,
    ids: IdGenerator,
    mem: MemSpace,
    heap: HeapAllocator,
    objects: AllocTable,
    gppt: Gppt,
    raw_blocks: HashMap<u64, u64>,
    full_checks: Cell<u64>,
    fast_checks: Cell<u64>,
}

impl Runtime {
    /// Derives the key and the id counter start from `seed`.
    pub fn new(cfg: AddressConfig, layout: RegionLayout, seed: u64) -> Result<Self, LayoutError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = PacKey::generate(&mut rng);
        let ids = IdGenerator::from_rng(&mut rng);
        Self::with_parts(cfg, layout, key, ids)
    }

    pub fn with_parts(
        cfg: AddressConfig,
        layout: RegionLayout,
        key: PacKey,
        ids: IdGenerator,
    ) -> Result<Self, LayoutError> {
        let mem = MemSpace::new(cfg, layout)?;
        Ok(Runtime {
            cfg,
            key,
            ids,
            heap: HeapAllocator::new(layout.heap),
            mem,
            objects: AllocTable::default(),
            gppt: Gppt::default(),
            raw_blocks: HashMap::new(),
            full_checks: Cell::new(0),
            fast_checks: Cell::new(0),
        })
    }

    pub fn config(&self) -> &AddressConfig {
        &self.cfg
    }

    pub fn mem(&self) -> &MemSpace {
        &self.mem
    }

    pub fn mem_mut(&mut self) -> &mut MemSpace {
        &mut self.mem
    }

    pub fn objects(&self) -> &AllocTable {
        &self.objects
    }

    pub fn gppt(&self) -> &Gppt {
        &self.gppt
    }

    pub fn full_checks(&self) -> u64 {
        self.full_checks.get()
    }

    pub fn fast_checks(&self) -> u64 {
        self.fast_checks.get()
    }

    pub fn id_at(&self, addr: PtrWord) -> ObjectId {
        self.mem.id_at(addr)
    }

    /// Authenticates `ptr` against the id currently shadowing its address.
    pub fn authenticate(&self, ptr: PtrWord) -> PtrWord {
        let id = self.mem.id_at(self.cfg.strip(ptr));
        pac_auth(ptr, id, &self.key, &self.cfg)
    }

    fn register(&mut self, base: u64, size: u64, kind: ObjectKind) -> Result<ObjectId, RuntimeError> {
        let padded = padded_size(size);
        let id = self.ids.next_id();
        self.mem.shadow_fill(PtrWord(base), padded, id)?;
        self.objects.insert(ObjectRecord {
            base,
            size: padded,
            id,
            kind,
        });
        Ok(id)
    }

    fn carve(&mut self, size: u64, kind: ObjectKind) -> Result<(PtrWord, ObjectId), RuntimeError> {
        let padded = padded_size(size);
        let base = self.heap.alloc(padded).ok_or(RuntimeError::HeapExhausted(size))?;
        let id = self.register(base, padded, kind)?;
        Ok((PtrWord(base), id))
    }

    pub fn protected_malloc(&mut self, size: u64) -> Result<PtrWord, RuntimeError> {
        let (base, id) = self.carve(size, ObjectKind::Heap)?;
        Ok(pac_sign(base, id, &self.key, &self.cfg)?)
    }

    /// Interceptor for allocations made by uninstrumented code: the object
    /// is shadowed like any other, but the caller gets the unsigned base.
    pub fn intercepted_external_alloc(&mut self, size: u64) -> Result<PtrWord, RuntimeError> {
        let (base, _) = self.carve(size, ObjectKind::External)?;
        Ok(base)
    }

    /// Signs a pointer coming back from uninstrumented code with the id
    /// found in its shadow. Unshadowed memory yields a poisoned pointer.
    pub fn resign_return(&self, raw: PtrWord) -> PtrWord {
        if raw == PtrWord::NULL {
            return raw;
        }
        let raw = self.cfg.strip(raw);
        let id = self.mem.id_at(raw);
        if id.is_freed() || self.cfg.address_msb(raw) {
            return self.cfg.poison(raw);
        }
        pac_sign(raw, id, &self.key, &self.cfg).unwrap_or_else(|_| self.cfg.poison(raw))
    }

    /// Shadows and signs a stack slot or global.
    pub fn protect_object(&mut self, base: PtrWord, size: u64, kind: ObjectKind) -> Result<PtrWord, RuntimeError> {
        let id = self.register(base.0, size, kind)?;
        Ok(pac_sign(base, id, &self.key, &self.cfg)?)
    }

    /// Clears a stack slot's shadow when its frame is popped.
    pub fn release_object(&mut self, base: PtrWord, size: u64) -> Result<(), RuntimeError> {
        self.mem.shadow_clear(base, padded_size(size))?;
        self.objects.retire(base.0);
        Ok(())
    }

    pub fn gppt_init(&mut self, symbol: &str, base: PtrWord, size: u64) -> Result<PtrWord, RuntimeError> {
        if self.gppt.get(symbol).is_some() {
            return Err(RuntimeError::Gppt(format!("@{symbol} initialized twice")));
        }
        let signed = self.protect_object(base, size, ObjectKind::Global)?;
        self.gppt.insert(symbol, signed)?;
        Ok(signed)
    }

    pub fn gppt_load(&self, symbol: &str) -> Result<PtrWord, RuntimeError> {
        self.gppt
            .get(symbol)
            .ok_or_else(|| RuntimeError::Gppt(format!("@{symbol} has no entry")))
    }

    /// Full check of an access of `width` bytes. Returns the stripped pointer
    /// and the id observed at the access.
    pub fn checked_access(&self, ptr: PtrWord, width: u64) -> Result<(PtrWord, ObjectId), Violation> {
        self.full_checks.set(self.full_checks.get() + 1);
        let stripped = self.cfg.strip(ptr);
        let id = self.mem.id_at(stripped);
        let authed = pac_auth(ptr, id, &self.key, &self.cfg);
        if id.is_freed() || self.cfg.non_address_bits(authed) != 0 {
            return Err(self.classify(ptr, ptr, false));
        }
        if width > 1 {
            let last = ptr.offset(width as i64 - 1);
            if self.mem.id_at(last) != id {
                return Err(self.classify(ptr, last, false));
            }
        }
        Ok((authed, id))
    }

    /// Same-lock verification against an id observed by an earlier full
    /// check of `base`. Falls back to a full check when the fast test fails,
    /// so it never accepts what `checked_access` rejects.
    pub fn fast_check(&self, ptr: PtrWord, width: u64, token: ObjectId, base: PtrWord) -> Result<PtrWord, Violation> {
        self.fast_checks.set(self.fast_checks.get() + 1);
        if self.fast_check_passes(ptr, width, token, base) {
            return Ok(self.cfg.strip(ptr));
        }
        self.checked_access(ptr, width).map(|(p, _)| p)
    }

    pub fn fast_check_passes(&self, ptr: PtrWord, width: u64, token: ObjectId, base: PtrWord) -> bool {
        if token.is_freed()
            || self.cfg.address_msb(ptr)
            || self.cfg.non_address_bits(ptr) != self.cfg.non_address_bits(base)
        {
            return false;
        }
        let stripped = self.cfg.strip(ptr);
        self.mem.id_at(stripped) == token
            && (width <= 1 || self.mem.id_at(stripped.offset(width as i64 - 1)) == token)
    }

    /// Checks every byte of `[ptr, ptr + len)` individually.
    pub fn checked_sweep(&self, ptr: PtrWord, len: u64) -> Result<PtrWord, Violation> {
        for i in 0..len {
            self.checked_access(ptr.offset(i as i64), 1).map_err(|v| Violation { pointer: ptr, ..v })?;
        }
        Ok(self.cfg.strip(ptr))
    }

    fn check_range(&self, ptr: PtrWord, len: u64, mode: RangeCheck) -> Result<PtrWord, Violation> {
        if len == 0 {
            return Ok(self.cfg.strip(ptr));
        }
        match mode {
            RangeCheck::Endpoints => {
                self.checked_access(ptr, 1)?;
                self.checked_access(ptr.offset(len as i64 - 1), 1)?;
                Ok(self.cfg.strip(ptr))
            }
            RangeCheck::EveryByte => self.checked_sweep(ptr, len),
        }
    }

    pub fn protected_free(&mut self, ptr: PtrWord) -> Result<(), Trap> {
        if ptr == PtrWord::NULL {
            return Ok(());
        }
        let stripped = self.cfg.strip(ptr);
        let id = self.mem.id_at(stripped);
        if id.is_freed() || !pac_verifies(ptr, id, &self.key, &self.cfg) {
            return Err(self.classify(ptr, ptr, true).into());
        }
        let below = self.mem.id_at(stripped.offset(-4));
        // objects start on word boundaries, so an unaligned pointer is interior
        if stripped.0 < 4 || !stripped.0.is_multiple_of(4) || below == id {
            return Err(Violation::new(
                ViolationKind::FreeInsideBuffer,
                ptr,
                id,
                "free of a pointer that does not address the start of its object",
            )
            .into());
        }
        let record = match self.objects.get(stripped.0) {
            Some(r) if r.kind.is_heap() => *r,
            _ => {
                return Err(Violation::new(
                    ViolationKind::InvalidFree,
                    ptr,
                    id,
                    "free of an object that was not heap allocated",
                )
                .into())
            }
        };
        self.mem.shadow_clear(stripped, record.size)?;
        self.heap.release(record.base, record.size);
        self.objects.retire(record.base);
        Ok(())
    }

    /// Allocation for uninstrumented programs: no shadow, no signature.
    pub fn raw_malloc(&mut self, size: u64) -> Result<PtrWord, RuntimeError> {
        let padded = padded_size(size);
        let base = self.heap.alloc(padded).ok_or(RuntimeError::HeapExhausted(size))?;
        self.raw_blocks.insert(base, padded);
        Ok(PtrWord(base))
    }

    pub fn raw_free(&mut self, ptr: PtrWord) {
        // libc-style: a bad or repeated free silently corrupts nothing here
        if let Some(size) = self.raw_blocks.remove(&ptr.0) {
            self.heap.release(ptr.0, size);
        }
    }

    /// Runs a standard routine on raw pointers without any checks.
    pub fn raw_builtin(&mut self, builtin: Builtin, args: &[u64]) -> Result<u64, Violation> {
        let arg = |i: usize| args.get(i).copied().unwrap_or(0);
        match builtin {
            Builtin::Memcpy | Builtin::Memmove => {
                let bytes = self.read_bytes(PtrWord(arg(1)), arg(2))?;
                self.write_bytes(PtrWord(arg(0)), &bytes)?;
                Ok(arg(0))
            }
            Builtin::Memset => {
                let bytes = vec![arg(1) as u8; arg(2) as usize];
                self.write_bytes(PtrWord(arg(0)), &bytes)?;
                Ok(arg(0))
            }
            Builtin::Strlen => self.raw_strlen(PtrWord(arg(0))),
            Builtin::Strcpy => {
                let len = self.raw_strlen(PtrWord(arg(1)))?;
                let bytes = self.read_bytes(PtrWord(arg(1)), len + 1)?;
                self.write_bytes(PtrWord(arg(0)), &bytes)?;
                Ok(arg(0))
            }
        }
    }

    fn read_bytes(&self, ptr: PtrWord, len: u64) -> Result<Vec<u8>, MemoryFault> {
        (0..len)
            .map(|i| self.mem.mem_read(ptr.offset(i as i64), 1).map(|b| b as u8))
            .collect()
    }

    fn write_bytes(&mut self, ptr: PtrWord, bytes: &[u8]) -> Result<(), MemoryFault> {
        for (i, b) in bytes.iter().enumerate() {
            self.mem.mem_write(ptr.offset(i as i64), 1, u64::from(*b))?;
        }
        Ok(())
    }

    fn raw_strlen(&self, ptr: PtrWord) -> Result<u64, Violation> {
        let mut len = 0;
        while self.mem.mem_read(ptr.offset(len as i64), 1)? != 0 {
            len += 1;
        }
        Ok(len)
    }

    /// Instrumented call of a standard routine: checks every pointer range
    /// it touches, then runs it on stripped pointers. Routines returning one
    /// of their pointer arguments hand back the signed argument.
    pub fn wrapper_call(&mut self, builtin: Builtin, args: &[u64], mode: RangeCheck) -> Result<u64, Trap> {
        let arg = |i: usize| args.get(i).copied().unwrap_or(0);
        let raw = match builtin {
            Builtin::Memcpy | Builtin::Memmove => {
                let len = arg(2);
                let dst = self.check_range(PtrWord(arg(0)), len, mode)?;
                let src = self.check_range(PtrWord(arg(1)), len, mode)?;
                self.raw_builtin(builtin, &[dst.0, src.0, len])?;
                return Ok(arg(0));
            }
            Builtin::Memset => {
                let len = arg(2);
                let dst = self.check_range(PtrWord(arg(0)), len, mode)?;
                self.raw_builtin(builtin, &[dst.0, arg(1), len])?;
                return Ok(arg(0));
            }
            Builtin::Strlen => {
                let s = PtrWord(arg(0));
                let (stripped, _) = self.checked_access(s, 1)?;
                let len = self.raw_strlen(stripped)?;
                self.check_range(s, len + 1, mode)?;
                len
            }
            Builtin::Strcpy => {
                let src = PtrWord(arg(1));
                let (raw_src, _) = self.checked_access(src, 1)?;
                let len = self.raw_strlen(raw_src)?;
                self.check_range(src, len + 1, mode)?;
                let dst = self.check_range(PtrWord(arg(0)), len + 1, mode)?;
                self.raw_builtin(builtin, &[dst.0, raw_src.0])?;
                return Ok(arg(0));
            }
        };
        Ok(raw)
    }

    /// Finds the object whose id validates the PAC of `ptr`, preferring
    /// objects at `addr`.
    fn signature_owner(&self, ptr: PtrWord, addr: u64) -> Option<(ObjectRecord, bool)> {
        let verifies = |r: &ObjectRecord| pac_verifies(ptr, r.id, &self.key, &self.cfg);
        let live_here = self.objects.live_containing(addr).filter(|r| verifies(r));
        if let Some(r) = live_here {
            return Some((*r, true));
        }
        if let Some(r) = self.objects.retired().find(|r| r.contains(addr) && verifies(r)) {
            return Some((*r, false));
        }
        if let Some(r) = self.objects.live().find(|r| verifies(r)) {
            return Some((*r, true));
        }
        self.objects.retired().find(|r| verifies(r)).map(|r| (*r, false))
    }

    /// Explains why a check of `ptr` failed at address `at`.
    pub fn classify(&self, ptr: PtrWord, at: PtrWord, freeing: bool) -> Violation {
        let found = self.mem.id_at(at);
        let addr = self.cfg.address(at);
        let v = |kind, msg: &str| Violation::new(kind, ptr, found, msg);

        if self.cfg.address_msb(at) {
            return v(ViolationKind::ShadowAccess, "pointer addresses the shadow half");
        }
        if !self.mem.is_mapped(addr, 1) {
            return v(ViolationKind::UnmappedAccess, "pointer addresses unmapped memory");
        }
        if let Some((owner, live)) = self.signature_owner(ptr, addr) {
            if live {
                return v(ViolationKind::SpatialOOB, "pointer left the bounds of its object");
            }
            return match owner.kind {
                ObjectKind::Stack => v(ViolationKind::UseAfterScope, "object went out of scope"),
                _ if freeing && owner.base == addr => v(ViolationKind::DoubleFree, "object was already freed"),
                _ => v(ViolationKind::UseAfterFree, "object was freed"),
            };
        }
        if self.cfg.is_poisoned(ptr) {
            let freed_here = found.is_freed()
                && self
                    .objects
                    .retired()
                    .find(|r| r.contains(addr))
                    .is_some_and(|r| r.kind.is_heap());
            if freed_here {
                if freeing && self.objects.retired().any(|r| r.base == addr) {
                    return v(ViolationKind::DoubleFree, "poisoned pointer to an already freed object");
                }
                return v(ViolationKind::UseAfterFree, "poisoned pointer into freed memory");
            }
            return v(ViolationKind::PoisonedDeref, "dereference of a poisoned pointer");
        }
        if self.mem.layout().kind_of(addr) == Some(RegionKind::Stack) && found.is_freed() && self.cfg.pac_field(ptr) == 0 {
            return v(ViolationKind::UseAfterScope, "unsigned pointer into dead stack memory");
        }
        v(ViolationKind::CraftedPac, "PAC does not match any object")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runtime(seed: u64) -> Runtime {
        Runtime::new(AddressConfig::default(), RegionLayout::default(), seed).unwrap()
    }

    fn kind_of<T: fmt::Debug>(r: Result<T, Violation>) -> ViolationKind {
        r.unwrap_err().kind
    }

    #[test]
    fn padding() {
        assert_eq!(padded_size(10), 12);
        assert_eq!(padded_size(4), 4);
        assert_eq!(padded_size(0), 4);
        assert_eq!(padded_size(1), 4);
        assert_eq!(padded_size(5), 8);
    }

    #[test]
    fn id_generator_skips_zero() {
        let mut g = IdGenerator::starting_at(u32::MAX);
        assert_eq!(g.next_id(), ObjectId(u32::MAX));
        assert_eq!(g.next_id(), ObjectId(1));
        assert_eq!(g.next_id(), ObjectId(2));
        let mut g = IdGenerator::starting_at(0);
        assert_eq!(g.next_id(), ObjectId(1));
    }

    #[test]
    fn malloc_pads_and_shadows() {
        let mut rt = runtime(1);
        let p = rt.protected_malloc(10).unwrap();
        let cfg = *rt.config();
        let base = cfg.strip(p);
        let id = rt.id_at(base);
        assert!(!id.is_freed());
        assert_eq!(rt.id_at(base.offset(11)), id);
        assert_eq!(rt.id_at(base.offset(12)), ObjectId(0));
        assert_eq!(rt.objects().get(base.0).unwrap().size, 12);
    }

    #[test]
    fn zero_size_malloc_is_checkable() {
        let mut rt = runtime(2);
        let p = rt.protected_malloc(0).unwrap();
        let (raw, _) = rt.checked_access(p, 4).unwrap();
        assert_eq!(raw, rt.config().strip(p));
    }

    #[test]
    fn consecutive_ids_differ_by_one() {
        let mut rt = runtime(3);
        let cfg = *rt.config();
        let a = rt.protected_malloc(8).unwrap();
        let b = rt.protected_malloc(8).unwrap();
        let ia = rt.id_at(cfg.strip(a));
        let ib = rt.id_at(cfg.strip(b));
        assert_ne!(ia, ib);
        let expected = if ia.0 == u32::MAX { 1 } else { ia.0 + 1 };
        assert_eq!(ib.0, expected);
    }

    #[test]
    fn free_clears_shadow() {
        let mut rt = runtime(4);
        let cfg = *rt.config();
        let p = rt.protected_malloc(12).unwrap();
        rt.protected_free(p).unwrap();
        for off in 0..12 {
            assert!(rt.id_at(cfg.strip(p).offset(off)).is_freed());
        }
        assert_eq!(rt.objects().live_heap_objects(), 0);
    }

    #[test]
    fn free_inside_buffer() {
        let mut rt = runtime(5);
        let p = rt.protected_malloc(12).unwrap();
        let err = rt.protected_free(p.offset(4)).unwrap_err();
        assert!(matches!(err, Trap::Violation(v) if v.kind == ViolationKind::FreeInsideBuffer));
        let err = rt.protected_free(p.offset(1)).unwrap_err();
        assert!(matches!(err, Trap::Violation(v) if v.kind == ViolationKind::FreeInsideBuffer));
        rt.protected_free(p).unwrap();
    }

    #[test]
    fn double_free() {
        let mut rt = runtime(6);
        let p = rt.protected_malloc(16).unwrap();
        rt.protected_free(p).unwrap();
        let err = rt.protected_free(p).unwrap_err();
        assert!(matches!(err, Trap::Violation(v) if v.kind == ViolationKind::DoubleFree));
    }

    #[test]
    fn double_free_after_reuse() {
        let mut rt = runtime(7);
        let p = rt.protected_malloc(16).unwrap();
        rt.protected_free(p).unwrap();
        let q = rt.protected_malloc(16).unwrap();
        assert_eq!(rt.config().strip(p), rt.config().strip(q));
        let err = rt.protected_free(p).unwrap_err();
        assert!(matches!(err, Trap::Violation(v) if v.kind == ViolationKind::DoubleFree));
        rt.protected_free(q).unwrap();
    }

    #[test]
    fn in_bounds_derived_access() {
        let mut rt = runtime(8);
        let p = rt.protected_malloc(16).unwrap();
        let (raw, _) = rt.checked_access(p.offset(4), 4).unwrap();
        assert_eq!(raw, rt.config().strip(p).offset(4));
    }

    #[test]
    fn underflow_into_neighbour() {
        let mut rt = runtime(9);
        let _a = rt.protected_malloc(16).unwrap();
        let b = rt.protected_malloc(16).unwrap();
        assert_eq!(kind_of(rt.checked_access(b.offset(-4), 4)), ViolationKind::SpatialOOB);
        // below the very first object sits the zero guard word
        let mut rt = runtime(9);
        let a = rt.protected_malloc(16).unwrap();
        assert_eq!(kind_of(rt.checked_access(a.offset(-1), 1)), ViolationKind::SpatialOOB);
    }

    #[test]
    fn straddling_access_is_caught_at_last_byte() {
        let mut rt = runtime(10);
        let a = rt.protected_malloc(8).unwrap();
        let _b = rt.protected_malloc(8).unwrap();
        assert!(rt.checked_access(a.offset(4), 4).is_ok());
        assert_eq!(kind_of(rt.checked_access(a.offset(4), 8)), ViolationKind::SpatialOOB);
    }

    #[test]
    fn use_after_free_on_reused_memory() {
        for seed in 0..20 {
            let mut rt = runtime(seed);
            let p = rt.protected_malloc(16).unwrap();
            rt.protected_free(p).unwrap();
            let q = rt.protected_malloc(16).unwrap();
            assert_eq!(rt.config().strip(p), rt.config().strip(q));
            assert_eq!(kind_of(rt.checked_access(p, 4)), ViolationKind::UseAfterFree);
            assert!(rt.checked_access(q, 4).is_ok());
        }
    }

    #[test]
    fn fast_check_paths() {
        let mut rt = runtime(11);
        let cfg = *rt.config();
        let a = rt.protected_malloc(16).unwrap();
        let _b = rt.protected_malloc(16).unwrap();
        let (_, token) = rt.checked_access(a, 4).unwrap();
        for k in 0..4 {
            assert!(rt.fast_check_passes(a.offset(4 * k), 4, token, a));
        }
        assert!(!rt.fast_check_passes(a.offset(16), 4, token, a));
        assert_eq!(kind_of(rt.fast_check(a.offset(16), 4, token, a)), ViolationKind::SpatialOOB);
        // carry into the PAC field changes the non-address bits
        let carried = a.offset(1i64 << 47);
        assert_ne!(cfg.non_address_bits(carried), cfg.non_address_bits(a));
        assert!(!rt.fast_check_passes(carried, 4, token, a));
        assert!(rt.checked_access(carried, 4).is_err());
        assert!(rt.fast_check(carried, 4, token, a).is_err());
    }

    #[test]
    fn wrappers_check_endpoints() {
        let mut rt = runtime(12);
        let dst = rt.protected_malloc(16).unwrap();
        let src = rt.protected_malloc(20).unwrap();
        assert_eq!(
            rt.wrapper_call(Builtin::Memset, &[dst.0, 0, 16], RangeCheck::Endpoints).unwrap(),
            dst.0
        );
        let ret = rt
            .wrapper_call(Builtin::Memcpy, &[dst.0, src.0, 16], RangeCheck::Endpoints)
            .unwrap();
        assert_eq!(ret, dst.0);
        let err = rt
            .wrapper_call(Builtin::Memcpy, &[dst.0, src.0, 20], RangeCheck::Endpoints)
            .unwrap_err();
        assert!(matches!(err, Trap::Violation(v) if v.kind == ViolationKind::SpatialOOB));
    }

    #[test]
    fn wrapper_endpoints_agree_with_sweep() {
        for len in 0..28u64 {
            let mut endpoint = runtime(13);
            let mut sweep = runtime(13);
            let mut results = Vec::new();
            for rt in [&mut endpoint, &mut sweep] {
                let d = rt.protected_malloc(16).unwrap();
                let s = rt.protected_malloc(24).unwrap();
                results.push((d, s));
            }
            let (d, s) = results[0];
            let a = endpoint.wrapper_call(Builtin::Memcpy, &[d.0, s.0, len], RangeCheck::Endpoints);
            let b = sweep.wrapper_call(Builtin::Memcpy, &[d.0, s.0, len], RangeCheck::EveryByte);
            let kind = |r: &Result<u64, Trap>| match r {
                Ok(_) => None,
                Err(Trap::Violation(v)) => Some(v.kind),
                Err(e) => panic!("{e:?}"),
            };
            assert_eq!(kind(&a), kind(&b), "len {len}");
            assert_eq!(a.is_err(), len > 16);
        }
    }

    #[test]
    fn strlen_overread_detected() {
        let mut rt = runtime(14);
        let cfg = *rt.config();
        let s = rt.protected_malloc(4).unwrap();
        let _next = rt.protected_malloc(4).unwrap();
        for i in 0..4 {
            rt.mem_mut().mem_write(cfg.strip(s).offset(i), 1, b'a' as u64).unwrap();
        }
        let err = rt.wrapper_call(Builtin::Strlen, &[s.0], RangeCheck::Endpoints).unwrap_err();
        assert!(matches!(err, Trap::Violation(v) if v.kind == ViolationKind::SpatialOOB));
        rt.mem_mut().mem_write(cfg.strip(s).offset(3), 1, 0).unwrap();
        assert_eq!(rt.wrapper_call(Builtin::Strlen, &[s.0], RangeCheck::Endpoints).unwrap(), 3);
    }

    #[test]
    fn external_alloc_and_resign() {
        let mut rt = runtime(15);
        let cfg = *rt.config();
        let raw = rt.intercepted_external_alloc(8).unwrap();
        assert_eq!(cfg.non_address_bits(raw), 0);
        // uninstrumented code writes through the raw pointer unchecked
        rt.mem_mut().mem_write(raw, 4, 5).unwrap();
        let signed = rt.resign_return(raw);
        assert!(rt.checked_access(signed, 4).is_ok());
        assert!(cfg.is_poisoned(rt.resign_return(PtrWord(0x1100_0000))));
        assert_eq!(rt.resign_return(PtrWord::NULL), PtrWord::NULL);
    }

    #[test]
    fn resigned_dangling_pointer_reports_use_after_free() {
        let mut rt = runtime(16);
        let p = rt.protected_malloc(8).unwrap();
        rt.protected_free(p).unwrap();
        let back = rt.resign_return(rt.config().strip(p));
        assert!(rt.config().is_poisoned(back));
        assert_eq!(kind_of(rt.checked_access(back, 4)), ViolationKind::UseAfterFree);
    }

    #[test]
    fn crafted_and_shadow_pointers() {
        let mut rt = runtime(17);
        let cfg = *rt.config();
        let p = rt.protected_malloc(8).unwrap();
        let tampered = cfg.with_pac_field(p, cfg.pac_field(p) ^ 0x5a5a);
        assert_eq!(kind_of(rt.checked_access(tampered, 4)), ViolationKind::CraftedPac);
        assert_eq!(kind_of(rt.checked_access(cfg.poison(p), 4)), ViolationKind::PoisonedDeref);
        let shadow = cfg.shadow_of(cfg.strip(p));
        assert_eq!(kind_of(rt.checked_access(shadow, 4)), ViolationKind::ShadowAccess);
        assert_eq!(kind_of(rt.checked_access(PtrWord(0), 4)), ViolationKind::UnmappedAccess);
    }

    #[test]
    fn stack_objects_and_scope() {
        let mut rt = runtime(18);
        let slot = PtrWord(0x2fff_ff00);
        let signed = rt.protect_object(slot, 10, ObjectKind::Stack).unwrap();
        assert!(rt.checked_access(signed.offset(8), 4).is_ok());
        rt.release_object(slot, 10).unwrap();
        assert!(rt.id_at(slot).is_freed());
        assert_eq!(kind_of(rt.checked_access(signed, 4)), ViolationKind::UseAfterScope);
        let again = rt.protect_object(slot, 8, ObjectKind::Stack).unwrap();
        let err = rt.protected_free(again).unwrap_err();
        assert!(matches!(err, Trap::Violation(v) if v.kind == ViolationKind::InvalidFree));
    }

    #[test]
    fn gppt_populated_once() {
        let mut rt = runtime(19);
        let g = PtrWord(0x0001_0004);
        let signed = rt.gppt_init("g", g, 16).unwrap();
        assert_eq!(rt.gppt_load("g").unwrap(), signed);
        assert!(rt.gppt_init("g", g, 16).is_err());
        assert!(rt.gppt_load("h").is_err());
        assert_eq!(rt.gppt().len(), 1);
    }

    #[test]
    fn heap_exhaustion() {
        let layout = RegionLayout::default().with_heap_bytes(64);
        let mut rt = Runtime::new(AddressConfig::default(), layout, 0).unwrap();
        assert!(rt.protected_malloc(40).is_ok());
        assert_eq!(rt.protected_malloc(40), Err(RuntimeError::HeapExhausted(40)));
    }
}
