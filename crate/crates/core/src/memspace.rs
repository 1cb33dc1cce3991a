//! Simulated flat address space split into a program half and a shadow half.
//!
//! The shadow half holds one 32-bit [`ObjectId`] per aligned 4-byte word of
//! program memory and is only reachable through the `shadow_*` operations.
//! Program loads and stores that carry PAC bits or address the shadow half
//! fault.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::pacore::{AddressConfig, ObjectId, PtrWord};

pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum FaultKind {
    PoisonedPointer,
    ShadowAccess,
    Unmapped,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{kind} fault at {addr}")]
pub struct MemoryFault {
    pub kind: FaultKind,
    pub addr: PtrWord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("misaligned or out-of-half shadow range at {base} (+{size})")]
pub struct AlignmentError {
    pub base: PtrWord,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid region layout: {0}")]
pub struct LayoutError(pub String);

/// Half-open address range `[base, limit)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub base: u64,
    pub limit: u64,
}

impl Region {
    pub fn new(base: u64, limit: u64) -> Self {
        Region { base, limit }
    }

    pub fn contains(&self, addr: u64) -> bool {
        (self.base..self.limit).contains(&addr)
    }

    pub fn contains_range(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.limit)
    }

    pub fn len(&self) -> u64 {
        self.limit - self.base
    }

    pub fn is_empty(&self) -> bool {
        self.limit == self.base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Globals,
    Heap,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionLayout {
    pub globals: Region,
    pub heap: Region,
    /// The stack grows down from `stack.limit`.
    pub stack: Region,
}

pub const DEFAULT_HEAP_BYTES: u64 = 64 << 20;

impl Default for RegionLayout {
    fn default() -> Self {
        RegionLayout {
            globals: Region::new(0x0001_0000, 0x1000_0000),
            heap: Region::new(0x1000_0000, 0x1000_0000 + DEFAULT_HEAP_BYTES),
            stack: Region::new(0x2000_0000, 0x3000_0000),
        }
    }
}

impl RegionLayout {
    pub fn with_heap_bytes(mut self, bytes: u64) -> Self {
        self.heap.limit = self.heap.base + bytes;
        self
    }

    pub fn validate(&self, cfg: &AddressConfig) -> Result<(), LayoutError> {
        let half = cfg.msb_mask();
        let regions = [
            ("globals", self.globals),
            ("heap", self.heap),
            ("stack", self.stack),
        ];
        for (name, r) in regions {
            if r.base % 4 != 0 || r.limit % 4 != 0 || r.base >= r.limit {
                return Err(LayoutError(format!("{name} region is empty or misaligned")));
            }
            if r.limit > half {
                return Err(LayoutError(format!("{name} region leaves the program half")));
            }
        }
        for (i, (a, ra)) in regions.iter().enumerate() {
            for (b, rb) in &regions[i + 1..] {
                if ra.base < rb.limit && rb.base < ra.limit {
                    return Err(LayoutError(format!("{a} and {b} regions overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn kind_of(&self, addr: u64) -> Option<RegionKind> {
        if self.globals.contains(addr) {
            Some(RegionKind::Globals)
        } else if self.heap.contains(addr) {
            Some(RegionKind::Heap)
        } else if self.stack.contains(addr) {
            Some(RegionKind::Stack)
        } else {
            None
        }
    }

    fn maps(&self, addr: u64, len: u64) -> bool {
        [self.globals, self.heap, self.stack]
            .iter()
            .any(|r| r.contains_range(addr, len))
    }
}

/// Sparse byte store over `[0, 2^n)`, materialized in 4 KiB pages.
#[derive(Clone)]
pub struct MemSpace {
    cfg: AddressConfig,
    layout: RegionLayout,
    pages: HashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl fmt::Debug for MemSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemSpace")
            .field("cfg", &self.cfg)
            .field("layout", &self.layout)
            .field("pages", &self.pages.len())
            .finish()
    }
}

impl MemSpace {
    pub fn new(cfg: AddressConfig, layout: RegionLayout) -> Result<Self, LayoutError> {
        layout.validate(&cfg)?;
        Ok(MemSpace {
            cfg,
            layout,
            pages: HashMap::new(),
        })
    }

    pub fn config(&self) -> &AddressConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &RegionLayout {
        &self.layout
    }

    pub fn shadow_of(&self, addr: PtrWord) -> PtrWord {
        self.cfg.shadow_of(addr)
    }

    fn byte(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr / PAGE_SIZE))
            .map_or(0, |page| page[(addr % PAGE_SIZE) as usize])
    }

    fn set_byte(&mut self, addr: u64, value: u8) {
        let page = addr / PAGE_SIZE;
        if value == 0 && !self.pages.contains_key(&page) {
            return;
        }
        let page = self
            .pages
            .entry(page)
            .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
        page[(addr % PAGE_SIZE) as usize] = value;
    }

    fn read_le(&self, addr: u64, width: u64) -> u64 {
        (0..width).fold(0u64, |acc, i| acc | u64::from(self.byte(addr + i)) << (8 * i))
    }

    fn write_le(&mut self, addr: u64, width: u64, value: u64) {
        for i in 0..width {
            self.set_byte(addr + i, (value >> (8 * i)) as u8);
        }
    }

    fn shadow_word_addr(&self, addr: u64) -> u64 {
        self.cfg.shadow_of(PtrWord(addr & !3)).0
    }

    /// The id stored for the aligned word containing `addr`. Only the address
    /// bits of `addr` are considered.
    pub fn id_at(&self, addr: PtrWord) -> ObjectId {
        let shadow = self.shadow_word_addr(self.cfg.address(addr));
        ObjectId(self.read_le(shadow, 4) as u32)
    }

    fn check_shadow_range(&self, base: PtrWord, size: u64) -> Result<u64, AlignmentError> {
        let err = AlignmentError { base, size };
        let addr = base.0;
        if size == 0 || !size.is_multiple_of(4) || !addr.is_multiple_of(4) {
            return Err(err);
        }
        if self.cfg.non_address_bits(base) != 0 || self.cfg.address_msb(base) {
            return Err(err);
        }
        match addr.checked_add(size) {
            Some(end) if end <= self.cfg.msb_mask() => Ok(addr),
            _ => Err(err),
        }
    }

    pub fn shadow_fill(&mut self, base: PtrWord, size: u64, id: ObjectId) -> Result<(), AlignmentError> {
        let addr = self.check_shadow_range(base, size)?;
        for word in (addr..addr + size).step_by(4) {
            let shadow = self.shadow_word_addr(word);
            self.write_le(shadow, 4, u64::from(id.0));
        }
        Ok(())
    }

    pub fn shadow_clear(&mut self, base: PtrWord, size: u64) -> Result<(), AlignmentError> {
        self.shadow_fill(base, size, ObjectId::FREED)
    }

    fn check_access(&self, addr: PtrWord, width: u64) -> Result<u64, MemoryFault> {
        if self.cfg.non_address_bits(addr) != 0 {
            return Err(MemoryFault {
                kind: FaultKind::PoisonedPointer,
                addr,
            });
        }
        if self.cfg.address_msb(addr) {
            return Err(MemoryFault {
                kind: FaultKind::ShadowAccess,
                addr,
            });
        }
        if !self.layout.maps(addr.0, width) {
            return Err(MemoryFault {
                kind: FaultKind::Unmapped,
                addr,
            });
        }
        Ok(addr.0)
    }

    /// Little-endian program load of `width` (1..=8) bytes.
    pub fn mem_read(&self, addr: PtrWord, width: u64) -> Result<u64, MemoryFault> {
        debug_assert!((1..=8).contains(&width));
        let a = self.check_access(addr, width)?;
        Ok(self.read_le(a, width))
    }

    pub fn mem_write(&mut self, addr: PtrWord, width: u64, value: u64) -> Result<(), MemoryFault> {
        debug_assert!((1..=8).contains(&width));
        let a = self.check_access(addr, width)?;
        self.write_le(a, width, value);
        Ok(())
    }

    pub fn is_mapped(&self, addr: u64, len: u64) -> bool {
        self.layout.maps(addr, len)
    }

    pub fn materialized_pages(&self) -> usize {
        self.pages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pacore::PacKey;
    use proptest::prelude::*;

    fn space() -> MemSpace {
        MemSpace::new(AddressConfig::default(), RegionLayout::default()).unwrap()
    }

    #[test]
    fn shadow_mapping_sets_msb() {
        let m = space();
        assert_eq!(m.shadow_of(PtrWord(0x1000)).0, 0x4000_0000_1000);
        let once = m.shadow_of(PtrWord(0x1234));
        assert_eq!(m.shadow_of(once), once);
        assert_eq!(m.shadow_of(PtrWord(0)).0, 1 << 46);
    }

    #[test]
    fn fill_lookup_and_clear() {
        let mut m = space();
        assert_eq!(m.id_at(PtrWord(0x2000)), ObjectId(0));
        m.shadow_fill(PtrWord(0x1000), 8, ObjectId(0x1234_ABCD)).unwrap();
        assert_eq!(m.id_at(PtrWord(0x1005)), ObjectId(0x1234_ABCD));
        m.shadow_clear(PtrWord(0x1000), 8).unwrap();
        assert_eq!(m.id_at(PtrWord(0x1005)), ObjectId(0));
        // clearing again is a no-op
        m.shadow_clear(PtrWord(0x1000), 8).unwrap();
        assert_eq!(m.id_at(PtrWord(0x1000)), ObjectId(0));
    }

    #[test]
    fn fill_is_range_exact() {
        let mut m = space();
        m.shadow_fill(PtrWord(0x1000), 12, ObjectId(7)).unwrap();
        for a in [0x1000, 0x1004, 0x1008, 0x100B] {
            assert_eq!(m.id_at(PtrWord(a)), ObjectId(7));
        }
        assert_eq!(m.id_at(PtrWord(0x100C)), ObjectId(0));
        assert_eq!(m.id_at(PtrWord(0x0FFC)), ObjectId(0));
    }

    #[test]
    fn neighbours_stay_distinct() {
        let mut m = space();
        m.shadow_fill(PtrWord(0x1000), 4, ObjectId(1)).unwrap();
        m.shadow_fill(PtrWord(0x1004), 4, ObjectId(2)).unwrap();
        assert_eq!(m.id_at(PtrWord(0x1003)), ObjectId(1));
        assert_eq!(m.id_at(PtrWord(0x1004)), ObjectId(2));
        m.shadow_clear(PtrWord(0x1004), 4).unwrap();
        assert_eq!(m.id_at(PtrWord(0x1000)), ObjectId(1));
    }

    #[test]
    fn alignment_errors() {
        let mut m = space();
        assert!(m.shadow_fill(PtrWord(0x1000), 0, ObjectId(1)).is_err());
        assert!(m.shadow_fill(PtrWord(0x1002), 4, ObjectId(1)).is_err());
        assert!(m.shadow_fill(PtrWord(0x1000), 6, ObjectId(1)).is_err());
        let shadow = m.shadow_of(PtrWord(0x1000));
        assert!(m.shadow_fill(shadow, 4, ObjectId(1)).is_err());
        assert!(m.shadow_clear(PtrWord(0x1001), 4).is_err());
    }

    #[test]
    fn read_write_round_trip() {
        let mut m = space();
        let a = PtrWord(0x1000_0010);
        m.mem_write(a, 8, 0x0102_0304_0506_0708).unwrap();
        assert_eq!(m.mem_read(a, 8).unwrap(), 0x0102_0304_0506_0708);
        assert_eq!(m.mem_read(a, 1).unwrap(), 0x08);
        assert_eq!(m.mem_read(a.offset(4), 4).unwrap(), 0x0102_0304);
    }

    #[test]
    fn faults() {
        let mut m = space();
        let cfg = *m.config();
        let a = PtrWord(0x1000_0000);
        let poisoned = cfg.poison(a);
        assert_eq!(m.mem_read(poisoned, 4).unwrap_err().kind, FaultKind::PoisonedPointer);
        let signed = crate::pacore::pac_sign(a, ObjectId(3), &PacKey::new(1, 1), &cfg).unwrap();
        assert_eq!(m.mem_write(signed, 4, 1).unwrap_err().kind, FaultKind::PoisonedPointer);
        assert_eq!(m.mem_read(m.shadow_of(a), 4).unwrap_err().kind, FaultKind::ShadowAccess);
        assert_eq!(m.mem_read(PtrWord(0), 4).unwrap_err().kind, FaultKind::Unmapped);
        assert_eq!(m.mem_read(PtrWord(0x0001_0000 - 2), 4).unwrap_err().kind, FaultKind::Unmapped);
        assert_eq!(m.mem_read(PtrWord(1 << 55), 4).unwrap_err().kind, FaultKind::PoisonedPointer);
    }

    #[test]
    fn layout_validation() {
        let cfg = AddressConfig::default();
        assert!(RegionLayout::default().validate(&cfg).is_ok());
        let overlapping = RegionLayout {
            heap: Region::new(0x2000_0000, 0x2100_0000),
            ..RegionLayout::default()
        };
        assert!(overlapping.validate(&cfg).is_err());
        let huge = RegionLayout {
            stack: Region::new(0x2000_0000, 1 << 47),
            ..RegionLayout::default()
        };
        assert!(huge.validate(&cfg).is_err());
        assert!(RegionLayout::default()
            .validate(&AddressConfig::new(33).unwrap())
            .is_ok());
    }

    proptest! {
        #[test]
        fn fill_exactness(base_word in 0u64..512, words in 1u64..64, probe in 0u64..4096, id in 1u32..) {
            let mut m = space();
            let base = 0x1000_0000 + base_word * 4;
            m.shadow_fill(PtrWord(0x1000_0000), 4096, ObjectId(5)).unwrap();
            m.shadow_fill(PtrWord(base), words * 4, ObjectId(id)).unwrap();
            let x = 0x1000_0000 + probe;
            let expect = if x >= base && x < base + words * 4 { id } else { 5 };
            prop_assert_eq!(m.id_at(PtrWord(x)), ObjectId(expect));
        }

        #[test]
        fn program_accesses_never_touch_shadow(ops in proptest::collection::vec((0u64..1 << 47, any::<u64>(), 0usize..4), 1..40)) {
            let mut m = space();
            m.shadow_fill(PtrWord(0x1000_0000), 64, ObjectId(0xAB)).unwrap();
            for (addr, value, width_ix) in ops {
                let width = [1, 2, 4, 8][width_ix];
                let _ = m.mem_write(PtrWord(addr), width, value);
                if let Ok(v) = m.mem_read(PtrWord(addr), width) {
                    prop_assert!(!m.config().address_msb(PtrWord(addr)), "read {v} from shadow");
                }
            }
            for a in (0x1000_0000..0x1000_0040).step_by(4) {
                prop_assert_eq!(m.id_at(PtrWord(a)), ObjectId(0xAB));
            }
        }
    }
}
