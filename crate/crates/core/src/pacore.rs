//! Software emulation of pointer-authentication codes.
//!
//! A [`PtrWord`] is a simulated 64-bit machine word. Its low `n` bits are the
//! virtual address, bit 55 is the region select bit (always zero for pointers
//! produced by this crate), and every other high bit carries the PAC. The
//! hardware MAC is replaced with SipHash-2-4 keyed by a per-run [`PacKey`].

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::siphash::siphash24;

/// Bit used by the architecture to select the high or low address region.
pub const SELECT_BIT: u32 = 55;

pub const MIN_VA_BITS: u32 = 33;
pub const MAX_VA_BITS: u32 = 52;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacError {
    #[error("virtual address width {0} outside [{MIN_VA_BITS}, {MAX_VA_BITS}]")]
    InvalidWidth(u32),
    #[error("PAC override {requested} exceeds the {available} bits available (or is below 2)")]
    InvalidOverride { requested: u32, available: u32 },
    #[error("cannot sign {0}: {1}")]
    PreconditionViolated(PtrWord, &'static str),
}

/// 32-bit identifier shadowing a live object. Zero marks freed or never
/// allocated memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ObjectId(pub u32);

impl ObjectId {
    pub const FREED: ObjectId = ObjectId(0);

    pub fn is_freed(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct PtrWord(pub u64);

impl PtrWord {
    pub const NULL: PtrWord = PtrWord(0);

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Wrapping byte-offset arithmetic over the whole word. Carries out of the
    /// address field land in the PAC bits, exactly like real pointer math.
    pub fn offset(self, delta: i64) -> PtrWord {
        PtrWord(self.0.wrapping_add(delta as u64))
    }

    pub fn select_bit(self) -> bool {
        self.0 >> SELECT_BIT & 1 == 1
    }
}

impl fmt::Display for PtrWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl fmt::LowerHex for PtrWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

/// 128-bit signing key. Interpreted programs never see it.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PacKey {
    k0: u64,
    k1: u64,
}

impl PacKey {
    pub fn new(k0: u64, k1: u64) -> Self {
        PacKey { k0, k1 }
    }

    pub fn zero() -> Self {
        PacKey { k0: 0, k1: 0 }
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        PacKey {
            k0: rng.gen(),
            k1: rng.gen(),
        }
    }

    fn prf(&self, modifier: u64, context: Context) -> u64 {
        let mut msg = [0u8; 16];
        msg[..8].copy_from_slice(&modifier.to_le_bytes());
        msg[8..].copy_from_slice(&context.0.to_le_bytes());
        siphash24(self.k0, self.k1, &msg)
    }
}

impl fmt::Debug for PacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PacKey(..)")
    }
}

/// Signing context. Always zero here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Context(pub u64);

impl Context {
    pub const ZERO: Context = Context(0);
}

/// Pointer layout: virtual-address width and the PAC width derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressConfig {
    va_bits: u32,
    pac_bits: u32,
}

impl Default for AddressConfig {
    fn default() -> Self {
        AddressConfig::new(47).expect("47 is a legal width")
    }
}

impl AddressConfig {
    pub fn new(va_bits: u32) -> Result<Self, PacError> {
        if !(MIN_VA_BITS..=MAX_VA_BITS).contains(&va_bits) {
            return Err(PacError::InvalidWidth(va_bits));
        }
        Ok(AddressConfig {
            va_bits,
            pac_bits: 63 - va_bits,
        })
    }

    /// Shrinks the effective PAC width for statistical testing. Only the low
    /// `pac_bits` positions of the PAC field are used afterwards.
    pub fn with_pac_override(self, pac_bits: u32) -> Result<Self, PacError> {
        let available = 63 - self.va_bits;
        if !(2..=available).contains(&pac_bits) {
            return Err(PacError::InvalidOverride {
                requested: pac_bits,
                available,
            });
        }
        Ok(AddressConfig { pac_bits, ..self })
    }

    pub fn va_bits(&self) -> u32 {
        self.va_bits
    }

    pub fn pac_bits(&self) -> u32 {
        self.pac_bits
    }

    pub fn address_mask(&self) -> u64 {
        (1u64 << self.va_bits) - 1
    }

    pub fn msb_mask(&self) -> u64 {
        1u64 << (self.va_bits - 1)
    }

    /// All bits above the address field, bit 55 included.
    pub fn non_address_mask(&self) -> u64 {
        !self.address_mask()
    }

    pub fn address(&self, ptr: PtrWord) -> u64 {
        ptr.0 & self.address_mask()
    }

    pub fn non_address_bits(&self, ptr: PtrWord) -> u64 {
        ptr.0 & self.non_address_mask()
    }

    pub fn address_msb(&self, ptr: PtrWord) -> bool {
        ptr.0 & self.msb_mask() != 0
    }

    fn pac_value_mask(&self) -> u64 {
        (1u64 << self.pac_bits) - 1
    }

    /// Number of PAC positions between the address field and bit 55.
    fn low_span(&self) -> u32 {
        SELECT_BIT - self.va_bits
    }

    /// Bits in the word that hold the effective PAC.
    pub fn pac_field_mask(&self) -> u64 {
        self.deposit(self.pac_value_mask())
    }

    /// Reads the PAC field, packed low to high over bits `[n, 64) \ {55}`.
    pub fn pac_field(&self, ptr: PtrWord) -> u64 {
        let low_span = self.low_span();
        let low = (ptr.0 >> self.va_bits) & ((1u64 << low_span) - 1);
        let high = ptr.0 >> (SELECT_BIT + 1);
        (low | high << low_span) & self.pac_value_mask()
    }

    fn deposit(&self, pac: u64) -> u64 {
        let low_span = self.low_span();
        let low = pac & ((1u64 << low_span) - 1);
        let high = pac >> low_span;
        (low << self.va_bits) | (high << (SELECT_BIT + 1))
    }

    pub fn with_pac_field(&self, ptr: PtrWord, pac: u64) -> PtrWord {
        let cleared = ptr.0 & !self.pac_field_mask();
        PtrWord(cleared | self.deposit(pac & self.pac_value_mask()))
    }

    /// `(1 << (p - 1)) | 1`, written into the PAC field on failed
    /// authentication.
    pub fn error_pattern(&self) -> u64 {
        (1u64 << (self.pac_bits - 1)) | 1
    }

    pub fn poison(&self, ptr: PtrWord) -> PtrWord {
        self.with_pac_field(ptr, self.error_pattern())
    }

    pub fn is_poisoned(&self, ptr: PtrWord) -> bool {
        self.pac_field(ptr) == self.error_pattern()
    }

    /// Clears every non-address bit, bit 55 included.
    pub fn strip(&self, ptr: PtrWord) -> PtrWord {
        PtrWord(ptr.0 & self.address_mask())
    }

    /// Sets the address MSB. Shadow addresses map to themselves.
    pub fn shadow_of(&self, ptr: PtrWord) -> PtrWord {
        PtrWord(ptr.0 | self.msb_mask())
    }
}

/// Word substituted for the address bits when computing a PAC: the id
/// zero-extended below the address MSB, which is kept from the pointer.
pub fn modifier_for(id: ObjectId, msb: bool, cfg: &AddressConfig) -> PtrWord {
    let msb_bit = if msb { cfg.msb_mask() } else { 0 };
    PtrWord(u64::from(id.0) | msb_bit)
}

fn expected_pac(id: ObjectId, msb: bool, key: &PacKey, cfg: &AddressConfig) -> u64 {
    let modifier = modifier_for(id, msb, cfg);
    key.prf(modifier.0, Context::ZERO) & cfg.pac_value_mask()
}

/// Signs a raw program-half pointer for the object identified by `id`.
pub fn pac_sign(
    addr: PtrWord,
    id: ObjectId,
    key: &PacKey,
    cfg: &AddressConfig,
) -> Result<PtrWord, PacError> {
    if cfg.address_msb(addr) {
        return Err(PacError::PreconditionViolated(addr, "address MSB is set"));
    }
    if cfg.non_address_bits(addr) != 0 {
        return Err(PacError::PreconditionViolated(
            addr,
            "non-address bits are not zero",
        ));
    }
    let pac = expected_pac(id, false, key, cfg);
    Ok(cfg.with_pac_field(addr, pac))
}

/// Verifies `ptr` against `id`. Success yields the stripped pointer; failure
/// yields the poisoned pointer.
pub fn pac_auth(ptr: PtrWord, id: ObjectId, key: &PacKey, cfg: &AddressConfig) -> PtrWord {
    let msb = cfg.address_msb(ptr);
    let expected = expected_pac(id, msb, key, cfg);
    let stray = cfg.non_address_bits(ptr) & !cfg.pac_field_mask();
    if !msb && stray == 0 && cfg.pac_field(ptr) == expected {
        cfg.strip(ptr)
    } else {
        cfg.poison(ptr)
    }
}

/// True when `pac_auth` would accept `ptr` for `id`.
pub fn pac_verifies(ptr: PtrWord, id: ObjectId, key: &PacKey, cfg: &AddressConfig) -> bool {
    let authed = pac_auth(ptr, id, key, cfg);
    cfg.non_address_bits(authed) == 0
}
