//! Physical address to DRAM coordinate mapping via XOR bank functions.

use std::fmt;

use thiserror::Error;

pub const LINE_BYTES: u64 = 64;
pub const LINE_SHIFT: u32 = 6;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PhysAddr(pub u64);

impl PhysAddr {
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn line(self) -> u64 {
        self.0 >> LINE_SHIFT
    }

    pub fn line_base(self) -> PhysAddr {
        PhysAddr(self.0 & !(LINE_BYTES - 1))
    }

    pub fn from_line(line: u64) -> PhysAddr {
        PhysAddr(line << LINE_SHIFT)
    }

    pub fn offset(self, bytes: u64) -> PhysAddr {
        PhysAddr(self.0 + bytes)
    }
}

impl fmt::Debug for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("function `{0}` has an empty mask")]
    EmptyMask(String),
    #[error("function `{label}` uses bit {bit}, outside the 64-bit address")]
    BitOutOfRange { label: String, bit: u32 },
    #[error("functions `{0}` and `{1}` are linearly dependent")]
    Dependent(String, String),
    #[error("row shift {0} is out of range")]
    RowShift(u32),
}

/// Parity of the address bits selected by `mask`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct XorFunction {
    mask: u64,
    label: String,
}

impl XorFunction {
    pub fn new(label: impl Into<String>, bits: &[u32]) -> Result<Self, MappingError> {
        let label = label.into();
        let mut mask = 0u64;
        for &b in bits {
            if b >= 64 {
                return Err(MappingError::BitOutOfRange { label, bit: b });
            }
            mask |= 1 << b;
        }
        Self::from_mask(label, mask)
    }

    pub fn from_mask(label: impl Into<String>, mask: u64) -> Result<Self, MappingError> {
        let label = label.into();
        if mask == 0 {
            return Err(MappingError::EmptyMask(label));
        }
        Ok(XorFunction { mask, label })
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn bits(&self) -> Vec<u32> {
        (0..64).filter(|b| self.mask >> b & 1 == 1).collect()
    }

    #[inline]
    pub fn eval(&self, addr: PhysAddr) -> u8 {
        ((addr.0 & self.mask).count_ones() & 1) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DramCoord {
    pub channel: u8,
    pub rank: u8,
    pub bank_group: u8,
    pub bank: u8,
    pub row: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressMapping {
    pub channel_fn: Option<XorFunction>,
    pub rank_fn: Option<XorFunction>,
    pub bank_group_fns: Vec<XorFunction>,
    pub bank_fns: Vec<XorFunction>,
    pub row_shift: u32,
}

impl Default for AddressMapping {
    /// Dual-channel DDR4 mapping with two bank-group and two bank functions.
    fn default() -> Self {
        let f = |l: &str, b: &[u32]| XorFunction::new(l, b).expect("static mapping");
        AddressMapping {
            channel_fn: Some(f("channel", &[8, 9, 12, 13, 15, 16])),
            rank_fn: None,
            bank_group_fns: vec![f("bg0", &[7, 14]), f("bg1", &[15, 18])],
            bank_fns: vec![f("ba0", &[16, 19]), f("ba1", &[17, 20])],
            row_shift: 17,
        }
    }
}

impl AddressMapping {
    pub fn functions(&self) -> impl Iterator<Item = &XorFunction> {
        self.channel_fn
            .iter()
            .chain(self.rank_fn.iter())
            .chain(self.bank_group_fns.iter())
            .chain(self.bank_fns.iter())
    }

    pub fn validate(&self) -> Result<(), Vec<MappingError>> {
        let mut errs = vec![];
        if self.row_shift == 0 || self.row_shift >= 64 {
            errs.push(MappingError::RowShift(self.row_shift));
        }
        let fns: Vec<&XorFunction> = self.functions().collect();
        for f in &fns {
            if f.mask == 0 {
                errs.push(MappingError::EmptyMask(f.label.clone()));
            }
        }
        // Pairwise equality is the common misconfiguration; full rank is checked via GF(2).
        let masks: Vec<u64> = fns.iter().map(|f| f.mask).collect();
        if crate::gf2::rank(&masks) < masks.len() {
            for i in 0..fns.len() {
                for j in i + 1..fns.len() {
                    if crate::gf2::rank(&[fns[i].mask, fns[j].mask]) < 2 {
                        errs.push(MappingError::Dependent(
                            fns[i].label.clone(),
                            fns[j].label.clone(),
                        ));
                    }
                }
            }
            if errs.is_empty() {
                errs.push(MappingError::Dependent(
                    fns[0].label.clone(),
                    "remaining functions".into(),
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn channels(&self) -> usize {
        if self.channel_fn.is_some() {
            2
        } else {
            1
        }
    }

    pub fn ranks(&self) -> usize {
        if self.rank_fn.is_some() {
            2
        } else {
            1
        }
    }

    pub fn bank_groups(&self) -> usize {
        1 << self.bank_group_fns.len()
    }

    pub fn banks_per_group(&self) -> usize {
        1 << self.bank_fns.len()
    }

    pub fn banks_per_channel(&self) -> usize {
        self.ranks() * self.bank_groups() * self.banks_per_group()
    }

    #[inline]
    pub fn channel_of(&self, addr: PhysAddr) -> u8 {
        self.channel_fn.as_ref().map_or(0, |f| f.eval(addr))
    }

    pub fn map(&self, addr: PhysAddr) -> DramCoord {
        let bits = |fns: &[XorFunction]| {
            fns.iter()
                .enumerate()
                .fold(0u8, |acc, (i, f)| acc | f.eval(addr) << i)
        };
        DramCoord {
            channel: self.channel_of(addr),
            rank: self.rank_fn.as_ref().map_or(0, |f| f.eval(addr)),
            bank_group: bits(&self.bank_group_fns),
            bank: bits(&self.bank_fns),
            row: (addr.0 >> self.row_shift) as u32,
        }
    }

    /// Dense index of the coordinate's bank within its channel.
    #[inline]
    pub fn bank_slot(&self, c: &DramCoord) -> usize {
        (c.rank as usize * self.bank_groups() + c.bank_group as usize) * self.banks_per_group()
            + c.bank as usize
    }
}

pub fn map_address(addr: PhysAddr, mapping: &AddressMapping) -> DramCoord {
    mapping.map(addr)
}

pub fn same_channel(a: PhysAddr, b: PhysAddr, m: &AddressMapping) -> bool {
    m.channel_of(a) == m.channel_of(b)
}

/// Same channel and same bank group.
pub fn same_bank_group(a: PhysAddr, b: PhysAddr, m: &AddressMapping) -> bool {
    let (x, y) = (m.map(a), m.map(b));
    x.channel == y.channel && x.rank == y.rank && x.bank_group == y.bank_group
}

pub fn same_bank(a: PhysAddr, b: PhysAddr, m: &AddressMapping) -> bool {
    let (x, y) = (m.map(a), m.map(b));
    x.channel == y.channel && x.rank == y.rank && x.bank_group == y.bank_group && x.bank == y.bank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_examples() {
        let m = AddressMapping::default();
        let ch = m.channel_fn.as_ref().unwrap();
        assert_eq!(ch.eval(PhysAddr(0x100)), 1);
        assert_eq!(ch.eval(PhysAddr(0x300)), 0);
        assert!(!same_channel(PhysAddr(0x0), PhysAddr(0x100), &m));
        assert!(same_channel(PhysAddr(0x0), PhysAddr(0x300), &m));
    }

    #[test]
    fn bank_group_from_bit_seven() {
        let m = AddressMapping::default();
        assert_eq!(m.map(PhysAddr(0x80)).bank_group, 1);
        assert_eq!(m.map(PhysAddr(0x0)).bank_group, 0);
        assert!(!same_bank_group(PhysAddr(0x0), PhysAddr(0x80), &m));
    }

    #[test]
    fn geometry() {
        let m = AddressMapping::default();
        assert_eq!(m.channels(), 2);
        assert_eq!(m.bank_groups(), 4);
        assert_eq!(m.banks_per_group(), 4);
        assert_eq!(m.banks_per_channel(), 16);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(
            XorFunction::new("x", &[]),
            Err(MappingError::EmptyMask(_))
        ));
    }

    #[test]
    fn dependent_functions_rejected() {
        let mut m = AddressMapping::default();
        m.bank_fns[1] = m.bank_fns[0].clone();
        assert!(m.validate().is_err());
    }

    #[test]
    fn row_is_high_bits() {
        let m = AddressMapping::default();
        assert_eq!(m.map(PhysAddr(3 << 17 | 0x1234)).row, 3);
    }
}
