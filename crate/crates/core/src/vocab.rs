//! Decoder vocabulary: K unit ids followed by the special tokens.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    units: u32,
}

pub const SPECIAL_COUNT: u32 = 5;

impl Vocab {
    pub fn new(units: usize) -> Self {
        Self {
            units: units as u32,
        }
    }

    pub fn units(self) -> usize {
        self.units as usize
    }

    pub fn size(self) -> usize {
        (self.units + SPECIAL_COUNT) as usize
    }

    pub fn pad(self) -> u32 {
        self.units
    }

    pub fn bos(self) -> u32 {
        self.units + 1
    }

    pub fn eos(self) -> u32 {
        self.units + 2
    }

    /// Quality token marking the best-CER system.
    pub fn yes(self) -> u32 {
        self.units + 3
    }

    pub fn no(self) -> u32 {
        self.units + 4
    }

    pub fn is_unit(self, tok: u32) -> bool {
        tok < self.units
    }
}
