use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ordered payload bits. Bit `i` maps to the antipodal symbol `2·bit − 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Payload(Vec<bool>);

/// Secret seed selecting spreading patterns and chip positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WatermarkKey(pub u64);

impl Payload {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        Self((0..len).map(|_| rng.gen::<bool>()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn complement(&self) -> Self {
        Self(self.0.iter().map(|b| !b).collect())
    }

    /// `±1` symbols.
    pub fn symbols(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&b| if b { 1.0 } else { -1.0 })
    }

    /// Hex rendering, most significant bit first, zero-padded on the right to
    /// a whole nibble.
    pub fn to_hex(&self) -> String {
        self.0
            .chunks(4)
            .map(|nib| {
                let v = nib.iter().enumerate().fold(0u32, |acc, (i, &b)| acc | ((b as u32) << (3 - i)));
                char::from_digit(v, 16).unwrap_or('0')
            })
            .collect()
    }

    pub fn from_hex(hex: &str, len: usize) -> Option<Self> {
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for ch in hex.chars() {
            let v = ch.to_digit(16)?;
            bits.extend((0..4).map(|i| (v >> (3 - i)) & 1 == 1));
        }
        if bits.len() < len || bits[len..].iter().any(|b| *b) {
            return None;
        }
        bits.truncate(len);
        Some(Self(bits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hex_layout() {
        let p = Payload::from_bits(vec![true, false, true, false, true, true]);
        assert_eq!(p.to_hex(), "ac");
    }

    proptest! {
        #[test]
        fn hex_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..60)) {
            let p = Payload::from_bits(bits.clone());
            prop_assert_eq!(Payload::from_hex(&p.to_hex(), bits.len()), Some(p));
        }
    }
}
