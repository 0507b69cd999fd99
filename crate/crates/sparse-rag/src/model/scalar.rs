//! Element type abstraction: the runtime computes in f32; f64 exists for the
//! finite-difference gradient check, where f32 truncation would swamp the
//! comparison tolerance.

use num_traits::Float;

pub trait Scalar:
    Float + num_traits::NumAssign + Copy + Send + Sync + std::fmt::Debug + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Appends the little-endian encoding to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes from exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bit pattern, zero-extended; used for checksums and bit equality.
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}
