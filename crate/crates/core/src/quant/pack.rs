use alloc::vec::Vec;

/// Two 4-bit codes per byte, low nibble holds the even index.
pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|c| (c[0] & 0x0F) | (c.get(1).copied().unwrap_or(0) & 0x0F) << 4)
        .collect()
}

pub fn unpack_codes(packed: &[u8], n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n);
    for &b in packed {
        out.push(b & 0x0F);
        out.push(b >> 4);
    }
    out.truncate(n);
    out
}

#[inline]
pub fn code_at(packed: &[u8], i: usize) -> u8 {
    let b = packed[i / 2];
    if i % 2 == 0 {
        b & 0x0F
    } else {
        b >> 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_low_nibble_first() {
        assert_eq!(pack_codes(&[0x1, 0xA, 0xF]), [0xA1, 0x0F]);
        assert_eq!(code_at(&[0xA1], 1), 0xA);
    }

    proptest! {
        #[test]
        fn roundtrip(codes in proptest::collection::vec(0u8..16, 0..257)) {
            let packed = pack_codes(&codes);
            prop_assert_eq!(packed.len(), codes.len().div_ceil(2));
            prop_assert_eq!(unpack_codes(&packed, codes.len()), codes);
        }
    }
}
