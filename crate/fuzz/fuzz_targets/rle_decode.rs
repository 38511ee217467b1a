#![no_main]

use cardcount::raster::InstanceMask;
use libfuzzer_sys::fuzz_target;

// Layout: u16 width, u16 height, then (u32 start, u32 length) runs, all
// little-endian. Masks above 2^20 pixels are skipped to bound memory.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let width = u16::from_le_bytes([data[0], data[1]]) as usize;
    let height = u16::from_le_bytes([data[2], data[3]]) as usize;
    if width * height > 1 << 20 {
        return;
    }
    let runs: Vec<(u32, u32)> = data[4..]
        .chunks_exact(8)
        .map(|c| {
            (
                u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();
    if let Ok(mask) = InstanceMask::from_runs(width, height, &runs) {
        let again = InstanceMask::from_runs(width, height, &mask.runs()).unwrap();
        assert_eq!(again, mask);
        assert!(mask.area() <= width * height);
    }
});
