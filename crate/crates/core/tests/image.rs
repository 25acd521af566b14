// SPDX-License-Identifier: Apache-2.0

mod common;

use common::images::*;
use ibcr_core::engine::*;
use ibcr_core::image::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_and_tamper(s in shape(), compress in any::<bool>(), pos in any::<prop::sample::Index>(), mask in 1u8..) {
        let img = build(&s);
        let (mut bytes, stats) = encode_image(&img, compress);
        prop_assert_eq!(stats.bytes_written, bytes.len() as u64);
        prop_assert_eq!(&decode_image(&bytes).unwrap(), &img);
        let i = pos.index(bytes.len());
        bytes[i] ^= mask;
        prop_assert!(decode_image(&bytes).is_err(), "flip at {} undetected", i);
    }
}

#[test]
fn compression_shrinks_memory() {
    let img = NodeImage {
        memory: vec![MemorySegment {
            base: MEM_BASE,
            bytes: vec![0; 1 << 16],
        }],
        ..build(&Shape {
            gu: false,
            qps: 1,
            recvs: vec![64],
            sends: vec![true],
            ticks: 0,
            drain: false,
            node: 0,
            epoch: 1,
            segments: vec![],
            state: vec![],
        })
    };
    let (raw, raw_stats) = encode_image(&img, false);
    let (packed, packed_stats) = encode_image(&img, true);
    assert!(packed.len() * 10 < raw.len());
    assert!(raw_stats.sections.iter().all(|s| s.raw_len == s.stored_len));
    let mem = &packed_stats.sections[0];
    assert_eq!(mem.kind, SectionKind::Memory);
    assert!(mem.stored_len < mem.raw_len / 100);
    assert_eq!(decode_image(&raw).unwrap(), decode_image(&packed).unwrap());
}

#[test]
fn missing_file_is_a_read_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_image(&dir.path().join("nope.img")),
        Err(ImageError::ReadFailed(_))
    ));
}
