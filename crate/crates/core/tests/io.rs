use motionparse::geometry::Pose;
use motionparse::imaging::{Field, Mask};
use motionparse::io::{
    decode_flo, decode_image, decode_kitti_depth, decode_kitti_flow, decode_mask, decode_pfm, encode_flo, encode_image,
    encode_kitti_depth, encode_kitti_flow, encode_mask, encode_pfm, format_poses, parse_poses, read_depth_any,
    read_flow_any, write_flo, write_kitti_depth, write_kitti_flow, write_pfm,
};
use motionparse::Error;
use proptest::prelude::*;

/// Raw 16-bit samples of a PNG, decoded independently of the crate.
fn png_samples(bytes: &[u8]) -> (png::ColorType, Vec<u16>) {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.bit_depth, png::BitDepth::Sixteen);
    let samples = buf[..info.buffer_size()]
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    (info.color_type, samples)
}

fn parse_offset(e: Error) -> u64 {
    match e {
        Error::Parse { offset, .. } => offset,
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn kitti_flow_encoding_values() {
    let flow = Field::from_vec(2, 1, 2, vec![1.0, -0.5, 0.0, 2.25]).unwrap();
    let valid = Mask::from_vec(2, 1, vec![true, false]).unwrap();
    let bytes = encode_kitti_flow(&flow, Some(&valid)).unwrap();
    let (color, samples) = png_samples(&bytes);
    assert_eq!(color, png::ColorType::Rgb);
    assert_eq!(samples, vec![32832, 32736, 1, 0, 0, 0]);
    let (back, mask) = decode_kitti_flow(&bytes).unwrap();
    assert_eq!(&back.data()[..2], &[1.0, -0.5]);
    assert_eq!(mask, valid);
}

#[test]
fn kitti_depth_encoding_values() {
    let depth = Field::from_vec(3, 1, 1, vec![5.0, 0.0, 1.0 / 256.0]).unwrap();
    let bytes = encode_kitti_depth(&depth, None).unwrap();
    let (color, samples) = png_samples(&bytes);
    assert_eq!(color, png::ColorType::Grayscale);
    assert_eq!(samples, vec![1280, 0, 1]);
    let (back, valid) = decode_kitti_depth(&bytes).unwrap();
    assert_eq!(back.data(), depth.data());
    assert_eq!(valid.data(), &[true, false, true]);
}

#[test]
fn kitti_values_out_of_range_are_rejected() {
    let flow = Field::from_vec(1, 1, 2, vec![600.0, 0.0]).unwrap();
    assert!(encode_kitti_flow(&flow, None).is_err());
    let depth = Field::filled(1, 1, 1, 300.0);
    assert!(encode_kitti_depth(&depth, None).is_err());
}

#[test]
fn flo_errors_report_offsets() {
    let flow = Field::from_fn2(3, 2, |x, y| [x as f64, y as f64]);
    let mut bytes = encode_flo(&flow).unwrap();
    assert_eq!(bytes.len(), 12 + 48);
    assert_eq!(parse_offset(decode_flo(&bytes[..30]).unwrap_err()), 30);
    assert_eq!(parse_offset(decode_flo(&bytes[..6]).unwrap_err()), 4);
    bytes[0] ^= 0xff;
    assert_eq!(parse_offset(decode_flo(&bytes).unwrap_err()), 0);
}

#[test]
fn pfm_layout_and_errors() {
    let f = Field::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let bytes = encode_pfm(&f).unwrap();
    let header = b"Pf\n2 2\n-1.0\n";
    assert_eq!(&bytes[..header.len()], header);
    // bottom row first
    let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
    assert_eq!(first, 3.0);
    assert_eq!(decode_pfm(&bytes).unwrap(), f);

    // the same image stored big-endian
    let mut big = b"Pf\n2 2\n1.0\n".to_vec();
    for v in [3.0f32, 4.0, 1.0, 2.0] {
        big.extend_from_slice(&v.to_be_bytes());
    }
    assert_eq!(decode_pfm(&big).unwrap(), f);

    assert_eq!(parse_offset(decode_pfm(b"P6\n2 2\n-1.0\n").unwrap_err()), 0);
    assert!(decode_pfm(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn png_garbage_is_a_parse_error() {
    assert!(matches!(decode_image(b"not a png"), Err(Error::Parse { .. })));
    assert!(matches!(decode_kitti_flow(b"\x89PNG"), Err(Error::Parse { .. })));
}

#[test]
fn poses_round_trip_as_text() {
    let poses = vec![
        Pose::identity(),
        Pose::from_twist(&[0.1, -0.2, 0.3, 0.01, 0.02, -0.03]).unwrap(),
    ];
    let text = format_poses(&poses);
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 12);
    let back = parse_poses(&text).unwrap();
    for (a, b) in poses.iter().zip(&back) {
        assert!((a.rotation - b.rotation).norm() < 1e-12);
        assert!((a.translation - b.translation).norm() < 1e-12);
    }
    assert!(parse_poses("1 0 0 0\n").is_err());
}

#[test]
fn files_dispatch_on_extension() {
    let dir = tempfile::tempdir().unwrap();
    let flow = Field::from_fn2(4, 3, |x, y| [x as f64 * 0.25, -(y as f64)]);
    write_flo(&dir.path().join("f.flo"), &flow).unwrap();
    write_kitti_flow(&dir.path().join("f.png"), &flow, None).unwrap();
    for name in ["f.flo", "f.png"] {
        let (back, valid) = read_flow_any(&dir.path().join(name)).unwrap();
        assert_eq!(back, flow);
        assert_eq!(valid.count(), 12);
    }
    let depth = Field::from_fn(4, 3, |x, y| 1.0 + x as f64 + 0.5 * y as f64);
    write_pfm(&dir.path().join("d.pfm"), &depth).unwrap();
    write_kitti_depth(&dir.path().join("d.png"), &depth, None).unwrap();
    for name in ["d.pfm", "d.png"] {
        let (back, valid) = read_depth_any(&dir.path().join(name)).unwrap();
        assert_eq!(back, depth);
        assert_eq!(valid.count(), 12);
    }
    assert!(matches!(
        read_depth_any(&dir.path().join("missing.pfm")),
        Err(Error::Io(_))
    ));
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..12, 1usize..12)
}

fn field(c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Field> {
    dims().prop_flat_map(move |(w, h)| {
        proptest::collection::vec(lo..hi, w * h * c).prop_map(move |d| Field::from_vec(w, h, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn flo_round_trip_is_bit_identical(f in field(2, -1e4, 1e4)) {
        let f = f.map(|v| v as f32 as f64);
        prop_assert_eq!(decode_flo(&encode_flo(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn pfm_round_trip_is_bit_identical(f in field(1, -1e6, 1e6)) {
        let f = f.map(|v| v as f32 as f64);
        prop_assert_eq!(decode_pfm(&encode_pfm(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn kitti_flow_round_trip_within_quantization(f in field(2, -500.0, 500.0)) {
        let (back, valid) = decode_kitti_flow(&encode_kitti_flow(&f, None).unwrap()).unwrap();
        prop_assert_eq!(valid.count(), f.pixel_count());
        for (a, b) in f.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 64.0);
        }
    }

    #[test]
    fn kitti_depth_round_trip_within_quantization(f in field(1, 0.01, 255.0)) {
        let (back, valid) = decode_kitti_depth(&encode_kitti_depth(&f, None).unwrap()).unwrap();
        for (i, (a, b)) in f.data().iter().zip(back.data()).enumerate() {
            prop_assert!((a - b).abs() <= 1.0 / 256.0);
            prop_assert_eq!(valid.data()[i], *b > 0.0);
        }
    }

    #[test]
    fn eight_bit_images_and_masks_round_trip(levels in proptest::collection::vec(0u8..=255, 1..100)) {
        let n = levels.len();
        let img = Field::from_vec(n, 1, 1, levels.iter().map(|&v| v as f64 / 255.0).collect()).unwrap();
        let back = decode_image(&encode_image(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mask = Mask::from_vec(n, 1, levels.iter().map(|&v| v > 127).collect()).unwrap();
        prop_assert_eq!(decode_mask(&encode_mask(&mask).unwrap()).unwrap(), mask);
    }
}
