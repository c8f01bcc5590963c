//! NIfTI-1 reading and writing.
//!
//! Single-file `.nii` images are the canonical on-disk form; `.nii.gz` is
//! handled as a transparent gzip wrapper (detected by magic bytes on read,
//! by file extension on write). Only the three payload types the rest of
//! the crate uses are supported: float32, int32 and uint8.
//!
//! The reader resolves the voxel-to-world affine with the standard
//! precedence: the sform when `sform_code > 0`, else the qform when
//! `qform_code > 0`, else a diagonal affine built from `pixdim`. Slope and
//! intercept scaling is applied when non-trivial (`scl_slope` outside
//! {0, 1} or `scl_inter` nonzero), promoting the payload to float32.
//!
//! The writer always emits little-endian single-file NIfTI-1 with the
//! sform set (`sform_code = 2`), no scaling, and the payload at byte
//! offset 352.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use nalgebra::Matrix4;

use crate::error::{CoreError, Result};
use crate::io_util::atomic_write;
use crate::volume::{AnyVolume, Grid, ScalarType, Volume, Voxel};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: u64 = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

/// Contents of a NIfTI file: a single 3-D volume or a 4-D series.
///
/// A 4-D file with one frame is squeezed to a single volume. Series frames
/// are promoted to float32; every consumer of 4-D data in this crate
/// (diffusion signals, displacement fields) works in floats.
#[derive(Debug, Clone)]
pub enum NiftiContents {
    Volume(AnyVolume),
    Series(Vec<Volume<f32>>),
}

/// Reads a NIfTI-1 file, resolving affine, scaling and endianness.
pub fn read_nifti(path: &Path) -> Result<NiftiContents> {
    let file = File::open(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = open_maybe_gzip(path, file)?;
    let mut header = [0u8; HEADER_SIZE];
    reader.read_exact(&mut header).map_err(|_| format_err(path, "truncated header"))?;

    let sizeof_le = LittleEndian::read_i32(&header[0..4]);
    let sizeof_be = BigEndian::read_i32(&header[0..4]);
    let parsed = if sizeof_le == HEADER_SIZE as i32 {
        Header::parse::<LittleEndian>(&header, path)?
    } else if sizeof_be == HEADER_SIZE as i32 {
        Header::parse::<BigEndian>(&header, path)?
    } else {
        return Err(format_err(
            path,
            &format!("sizeof_hdr is {sizeof_le}, expected 348"),
        ));
    };
    let big_endian = sizeof_le != HEADER_SIZE as i32;

    let n_voxels = parsed.dims.0 * parsed.dims.1 * parsed.dims.2;
    let frame_bytes = n_voxels * parsed.scalar.byte_width();

    // Skip from the end of the header to the start of the payload.
    let skip = parsed.vox_offset.checked_sub(HEADER_SIZE as u64).ok_or_else(|| {
        format_err(path, &format!("vox_offset {} overlaps the header", parsed.vox_offset))
    })?;
    std::io::copy(&mut reader.by_ref().take(skip), &mut std::io::sink())
        .map_err(|source| CoreError::Io { path: path.to_path_buf(), source })?;

    let grid = Grid::new(parsed.dims, parsed.affine)?;
    let mut frames = Vec::with_capacity(parsed.frames);
    for _ in 0..parsed.frames {
        let mut raw = vec![0u8; frame_bytes];
        reader
            .read_exact(&mut raw)
            .map_err(|_| format_err(path, "truncated data payload"))?;
        frames.push(decode_frame(&raw, &parsed, big_endian, grid.clone())?);
    }

    if parsed.frames == 1 {
        Ok(NiftiContents::Volume(frames.pop().expect("one frame")))
    } else {
        Ok(NiftiContents::Series(
            frames.into_iter().map(AnyVolume::into_f32).collect(),
        ))
    }
}

/// Reads a file expected to hold exactly one 3-D volume.
pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    match read_nifti(path)? {
        NiftiContents::Volume(v) => Ok(v),
        NiftiContents::Series(s) => Err(format_err(
            path,
            &format!("expected a 3-D volume, found a series of {} frames", s.len()),
        )),
    }
}

/// Reads a file expected to hold a 4-D series; a 3-D volume is accepted as
/// a one-frame series.
pub fn read_series(path: &Path) -> Result<Vec<Volume<f32>>> {
    match read_nifti(path)? {
        NiftiContents::Volume(v) => Ok(vec![v.into_f32()]),
        NiftiContents::Series(s) => Ok(s),
    }
}

/// Writes a single 3-D volume.
pub fn write_volume<T: Voxel>(volume: &Volume<T>, path: &Path) -> Result<()> {
    write_impl(volume.grid(), T::SCALAR, 1, path, |w| {
        encode_payload(volume.data(), w, path)
    })
}

/// Writes a 4-D series. All frames must share one grid.
pub fn write_series(frames: &[Volume<f32>], path: &Path) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| CoreError::InvalidVolume("cannot write an empty series".to_string()))?;
    for (i, frame) in frames.iter().enumerate() {
        if frame.grid() != first.grid() {
            return Err(CoreError::InvalidVolume(format!(
                "series frame {i} is on a different grid than frame 0"
            )));
        }
    }
    write_impl(first.grid(), ScalarType::F32, frames.len(), path, |w| {
        for frame in frames {
            encode_payload(frame.data(), w, path)?;
        }
        Ok(())
    })
}

struct Header {
    dims: (usize, usize, usize),
    frames: usize,
    scalar: ScalarType,
    affine: Matrix4<f64>,
    vox_offset: u64,
    scl_slope: f32,
    scl_inter: f32,
}

impl Header {
    fn parse<E: ByteOrder>(h: &[u8; HEADER_SIZE], path: &Path) -> Result<Header> {
        let magic = &h[344..348];
        if magic == MAGIC_PAIR {
            return Err(format_err(
                path,
                "two-file .hdr/.img pairs are not supported; use single-file .nii",
            ));
        }
        if magic != MAGIC_SINGLE {
            return Err(format_err(path, "bad magic, expected \"n+1\""));
        }

        let dim: Vec<i16> = (0..8).map(|i| E::read_i16(&h[40 + 2 * i..])).collect();
        let ndim = dim[0];
        let (dims, frames) = match ndim {
            3 => ((dim[1], dim[2], dim[3]), 1i64),
            4 => ((dim[1], dim[2], dim[3]), dim[4] as i64),
            // Vector-valued files (e.g. displacement fields) store their
            // components in dim[5] with a singleton time axis.
            5 if dim[4] <= 1 => ((dim[1], dim[2], dim[3]), dim[5] as i64),
            _ => {
                return Err(format_err(
                    path,
                    &format!("unsupported dimensionality dim[0] = {ndim}"),
                ))
            }
        };
        if dims.0 <= 0 || dims.1 <= 0 || dims.2 <= 0 || frames <= 0 {
            return Err(format_err(path, &format!("non-positive dims {dim:?}")));
        }

        let datatype = E::read_i16(&h[70..]);
        let scalar = match datatype {
            2 => ScalarType::U8,
            8 => ScalarType::I32,
            16 => ScalarType::F32,
            code => return Err(CoreError::UnsupportedDatatype { code }),
        };

        let pixdim: Vec<f32> = (0..8).map(|i| E::read_f32(&h[76 + 4 * i..])).collect();
        let qform_code = E::read_i16(&h[252..]);
        let sform_code = E::read_i16(&h[254..]);

        let affine = if sform_code > 0 {
            let mut m = Matrix4::identity();
            for row in 0..3 {
                for col in 0..4 {
                    m[(row, col)] = E::read_f32(&h[280 + 16 * row + 4 * col..]) as f64;
                }
            }
            m
        } else if qform_code > 0 {
            qform_affine::<E>(h, &pixdim)
        } else {
            let mut m = Matrix4::identity();
            for axis in 0..3 {
                let s = pixdim[axis + 1].abs() as f64;
                m[(axis, axis)] = if s > 0.0 { s } else { 1.0 };
            }
            m
        };

        let vox_offset = E::read_f32(&h[108..]);
        if vox_offset < HEADER_SIZE as f32 {
            return Err(format_err(
                path,
                &format!("vox_offset {vox_offset} lies inside the header"),
            ));
        }

        Ok(Header {
            dims: (dims.0 as usize, dims.1 as usize, dims.2 as usize),
            frames: frames as usize,
            scalar,
            affine,
            vox_offset: vox_offset as u64,
            scl_slope: E::read_f32(&h[112..]),
            scl_inter: E::read_f32(&h[116..]),
        })
    }
}

fn qform_affine<E: ByteOrder>(h: &[u8; HEADER_SIZE], pixdim: &[f32]) -> Matrix4<f64> {
    let b = E::read_f32(&h[256..]) as f64;
    let c = E::read_f32(&h[260..]) as f64;
    let d = E::read_f32(&h[264..]) as f64;
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let qfac = if (pixdim[0] as f64) < 0.0 { -1.0 } else { 1.0 };
    let (sx, sy, sz) = (
        pixdim[1].abs() as f64,
        pixdim[2].abs() as f64,
        pixdim[3].abs() as f64 * qfac,
    );
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - b * b - c * c,
        ],
    ];
    let mut m = Matrix4::identity();
    for (row, r_row) in r.iter().enumerate() {
        m[(row, 0)] = r_row[0] * sx;
        m[(row, 1)] = r_row[1] * sy;
        m[(row, 2)] = r_row[2] * sz;
    }
    m[(0, 3)] = E::read_f32(&h[268..]) as f64;
    m[(1, 3)] = E::read_f32(&h[272..]) as f64;
    m[(2, 3)] = E::read_f32(&h[276..]) as f64;
    m
}

fn decode_frame(raw: &[u8], header: &Header, big_endian: bool, grid: Grid) -> Result<AnyVolume> {
    let scaled = header.scl_inter != 0.0
        || (header.scl_slope != 0.0 && header.scl_slope != 1.0);
    let slope = if header.scl_slope == 0.0 { 1.0 } else { header.scl_slope };

    fn decode<E: ByteOrder>(raw: &[u8], scalar: ScalarType, grid: Grid) -> AnyVolume {
        match scalar {
            ScalarType::F32 => {
                let mut data = vec![0f32; raw.len() / 4];
                E::read_f32_into(raw, &mut data);
                AnyVolume::F32(Volume::new(grid, data).expect("sized by grid"))
            }
            ScalarType::I32 => {
                let mut data = vec![0i32; raw.len() / 4];
                E::read_i32_into(raw, &mut data);
                AnyVolume::I32(Volume::new(grid, data).expect("sized by grid"))
            }
            ScalarType::U8 => {
                AnyVolume::U8(Volume::new(grid, raw.to_vec()).expect("sized by grid"))
            }
        }
    }

    let volume = if big_endian {
        decode::<BigEndian>(raw, header.scalar, grid)
    } else {
        decode::<LittleEndian>(raw, header.scalar, grid)
    };

    if !scaled {
        return Ok(volume);
    }
    let mut floats = volume.into_f32();
    for v in floats.data_mut() {
        *v = *v * slope + header.scl_inter;
    }
    Ok(AnyVolume::F32(floats))
}

fn write_impl<F>(grid: &Grid, scalar: ScalarType, frames: usize, path: &Path, payload: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let (nx, ny, nz) = grid.dims();
    for (name, n) in [("x", nx), ("y", ny), ("z", nz), ("t", frames)] {
        if n > i16::MAX as usize {
            return Err(CoreError::InvalidVolume(format!(
                "{name} dimension {n} exceeds the NIfTI-1 limit of {}",
                i16::MAX
            )));
        }
    }

    let header = build_header(grid, scalar, frames);
    atomic_write(path, |w| {
        let mut sink: Box<dyn Write> = if is_gzip_path(path) {
            Box::new(GzEncoder::new(w, flate2::Compression::fast()))
        } else {
            Box::new(w)
        };
        sink.write_all(&header).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        payload(&mut sink)?;
        sink.flush().map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn build_header(grid: &Grid, scalar: ScalarType, frames: usize) -> Vec<u8> {
    let (nx, ny, nz) = grid.dims();
    let spacing = grid.spacing();
    let affine = grid.affine();

    // 348-byte header plus the 4-byte extension flag, all zeroed first.
    let mut h = vec![0u8; DATA_OFFSET as usize];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);

    let ndim: i16 = if frames > 1 { 4 } else { 3 };
    let dim: [i16; 8] = [ndim, nx as i16, ny as i16, nz as i16, frames.max(1) as i16, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }

    LittleEndian::write_i16(&mut h[70..], scalar.nifti_code());
    LittleEndian::write_i16(&mut h[72..], (scalar.byte_width() * 8) as i16);

    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }

    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut h[116..], 0.0); // scl_inter
    h[123] = 10; // xyzt_units: millimetres | seconds

    LittleEndian::write_i16(&mut h[252..], 0); // qform_code
    LittleEndian::write_i16(&mut h[254..], 2); // sform_code: aligned
    for row in 0..3 {
        for col in 0..4 {
            LittleEndian::write_f32(
                &mut h[280 + 16 * row + 4 * col..],
                affine[(row, col)] as f32,
            );
        }
    }

    h[344..348].copy_from_slice(MAGIC_SINGLE);
    h
}

fn encode_payload<T: Voxel>(data: &[T], w: &mut dyn Write, path: &Path) -> Result<()> {
    let io_err = |source: std::io::Error| CoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    match T::SCALAR {
        ScalarType::U8 => {
            let mut bytes = Vec::with_capacity(data.len());
            for v in data {
                bytes.push(v.to_f64() as u8);
            }
            w.write_all(&bytes).map_err(io_err)
        }
        ScalarType::I32 | ScalarType::F32 => {
            let mut buf = Vec::with_capacity(data.len() * 4);
            for v in data {
                match T::SCALAR {
                    ScalarType::I32 => buf.write_i32::<LittleEndian>(v.to_f64() as i32).unwrap(),
                    _ => buf
                        .write_f32::<LittleEndian>(f32_bits_of(v))
                        .unwrap(),
                }
            }
            w.write_all(&buf).map_err(io_err)
        }
    }
}

/// Recovers the exact f32 payload value without a lossy f64 round trip.
fn f32_bits_of<T: Voxel>(v: &T) -> f32 {
    // T is f32 on this path; to_f64 then back is exact for every finite f32.
    v.to_f64() as f32
}

fn is_gzip_path(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

fn open_maybe_gzip(path: &Path, file: File) -> Result<Box<dyn Read>> {
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 2];
    let peeked = {
        use std::io::BufRead;
        let buf = reader.fill_buf().map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if buf.len() >= 2 {
            magic.copy_from_slice(&buf[0..2]);
            true
        } else {
            false
        }
    };
    if peeked && magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn format_err(path: &Path, reason: &str) -> CoreError {
    CoreError::NiftiFormat {
        path: Some(path.to_path_buf()),
        reason: reason.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;

    fn grid(dims: (usize, usize, usize), spacing: [f64; 3]) -> Grid {
        let affine =
            Matrix4::from_diagonal(&Vector4::new(spacing[0], spacing[1], spacing[2], 1.0));
        Grid::new(dims, affine).unwrap()
    }

    fn ramp_volume(g: Grid) -> Volume<f32> {
        let data = (0..g.len()).map(|i| i as f32 * 0.5 - 3.0).collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn round_trip_preserves_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let mut affine = Matrix4::identity();
        affine[(0, 0)] = -1.0;
        affine[(1, 2)] = 1.0;
        affine[(1, 1)] = 0.0;
        affine[(2, 1)] = -1.0;
        affine[(2, 2)] = 0.0;
        affine[(0, 3)] = 127.5;
        affine[(1, 3)] = -127.5;
        affine[(2, 3)] = 127.5;
        let g = Grid::new((256, 256, 256), affine).unwrap();
        let vol = ramp_volume(g.clone());
        write_volume(&vol, &path).unwrap();

        let back = read_volume(&path).unwrap();
        assert_eq!(back.scalar_type(), ScalarType::F32);
        assert_eq!(back.grid().dims(), (256, 256, 256));
        assert_eq!(back.grid().spacing(), [1.0, 1.0, 1.0]);
        assert_eq!(back.grid().orientation(), "LIA");
        assert!(back.grid().compatible(&g));
        match back {
            AnyVolume::F32(v) => assert_eq!(v.data(), vol.data()),
            _ => panic!("expected float32"),
        }
    }

    #[test]
    fn file_size_is_offset_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.nii");
        let vol = Volume::<f32>::zeros(grid((8, 8, 8), [1.0, 1.0, 1.0]));
        write_volume(&vol, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 352 + 8 * 8 * 8 * 4);
    }

    #[test]
    fn int32_volume_gets_datatype_code_8() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.nii");
        let vol = Volume::<i32>::filled(grid((4, 4, 4), [1.0, 1.0, 1.0]), 7);
        write_volume(&vol, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(LittleEndian::read_i16(&raw[70..]), 8);
        assert_eq!(LittleEndian::read_i16(&raw[72..]), 32);
        match read_volume(&path).unwrap() {
            AnyVolume::I32(v) => assert!(v.data().iter().all(|&x| x == 7)),
            _ => panic!("expected int32"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        let vol = Volume::<u8>::zeros(grid((2, 2, 2), [1.0, 1.0, 1.0]));
        write_volume(&vol, &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[344..348].copy_from_slice(b"xyz\0");
        std::fs::write(&path, &raw).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.nii");
        let vol = Volume::<f32>::zeros(grid((8, 8, 8), [1.0, 1.0, 1.0]));
        write_volume(&vol, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 10]).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("truncated data payload"), "{err}");
    }

    #[test]
    fn unsupported_datatype_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f64.nii");
        let vol = Volume::<f32>::zeros(grid((2, 2, 2), [1.0, 1.0, 1.0]));
        write_volume(&vol, &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        LittleEndian::write_i16(&mut raw[70..], 64);
        std::fs::write(&path, &raw).unwrap();
        match read_volume(&path).unwrap_err() {
            CoreError::UnsupportedDatatype { code } => assert_eq!(code, 64),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn scl_slope_and_inter_are_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaled.nii");
        let vol = Volume::<i32>::new(grid((2, 1, 1), [1.0, 1.0, 1.0]), vec![10, 20]).unwrap();
        write_volume(&vol, &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        LittleEndian::write_f32(&mut raw[112..], 2.0);
        LittleEndian::write_f32(&mut raw[116..], -5.0);
        std::fs::write(&path, &raw).unwrap();
        match read_volume(&path).unwrap() {
            AnyVolume::F32(v) => assert_eq!(v.data(), &[15.0, 35.0]),
            _ => panic!("scaled read should promote to float32"),
        }
    }

    #[test]
    fn qform_fallback_when_sform_absent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qform.nii");
        let vol = Volume::<f32>::zeros(grid((2, 2, 2), [2.0, 2.0, 2.0]));
        write_volume(&vol, &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        // Disable the sform, enable an identity-rotation qform with offsets.
        LittleEndian::write_i16(&mut raw[254..], 0);
        LittleEndian::write_i16(&mut raw[252..], 1);
        LittleEndian::write_f32(&mut raw[268..], 5.0);
        LittleEndian::write_f32(&mut raw[272..], -6.0);
        LittleEndian::write_f32(&mut raw[276..], 7.0);
        std::fs::write(&path, &raw).unwrap();
        let back = read_volume(&path).unwrap();
        let a = back.grid().affine();
        assert_eq!(a[(0, 0)], 2.0);
        assert_eq!(a[(0, 3)], 5.0);
        assert_eq!(a[(1, 3)], -6.0);
        assert_eq!(a[(2, 3)], 7.0);
    }

    #[test]
    fn big_endian_files_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.nii");
        // Hand-build a big-endian header for a 2x1x1 uint8 volume.
        let mut h = vec![0u8; 352 + 2];
        BigEndian::write_i32(&mut h[0..], 348);
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            BigEndian::write_i16(&mut h[40 + 2 * i..], *d);
        }
        BigEndian::write_i16(&mut h[70..], 2);
        BigEndian::write_i16(&mut h[72..], 8);
        for i in 0..4 {
            BigEndian::write_f32(&mut h[76 + 4 * i..], 1.0);
        }
        BigEndian::write_f32(&mut h[108..], 352.0);
        h[344..348].copy_from_slice(MAGIC_SINGLE);
        h[352] = 3;
        h[353] = 9;
        std::fs::write(&path, &h).unwrap();
        match read_volume(&path).unwrap() {
            AnyVolume::U8(v) => assert_eq!(v.data(), &[3, 9]),
            _ => panic!("expected uint8"),
        }
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii.gz");
        let vol = ramp_volume(grid((5, 4, 3), [1.0, 2.0, 3.0]));
        write_volume(&vol, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[0..2], &[0x1f, 0x8b]);
        match read_volume(&path).unwrap() {
            AnyVolume::F32(v) => {
                assert_eq!(v.data(), vol.data());
                assert_eq!(v.grid().spacing(), [1.0, 2.0, 3.0]);
            }
            _ => panic!("expected float32"),
        }
    }

    #[test]
    fn series_round_trip_and_squeeze() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dwi.nii");
        let g = grid((3, 3, 3), [1.0, 1.0, 1.0]);
        let frames: Vec<_> = (0..4)
            .map(|t| Volume::<f32>::filled(g.clone(), t as f32 + 0.25))
            .collect();
        write_series(&frames, &path).unwrap();
        let back = read_series(&path).unwrap();
        assert_eq!(back.len(), 4);
        for (t, frame) in back.iter().enumerate() {
            assert!(frame.data().iter().all(|&v| v == t as f32 + 0.25));
        }

        let single = dir.path().join("single.nii");
        write_series(&frames[..1], &single).unwrap();
        assert!(matches!(read_nifti(&single).unwrap(), NiftiContents::Volume(_)));
    }
}
