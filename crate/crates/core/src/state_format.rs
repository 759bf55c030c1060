//! On-disk (and on-ramdisk) representation of one simulation state.
//!
//! A state directory holds one ASCII metadata file named `meta` plus one
//! binary file per (slab, slab type). Slab files share a 16-byte header
//! followed by a little-endian array of 64-bit elements:
//!
//! ```text
//! offset 0   magic          b"ABSL"
//! offset 4   version        u32 LE (currently 1)
//! offset 8   element_count  u64 LE
//! offset 16  payload        element_count x 8 bytes, LE
//! ```
//!
//! Cell boundaries live only in the `cellinfo` file of each slab: it holds
//! `cells_per_slab + 1` non-decreasing particle offsets starting at 0. The
//! position, velocity and aux files are bare arrays in cell order.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::keyval::{fmt_real, KeyValDoc, KeyValError};

pub const SLAB_MAGIC: [u8; 4] = *b"ABSL";
pub const SLAB_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta";
/// Exclusive upper bound on slab indices representable in file names.
pub const MAX_SLABS: u32 = 10_000;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("slab index {0} exceeds the 4-digit file name limit")]
    SlabIndexOverflow(u32),
    #[error("empty state directory path")]
    EmptyStateDir,
    #[error("bad slab magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported slab version {0}")]
    BadVersion(u32),
    #[error("truncated slab: {actual} bytes, header declares {expected}")]
    Truncated { expected: u64, actual: u64 },
    #[error("cellinfo offsets not monotone at cell {index}: {prev} > {next}")]
    NonMonotone { index: usize, prev: u64, next: u64 },
    #[error("cellinfo offsets must start at 0, found {0}")]
    NonZeroStart(u64),
    #[error("payload type {found} does not match expected {expected}")]
    TypeMismatch { expected: SlabType, found: SlabType },
    #[error("metadata: {0}")]
    Meta(#[from] KeyValError),
    #[error("metadata: unknown format_version {0}")]
    UnknownFormatVersion(u32),
    #[error("metadata: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One field of a slab, stored in its own file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlabType {
    CellInfo,
    Position,
    Velocity,
    Aux,
}

impl SlabType {
    /// Canonical order, used for digests and directory walks.
    pub const ALL: [SlabType; 4] = [
        SlabType::CellInfo,
        SlabType::Position,
        SlabType::Velocity,
        SlabType::Aux,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            SlabType::CellInfo => "cellinfo",
            SlabType::Position => "pos",
            SlabType::Velocity => "vel",
            SlabType::Aux => "aux",
        }
    }
}

impl fmt::Display for SlabType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlabId {
    pub slab_index: u32,
    pub slab_type: SlabType,
}

impl SlabId {
    pub fn new(slab_index: u32, slab_type: SlabType) -> Self {
        Self {
            slab_index,
            slab_type,
        }
    }
}

/// Computes `<state_dir>/<prefix>_<index:04>`. Never touches the file system.
pub fn slab_path(state_dir: &Path, id: SlabId) -> Result<PathBuf, FormatError> {
    if state_dir.as_os_str().is_empty() {
        return Err(FormatError::EmptyStateDir);
    }
    if id.slab_index >= MAX_SLABS {
        return Err(FormatError::SlabIndexOverflow(id.slab_index));
    }
    Ok(state_dir.join(format!("{}_{:04}", id.slab_type.prefix(), id.slab_index)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateMetadata {
    pub format_version: u32,
    pub step: u64,
    pub time: f64,
    pub n_particles: u64,
    pub n_slabs: u32,
    pub cells_per_slab: u32,
    pub box_size: f64,
}

const META_KEYS: [&str; 7] = [
    "format_version",
    "step",
    "time",
    "n_particles",
    "n_slabs",
    "cells_per_slab",
    "box_size",
];

impl StateMetadata {
    pub fn total_cells(&self) -> u64 {
        u64::from(self.n_slabs) * u64::from(self.cells_per_slab)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.format_version != FORMAT_VERSION {
            return Err(FormatError::UnknownFormatVersion(self.format_version));
        }
        if self.n_slabs < 1 || self.n_slabs > MAX_SLABS {
            return Err(FormatError::Invalid(format!(
                "n_slabs must be in [1, {MAX_SLABS}], got {}",
                self.n_slabs
            )));
        }
        if self.cells_per_slab < 1 {
            return Err(FormatError::Invalid("cells_per_slab must be >= 1".into()));
        }
        if !(self.box_size.is_finite() && self.box_size > 0.0) {
            return Err(FormatError::Invalid(format!(
                "box_size must be finite and > 0, got {}",
                self.box_size
            )));
        }
        if !self.time.is_finite() {
            return Err(FormatError::Invalid("time must be finite".into()));
        }
        Ok(())
    }

    /// The canonical ASCII encoding: fixed key order, byte-stable.
    pub fn to_text(&self) -> String {
        let mut doc = KeyValDoc::new();
        doc.push("format_version", self.format_version);
        doc.push("step", self.step);
        doc.push("time", fmt_real(self.time));
        doc.push("n_particles", self.n_particles);
        doc.push("n_slabs", self.n_slabs);
        doc.push("cells_per_slab", self.cells_per_slab);
        doc.push("box_size", fmt_real(self.box_size));
        doc.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let doc = KeyValDoc::parse(text)?;
        doc.check_known(&META_KEYS)?;
        let format_version: u32 = doc.require_parsed("format_version")?;
        if format_version != FORMAT_VERSION {
            return Err(FormatError::UnknownFormatVersion(format_version));
        }
        let meta = StateMetadata {
            format_version,
            step: doc.require_parsed("step")?,
            time: doc.require_parsed("time")?,
            n_particles: doc.require_parsed("n_particles")?,
            n_slabs: doc.require_parsed("n_slabs")?,
            cells_per_slab: doc.require_parsed("cells_per_slab")?,
            box_size: doc.require_parsed("box_size")?,
        };
        meta.validate()?;
        Ok(meta)
    }
}

pub fn meta_path(state_dir: &Path) -> PathBuf {
    state_dir.join(META_FILE)
}

pub fn write_metadata(state_dir: &Path, meta: &StateMetadata) -> Result<(), FormatError> {
    meta.validate()?;
    let path = meta_path(state_dir);
    fs::write(&path, meta.to_text()).map_err(|e| FormatError::io(&path, e))
}

pub fn read_metadata(state_dir: &Path) -> Result<StateMetadata, FormatError> {
    let path = meta_path(state_dir);
    let text = fs::read_to_string(&path).map_err(|e| FormatError::io(&path, e))?;
    StateMetadata::from_text(&text)
}

/// A decoded slab file.
#[derive(Debug, Clone, PartialEq)]
pub enum SlabPayload {
    CellInfo(Vec<u64>),
    Position(Vec<f64>),
    Velocity(Vec<f64>),
    Aux(Vec<u64>),
}

impl SlabPayload {
    pub fn slab_type(&self) -> SlabType {
        match self {
            SlabPayload::CellInfo(_) => SlabType::CellInfo,
            SlabPayload::Position(_) => SlabType::Position,
            SlabPayload::Velocity(_) => SlabType::Velocity,
            SlabPayload::Aux(_) => SlabType::Aux,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SlabPayload::CellInfo(v) | SlabPayload::Aux(v) => v.len(),
            SlabPayload::Position(v) | SlabPayload::Velocity(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(self.len())
    }

    pub fn into_u64(self) -> Result<Vec<u64>, FormatError> {
        match self {
            SlabPayload::CellInfo(v) | SlabPayload::Aux(v) => Ok(v),
            other => Err(FormatError::TypeMismatch {
                expected: SlabType::Aux,
                found: other.slab_type(),
            }),
        }
    }

    pub fn into_f64(self) -> Result<Vec<f64>, FormatError> {
        match self {
            SlabPayload::Position(v) | SlabPayload::Velocity(v) => Ok(v),
            other => Err(FormatError::TypeMismatch {
                expected: SlabType::Position,
                found: other.slab_type(),
            }),
        }
    }
}

pub fn encoded_len(element_count: usize) -> usize {
    HEADER_LEN + 8 * element_count
}

pub fn encode_slab(payload: &SlabPayload) -> Vec<u8> {
    let mut out = vec![0u8; payload.encoded_len()];
    encode_slab_into(payload, &mut out);
    out
}

/// Encodes into a buffer of exactly `payload.encoded_len()` bytes, e.g. a
/// freshly mapped write slab.
///
/// Panics if `out` has the wrong length.
pub fn encode_slab_into(payload: &SlabPayload, out: &mut [u8]) {
    assert_eq!(out.len(), payload.encoded_len(), "slab buffer length");
    out[0..4].copy_from_slice(&SLAB_MAGIC);
    out[4..8].copy_from_slice(&SLAB_VERSION.to_le_bytes());
    out[8..16].copy_from_slice(&(payload.len() as u64).to_le_bytes());
    let body = out[HEADER_LEN..].chunks_exact_mut(8);
    match payload {
        SlabPayload::CellInfo(v) | SlabPayload::Aux(v) => {
            for (dst, x) in body.zip(v) {
                dst.copy_from_slice(&x.to_le_bytes());
            }
        }
        SlabPayload::Position(v) | SlabPayload::Velocity(v) => {
            for (dst, x) in body.zip(v) {
                dst.copy_from_slice(&x.to_le_bytes());
            }
        }
    }
}

/// Validates the header and returns the declared element count.
pub fn decode_header(bytes: &[u8]) -> Result<u64, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != SLAB_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SLAB_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(FormatError::Truncated {
            expected: expected.unwrap_or(u64::MAX),
            actual: bytes.len() as u64,
        });
    }
    Ok(count)
}

pub fn decode_slab(bytes: &[u8], expected_type: SlabType) -> Result<SlabPayload, FormatError> {
    decode_header(bytes)?;
    let words = bytes[HEADER_LEN..].chunks_exact(8);
    let payload = match expected_type {
        SlabType::CellInfo => {
            let v: Vec<u64> = words
                .map(|w| u64::from_le_bytes(w.try_into().unwrap()))
                .collect();
            check_offsets(&v)?;
            SlabPayload::CellInfo(v)
        }
        SlabType::Aux => SlabPayload::Aux(
            words
                .map(|w| u64::from_le_bytes(w.try_into().unwrap()))
                .collect(),
        ),
        SlabType::Position | SlabType::Velocity => {
            let v = words
                .map(|w| f64::from_le_bytes(w.try_into().unwrap()))
                .collect();
            if expected_type == SlabType::Position {
                SlabPayload::Position(v)
            } else {
                SlabPayload::Velocity(v)
            }
        }
    };
    Ok(payload)
}

fn check_offsets(offsets: &[u64]) -> Result<(), FormatError> {
    if let Some(&first) = offsets.first() {
        if first != 0 {
            return Err(FormatError::NonZeroStart(first));
        }
    }
    for (index, pair) in offsets.windows(2).enumerate() {
        if pair[0] > pair[1] {
            return Err(FormatError::NonMonotone {
                index: index + 1,
                prev: pair[0],
                next: pair[1],
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn slab_paths() {
        let p = slab_path(Path::new("/dev/shm/ab/read"), SlabId::new(3, SlabType::Position));
        assert_eq!(p.unwrap(), PathBuf::from("/dev/shm/ab/read/pos_0003"));
        let p = slab_path(Path::new("/scratch/state"), SlabId::new(0, SlabType::CellInfo));
        assert_eq!(p.unwrap(), PathBuf::from("/scratch/state/cellinfo_0000"));
        let p = slab_path(Path::new("/dev/shm/ab/read"), SlabId::new(10000, SlabType::Aux));
        assert!(matches!(p, Err(FormatError::SlabIndexOverflow(10000))));
        let p = slab_path(Path::new("/dev/shm/ab/read"), SlabId::new(9999, SlabType::Velocity));
        assert_eq!(p.unwrap(), PathBuf::from("/dev/shm/ab/read/vel_9999"));
        assert!(slab_path(Path::new(""), SlabId::new(0, SlabType::Aux)).is_err());
    }

    #[test]
    fn slab_path_is_pure() {
        let dir = Path::new("/definitely/not/a/real/dir");
        assert!(!dir.exists());
        assert!(slab_path(dir, SlabId::new(7, SlabType::Aux)).is_ok());
    }

    fn meta(step: u64, time: f64, n: u64, slabs: u32, cells: u32, box_size: f64) -> StateMetadata {
        StateMetadata {
            format_version: 1,
            step,
            time,
            n_particles: n,
            n_slabs: slabs,
            cells_per_slab: cells,
            box_size,
        }
    }

    #[test]
    fn metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let zero = meta(0, 0.0, 0, 1, 1, 1.0);
        write_metadata(dir.path(), &zero).unwrap();
        assert_eq!(read_metadata(dir.path()).unwrap(), zero);

        let m = meta(42, 0.125, 1000, 8, 16, 1.0);
        write_metadata(dir.path(), &m).unwrap();
        assert_eq!(read_metadata(dir.path()).unwrap(), m);
        let text = fs::read_to_string(dir.path().join("meta")).unwrap();
        assert!(text.lines().any(|l| l == "time = 0.125"));
        assert_eq!(
            text,
            "format_version = 1\nstep = 42\ntime = 0.125\nn_particles = 1000\n\
             n_slabs = 8\ncells_per_slab = 16\nbox_size = 1.0\n"
        );
    }

    #[test]
    fn metadata_errors() {
        let good = meta(1, 0.5, 10, 2, 2, 1.0).to_text();
        let neg = good.replace("step = 1", "step = -1");
        match StateMetadata::from_text(&neg) {
            Err(FormatError::Meta(KeyValError::InvalidValue { line: 2, key, .. })) => {
                assert_eq!(key, "step")
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = good.replace("box_size = 1.0\n", "");
        assert!(matches!(
            StateMetadata::from_text(&missing),
            Err(FormatError::Meta(KeyValError::MissingKey { .. }))
        ));
        let version = good.replace("format_version = 1", "format_version = 2");
        assert!(matches!(
            StateMetadata::from_text(&version),
            Err(FormatError::UnknownFormatVersion(2))
        ));
        let garbage = format!("{good}what is this\n");
        assert!(matches!(
            StateMetadata::from_text(&garbage),
            Err(FormatError::Meta(KeyValError::Malformed { line: 8, .. }))
        ));
        let bad_box = good.replace("box_size = 1.0", "box_size = 0.0");
        assert!(matches!(
            StateMetadata::from_text(&bad_box),
            Err(FormatError::Invalid(_))
        ));
    }

    #[test]
    fn empty_slab_is_header_only() {
        let bytes = encode_slab(&SlabPayload::Position(vec![]));
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[0..4], b"ABSL");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 0);
        assert_eq!(
            decode_slab(&bytes, SlabType::Position).unwrap(),
            SlabPayload::Position(vec![])
        );
    }

    #[test]
    fn decode_errors() {
        let mut bytes = encode_slab(&SlabPayload::Aux(vec![1, 2, 3]));
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_slab(&bad, SlabType::Aux),
            Err(FormatError::BadMagic(m)) if &m == b"XXXX"
        ));
        bytes.pop();
        assert!(matches!(
            decode_slab(&bytes, SlabType::Aux),
            Err(FormatError::Truncated { expected: 40, actual: 39 })
        ));
        assert!(matches!(
            decode_slab(&[0u8; 3], SlabType::Aux),
            Err(FormatError::Truncated { .. })
        ));
        let dec = encode_slab(&SlabPayload::CellInfo(vec![0, 2, 1]));
        assert!(matches!(
            decode_slab(&dec, SlabType::CellInfo),
            Err(FormatError::NonMonotone { index: 2, prev: 2, next: 1 })
        ));
        let nonzero = encode_slab(&SlabPayload::CellInfo(vec![1, 2]));
        assert!(matches!(
            decode_slab(&nonzero, SlabType::CellInfo),
            Err(FormatError::NonZeroStart(1))
        ));
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode_slab(&SlabPayload::Velocity(vec![1.0]));
        assert_eq!(
            bytes,
            [
                b'A', b'B', b'S', b'L', 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
                0xf0, 0x3f
            ]
        );
    }

    fn arb_payload() -> impl Strategy<Value = SlabPayload> {
        prop_oneof![
            prop::collection::vec(0u64..1000, 0..64).prop_map(|mut v| {
                v.sort_unstable();
                if let Some(first) = v.first_mut() {
                    *first = 0;
                }
                SlabPayload::CellInfo(v)
            }),
            prop::collection::vec(any::<u64>().prop_map(f64::from_bits), 0..64)
                .prop_map(SlabPayload::Position),
            prop::collection::vec(any::<u64>().prop_map(f64::from_bits), 0..64)
                .prop_map(SlabPayload::Velocity),
            prop::collection::vec(any::<u64>(), 0..64).prop_map(SlabPayload::Aux),
        ]
    }

    fn bitwise(p: &SlabPayload) -> (SlabType, Vec<u64>) {
        let bits = match p {
            SlabPayload::CellInfo(v) | SlabPayload::Aux(v) => v.clone(),
            SlabPayload::Position(v) | SlabPayload::Velocity(v) => {
                v.iter().map(|x| x.to_bits()).collect()
            }
        };
        (p.slab_type(), bits)
    }

    proptest! {
        #[test]
        fn decode_encode_identity(p in arb_payload()) {
            let bytes = encode_slab(&p);
            prop_assert_eq!(bytes.len(), 16 + 8 * p.len());
            prop_assert_eq!(&encode_slab(&p), &bytes);
            let back = decode_slab(&bytes, p.slab_type()).unwrap();
            prop_assert_eq!(bitwise(&back), bitwise(&p));
        }

        #[test]
        fn metadata_text_round_trip(
            step in any::<u64>(),
            time in -1e300f64..1e300,
            n in any::<u64>(),
            slabs in 1u32..10_000,
            cells in 1u32..100_000,
            box_size in 1e-300f64..1e300,
        ) {
            let m = meta(step, time, n, slabs, cells, box_size);
            let back = StateMetadata::from_text(&m.to_text()).unwrap();
            prop_assert_eq!(back.time.to_bits(), m.time.to_bits());
            prop_assert_eq!(back, m);
        }
    }
}
