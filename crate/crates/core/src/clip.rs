//! Video clip tensors and the `.clip` container.
//!
//! Layout on disk, all integers little-endian:
//!
//! ```text
//! "RRCV1" | u32 T | u32 C | u32 H | u32 W | u32 fps_milli | u8 label | T*C*H*W f32
//! ```
//!
//! Frames are stored row-major with W varying fastest. A label of 255
//! means unlabeled.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::dsl::MessageId;

pub const CLIP_MAGIC: &[u8; 5] = b"RRCV1";
const NO_LABEL: u8 = 255;

#[derive(Debug, Error)]
pub enum ClipError {
    #[error("not a clip file (bad magic)")]
    BadMagic,
    #[error("clip declares {declared} values but holds {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("invalid clip: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Frames `T x C x H x W` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<f32>,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub fps: f64,
    pub label: Option<MessageId>,
}

impl VideoClip {
    pub fn new(
        frames: Vec<f32>,
        dims: [usize; 4],
        fps: f64,
        label: Option<MessageId>,
    ) -> Result<Self, ClipError> {
        let [t, c, h, w] = dims;
        if t == 0 || c == 0 || h == 0 || w == 0 {
            return Err(ClipError::Invalid(format!("zero dimension in {dims:?}")));
        }
        let declared = t * c * h * w;
        if frames.len() != declared {
            return Err(ClipError::SizeMismatch {
                declared,
                actual: frames.len(),
            });
        }
        Ok(VideoClip {
            frames,
            t,
            c,
            h,
            w,
            fps,
            label,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.c, self.h, self.w]
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.frames[((t * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + 4 * self.frames.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(CLIP_MAGIC)?;
        for d in self.dims() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let fps_milli = (self.fps * 1000.0).round() as u32;
        out.write_all(&fps_milli.to_le_bytes())?;
        let label = self.label.map_or(NO_LABEL, |m| m.code() as u8);
        out.write_all(&[label])?;
        let mut buf = Vec::with_capacity(4 * self.frames.len());
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, ClipError> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != CLIP_MAGIC {
            return Err(ClipError::BadMagic);
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |input: &mut R| -> io::Result<u32> {
            input.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = next_u32(&mut input)? as usize;
        }
        let fps = next_u32(&mut input)? as f64 / 1000.0;
        let mut label = [0u8; 1];
        input.read_exact(&mut label)?;
        let label = match label[0] {
            NO_LABEL => None,
            code => Some(
                MessageId::from_code(code as usize)
                    .ok_or_else(|| ClipError::Invalid(format!("label code {code}")))?,
            ),
        };
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        let declared = dims.iter().product::<usize>();
        if rest.len() != 4 * declared {
            return Err(ClipError::SizeMismatch {
                declared,
                actual: rest.len() / 4,
            });
        }
        let frames = rest
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        VideoClip::new(frames, dims, fps, label)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClipError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClipError> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let clip = VideoClip::new(vec![0.5; 2 * 3 * 4 * 5], [2, 3, 4, 5], 12.5, Some(MessageId::Yes)).unwrap();
        let bytes = clip.to_bytes();
        assert_eq!(&bytes[..5], b"RRCV1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 12_500);
        assert_eq!(bytes[25], 14);
        assert_eq!(bytes.len(), 26 + 4 * 120);
        assert_eq!(f32::from_le_bytes(bytes[26..30].try_into().unwrap()), 0.5);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(matches!(VideoClip::read_from(&b"RRCV2aaaa"[..]), Err(ClipError::BadMagic)));
        let clip = VideoClip::new(vec![0.0; 3 * 4 * 4], [1, 3, 4, 4], 10.0, None).unwrap();
        let mut bytes = clip.to_bytes();
        bytes.pop();
        assert!(matches!(
            VideoClip::read_from(bytes.as_slice()),
            Err(ClipError::SizeMismatch { .. })
        ));
        assert!(VideoClip::new(vec![0.0; 5], [1, 1, 2, 2], 1.0, None).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            dims in (1usize..4, 1usize..4, 1usize..6, 1usize..6),
            fps_milli in 1u32..100_000,
            label in prop::option::of(0usize..15),
            seed in any::<u32>(),
        ) {
            let (t, c, h, w) = dims;
            let n = t * c * h * w;
            let frames: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(seed) % 1000) as f32 / 999.0).collect();
            let clip = VideoClip::new(
                frames,
                [t, c, h, w],
                fps_milli as f64 / 1000.0,
                label.and_then(MessageId::from_code),
            ).unwrap();
            let back = VideoClip::read_from(clip.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, clip);
        }
    }
}
