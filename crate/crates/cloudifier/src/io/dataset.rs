//! The dataset file format.
//!
//! Little-endian throughout. Header: magic "CFDS", format version u32,
//! observation count u32, H u16, W u16, channels u16 (= 3), num_classes u16,
//! granularity u8 (0 coarse / 1 fine), theme tag u8, generator seed u64.
//! Body, per observation: image H*W*3 bytes, dense labels H*W u16, scene
//! label u16, instance map H*W u16. The byte length is exactly derivable
//! from the header, which is what the truncation check enforces.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{push_u16s, Reader};
use crate::error::{Error, FormatErrorKind, Result};
use crate::scene::{Granularity, Observation, ThemeMix};

pub const DATASET_MAGIC: [u8; 4] = *b"CFDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: u32,
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub num_classes: u16,
    pub granularity: Granularity,
    pub themes: ThemeMix,
    pub seed: u64,
}

impl DatasetHeader {
    fn observation_bytes(&self) -> u64 {
        let hw = self.height as u64 * self.width as u64;
        hw * self.channels as u64 + hw * 2 + 2 + hw * 2
    }

    pub fn file_bytes(&self) -> u64 {
        HEADER_LEN as u64 + self.count as u64 * self.observation_bytes()
    }

    fn theme_tag(&self) -> u8 {
        match self.themes {
            ThemeMix::Fixed(k) => crate::scene::ThemeKind::ALL.iter().position(|t| *t == k).unwrap() as u8,
            ThemeMix::Mixed => 4,
        }
    }

    fn theme_from_tag(tag: u8) -> Option<ThemeMix> {
        match tag {
            0..=3 => Some(ThemeMix::Fixed(crate::scene::ThemeKind::ALL[tag as usize])),
            4 => Some(ThemeMix::Mixed),
            _ => None,
        }
    }

    /// Sketch-theme files hold the natural-proxy data.
    pub fn is_sketch(&self) -> bool {
        matches!(self.themes, ThemeMix::Fixed(k) if k.is_sketch())
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
        out.push(match self.granularity {
            Granularity::Coarse => 0,
            Granularity::Fine => 1,
        });
        out.push(self.theme_tag());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    fn parse(r: &mut Reader<'_>) -> Result<DatasetHeader> {
        r.magic(&DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let count = r.u32()?;
        let height = r.u16()?;
        let width = r.u16()?;
        let channels = r.u16()?;
        let num_classes = r.u16()?;
        let granularity = match r.u8()? {
            0 => Granularity::Coarse,
            1 => Granularity::Fine,
            g => return Err(r.corrupt(format!("bad granularity tag {g}"))),
        };
        let themes =
            DatasetHeader::theme_from_tag(r.u8()?).ok_or_else(|| r.corrupt("bad theme tag"))?;
        let seed = r.u64()?;
        if channels != 3 {
            return Err(r.corrupt(format!("expected 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || num_classes < 2 {
            return Err(r.corrupt("zero dims or degenerate class count"));
        }
        Ok(DatasetHeader { count, height, width, channels, num_classes, granularity, themes, seed })
    }
}

fn check_observation(header: &DatasetHeader, obs: &Observation) -> Result<()> {
    if (obs.width, obs.height) != (header.width as usize, header.height as usize) {
        return Err(Error::ShapeMismatch {
            op: "dataset write",
            detail: format!(
                "observation {}x{} in a {}x{} file",
                obs.width, obs.height, header.width, header.height
            ),
        });
    }
    for &l in obs.dense_labels.iter().chain(std::iter::once(&obs.scene_label)) {
        if l >= header.num_classes {
            return Err(Error::LabelOutOfRange { label: l, classes: header.num_classes as usize });
        }
    }
    Ok(())
}

/// Stream observations into a dataset file (write-temp-then-rename). The
/// iterator must yield exactly `header.count` observations of the declared
/// size with labels below `num_classes`.
pub fn write_dataset(
    path: &Path,
    header: DatasetHeader,
    observations: impl Iterator<Item = Result<Observation>>,
) -> Result<()> {
    let tmp = path.with_extension(format!("cfds.tmp{}", std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(&header.to_bytes())?;
        let mut written = 0u32;
        for obs in observations {
            let obs = obs?;
            check_observation(&header, &obs)?;
            f.write_all(&obs.image)?;
            let mut buf = Vec::with_capacity(obs.dense_labels.len() * 2 + 2);
            push_u16s(&mut buf, &obs.dense_labels);
            buf.extend_from_slice(&obs.scene_label.to_le_bytes());
            push_u16s(&mut buf, &obs.instance_map);
            f.write_all(&buf)?;
            written += 1;
        }
        if written != header.count {
            return Err(Error::InvalidArgument(format!(
                "dataset writer produced {written} observations, header declares {}",
                header.count
            )));
        }
        f.flush()?;
        f.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
        result
    } else {
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Header only; validates magic, version and the declared byte length.
pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(path, &bytes);
    let header = DatasetHeader::parse(&mut r)?;
    let expected = header.file_bytes();
    if bytes.len() as u64 != expected {
        return Err(if (bytes.len() as u64) < expected {
            r.truncated(expected)
        } else {
            Error::Format {
                path: path.to_path_buf(),
                kind: FormatErrorKind::Corrupt(format!(
                    "{} trailing bytes beyond the declared payload",
                    bytes.len() as u64 - expected
                )),
            }
        });
    }
    Ok(header)
}

/// Read and validate a whole dataset file.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Observation>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(path, &bytes);
    let header = DatasetHeader::parse(&mut r)?;
    let expected = header.file_bytes();
    if (bytes.len() as u64) < expected {
        return Err(r.truncated(expected));
    }
    if bytes.len() as u64 > expected {
        return Err(r.corrupt(format!(
            "{} trailing bytes beyond the declared payload",
            bytes.len() as u64 - expected
        )));
    }
    let (w, h) = (header.width as usize, header.height as usize);
    let mut observations = Vec::with_capacity(header.count as usize);
    for i in 0..header.count {
        let image = r.take(w * h * 3)?.to_vec();
        let dense_labels = r.u16_vec(w * h)?;
        let scene_label = r.u16()?;
        let instance_map = r.u16_vec(w * h)?;
        for &l in dense_labels.iter().chain(std::iter::once(&scene_label)) {
            if l >= header.num_classes {
                return Err(r.corrupt(format!(
                    "observation {i}: label {l} out of range for {} classes",
                    header.num_classes
                )));
            }
        }
        observations.push(Observation { width: w, height: h, image, dense_labels, scene_label, instance_map });
    }
    Ok((header, observations))
}
