//! Inter-vehicle wire format and on-disk datasets.
//!
//! `FrameMessage` is what a CAV actually transmits after local processing:
//! camera detections with appearance descriptors, the separated vehicle
//! point clusters, and a decimated stationary background cloud. Everything
//! heavy (raw radar sweep, truth labels) stays on the sender.
//!
//! Message layout, all integers and floats little-endian:
//!
//! ```text
//! magic        b"MMFR"                        4 bytes
//! version      u16                            currently 1
//! payload_len  u32      byte length of everything after this field
//! ego_speed    f32
//! n_det        u16
//! per detection:
//!   bbox       4 x f32  (u_min, v_min, u_max, v_max), pixels
//!   depth      f32      meters
//!   score      f32
//!   descriptor 32 x f32
//! n_clusters   u16
//! per cluster:
//!   det_index  u16      index into the detection list
//!   n_points   u16
//!   per point: 3 x f32  (x, y, radial velocity) in the sender's frame
//! n_background u32
//! per point:   2 x f32  (x, y) in the sender's frame
//! ```
//!
//! Datasets are directories with one bincode-encoded truth-labeled frame
//! pair per file plus a TOML manifest naming each file and the scenario it
//! came from.

use crate::sim::{FramePair, ScenarioSpec, DESCRIPTOR_DIM};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"MMFR";
pub const WIRE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("message truncated at byte {0}")]
    Truncated(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("payload length field {stated} disagrees with actual {actual}")]
    BadPayloadLength { stated: usize, actual: usize },
    #[error("cluster references detection {index} of {count}")]
    BadClusterIndex { index: usize, count: usize },
    #[error("trailing bytes after message")]
    TrailingBytes,
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset entry decode: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    /// (u_min, v_min, u_max, v_max) in pixels.
    pub bbox: [f32; 4],
    pub depth: f32,
    pub score: f32,
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCluster {
    pub detection_index: u16,
    /// (x, y, radial velocity) per point, sender frame.
    pub points: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    pub ego_speed: f32,
    pub detections: Vec<WireDetection>,
    pub clusters: Vec<WireCluster>,
    /// Decimated stationary background, sender frame.
    pub background: Vec<[f32; 2]>,
}

impl FrameMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        let len_at = out.len();
        out.extend_from_slice(&0u32.to_le_bytes());
        let payload_start = out.len();

        out.extend_from_slice(&self.ego_speed.to_le_bytes());
        out.extend_from_slice(&(self.detections.len() as u16).to_le_bytes());
        for d in &self.detections {
            for v in d.bbox {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&d.depth.to_le_bytes());
            out.extend_from_slice(&d.score.to_le_bytes());
            debug_assert_eq!(d.descriptor.len(), DESCRIPTOR_DIM);
            for v in &d.descriptor {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.clusters.len() as u16).to_le_bytes());
        for c in &self.clusters {
            out.extend_from_slice(&c.detection_index.to_le_bytes());
            out.extend_from_slice(&(c.points.len() as u16).to_le_bytes());
            for p in &c.points {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.background.len() as u32).to_le_bytes());
        for p in &self.background {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let payload_len = (out.len() - payload_start) as u32;
        out[len_at..len_at + 4].copy_from_slice(&payload_len.to_le_bytes());
        out
    }

    pub fn encoded_len(&self) -> usize {
        let det = self.detections.len() * (4 + 1 + 1 + DESCRIPTOR_DIM) * 4;
        let clu: usize = self.clusters.iter().map(|c| 4 + c.points.len() * 12).sum();
        4 + 2 + 4 + 4 + 2 + det + 2 + clu + 4 + self.background.len() * 8
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader { buf, pos: 0 };
        if r.bytes(4)? != MAGIC {
            return Err(WireError::BadMagic);
        }
        let version = r.u16()?;
        if version != WIRE_VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let stated = r.u32()? as usize;
        let actual = buf.len() - r.pos;
        if stated != actual {
            return Err(WireError::BadPayloadLength { stated, actual });
        }

        let ego_speed = r.f32()?;
        let n_det = r.u16()? as usize;
        let mut detections = Vec::with_capacity(n_det);
        for _ in 0..n_det {
            let bbox = [r.f32()?, r.f32()?, r.f32()?, r.f32()?];
            let depth = r.f32()?;
            let score = r.f32()?;
            let mut descriptor = Vec::with_capacity(DESCRIPTOR_DIM);
            for _ in 0..DESCRIPTOR_DIM {
                descriptor.push(r.f32()?);
            }
            detections.push(WireDetection {
                bbox,
                depth,
                score,
                descriptor,
            });
        }
        let n_clu = r.u16()? as usize;
        let mut clusters = Vec::with_capacity(n_clu);
        for _ in 0..n_clu {
            let detection_index = r.u16()?;
            if detection_index as usize >= n_det {
                return Err(WireError::BadClusterIndex {
                    index: detection_index as usize,
                    count: n_det,
                });
            }
            let n_pts = r.u16()? as usize;
            let mut points = Vec::with_capacity(n_pts);
            for _ in 0..n_pts {
                points.push([r.f32()?, r.f32()?, r.f32()?]);
            }
            clusters.push(WireCluster {
                detection_index,
                points,
            });
        }
        let n_bg = r.u32()? as usize;
        let mut background = Vec::with_capacity(n_bg);
        for _ in 0..n_bg {
            background.push([r.f32()?, r.f32()?]);
        }
        if r.pos != buf.len() {
            return Err(WireError::TrailingBytes);
        }
        Ok(Self {
            ego_speed,
            detections,
            clusters,
            background,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub spec: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Write one file per frame pair plus the manifest into `dir` (created if
/// missing).
pub fn write_dataset(dir: &Path, pairs: &[(ScenarioSpec, FramePair)]) -> Result<(), WireError> {
    fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::default();
    for (i, (spec, pair)) in pairs.iter().enumerate() {
        let file = format!("pair_{i:05}.bin");
        let bytes = bincode::serialize(pair).map_err(|e| WireError::Dataset(e.to_string()))?;
        fs::write(dir.join(&file), bytes)?;
        manifest.entries.push(ManifestEntry { file, spec: *spec });
    }
    let toml = toml::to_string_pretty(&manifest).map_err(|e| WireError::Dataset(e.to_string()))?;
    fs::write(dir.join(MANIFEST_NAME), toml)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<(ScenarioSpec, FramePair)>, WireError> {
    let toml_src = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: DatasetManifest =
        toml::from_str(&toml_src).map_err(|e| WireError::Dataset(e.to_string()))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let bytes = fs::read(dir.join(&e.file))?;
        let pair: FramePair =
            bincode::deserialize(&bytes).map_err(|er| WireError::Dataset(er.to_string()))?;
        out.push((e.spec, pair));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        generate_scene, make_frame_pair, DirectionMode, RoadType, SimConfig, Traffic,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_message(seed: u64) -> FrameMessage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_det = rng.gen_range(0..8usize);
        let detections: Vec<WireDetection> = (0..n_det)
            .map(|_| WireDetection {
                bbox: [rng.gen(), rng.gen(), rng.gen(), rng.gen()],
                depth: rng.gen_range(0.0..80.0),
                score: rng.gen(),
                descriptor: (0..DESCRIPTOR_DIM).map(|_| rng.gen()).collect(),
            })
            .collect();
        let clusters: Vec<WireCluster> = (0..rng.gen_range(0..=n_det))
            .map(|_| WireCluster {
                detection_index: rng.gen_range(0..n_det) as u16,
                points: (0..rng.gen_range(0..20usize))
                    .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                    .collect(),
            })
            .collect();
        FrameMessage {
            ego_speed: rng.gen(),
            detections,
            clusters,
            background: (0..rng.gen_range(0..900usize))
                .map(|_| [rng.gen(), rng.gen()])
                .collect(),
        }
    }

    #[test]
    fn thousand_random_messages_round_trip_bit_identically() {
        for seed in 0..1000 {
            let msg = random_message(seed);
            let bytes = msg.encode();
            assert_eq!(bytes.len(), msg.encoded_len());
            let back = FrameMessage::decode(&bytes).unwrap();
            // Re-encode and compare raw bytes: bit-identical round trip.
            assert_eq!(back.encode(), bytes, "seed {seed}");
            assert_eq!(back, msg);
        }
    }

    #[test]
    fn decode_rejects_malformed() {
        let msg = random_message(1);
        let bytes = msg.encode();
        assert!(matches!(
            FrameMessage::decode(&bytes[..bytes.len() - 1]),
            Err(WireError::BadPayloadLength { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(FrameMessage::decode(&bad), Err(WireError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 0xff;
        assert!(matches!(
            FrameMessage::decode(&bad),
            Err(WireError::UnsupportedVersion(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            FrameMessage::decode(&extra),
            Err(WireError::BadPayloadLength { .. })
        ));
        assert!(matches!(
            FrameMessage::decode(&bytes[..3]),
            Err(WireError::Truncated(_))
        ));
    }

    #[test]
    fn decode_rejects_dangling_cluster_index() {
        let mut msg = random_message(2);
        msg.detections.clear();
        msg.clusters = vec![WireCluster {
            detection_index: 0,
            points: vec![],
        }];
        let bytes = msg.encode();
        assert!(matches!(
            FrameMessage::decode(&bytes),
            Err(WireError::BadClusterIndex { index: 0, count: 0 })
        ));
    }

    proptest! {
        #[test]
        fn codec_never_panics_on_noise(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = FrameMessage::decode(&bytes);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimConfig::default();
        let pairs: Vec<(ScenarioSpec, FramePair)> = (0..3)
            .map(|seed| {
                let spec = ScenarioSpec {
                    road_type: RoadType::Straight,
                    n_vehicles: 5,
                    traffic: Traffic::Light,
                    direction: DirectionMode::Same,
                    seed,
                };
                let w = generate_scene(&spec).unwrap();
                (spec, make_frame_pair(&w, &sim))
            })
            .collect();
        write_dataset(dir.path(), &pairs).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, pairs);
        assert!(dir.path().join("pair_00000.bin").exists());
        assert!(dir.path().join(MANIFEST_NAME).exists());
    }
}
