//! Versioned binary persistence for trained networks and cascades.
//!
//! Container layout, all multi-byte integers little-endian:
//!
//! ```text
//! magic            8 bytes, "CDLMODEL"
//! version          u32 (currently 1)
//! kind             u8: 0 = baseline, 1 = cascade
//! network
//!   input shape    3 x u32
//!   class count    u32
//!   layer count    u32
//!   per layer      tag u8 then
//!                    0 conv:  out u32, in u32, k u32, weights f64..., bias f64...
//!                    1 pool:  window u32
//!                    2 dense: out u32, in u32, weights f64..., bias f64...
//!   meta           epochs u32, batch u32, learning rate f64, seed u64,
//!                  loss count u32 + f64 each,
//!                  train/test accuracy as presence u8 + f64 when present
//! cascade only
//!   train delta    f64
//!   epsilon        f64 (may be +/- infinity)
//!   cost model     3 x f64 (mac, compare, nonlinearity)
//!   classifiers    count u32; per classifier stage u32, classes u32,
//!                  features u32, weights f64..., bias f64...
//!   stage stats    count u32; per stage stage u32, reach f64, exit f64,
//!                  cost f64, gain f64, admitted u8
//! checksum         SHA-256 of everything above, 32 bytes
//! ```
//!
//! Floats are stored as raw 64-bit IEEE bit patterns, so a load of a save is
//! bitwise identical. Writes go to a temporary file in the target directory
//! and are renamed into place.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cascade::{Cascade, LinearClassifier, StageStats};
use crate::error::{CdlError, Result};
use crate::metrics::CostModel;
use crate::network::{LayerParams, LayerSpec, NetworkSpec, TrainedNetwork, TrainingMeta};
use crate::tensor::{ConvKernelBank, Tensor};

const MAGIC: &[u8; 8] = b"CDLMODEL";
const VERSION: u32 = 1;
const KIND_BASELINE: u8 = 0;
const KIND_CASCADE: u8 = 1;

/// A persisted model: either a bare network or a full cascade.
#[derive(Debug, Clone)]
pub enum ModelContainer {
    Baseline(TrainedNetwork),
    Cascade(Cascade),
}

impl ModelContainer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelContainer::Baseline(_) => "baseline",
            ModelContainer::Cascade(_) => "cascade",
        }
    }

    pub fn expect_baseline(self) -> Result<TrainedNetwork> {
        match self {
            ModelContainer::Baseline(net) => Ok(net),
            ModelContainer::Cascade(_) => Err(CdlError::WrongKind {
                expected: "baseline",
                found: "cascade",
            }),
        }
    }

    pub fn expect_cascade(self) -> Result<Cascade> {
        match self {
            ModelContainer::Cascade(c) => Ok(c),
            ModelContainer::Baseline(_) => Err(CdlError::WrongKind {
                expected: "cascade",
                found: "baseline",
            }),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        put_f64(buf, v);
    }
}

fn put_opt_f64(buf: &mut Vec<u8>, v: Option<f64>) {
    match v {
        Some(x) => {
            buf.push(1);
            put_f64(buf, x);
        }
        None => buf.push(0),
    }
}

fn encode_network(buf: &mut Vec<u8>, net: &TrainedNetwork) {
    for &extent in &net.spec.input_shape {
        put_u32(buf, extent as u32);
    }
    put_u32(buf, net.spec.class_count as u32);
    put_u32(buf, net.params.len() as u32);
    for params in &net.params {
        match params {
            LayerParams::Conv(bank) => {
                buf.push(0);
                put_u32(buf, bank.out_maps as u32);
                put_u32(buf, bank.in_maps as u32);
                put_u32(buf, bank.kernel as u32);
                put_f64s(buf, bank.weights.data());
                put_f64s(buf, &bank.bias);
            }
            LayerParams::Pool { window } => {
                buf.push(1);
                put_u32(buf, *window as u32);
            }
            LayerParams::Dense { weights, bias } => {
                buf.push(2);
                put_u32(buf, weights.shape()[0] as u32);
                put_u32(buf, weights.shape()[1] as u32);
                put_f64s(buf, weights.data());
                put_f64s(buf, bias);
            }
        }
    }
    put_u32(buf, net.meta.epochs as u32);
    put_u32(buf, net.meta.batch_size as u32);
    put_f64(buf, net.meta.learning_rate);
    put_u64(buf, net.meta.seed);
    put_u32(buf, net.meta.epoch_losses.len() as u32);
    put_f64s(buf, &net.meta.epoch_losses);
    put_opt_f64(buf, net.meta.train_accuracy);
    put_opt_f64(buf, net.meta.test_accuracy);
}

fn encode(container: &ModelContainer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    match container {
        ModelContainer::Baseline(net) => {
            buf.push(KIND_BASELINE);
            encode_network(&mut buf, net);
        }
        ModelContainer::Cascade(cascade) => {
            buf.push(KIND_CASCADE);
            encode_network(&mut buf, &cascade.base);
            put_f64(&mut buf, cascade.train_delta);
            put_f64(&mut buf, cascade.epsilon);
            put_f64(&mut buf, cascade.cost_model.mac);
            put_f64(&mut buf, cascade.cost_model.compare);
            put_f64(&mut buf, cascade.cost_model.nonlinearity);
            put_u32(&mut buf, cascade.classifiers.len() as u32);
            for lc in &cascade.classifiers {
                put_u32(&mut buf, lc.stage_index as u32);
                put_u32(&mut buf, lc.class_count() as u32);
                put_u32(&mut buf, lc.feature_len() as u32);
                put_f64s(&mut buf, lc.weights.data());
                put_f64s(&mut buf, &lc.bias);
            }
            put_u32(&mut buf, cascade.stats.len() as u32);
            for s in &cascade.stats {
                put_u32(&mut buf, s.stage as u32);
                put_f64(&mut buf, s.reach_fraction);
                put_f64(&mut buf, s.exit_fraction);
                put_f64(&mut buf, s.cumulative_cost);
                put_f64(&mut buf, s.gain);
                buf.push(s.admitted as u8);
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Serializes the container and atomically replaces `path`.
pub fn save_model(container: &ModelContainer, path: &Path) -> Result<()> {
    let bytes = encode(container);
    let tmp = path.with_extension("cdl.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| CdlError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CdlError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(CdlError::ContainerTruncated {
                path: self.path.to_path_buf(),
                offset: self.offset,
                needed: n,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            _ => Ok(Some(self.f64()?)),
        }
    }
}

fn decode_network(r: &mut Reader) -> Result<TrainedNetwork> {
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let class_count = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    let mut params = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        match r.u8()? {
            0 => {
                let out_maps = r.u32()? as usize;
                let in_maps = r.u32()? as usize;
                let kernel = r.u32()? as usize;
                let weights = r.f64s(out_maps * in_maps * kernel * kernel)?;
                let bias = r.f64s(out_maps)?;
                layers.push(LayerSpec::Conv { kernel, out_maps });
                params.push(LayerParams::Conv(ConvKernelBank::new(
                    out_maps,
                    in_maps,
                    kernel,
                    Tensor::new(vec![out_maps, in_maps, kernel, kernel], weights)?,
                    bias,
                )?));
            }
            1 => {
                let window = r.u32()? as usize;
                layers.push(LayerSpec::Pool { window });
                params.push(LayerParams::Pool { window });
            }
            2 => {
                let out = r.u32()? as usize;
                let in_len = r.u32()? as usize;
                let weights = r.f64s(out * in_len)?;
                let bias = r.f64s(out)?;
                layers.push(LayerSpec::FullyConnected { out_units: out });
                params.push(LayerParams::Dense {
                    weights: Tensor::new(vec![out, in_len], weights)?,
                    bias,
                });
            }
            tag => {
                return Err(CdlError::Config(format!(
                    "unknown layer tag {tag} in {}",
                    r.path.display()
                )))
            }
        }
    }
    let epochs = r.u32()? as usize;
    let batch_size = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let seed = r.u64()?;
    let loss_count = r.u32()? as usize;
    let epoch_losses = r.f64s(loss_count)?;
    let train_accuracy = r.opt_f64()?;
    let test_accuracy = r.opt_f64()?;
    let net = TrainedNetwork {
        spec: NetworkSpec {
            input_shape,
            layers,
            class_count,
        },
        params,
        meta: TrainingMeta {
            epochs,
            batch_size,
            learning_rate,
            seed,
            epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    };
    net.spec.resolve()?;
    Ok(net)
}

/// Loads and verifies a container saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<ModelContainer> {
    let bytes = std::fs::read(path).map_err(|e| CdlError::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 1 + 32 {
        return Err(CdlError::ContainerTruncated {
            path: path.to_path_buf(),
            offset: 0,
            needed: MAGIC.len() + 4 + 1 + 32,
        });
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(CdlError::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader {
        bytes: payload,
        offset: 0,
        path,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CdlError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CdlError::UnsupportedVersion {
            version,
            path: path.to_path_buf(),
        });
    }
    let kind = r.u8()?;
    let container = match kind {
        KIND_BASELINE => ModelContainer::Baseline(decode_network(&mut r)?),
        KIND_CASCADE => {
            let base = decode_network(&mut r)?;
            let train_delta = r.f64()?;
            let epsilon = r.f64()?;
            let cost_model = CostModel {
                mac: r.f64()?,
                compare: r.f64()?,
                nonlinearity: r.f64()?,
            };
            let classifier_count = r.u32()? as usize;
            let mut classifiers = Vec::with_capacity(classifier_count);
            for _ in 0..classifier_count {
                let stage_index = r.u32()? as usize;
                let classes = r.u32()? as usize;
                let features = r.u32()? as usize;
                let weights = r.f64s(classes * features)?;
                let bias = r.f64s(classes)?;
                classifiers.push(LinearClassifier {
                    weights: Tensor::new(vec![classes, features], weights)?,
                    bias,
                    stage_index,
                });
            }
            let stat_count = r.u32()? as usize;
            let mut stats = Vec::with_capacity(stat_count);
            for _ in 0..stat_count {
                stats.push(StageStats {
                    stage: r.u32()? as usize,
                    reach_fraction: r.f64()?,
                    exit_fraction: r.f64()?,
                    cumulative_cost: r.f64()?,
                    gain: r.f64()?,
                    admitted: r.u8()? != 0,
                });
            }
            ModelContainer::Cascade(Cascade::from_parts(
                base,
                classifiers,
                stats,
                train_delta,
                epsilon,
                cost_model,
            )?)
        }
        other => {
            return Err(CdlError::Config(format!(
                "unknown model kind {other} in {}",
                path.display()
            )))
        }
    };
    if r.offset != payload.len() {
        return Err(CdlError::Config(format!(
            "{} trailing bytes after the model payload in {}",
            payload.len() - r.offset,
            path.display()
        )));
    }
    Ok(container)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::BuildOptions;
    use crate::cascade::LcTrainOptions;
    use crate::data::Dataset;
    use crate::network::build_network;
    use std::path::PathBuf;

    fn tmp_path(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("cdl-io-test-{name}-{}.cdl", std::process::id()))
    }

    #[test]
    fn baseline_round_trip_is_bitwise() {
        let net = build_network(&NetworkSpec::table1(), 7).unwrap();
        let path = tmp_path("baseline");
        save_model(&ModelContainer::Baseline(net.clone()), &path).unwrap();
        let loaded = load_model(&path).unwrap().expect_baseline().unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded, net);
    }

    #[test]
    fn cascade_round_trip_is_bitwise() {
        let net = build_network(&NetworkSpec::table2(), 3).unwrap();
        let set = Dataset::synthetic(10, 3, 28, 2);
        let report = crate::cascade::build_cascade(
            &net,
            &set.images,
            &set.labels,
            &BuildOptions {
                epsilon: f64::NEG_INFINITY,
                max_stages: Some(2),
                lc: LcTrainOptions {
                    epochs: 2,
                    ..LcTrainOptions::default()
                },
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let cascade = report.cascade;
        let path = tmp_path("cascade");
        save_model(&ModelContainer::Cascade(cascade.clone()), &path).unwrap();
        let loaded = load_model(&path).unwrap().expect_cascade().unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded.base, cascade.base);
        assert_eq!(loaded.classifiers, cascade.classifiers);
        assert_eq!(loaded.stats, cascade.stats);
        assert_eq!(loaded.train_delta, cascade.train_delta);
        assert!(loaded.epsilon == cascade.epsilon || (loaded.epsilon.is_infinite() && cascade.epsilon.is_infinite()));
        assert_eq!(loaded.costs, cascade.costs);
    }

    #[test]
    fn infinite_epsilon_round_trips() {
        let net = build_network(&NetworkSpec::table1(), 0).unwrap();
        let cascade = Cascade::baseline_only(net).unwrap();
        assert!(cascade.epsilon.is_infinite());
        let path = tmp_path("inf");
        save_model(&ModelContainer::Cascade(cascade), &path).unwrap();
        let loaded = load_model(&path).unwrap().expect_cascade().unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded.epsilon, f64::INFINITY);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let net = build_network(&NetworkSpec::table1(), 1).unwrap();
        let path = tmp_path("flip");
        save_model(&ModelContainer::Baseline(net), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, CdlError::ChecksumMismatch { .. }), "got {err}");
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let net = build_network(&NetworkSpec::table1(), 1).unwrap();
        let path = tmp_path("kind");
        save_model(&ModelContainer::Baseline(net), &path).unwrap();
        let err = load_model(&path).unwrap().expect_cascade().unwrap_err();
        std::fs::remove_file(&path).ok();
        match err {
            CdlError::WrongKind { expected, found } => {
                assert_eq!((expected, found), ("cascade", "baseline"));
            }
            other => panic!("expected WrongKind, got {other}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let path = tmp_path("magic");
        let mut bytes = b"NOTMODEL".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(0);
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, CdlError::BadMagic { .. }), "got {err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let path = tmp_path("version");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.push(0);
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, CdlError::UnsupportedVersion { version: 99, .. }), "got {err}");
    }

    use crate::network::NetworkSpec;
}
