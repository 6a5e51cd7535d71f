//! Record and replay of batch sequences in the checksummed container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::workload::{Batch, WorkloadSpec};
use crate::linalg::Container;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct LogMeta {
    version: u32,
    spec: WorkloadSpec,
    attract: Vec<Vec<bool>>,
}

pub const BATCH_LOG_VERSION: u32 = 1;

fn section(i: usize) -> String {
    format!("x/{i:06}")
}

pub fn batches_to_container(spec: &WorkloadSpec, batches: &[Batch]) -> Result<Container> {
    let meta = LogMeta {
        version: BATCH_LOG_VERSION,
        spec: *spec,
        attract: batches.iter().map(|b| b.attract.clone()).collect(),
    };
    let mut c = Container::new();
    c.push("meta", serde_json::to_vec(&meta)?);
    for (i, b) in batches.iter().enumerate() {
        c.push_mat(section(i), &b.x);
    }
    Ok(c)
}

pub fn batches_from_container(c: &Container) -> Result<(WorkloadSpec, Vec<Batch>)> {
    let meta: LogMeta = serde_json::from_slice(
        c.get("meta")
            .ok_or_else(|| Error::Format("batch log without meta".into()))?,
    )?;
    if meta.version != BATCH_LOG_VERSION {
        return Err(Error::Format(format!(
            "unsupported batch log version {}",
            meta.version
        )));
    }
    let batches = meta
        .attract
        .into_iter()
        .enumerate()
        .map(|(i, attract)| {
            let x = c
                .mat(&section(i))?
                .ok_or_else(|| Error::Format(format!("batch log missing {}", section(i))))?;
            Ok(Batch { x, attract })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((meta.spec, batches))
}

pub fn record_batches(
    path: impl AsRef<Path>,
    spec: &WorkloadSpec,
    batches: &[Batch],
) -> Result<()> {
    batches_to_container(spec, batches)?.write(path)
}

pub fn replay_batches(path: impl AsRef<Path>) -> Result<(WorkloadSpec, Vec<Batch>)> {
    batches_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::gen_batch;

    #[test]
    fn round_trip_is_bitwise() {
        let spec = WorkloadSpec {
            n: 16,
            d: 4,
            d_model: 10,
            ..WorkloadSpec::default()
        };
        let batches: Vec<_> = (0..3).map(|s| gen_batch(&spec, s).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batches.fbct");
        record_batches(&path, &spec, &batches).unwrap();
        let (spec2, back) = replay_batches(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(back.len(), 3);
        for (a, b) in batches.iter().zip(&back) {
            assert!(a.x.bits_eq(&b.x));
            assert_eq!(a.attract, b.attract);
        }

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }
}
