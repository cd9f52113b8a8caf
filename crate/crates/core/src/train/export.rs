use std::path::{Path, PathBuf};

use crate::data::SkeletonSequence;
use crate::error::{shape_err, Result};
use crate::fsutil::atomic_write;
use crate::network::Network;
use crate::tensor::Tensor;
use crate::topology::tensor_to_channel_csv;

/// Averaged topologies of one block for one prepared sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyExport {
    /// Unit mean, `C' × N × N`.
    pub per_channel: Tensor,
    /// Unit and channel mean, `N × N`.
    pub mean: Tensor,
}

pub fn averaged_topologies(net: &Network, sample: &SkeletonSequence, block: usize) -> Result<TopologyExport> {
    let x = sample.to_tensor();
    let per_channel = net.averaged_topology(block, &x)?;
    let mean = net.averaged_topology_2d(block, &x)?;
    Ok(TopologyExport { per_channel, mean })
}

/// Row-per-line CSV of an `N × N` matrix.
pub fn matrix_csv(m: &Tensor) -> String {
    let n = m.shape()[1];
    m.data()
        .chunks(n)
        .map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

/// Binary greyscale PGM of `|m| / max|m| · 255`.
pub fn pgm_bytes(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let peak = m.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|v| if peak > 0.0 { (v.abs() / peak * 255.0).round() as u8 } else { 0 }));
    out
}

/// `joint,value` rows of the anchor joint's correlations.
pub fn anchor_csv(m: &Tensor, anchor: usize) -> Result<String> {
    let n = m.shape()[0];
    if anchor >= n {
        return Err(shape_err(format!("anchor joint {anchor} out of range for {n} joints")));
    }
    let mut s = String::from("joint,value\n");
    for j in 0..n {
        s += &format!("{j},{}\n", m.get(&[anchor, j]));
    }
    Ok(s)
}

/// Writes `<stem>_channels.csv`, `<stem>_mean.csv`, `<stem>_mean.pgm` and
/// `<stem>_joint<anchor>.csv` into `dir`.
pub fn export_topology(
    net: &Network,
    sample: &SkeletonSequence,
    block: usize,
    anchor: usize,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let ex = averaged_topologies(net, sample, block)?;
    let dir = dir.as_ref();
    let files = [
        (format!("{stem}_channels.csv"), tensor_to_channel_csv(&ex.per_channel).into_bytes()),
        (format!("{stem}_mean.csv"), matrix_csv(&ex.mean).into_bytes()),
        (format!("{stem}_mean.pgm"), pgm_bytes(&ex.mean)),
        (format!("{stem}_joint{anchor}.csv"), anchor_csv(&ex.mean, anchor)?.into_bytes()),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        atomic_write(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
