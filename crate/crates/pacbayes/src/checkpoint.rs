//! Binary checkpoint format for a trained posterior.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PBNETCK1"
//! 8       4     u32 layer-size count L (>= 2)
//! 12      4*L   u32 layer sizes, input first
//! ..      1     u8 activation tag (0 = relu)
//! ..      8     u64 init seed
//! ..      8     f64 prior sigma
//! ..      ...   per weight layer, in order:
//!               weight_mu, weight_rho      (fan_out * fan_in f64, row-major)
//!               bias_mu, bias_rho          (fan_out f64)
//!               prior_weight_mu            (fan_out * fan_in f64, row-major)
//!               prior_bias_mu              (fan_out f64)
//! ```
//!
//! No padding anywhere; the file length is fully determined by the header.
//! Trailing bytes are rejected so a corrupt or concatenated file cannot
//! silently pass.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::net::{Architecture, GaussianPosterior, LayerPosterior};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PBNETCK1";

const ACTIVATION_RELU: u8 = 0;

/// Serializes a posterior into the checkpoint byte layout.
pub fn checkpoint_bytes(post: &GaussianPosterior) -> Vec<u8> {
    let arch = post.arch();
    let mut buf = Vec::with_capacity(64 + 8 * 6 * arch.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(arch.layer_sizes().len() as u32).to_le_bytes());
    for &s in arch.layer_sizes() {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    buf.push(ACTIVATION_RELU);
    buf.extend_from_slice(&post.seed().to_le_bytes());
    buf.extend_from_slice(&post.prior_sigma().to_le_bytes());
    for layer in post.layers() {
        push_matrix(&mut buf, &layer.weight_mu);
        push_matrix(&mut buf, &layer.weight_rho);
        push_vector(&mut buf, &layer.bias_mu);
        push_vector(&mut buf, &layer.bias_rho);
        push_matrix(&mut buf, &layer.prior_weight_mu);
        push_vector(&mut buf, &layer.prior_bias_mu);
    }
    buf
}

/// Writes a posterior checkpoint to `path`.
pub fn write_checkpoint(post: &GaussianPosterior, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(post))?;
    Ok(())
}

/// Reads a posterior back from checkpoint bytes.
pub fn posterior_from_bytes(bytes: &[u8], file: &str) -> Result<GaussianPosterior> {
    let mut cursor = Cursor { bytes, pos: 0, file };
    let magic = cursor.take(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            file: file.to_string(),
            expected: format!("{CHECKPOINT_MAGIC:02x?}"),
            found: format!("{magic:02x?}"),
        });
    }
    let count = cursor.u32("layer-size count")? as usize;
    if count < 2 || count > 64 {
        return Err(Error::invalid(format!(
            "{file}: layer-size count {count} out of range"
        )));
    }
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        sizes.push(cursor.u32("layer size")? as usize);
    }
    let arch = Architecture::new(sizes)?;
    let tag = cursor.take(1, "activation tag")?[0];
    if tag != ACTIVATION_RELU {
        return Err(Error::invalid(format!(
            "{file}: unknown activation tag {tag}"
        )));
    }
    let seed = cursor.u64("seed")?;
    let prior_sigma = cursor.f64("prior sigma")?;

    let mut layers = Vec::with_capacity(arch.weight_layers());
    for w in arch.layer_sizes().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight_mu = cursor.matrix(fan_out, fan_in, "weight means")?;
        let weight_rho = cursor.matrix(fan_out, fan_in, "weight scales")?;
        let bias_mu = cursor.vector(fan_out, "bias means")?;
        let bias_rho = cursor.vector(fan_out, "bias scales")?;
        let prior_weight_mu = cursor.matrix(fan_out, fan_in, "prior weight means")?;
        let prior_bias_mu = cursor.vector(fan_out, "prior bias means")?;
        layers.push(LayerPosterior {
            weight_mu,
            weight_rho,
            bias_mu,
            bias_rho,
            prior_weight_mu,
            prior_bias_mu,
        });
    }
    if cursor.pos != bytes.len() {
        return Err(Error::invalid(format!(
            "{file}: {} trailing bytes after posterior tensors",
            bytes.len() - cursor.pos
        )));
    }
    GaussianPosterior::from_parts(arch, layers, prior_sigma, seed)
}

/// Reads a posterior checkpoint from `path`.
pub fn read_checkpoint(path: &Path) -> Result<GaussianPosterior> {
    let bytes = fs::read(path)?;
    posterior_from_bytes(&bytes, &path.display().to_string())
}

fn push_matrix(buf: &mut Vec<u8>, m: &Array2<f64>) {
    // Matrices are standard (row-major) layout by construction.
    for &v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_vector(buf: &mut Vec<u8>, v: &Array1<f64>) {
    for &x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or_else(|| {
            Error::invalid(format!("{}: length overflow reading {what}", self.file))
        })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                file: self.file.to_string(),
                offset: self.bytes.len(),
                expected: end - self.bytes.len(),
                what,
            });
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &'static str) -> Result<Array2<f64>> {
        let n = rows * cols;
        let b = self.take(8 * n, what)?;
        let data: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::invalid(format!("{}: {what}: {e}", self.file)))
    }

    fn vector(&mut self, len: usize, what: &'static str) -> Result<Array1<f64>> {
        let b = self.take(8 * len, what)?;
        let data: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array1::from_vec(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_prior, NoiseDraws, ParamGrads};
    use ndarray::array;

    fn sample_posterior() -> GaussianPosterior {
        let arch = Architecture::new(vec![3, 4, 2]).unwrap();
        let mut post = init_prior(arch.clone(), 0.04, 99).unwrap();
        // Nudge a few parameters so the posterior differs from the prior.
        let mut step = ParamGrads::zeros(&arch);
        step.layers[0].weight_mu[[1, 2]] = 0.25;
        step.layers[1].weight_rho[[0, 3]] = -0.5;
        step.layers[0].bias_mu[0] = 0.1;
        post.apply_update(&step, 1.0);
        post
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let post = sample_posterior();
        let bytes = checkpoint_bytes(&post);
        let back = posterior_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(post.arch(), back.arch());
        assert_eq!(post.seed(), back.seed());
        assert_eq!(post.prior_sigma(), back.prior_sigma());
        for (a, b) in post.layers().iter().zip(back.layers()) {
            assert_eq!(a.weight_mu, b.weight_mu);
            assert_eq!(a.weight_rho, b.weight_rho);
            assert_eq!(a.bias_mu, b.bias_mu);
            assert_eq!(a.bias_rho, b.bias_rho);
            assert_eq!(a.prior_weight_mu, b.prior_weight_mu);
            assert_eq!(a.prior_bias_mu, b.prior_bias_mu);
        }
        // Same forward behavior, same divergence.
        let arch = post.arch().clone();
        let noise = NoiseDraws::zeros(&arch);
        let x = array![[0.1, -0.2, 0.3]];
        assert_eq!(
            post.sample_forward_batch(x.view(), &noise).unwrap(),
            back.sample_forward_batch(x.view(), &noise).unwrap()
        );
        assert_eq!(post.gaussian_kl(), back.gaussian_kl());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.bin");
        let post = sample_posterior();
        write_checkpoint(&post, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(post.layers()[0].weight_mu, back.layers()[0].weight_mu);
    }

    #[test]
    fn rejects_bad_magic() {
        let post = sample_posterior();
        let mut bytes = checkpoint_bytes(&post);
        bytes[0] = b'X';
        let err = posterior_from_bytes(&bytes, "mem").unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn rejects_truncation_with_position() {
        let post = sample_posterior();
        let bytes = checkpoint_bytes(&post);
        let cut = bytes.len() - 5;
        let err = posterior_from_bytes(&bytes[..cut], "mem").unwrap_err();
        match err {
            Error::Truncated { offset, expected, .. } => {
                assert_eq!(offset, cut);
                assert!(expected > 0);
            }
            other => panic!("expected truncation error, got {other}"),
        }
    }

    #[test]
    fn rejects_trailing_bytes() {
        let post = sample_posterior();
        let mut bytes = checkpoint_bytes(&post);
        bytes.push(0);
        let err = posterior_from_bytes(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn rejects_unknown_activation_tag() {
        let post = sample_posterior();
        let mut bytes = checkpoint_bytes(&post);
        // Tag sits right after the magic, the count, and the sizes.
        let tag_pos = 8 + 4 + 4 * post.arch().layer_sizes().len();
        bytes[tag_pos] = 7;
        let err = posterior_from_bytes(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("activation"), "{err}");
    }

    #[test]
    fn rejects_header_sizes_that_disagree_with_payload() {
        let post = sample_posterior();
        let mut bytes = checkpoint_bytes(&post);
        // Inflate the first layer width; the payload is now too short.
        let size_pos = 8 + 4;
        bytes[size_pos..size_pos + 4].copy_from_slice(&100u32.to_le_bytes());
        assert!(posterior_from_bytes(&bytes, "mem").is_err());
    }
}
