use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const ADAM_MAGIC: &[u8; 5] = b"SELA1";

/// First/second moment estimates and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam step, `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], hp: AdamHyper) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grad.len() },
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        Ok(())
    }

    /// `SELA1`, u64 step, u32 length, then `m` and `v` as little-endian f64.
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(ADAM_MAGIC)?;
        out.write_all(&self.step.to_le_bytes())?;
        out.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for x in self.m.iter().chain(&self.v) {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(bytes: &[u8], origin: &str) -> Result<Self> {
        let header = ADAM_MAGIC.len() + 12;
        if bytes.len() < header || &bytes[..5] != ADAM_MAGIC {
            return Err(Error::load(origin, "not an optimizer state file (bad magic)"));
        }
        let step = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let body = &bytes[header..];
        if body.len() != 16 * len {
            return Err(Error::load(
                origin,
                format!("expected {} moment bytes, found {}", 16 * len, body.len()),
            ));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = vals.iter().position(|x| !x.is_finite()) {
            return Err(Error::load(origin, format!("non-finite moment at index {i}")));
        }
        let (m, v) = vals.split_at(len);
        Ok(Self {
            m: m.to_vec(),
            v: v.to_vec(),
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(17 + 16 * self.m.len());
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read(&fs::read(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HP: AdamHyper = AdamHyper {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        st.apply(&mut p, &[2.0, -0.5, 0.0], HP).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] - 1.1).abs() < 1e-8);
        assert_eq!(p[2], 1.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn matches_hand_computed_second_step() {
        // g1 = 1, g2 = 3: m = 0.39, v = 0.009999 -> m_hat = 0.39/0.19, v_hat = 0.009999/0.001999
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        st.apply(&mut p, &[1.0], HP).unwrap();
        let after_one = p[0];
        st.apply(&mut p, &[3.0], HP).unwrap();
        let m_hat = 0.39 / 0.19;
        let v_hat: f64 = 0.009_999 / 0.001_999;
        let expected = after_one - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.3, -0.7];
        st.apply(&mut p, &[0.0, 0.0], HP).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn round_trip_and_corruption() {
        let mut st = AdamState::new(4);
        let mut p = vec![0.0; 4];
        st.apply(&mut p, &[1.0, 2.0, 3.0, 4.0], HP).unwrap();
        let mut buf = Vec::new();
        st.write(&mut buf).unwrap();
        assert_eq!(AdamState::read(&buf, "mem").unwrap(), st);
        assert!(AdamState::read(&buf[..buf.len() - 1], "mem").is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(AdamState::read(&bad, "mem").is_err());
        assert!(st.apply(&mut [0.0; 3], &[0.0; 3], HP).is_err());
    }
}
