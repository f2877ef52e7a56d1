//! Feature diversification through negative-similarity cross attention.
//!
//! For two part features flattened to `X₁: C×N₁` and `X₂: C×N₂`, the pixel
//! similarity is `M = X₁ᵀX₂`. Attention runs on `−M`, so the least similar
//! pixels of the other part contribute most:
//!
//! - `Y₁←₂ = X₂ · A₁₂` where each column of `A₁₂ = softmax(−Mᵀ)` is a
//!   distribution over the `N₂` pixels of `X₂`;
//! - `Y₂←₁ = X₁ · A₂₁` with `A₂₁ = softmax(−M)` column-wise.
//!
//! Every part then receives the sum of complements from all other parts,
//! `Z_i = X_i + γ·Σ_{j≠i} Y_{i←j}`. The module has no trainable parameters.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// One part-specific feature `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeature<T> {
    pub data: Tensor<T>,
    pub part_id: usize,
}

/// Complements computed from one unordered pair of parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementPair<T> {
    /// `C×N₁`: what part 1 gathers from part 2.
    pub y_1_from_2: Tensor<T>,
    /// `C×N₂`: what part 2 gathers from part 1.
    pub y_2_from_1: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdmConfig {
    pub gamma: f32,
    /// Divides the similarities before the softmax. 1 leaves them raw.
    pub temperature: f32,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            temperature: 1.0,
        }
    }
}

impl FdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Tape handles for one pair. Attention matrices are stored row-stochastic,
/// i.e. as the transposes of the column-stochastic matrices in the module
/// description: `attn_1_from_2[b, i, j]` is the weight of pixel `j` of part 2
/// for pixel `i` of part 1.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub y_1_from_2: Var,
    pub y_2_from_1: Var,
    pub attn_1_from_2: Var,
    pub attn_2_from_1: Var,
}

fn flatten<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [b, c, h, w] => tape.reshape(x, &[b, c, h * w]),
        [_, _, _] => Ok(x),
        ref s => Err(Error::Dimension {
            op: "fdm",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Pairwise complement between `x1: B×C×(H₁W₁)` and `x2: B×C×(H₂W₂)`
/// (4-D inputs are flattened row-major over space).
pub fn pcm_pair<T: Scalar>(tape: &mut Tape<T>, x1: Var, x2: Var, temperature: T) -> Result<PairVars> {
    let (a, b) = (flatten(tape, x1)?, flatten(tape, x2)?);
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa[0] != sb[0] || sa[1] != sb[1] {
        return Err(Error::config(format!(
            "part features disagree on batch/channels: {sa:?} vs {sb:?}"
        )));
    }
    let sim = tape.matmul_t(a, b, true, false)?; // B×N₁×N₂
    let neg = tape.scale(sim, -T::one() / temperature);
    let attn_1_from_2 = tape.softmax(neg, 2)?;
    let attn_2_from_1 = tape.softmax(neg, 1)?;
    let y_1_from_2 = tape.matmul_t(b, attn_1_from_2, false, true)?; // B×C×N₁
    let y_2_from_1 = tape.matmul_t(a, attn_2_from_1, false, false)?; // B×C×N₂
    Ok(PairVars {
        y_1_from_2,
        y_2_from_1,
        attn_1_from_2,
        attn_2_from_1,
    })
}

/// Single-image convenience wrapper around [`pcm_pair`].
pub fn pcm_pair_values<T: Scalar>(
    x1: &PartFeature<T>,
    x2: &PartFeature<T>,
    temperature: T,
) -> Result<ComplementPair<T>> {
    let lift = |p: &PartFeature<T>| -> Result<Tensor<T>> {
        let s = p.data.shape();
        if s.len() != 3 {
            return Err(Error::Dimension {
                op: "pcm_pair",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        p.data.clone().reshape(&[1, s[0], s[1] * s[2]])
    };
    let mut tape = Tape::new();
    let a = tape.constant(lift(x1)?);
    let b = tape.constant(lift(x2)?);
    let pv = pcm_pair(&mut tape, a, b, temperature)?;
    let c = x1.data.shape()[0];
    let y12 = tape.value(pv.y_1_from_2).clone();
    let y21 = tape.value(pv.y_2_from_1).clone();
    let n1 = y12.numel() / c;
    let n2 = y21.numel() / c;
    Ok(ComplementPair {
        y_1_from_2: y12.reshape(&[c, n1])?,
        y_2_from_1: y21.reshape(&[c, n2])?,
    })
}

fn check_parts<T: Scalar>(tape: &Tape<T>, parts: &[Var]) -> Result<()> {
    if parts.len() < 2 {
        return Err(Error::usage(format!(
            "feature diversification needs at least two parts, got {}",
            parts.len()
        )));
    }
    let c = tape.shape(parts[0]).get(1).copied();
    if let Some(&p) = parts.iter().find(|&&p| tape.shape(p).get(1).copied() != c) {
        return Err(Error::config(format!(
            "part channel counts differ: {:?} vs {:?}",
            tape.shape(parts[0]),
            tape.shape(p)
        )));
    }
    Ok(())
}

/// `Y_i = Σ_{j≠i} Y_{i←j}` summed in ascending `j`, shaped like `parts[i]`.
pub fn aggregate_complement<T: Scalar>(
    tape: &mut Tape<T>,
    parts: &[Var],
    i: usize,
    temperature: T,
) -> Result<Var> {
    check_parts(tape, parts)?;
    if i >= parts.len() {
        return Err(Error::usage(format!("part index {i} out of range")));
    }
    let mut acc: Option<Var> = None;
    for (j, &other) in parts.iter().enumerate() {
        if j == i {
            continue;
        }
        // Orient the pair the same way `diversify` does so both paths
        // produce bit-identical sums.
        let y = if i < j {
            pcm_pair(tape, parts[i], other, temperature)?.y_1_from_2
        } else {
            pcm_pair(tape, other, parts[i], temperature)?.y_2_from_1
        };
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let shape = tape.shape(parts[i]).to_vec();
    tape.reshape(acc.expect("at least one other part"), &shape)
}

/// Enhanced parts `Z_i = X_i + γ·Y_i`. Each unordered pair is evaluated once
/// and feeds both of its members.
pub fn diversify<T: Scalar>(tape: &mut Tape<T>, parts: &[Var], cfg: &FdmConfig) -> Result<Vec<Var>> {
    check_parts(tape, parts)?;
    cfg.validate()?;
    let temperature = T::lit(cfg.temperature.into());
    let gamma = T::lit(cfg.gamma.into());
    let n = parts.len();
    let mut acc: Vec<Option<Var>> = vec![None; n];
    let mut push = |tape: &mut Tape<T>, slot: usize, y: Var| -> Result<()> {
        acc[slot] = Some(match acc[slot] {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
        Ok(())
    };
    for i in 0..n {
        for j in i + 1..n {
            let pv = pcm_pair(tape, parts[i], parts[j], temperature)?;
            push(tape, i, pv.y_1_from_2)?;
            push(tape, j, pv.y_2_from_1)?;
        }
    }
    parts
        .iter()
        .zip(acc)
        .map(|(&x, y)| {
            let shape = tape.shape(x).to_vec();
            let y = tape.reshape(y.expect("n >= 2"), &shape)?;
            let scaled = tape.scale(y, gamma);
            tape.add(x, scaled)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(c: usize, h: usize, w: usize, data: &[f64]) -> PartFeature<f64> {
        PartFeature {
            data: Tensor::new(vec![c, h, w], data.to_vec()).unwrap(),
            part_id: 0,
        }
    }

    #[test]
    fn hand_example() {
        let x1 = part(1, 1, 1, &[2.0]);
        let x2 = part(1, 1, 2, &[1.0, 3.0]);
        let out = pcm_pair_values(&x1, &x2, 1.0).unwrap();
        let w0 = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((w0 - 0.9820).abs() < 1e-4);
        let y = out.y_1_from_2.data()[0];
        assert!((y - (w0 + 3.0 * (1.0 - w0))).abs() < 1e-12);
        assert!((y - 1.036).abs() < 1e-3);
        // part 2 gathers from a single pixel of part 1: weights are exactly 1
        assert_eq!(out.y_2_from_1.data(), &[2.0, 2.0]);
    }

    #[test]
    fn single_pixel_parts() {
        let x1 = part(3, 1, 1, &[1.0, -2.0, 0.5]);
        let x2 = part(3, 1, 1, &[4.0, 0.0, -1.0]);
        let out = pcm_pair_values(&x1, &x2, 1.0).unwrap();
        assert_eq!(out.y_1_from_2.data(), x2.data.data());
        assert_eq!(out.y_2_from_1.data(), x1.data.data());
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x1 = part(2, 1, 1, &[1.0, 2.0]);
        let x2 = part(3, 1, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(pcm_pair_values(&x1, &x2, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn fewer_than_two_parts_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            diversify(&mut tape, &[p], &FdmConfig::default()),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            aggregate_complement(&mut tape, &[p], 0, 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_parts_give_zero_complement() {
        let mut tape = Tape::<f64>::new();
        let parts: Vec<Var> = [4, 2, 1]
            .iter()
            .map(|&s| tape.constant(Tensor::zeros(&[1, 3, s, s])))
            .collect();
        for i in 0..3 {
            let y = aggregate_complement(&mut tape, &parts, i, 1.0).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        }
    }
}
