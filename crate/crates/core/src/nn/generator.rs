use serde::{Deserialize, Serialize};

use super::{conv, push_conv, Bound, ParamSet};
use crate::autograd::{Tape, Var};
use crate::error::{PdenError, Result};
use crate::tensor::{Rng, Tensor};

/// Shape of the autoencoder generators.
///
/// The encoder halves the resolution once per entry of `channels` (3×3,
/// stride 2, relu). The decoder mirrors it with nearest-neighbour upsampling
/// and 3×3 convs, then a final conv back to `in_channels` squashed by a
/// sigmoid so pixels stay in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArch {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub noise_dim: usize,
    /// Standard deviation of the AdaIN dense weights at init. The scale map
    /// starts with bias 1 and the shift map with bias 0.
    #[serde(default = "default_adain_init_std")]
    pub adain_init_std: f64,
}

fn default_adain_init_std() -> f64 {
    0.1
}

impl Default for GenArch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 28,
            channels: vec![16, 32],
            noise_dim: 16,
            adain_init_std: default_adain_init_std(),
        }
    }
}

impl GenArch {
    pub fn bottleneck_channels(&self) -> usize {
        *self.channels.last().expect("at least one encoder stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(PdenError::Config(
                "generator channels must be nonempty and positive".into(),
            ));
        }
        let factor = 1usize << self.channels.len();
        if !self.image_size.is_multiple_of(factor) || self.image_size / factor < 2 {
            return Err(PdenError::Config(format!(
                "image size {} must be divisible by {factor} with a bottleneck of at least 2×2",
                self.image_size
            )));
        }
        if self.noise_dim == 0 {
            return Err(PdenError::Config("noise_dim must be positive".into()));
        }
        if !(self.adain_init_std >= 0.0 && self.adain_init_std.is_finite()) {
            return Err(PdenError::Config("adain_init_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4
            || shape[1] != self.in_channels
            || shape[2] != self.image_size
            || shape[3] != self.image_size
        {
            return Err(PdenError::Shape(format!(
                "generator expects N×{}×{}×{}, got {shape:?}",
                self.in_channels, self.image_size, self.image_size
            )));
        }
        Ok(())
    }
}

fn init_autoencoder(arch: &GenArch, rng: &mut Rng) -> ParamSet {
    let mut ps = ParamSet::default();
    let mut cin = arch.in_channels;
    for (i, &c) in arch.channels.iter().enumerate() {
        push_conv(&mut ps, &format!("enc{i}"), cin, c, 3, rng);
        cin = c;
    }
    for i in (0..arch.channels.len()).rev() {
        let cout = if i == 0 { arch.channels[0] } else { arch.channels[i - 1] };
        push_conv(&mut ps, &format!("dec{i}"), arch.channels[i], cout, 3, rng);
    }
    push_conv(&mut ps, "out", arch.channels[0], arch.in_channels, 3, rng);
    ps
}

fn encode(tape: &Tape, arch: &GenArch, p: &Bound, x: Var) -> Result<Var> {
    arch.check_input(&tape.shape(x))?;
    let mut h = x;
    for i in 0..arch.channels.len() {
        h = tape.relu(conv(tape, p, &format!("enc{i}"), h, 2)?);
    }
    Ok(h)
}

fn decode(tape: &Tape, arch: &GenArch, p: &Bound, z: Var) -> Result<Var> {
    let mut h = z;
    for i in (0..arch.channels.len()).rev() {
        h = tape.upsample2x(h)?;
        h = tape.relu(conv(tape, p, &format!("dec{i}"), h, 1)?);
    }
    Ok(tape.sigmoid(conv(tape, p, "out", h, 1)?))
}

/// `scale(n) · (z − μ(z)) / σ(z) + shift(n)` with per-sample, per-channel
/// instance statistics of `zfeat` and dense maps of the noise.
pub fn adain(tape: &Tape, zfeat: Var, noise: Var, scale: (Var, Var), shift: (Var, Var)) -> Result<Var> {
    let normalized = tape.instance_norm(zfeat)?;
    let s = tape.add_row_bias(tape.matmul(noise, scale.0)?, scale.1)?;
    let t = tape.add_row_bias(tape.matmul(noise, shift.0)?, shift.1)?;
    tape.channel_affine(normalized, s, t)
}

/// Noise-conditioned AdaIN autoencoder `G(x, n) = G_D(AdaIN(G_E(x), n))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub arch: GenArch,
    pub params: ParamSet,
}

impl Generator {
    pub fn init(arch: GenArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = init_autoencoder(&arch, rng);
        let (d_n, c) = (arch.noise_dim, arch.bottleneck_channels());
        let std = arch.adain_init_std;
        params.push("adain.fc1.w", Tensor::randn(&[d_n, c], std, rng));
        params.push("adain.fc1.b", Tensor::ones(&[c]));
        params.push("adain.fc2.w", Tensor::randn(&[d_n, c], std, rng));
        params.push("adain.fc2.b", Tensor::zeros(&[c]));
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: GenArch, params: ParamSet) -> Result<Self> {
        Self::init(arch.clone(), &mut Rng::new(0))?
            .params
            .check_layout(&params)?;
        Ok(Self { arch, params })
    }

    /// `count` i.i.d. standard-normal noise vectors.
    pub fn sample_noise(&self, count: usize, rng: &mut Rng) -> Tensor {
        Tensor::randn(&[count, self.arch.noise_dim], 1.0, rng)
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var, noise: Var) -> Result<Var> {
        let ns = tape.shape(noise);
        let n = tape.shape(x)[0];
        if ns != [n, self.arch.noise_dim] {
            return Err(PdenError::Shape(format!(
                "noise must be {n}×{}, got {ns:?}",
                self.arch.noise_dim
            )));
        }
        let z = encode(tape, &self.arch, p, x)?;
        let styled = adain(
            tape,
            z,
            noise,
            (p.var("adain.fc1.w"), p.var("adain.fc1.b")),
            (p.var("adain.fc2.w"), p.var("adain.fc2.b")),
        )?;
        decode(tape, &self.arch, p, styled)
    }

    /// Gradient-free generation.
    pub fn generate(&self, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (xv, nv) = (tape.constant(x.clone()), tape.constant(noise.clone()));
        let out = self.forward(&tape, &p, xv, nv)?;
        Ok((*tape.value(out)).clone())
    }
}

/// Reconstruction generator: same encoder/decoder as [`Generator`], plain
/// instance normalization with a learned per-channel affine at the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGenerator {
    pub arch: GenArch,
    pub params: ParamSet,
}

impl CycleGenerator {
    pub fn init(arch: GenArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = init_autoencoder(&arch, rng);
        let c = arch.bottleneck_channels();
        params.push("in.gamma", Tensor::ones(&[1, c]));
        params.push("in.beta", Tensor::zeros(&[c]));
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: GenArch, params: ParamSet) -> Result<Self> {
        Self::init(arch.clone(), &mut Rng::new(0))?
            .params
            .check_layout(&params)?;
        Ok(Self { arch, params })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let z = encode(tape, &self.arch, p, x)?;
        let n = tape.shape(z)[0];
        let normalized = tape.instance_norm(z)?;
        let ones = tape.constant(Tensor::ones(&[n, 1]));
        let scale = tape.matmul(ones, p.var("in.gamma"))?;
        let shifted = tape.channel_affine(normalized, scale, tape.constant(Tensor::zeros(&tape.shape(scale))))?;
        let styled = tape.add_channel_bias(shifted, p.var("in.beta"))?;
        decode(tape, &self.arch, p, styled)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, &p, xv)?;
        Ok((*tape.value(out)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::instance_stats;

    fn arch() -> GenArch {
        GenArch {
            in_channels: 1,
            image_size: 8,
            channels: vec![4, 6],
            noise_dim: 3,
            adain_init_std: 0.1,
        }
    }

    fn images(rng: &mut Rng, n: usize) -> Tensor {
        let mut x = Tensor::randn(&[n, 1, 8, 8], 1.0, rng);
        x.data_mut().iter_mut().for_each(|v| *v = (v.tanh() + 1.0) / 2.0);
        x
    }

    #[test]
    fn adain_identity_affine_normalizes() {
        let tape = Tape::new();
        let mut rng = Rng::new(2);
        let z = tape.constant(Tensor::randn(&[2, 3, 4, 4], 2.0, &mut rng));
        let n = tape.constant(Tensor::randn(&[2, 5], 1.0, &mut rng));
        let zero_w = tape.constant(Tensor::zeros(&[5, 3]));
        let y = adain(
            &tape,
            z,
            n,
            (zero_w, tape.constant(Tensor::ones(&[3]))),
            (zero_w, tape.constant(Tensor::zeros(&[3]))),
        )
        .unwrap();
        let (mu, sigma) = instance_stats(&tape.value(y)).unwrap();
        assert!(mu.data().iter().all(|m| m.abs() < 1e-9));
        assert!(sigma.data().iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn adain_hand_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let n = tape.constant(Tensor::zeros(&[1, 1]));
        let w = tape.constant(Tensor::zeros(&[1, 1]));
        let y = adain(
            &tape,
            z,
            n,
            (w, tape.constant(Tensor::full(&[1], 2.0))),
            (w, tape.constant(Tensor::full(&[1], 3.0))),
        )
        .unwrap();
        let expected = [0.3167, 2.1056, 3.8944, 5.6833];
        for (a, b) in tape.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn generate_preserves_shape_and_range() {
        let mut rng = Rng::new(9);
        let g = Generator::init(arch(), &mut rng).unwrap();
        let x = images(&mut rng, 3);
        let n = g.sample_noise(3, &mut rng);
        let y = g.generate(&x, &n).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        assert_eq!(y, g.generate(&x, &n).unwrap());
        assert!(g.generate(&x, &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn cycle_preserves_shape_and_is_finite() {
        let mut rng = Rng::new(4);
        let gc = CycleGenerator::init(arch(), &mut rng).unwrap();
        let y = gc.reconstruct(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[2, 1, 8, 8]);
        assert!(y.all_finite());
        assert!(gc.reconstruct(&Tensor::zeros(&[2, 1, 16, 16])).is_err());
    }

    #[test]
    fn bad_arch_is_rejected() {
        let mut a = arch();
        a.image_size = 6;
        assert!(Generator::init(a, &mut Rng::new(0)).is_err());
    }
}
