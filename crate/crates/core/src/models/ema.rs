use super::{EmbeddingTable, GeneratorNet, Parameterized};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Exponential moving average of the generator.
///
/// Tracks every generator parameter, the BatchNorm running moments, and the
/// class embeddings (so the averaged generator can synthesize
/// class-conditional samples on its own).
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub generator: GeneratorNet,
    pub embeddings: Option<EmbeddingTable>,
    pub alpha: f64,
    updates: u64,
}

/// Deep copy of the generator (and embeddings) as the initial average.
///
/// `alpha` is the weight on the previous average; `0 < alpha < 1` for
/// training, with the degenerate `0` and `1` allowed for ablations.
pub fn ema_init(
    generator: &GeneratorNet,
    embeddings: Option<&EmbeddingTable>,
    alpha: f64,
) -> Result<EmaState> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("EMA momentum must lie in [0, 1], got {alpha}")));
    }
    Ok(EmaState {
        generator: generator.clone(),
        embeddings: embeddings.cloned(),
        alpha,
        updates: 0,
    })
}

impl EmaState {
    /// Number of `update` calls since initialization.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// `θ̃ ← α·θ̃ + (1 − α)·θ` for every tracked scalar.
    pub fn update(
        &mut self,
        generator: &GeneratorNet,
        embeddings: Option<&EmbeddingTable>,
    ) -> Result<()> {
        let congruent = |a: Vec<&Tensor>, b: Vec<&Tensor>| {
            a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.same_shape(y))
        };
        if !congruent(self.generator.parameters(), generator.parameters())
            || !congruent(self.generator.buffers(), generator.buffers())
        {
            return Err(Error::shape("ema_update", "generator shapes differ"));
        }
        match (&self.embeddings, embeddings) {
            (Some(a), Some(b)) if a.weight.same_shape(&b.weight) => {}
            (None, None) => {}
            _ => return Err(Error::shape("ema_update", "embedding tables differ")),
        }

        let a = self.alpha;
        let blend = |dst: &mut Tensor, src: &Tensor| {
            for (t, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *t = a * *t + (1.0 - a) * s;
            }
        };
        for (d, s) in self.generator.parameters_mut().into_iter().zip(generator.parameters()) {
            blend(d, s);
        }
        for (d, s) in self.generator.buffers_mut().into_iter().zip(generator.buffers()) {
            blend(d, s);
        }
        if let (Some(d), Some(s)) = (self.embeddings.as_mut(), embeddings) {
            blend(&mut d.weight, &s.weight);
        }
        self.updates += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{BnMode, RngState, Stream};
    use crate::models::{build_generator, Conditioning};

    fn pair(seed: u64) -> (GeneratorNet, Option<EmbeddingTable>) {
        let mut rng = RngState::new(seed, Stream::Init);
        build_generator(4, 4, &[6], 2, Conditioning::Sum, 3, &mut rng).unwrap()
    }

    #[test]
    fn init_is_a_faithful_copy() {
        let (g, e) = pair(1);
        let ema = ema_init(&g, e.as_ref(), 0.95).unwrap();
        assert_eq!(ema.alpha, 0.95);
        let z = RngState::new(2, Stream::Noise).normal_tensor(&[5, 4]);
        let y = [0, 1, 2, 1, 0];
        let a = g.generate(e.as_ref(), &z, Some(&y), BnMode::Eval).unwrap();
        let b = ema
            .generator
            .generate(ema.embeddings.as_ref(), &z, Some(&y), BnMode::Eval)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_momenta() {
        let (g0, e0) = pair(1);
        let (g1, e1) = pair(2);

        let mut frozen = ema_init(&g0, e0.as_ref(), 1.0).unwrap();
        frozen.update(&g1, e1.as_ref()).unwrap();
        assert_eq!(frozen.generator, g0);
        assert_eq!(frozen.embeddings, e0);

        let mut follow = ema_init(&g0, e0.as_ref(), 0.0).unwrap();
        follow.update(&g1, e1.as_ref()).unwrap();
        assert_eq!(follow.generator, g1);
        assert_eq!(follow.embeddings, e1);
        assert_eq!(follow.updates(), 1);
    }

    #[test]
    fn hand_arithmetic() {
        let (mut g0, _) = pair(1);
        let mut g1 = g0.clone();
        g0.out.bias.data_mut()[0] = 0.0;
        g1.out.bias.data_mut()[0] = 1.0;
        let mut ema = ema_init(&g0, None, 0.95).unwrap();
        ema.update(&g1, None).unwrap();
        assert!((ema.generator.out.bias.data()[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (g0, e0) = pair(1);
        let mut rng = RngState::new(3, Stream::Init);
        let (g1, e1) = build_generator(4, 4, &[7], 2, Conditioning::Sum, 3, &mut rng).unwrap();
        let mut ema = ema_init(&g0, e0.as_ref(), 0.5).unwrap();
        assert!(ema.update(&g1, e1.as_ref()).is_err());
        assert!(ema.update(&g0, None).is_err());
        assert!(ema_init(&g0, None, 1.5).is_err());
    }
}
