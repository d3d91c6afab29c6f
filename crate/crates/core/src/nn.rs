//! Convolution layers bound to parameters in a [`ParamStore`].

use crate::error::Result;
use crate::tensor::{Init, ParamId, ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Cross-correlation, weight `[out, in, k, k]`.
    Forward,
    /// Transposed convolution, weight `[in, out, k, k]`.
    Transposed,
}

/// Geometry of a layer before it is registered.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvSpec {
            kind: ConvKind::Forward,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            bias: true,
            init: Init::Msra,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::conv(in_channels, out_channels, 1, 1, 0)
    }

    /// Learnable `factor`× upsampling: kernel `2·factor`, pad `factor/2`,
    /// bilinear initialisation.
    pub fn upsample(in_channels: usize, out_channels: usize, factor: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Transposed,
            in_channels,
            out_channels,
            kernel: 2 * factor,
            stride: factor,
            pad: factor / 2,
            bias: true,
            init: Init::Bilinear,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn register<T: Real>(self, store: &mut ParamStore<T>, name: &str) -> Conv {
        let k = self.kernel;
        let shape = match self.kind {
            ConvKind::Forward => [self.out_channels, self.in_channels, k, k],
            ConvKind::Transposed => [self.in_channels, self.out_channels, k, k],
        };
        let weight = store.register(format!("{name}.weight"), shape, self.init);
        let bias = self.bias.then(|| {
            store.register(
                format!("{name}.bias"),
                [1, self.out_channels, 1, 1],
                Init::Zero,
            )
        });
        Conv {
            name: name.to_owned(),
            spec: self,
            weight,
            bias,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|id| tape.param(store, id));
        let s = &self.spec;
        match s.kind {
            ConvKind::Forward => tape.conv2d(x, w, b, s.stride, s.pad),
            ConvKind::Transposed => tape.conv_transpose2d(x, w, b, s.stride, s.pad),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn registers_weight_and_bias_shapes() {
        let mut store = ParamStore::<f32>::new();
        let c = ConvSpec::conv(3, 8, 3, 1, 1).register(&mut store, "a");
        let t = ConvSpec::upsample(8, 4, 4)
            .without_bias()
            .register(&mut store, "b");
        assert_eq!(store.get(c.weight).shape().dims(), [8, 3, 3, 3]);
        assert_eq!(store.get(c.bias.unwrap()).shape().dims(), [1, 8, 1, 1]);
        assert_eq!(store.get(t.weight).shape().dims(), [8, 4, 8, 8]);
        assert!(t.bias.is_none());
        assert_eq!(store.get(t.weight).name, "b.weight");
    }

    #[test]
    fn upsample_multiplies_extent() {
        let mut store = ParamStore::<f32>::new();
        let t = ConvSpec::upsample(2, 2, 4).register(&mut store, "up");
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 3, 5]));
        let y = t.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y).dims(), [1, 2, 12, 20]);
    }
}
