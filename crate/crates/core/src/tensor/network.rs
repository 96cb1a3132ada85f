use super::{Layer, LayerCache, ParamGrads, Scalar, Tensor, TensorError};

/// A straight chain of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    layers: Vec<Layer<T>>,
}

/// Parameter gradients for every layer of a [`Network`], in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads<T> {
    pub layers: Vec<ParamGrads<T>>,
}

impl<T: Scalar> NetworkGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    /// All gradient values flattened in parameter order (weights before bias).
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect()
    }
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, layer| layer.output_shape(&shape))
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<LayerCache<T>>), TensorError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.apply(&x)?;
        }
        Ok(x)
    }

    /// Output of every layer, in order.
    pub fn activations(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>, TensorError> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.apply(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn zero_grads(&self) -> NetworkGrads<T> {
        NetworkGrads {
            layers: self.layers.iter().map(ParamGrads::zeros_for).collect(),
        }
    }

    /// Reverse pass through the whole chain; returns the input gradient.
    pub fn backward(
        &self,
        caches: &[LayerCache<T>],
        grad_out: &Tensor<T>,
        grads: &mut NetworkGrads<T>,
    ) -> Tensor<T> {
        assert_eq!(caches.len(), self.layers.len(), "one cache per layer");
        let mut g = grad_out.clone();
        for ((layer, cache), lg) in self
            .layers
            .iter()
            .zip(caches)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            g = layer.backward(cache, &g, lg);
        }
        g
    }

    /// Copies accumulated gradients into the parameter tensors' gradient slots.
    pub fn load_grads(&mut self, grads: &NetworkGrads<T>) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let Some(w) = layer.weights.as_mut() {
                w.set_grad(g.weights.clone()).expect("weight grad shape");
            }
            if let Some(b) = layer.bias.as_mut() {
                b.set_grad(g.bias.clone()).expect("bias grad shape");
            }
        }
    }

    /// Parameter tensors in topological order, weights before bias.
    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Names matching [`Network::params`] order, e.g. `prefix.3.weight`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.is_some() {
                names.push(format!("{prefix}.{i}.weight"));
            }
            if l.bias.is_some() {
                names.push(format!("{prefix}.{i}.bias"));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind.clone(),
                    weights: l.weights.as_ref().map(Tensor::cast),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }
}
