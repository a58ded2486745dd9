use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{init, Adam, DenseArray, Graph, NodeId, ParamStore};

/// Per-slot reward model: two ReLU hidden layers and a zero-initialized scalar output.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub params: ParamStore,
    opt: Adam,
    hidden_layers: usize,
}

impl RewardModel {
    pub fn new(input_dim: usize, hidden: usize, hidden_layers: usize, lr: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut width = input_dim;
        for l in 0..hidden_layers {
            p.insert(format!("fc{l}.weight"), init::uniform_fan_in(&mut rng, width, &[width, hidden]));
            p.insert(format!("fc{l}.bias"), init::uniform_fan_in(&mut rng, width, &[hidden]));
            width = hidden;
        }
        p.insert("out.weight", DenseArray::zeros(&[width, 1]));
        p.insert("out.bias", DenseArray::zeros(&[1]));
        let opt = Adam::new(&p, lr, 0.0);
        Self {
            params: p,
            opt,
            hidden_layers,
        }
    }

    fn build(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.hidden_layers {
            let w = g.param(&format!("fc{l}.weight"))?;
            let b = g.param(&format!("fc{l}.bias"))?;
            let z = g.matmul(h, w)?;
            let z = g.add_broadcast(z, b)?;
            h = g.relu(z);
        }
        let w = g.param("out.weight")?;
        let b = g.param("out.bias")?;
        let z = g.matmul(h, w)?;
        g.add_broadcast(z, b)
    }

    /// Predictions for each row of `inputs` (`[n, input_dim]`).
    pub fn predict(&self, inputs: &DenseArray) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(inputs.clone());
        let y = self.build(&mut g, x)?;
        Ok(g.value(y).values().to_vec())
    }

    /// Full-batch MSE steps; returns the loss before each step.
    pub fn fit(&mut self, inputs: &DenseArray, targets: &[f64], steps: usize) -> Result<Vec<f64>> {
        let target = DenseArray::new(vec![targets.len(), 1], targets.to_vec())?;
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let grads = {
                let mut g = Graph::new(&self.params);
                let x = g.input(inputs.clone());
                let y = self.build(&mut g, x)?;
                let loss = g.mse_loss(y, &target, None)?;
                losses.push(g.value(loss).item());
                g.backward(loss)?
            };
            self.opt.step(&mut self.params, &grads);
        }
        Ok(losses)
    }
}
