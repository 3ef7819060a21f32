//! Built-in desk-scale architectures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{DsgError, Result};
use crate::layers::dsg::mix_seed;
use crate::layers::{DsgKind, DsgLayer, OutputLayer, Pool2d};
use crate::model::{Layer, Model, ResidualBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "lenet")]
    Lenet,
    #[serde(rename = "vgg-small")]
    VggSmall,
    #[serde(rename = "resnet-small")]
    ResnetSmall,
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelName::Mlp => "mlp",
            ModelName::Lenet => "lenet",
            ModelName::VggSmall => "vgg-small",
            ModelName::ResnetSmall => "resnet-small",
        })
    }
}

impl FromStr for ModelName {
    type Err = DsgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "lenet" => Ok(Self::Lenet),
            "vgg-small" => Ok(Self::VggSmall),
            "resnet-small" => Ok(Self::ResnetSmall),
            _ => Err(DsgError::Config(format!("unknown model `{s}`"))),
        }
    }
}

/// What to build: architecture, per-sample input shape `[C, H, W]`, class
/// count and the uniform selection settings applied to every DSG layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub name: ModelName,
    pub input: [usize; 3],
    pub classes: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub seed: u64,
}

struct Builder {
    spec: ModelSpec,
    layers: Vec<Layer>,
    shape: [usize; 3],
    index: u64,
}

impl Builder {
    fn next_seed(&mut self) -> u64 {
        self.index += 1;
        mix_seed(self.spec.seed, 100 + self.index)
    }

    fn conv_layer(&mut self, n_k: usize, kernel: usize, padding: usize) -> Result<DsgLayer> {
        let [c, h, w] = self.shape;
        let g = ConvGeometry::new(c, n_k, (kernel, kernel), 1, padding, (h, w))?;
        self.shape = [n_k, g.n_p(), g.n_q()];
        let name = format!("conv{}", self.index + 1);
        let seed = self.next_seed();
        DsgLayer::new(name, DsgKind::Conv(g), self.spec.gamma, self.spec.epsilon, true, seed)
    }

    fn conv(&mut self, n_k: usize, kernel: usize, padding: usize) -> Result<()> {
        let l = self.conv_layer(n_k, kernel, padding)?;
        self.layers.push(Layer::Dsg(l));
        Ok(())
    }

    fn residual(&mut self) -> Result<()> {
        let first = self.conv_layer(self.shape[0], 3, 1)?;
        let second = self.conv_layer(self.shape[0], 3, 1)?;
        self.layers.push(Layer::Residual(ResidualBlock { first, second }));
        Ok(())
    }

    fn pool(&mut self) {
        let p = Pool2d::max(2);
        let (h, w) = p.output_hw(self.shape[1], self.shape[2]);
        self.shape = [self.shape[0], h, w];
        self.layers.push(Layer::Pool(p));
    }

    fn flatten(&mut self) {
        self.shape = [self.shape.iter().product(), 1, 1];
        self.layers.push(Layer::Flatten);
    }

    fn fc(&mut self, n_k: usize) -> Result<()> {
        let n_c = self.shape[0];
        let name = format!("fc{}", self.index + 1);
        let seed = self.next_seed();
        let l = DsgLayer::new(
            name,
            DsgKind::Fc { n_c, n_k },
            self.spec.gamma,
            self.spec.epsilon,
            true,
            seed,
        )?;
        self.shape = [n_k, 1, 1];
        self.layers.push(Layer::Dsg(l));
        Ok(())
    }

    fn finish(mut self) -> Result<Model> {
        let seed = self.next_seed();
        self.layers.push(Layer::Output(OutputLayer::new(
            "output",
            self.shape[0],
            self.spec.classes,
            seed,
        )));
        Model::new(self.spec.name.to_string(), self.layers)
    }
}

/// Builds one of the fixed architectures:
///
/// * `mlp`: flatten → FC 256 → FC 256 → linear
/// * `lenet`: conv 16@5×5 → pool → conv 32@5×5 → pool → FC 128 → linear
/// * `vgg-small`: conv 32, 32 → pool → conv 64, 64 → pool → FC 128 → linear
/// * `resnet-small`: conv 16 → 3 residual blocks with pooling → FC 64 → linear
///
/// Hidden layers are DSG layers with BN; convolutions are stride 1.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    if spec.input.contains(&0) || spec.classes < 2 {
        return Err(DsgError::Config(format!(
            "bad input shape {:?} or class count {}",
            spec.input, spec.classes
        )));
    }
    let mut b = Builder {
        spec: *spec,
        layers: Vec::new(),
        shape: spec.input,
        index: 0,
    };
    match spec.name {
        ModelName::Mlp => {
            b.flatten();
            b.fc(256)?;
            b.fc(256)?;
        }
        ModelName::Lenet => {
            b.conv(16, 5, 0)?;
            b.pool();
            b.conv(32, 5, 0)?;
            b.pool();
            b.flatten();
            b.fc(128)?;
        }
        ModelName::VggSmall => {
            b.conv(32, 3, 1)?;
            b.conv(32, 3, 1)?;
            b.pool();
            b.conv(64, 3, 1)?;
            b.conv(64, 3, 1)?;
            b.pool();
            b.flatten();
            b.fc(128)?;
        }
        ModelName::ResnetSmall => {
            b.conv(16, 3, 1)?;
            b.residual()?;
            b.pool();
            b.residual()?;
            b.pool();
            b.residual()?;
            b.flatten();
            b.fc(64)?;
        }
    }
    b.finish()
}
