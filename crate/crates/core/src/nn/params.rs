use rand::Rng;
use serde::{Deserialize, Serialize};

/// Offset and length of one parameter tensor inside the flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn get<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.range()]
    }

    pub fn get_mut<'a, T>(&self, params: &'a mut [T]) -> &'a mut [T] {
        &mut params[self.range()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub init: Option<Init>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter tensors in registration order.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    len: usize,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamRef {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let len = shape.iter().product();
        let r = ParamRef {
            offset: self.len,
            len,
        };
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init: Some(init),
        });
        self.len += len;
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Draws initial values for `specs` in order.
pub fn initialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(specs.iter().map(ParamSpec::numel).sum());
    for s in specs {
        let n = s.numel();
        match s.init.unwrap_or(Init::Zeros) {
            Init::Zeros => out.extend(std::iter::repeat(0.0).take(n)),
            Init::Ones => out.extend(std::iter::repeat(1.0).take(n)),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                out.extend((0..n).map(|_| rng.gen_range(-bound..bound)));
            }
            Init::Normal(sd) => {
                use rand_distr::{Distribution, Normal};
                let d = Normal::new(0.0, sd).expect("positive sd");
                out.extend((0..n).map(|_| d.sample(rng)));
            }
        }
    }
    out
}
