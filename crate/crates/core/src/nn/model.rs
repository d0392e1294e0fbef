use super::layer::{LayerCache, Mode, PrimitiveLayer};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Number of input rows (I and Q).
pub const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Skip<T = f32> {
    None,
    Identity,
    Projection(PrimitiveLayer<T>),
}

/// The atomic prunable "layer": a plain conv stack or a whole residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit<T = f32> {
    pub id: usize,
    pub body: Vec<PrimitiveLayer<T>>,
    pub skip: Skip<T>,
    /// Apply ReLU after the skip addition (ResNet basic block).
    pub post_relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T = f32> {
    pub units: Vec<Unit<T>>,
    pub head: Vec<PrimitiveLayer<T>>,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct UnitTrace<T> {
    body: Vec<LayerCache<T>>,
    skip: Option<LayerCache<T>>,
    output: Tensor<T>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    units: Vec<UnitTrace<T>>,
    head: Vec<LayerCache<T>>,
}

impl<T> Trace<T> {
    /// Output of every unit, in order.
    pub fn unit_outputs(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.units.iter().map(|u| &u.output)
    }
}

fn run_layers<T: Scalar>(
    layers: &[PrimitiveLayer<T>],
    x: &Tensor<T>,
    mode: Mode,
    mut caches: Option<&mut Vec<LayerCache<T>>>,
) -> Result<Tensor<T>> {
    let mut cur: Option<Tensor<T>> = None;
    for layer in layers {
        let (y, cache) = layer.forward(cur.as_ref().unwrap_or(x), mode)?;
        if let Some(c) = caches.as_deref_mut() {
            c.push(cache);
        }
        cur = Some(y);
    }
    Ok(cur.unwrap_or_else(|| x.clone()))
}

fn back_layers<T: Scalar>(
    layers: &[PrimitiveLayer<T>],
    caches: &[LayerCache<T>],
    dy: Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Tensor<T> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for layer in layers {
        offsets.push(off);
        off += layer.params().len();
    }
    let mut g = dy;
    for ((layer, cache), &o) in layers.iter().zip(caches).zip(&offsets).rev() {
        let n = layer.params().len();
        g = layer.backward(cache, &g, &mut grads[o..o + n]);
    }
    g
}

impl<T: Scalar> Unit<T> {
    pub fn layers(&self) -> impl Iterator<Item = &PrimitiveLayer<T>> {
        let proj = match &self.skip {
            Skip::Projection(p) => Some(p),
            _ => None,
        };
        self.body.iter().chain(proj)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut PrimitiveLayer<T>> {
        let proj = match &mut self.skip {
            Skip::Projection(p) => Some(p),
            _ => None,
        };
        self.body.iter_mut().chain(proj)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    fn num_params(&self) -> usize {
        self.layers().map(|l| l.params().len()).sum()
    }

    fn tag(&self, e: Error) -> Error {
        match e {
            Error::Shape { site, message } => Error::shape(format!("unit {} ({site})", self.id), message),
            other => other,
        }
    }

    pub fn infer_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let site = |e| self.tag(e);
        let mut shape = input.to_vec();
        for layer in &self.body {
            shape = layer.infer_shape(&shape).map_err(site)?;
        }
        let skip_shape = match &self.skip {
            Skip::None => None,
            Skip::Identity => Some(input.to_vec()),
            Skip::Projection(p) => Some(p.infer_shape(input).map_err(site)?),
        };
        if let Some(s) = skip_shape {
            if s != shape {
                return Err(Error::shape(
                    format!("unit {}", self.id),
                    format!("body output {shape:?} != skip output {s:?}"),
                ));
            }
        }
        Ok(shape)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, UnitTrace<T>)> {
        let mut body = Vec::with_capacity(self.body.len());
        let mut y = run_layers(&self.body, x, mode, Some(&mut body)).map_err(|e| self.tag(e))?;
        let mut skip = None;
        let mismatch = |s: &[usize], y: &[usize]| {
            Error::shape(
                format!("unit {}", self.id),
                format!("body output {y:?} != skip output {s:?}"),
            )
        };
        match &self.skip {
            Skip::None => {}
            Skip::Identity if x.shape() != y.shape() => return Err(mismatch(x.shape(), y.shape())),
            Skip::Identity => y.add_assign(x),
            Skip::Projection(p) => {
                let (s, cache) = p.forward(x, mode).map_err(|e| self.tag(e))?;
                if s.shape() != y.shape() {
                    return Err(mismatch(s.shape(), y.shape()));
                }
                y.add_assign(&s);
                skip = Some(cache);
            }
        }
        if self.post_relu {
            y = y.map(|v| if v > T::zero() { v } else { T::zero() });
        }
        let trace = UnitTrace {
            body,
            skip,
            output: y.clone(),
        };
        Ok((y, trace))
    }

    fn backward(&self, trace: &UnitTrace<T>, dy: Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
        let mut dy = dy;
        if self.post_relu {
            for (g, &o) in dy.data_mut().iter_mut().zip(trace.output.data()) {
                if o <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        let n_body: usize = self.body.iter().map(|l| l.params().len()).sum();
        let (body_grads, skip_grads) = grads.split_at_mut(n_body);
        let mut dx = back_layers(&self.body, &trace.body, dy.clone(), body_grads);
        match (&self.skip, &trace.skip) {
            (Skip::None, _) => {}
            (Skip::Identity, _) => dx.add_assign(&dy),
            (Skip::Projection(p), Some(cache)) => dx.add_assign(&p.backward(cache, &dy, skip_grads)),
            (Skip::Projection(_), None) => unreachable!("projection without cache"),
        }
        dx
    }
}

impl<T: Scalar> ModelGraph<T> {
    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Every layer in declaration order: unit bodies (then projections),
    /// then the head.
    pub fn layers(&self) -> impl Iterator<Item = &PrimitiveLayer<T>> {
        self.units.iter().flat_map(|u| u.layers()).chain(&self.head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut PrimitiveLayer<T>> {
        self.units
            .iter_mut()
            .flat_map(|u| u.layers_mut())
            .chain(self.head.iter_mut())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Zeroed gradient buffers matching [`Self::params`].
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            units: self
                .units
                .iter()
                .map(|u| Unit {
                    id: u.id,
                    body: u.body.iter().map(PrimitiveLayer::cast).collect(),
                    skip: match &u.skip {
                        Skip::None => Skip::None,
                        Skip::Identity => Skip::Identity,
                        Skip::Projection(p) => Skip::Projection(p.cast()),
                    },
                    post_relu: u.post_relu,
                })
                .collect(),
            head: self.head.iter().map(PrimitiveLayer::cast).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Per-unit output shapes (without batch) for a `2 × signal_length` input,
    /// followed by the logits shape. Fails naming the offending unit.
    pub fn shapes(&self, signal_length: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![INPUT_CHANNELS, signal_length];
        let mut out = Vec::with_capacity(self.units.len() + 1);
        for unit in &self.units {
            shape = unit.infer_shape(&shape)?;
            out.push(shape.clone());
        }
        for layer in &self.head {
            shape = layer.infer_shape(&shape).map_err(|e| match e {
                Error::Shape { site, message } => Error::shape(format!("head ({site})"), message),
                other => other,
            })?;
        }
        if shape != [self.num_classes] {
            return Err(Error::shape(
                "head",
                format!("output {shape:?} != [{}] logits", self.num_classes),
            ));
        }
        out.push(shape);
        Ok(out)
    }

    pub fn validate(&self, signal_length: usize) -> Result<()> {
        for (i, u) in self.units.iter().enumerate() {
            if u.id != i {
                return Err(Error::Precondition(format!("unit at position {i} has id {}", u.id)));
            }
        }
        self.shapes(signal_length).map(|_| ())
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.rank() != 3 || batch.shape()[1] != INPUT_CHANNELS {
            return Err(Error::shape(
                "input",
                format!("expected b×{INPUT_CHANNELS}×L, got {:?}", batch.shape()),
            ));
        }
        Ok(())
    }

    /// Logits for a `b × 2 × L` batch.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for unit in &self.units {
            x = unit.forward(&x, mode)?.0;
        }
        run_layers(&self.head, &x, mode, None)
    }

    /// Forward pass retaining everything needed by [`Self::backward`].
    pub fn forward_traced(&self, batch: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(batch)?;
        let mut units = Vec::with_capacity(self.units.len());
        let mut x = batch.clone();
        for unit in &self.units {
            let (y, t) = unit.forward(&x, mode)?;
            units.push(t);
            x = y;
        }
        let mut head = Vec::with_capacity(self.head.len());
        let logits = run_layers(&self.head, &x, mode, Some(&mut head))?;
        Ok((logits, Trace { units, head }))
    }

    /// Output of every unit, evaluated in one pass.
    pub fn forward_features(&self, batch: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        self.check_input(batch)?;
        let mut out = Vec::with_capacity(self.units.len());
        let mut x = batch.clone();
        for unit in &self.units {
            x = unit.forward(&x, mode)?.0;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Post-unit activation of unit `unit_index`, before the head.
    pub fn forward_collect(&self, batch: &Tensor<T>, unit_index: usize, mode: Mode) -> Result<Tensor<T>> {
        if unit_index >= self.units.len() {
            return Err(Error::IndexOutOfRange {
                what: "unit",
                index: unit_index,
                len: self.units.len(),
            });
        }
        self.check_input(batch)?;
        let mut x = batch.clone();
        for unit in &self.units[..=unit_index] {
            x = unit.forward(&x, mode)?.0;
        }
        Ok(x)
    }

    /// Parameter gradients (in [`Self::params`] order) for an upstream
    /// gradient on the logits.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut grads = self.zero_grads();
        let n_units: usize = self.units.iter().map(Unit::num_params).sum();
        let (unit_grads, head_grads) = grads.split_at_mut(n_units);
        let mut g = back_layers(&self.head, &trace.head, dlogits.clone(), head_grads);
        let mut end = n_units;
        for (unit, ut) in self.units.iter().zip(&trace.units).rev() {
            let start = end - unit.num_params();
            g = unit.backward(ut, g, &mut unit_grads[start..end]);
            end = start;
        }
        grads
    }

    /// Applies BatchNorm running-statistics updates from a train-mode trace.
    pub fn commit_stats(&mut self, trace: &Trace<T>) {
        for (unit, ut) in self.units.iter_mut().zip(&trace.units) {
            for (layer, cache) in unit.body.iter_mut().zip(&ut.body) {
                layer.commit_stats(cache);
            }
            if let (Skip::Projection(p), Some(cache)) = (&mut unit.skip, &ut.skip) {
                p.commit_stats(cache);
            }
        }
        for (layer, cache) in self.head.iter_mut().zip(&trace.head) {
            layer.commit_stats(cache);
        }
    }
}
