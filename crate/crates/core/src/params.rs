//! Named parameter collections.
//!
//! Every learnable structure exposes its tensors by stable dotted name. That
//! single listing drives SGD updates, gradient accumulation, finite-difference
//! checks and checkpoint serialization.

use crate::{Error, Result, Tensor};

pub trait Parameters {
    fn named(&self) -> Vec<(String, &Tensor)>;

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// A copy with every tensor set to zero, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    fn scale_all(&mut self, s: f64) {
        for (_, t) in self.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Plain SGD: `p ← p − lr · g`.
    fn sgd_step(&mut self, grads: &Self, lr: f64) -> Result<()>
    where
        Self: Sized,
    {
        for ((name, p), (_, g)) in self.named_mut().into_iter().zip(grads.named()) {
            p.axpy(-lr, g)?;
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "parameter {name} became non-finite"
                )));
            }
        }
        Ok(())
    }

    /// Copies values from `(name, tensor)` records, requiring an exact name/shape match.
    fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let mut slots = self.named_mut();
        if slots.len() != records.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                records.len()
            )));
        }
        for ((name, slot), (rname, t)) in slots.iter_mut().zip(records) {
            if name != rname || slot.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "record {rname} {:?} does not match parameter {name} {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    fn to_records(&self) -> Vec<(String, Tensor)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    items: Vec<(String, &'a Tensor)>,
) -> impl Iterator<Item = (String, &'a Tensor)> + use<'a> {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> impl Iterator<Item = (String, &'a mut Tensor)> + use<'a> {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}
