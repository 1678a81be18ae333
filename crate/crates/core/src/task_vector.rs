//! Task vectors in three parametrizations.
//!
//! Every variant owns a flat array of trainable adapter parameters and maps it
//! to a dense displacement over the layout it was created for:
//!
//! * `Fft`: the displacement itself, over every entry.
//! * `Lora`: a `B (out×r) · A (r×in)` pair per backbone weight matrix.
//! * `Ia3`: a row-scaling vector `l` per backbone weight matrix, giving
//!   `θ₀ ⊙ ((l − 1) ⊗ 1)`.
//!
//! The parameter-efficient variants leave backbone biases untouched and
//! displace head entries densely.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamLayout, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Variant {
    Fft,
    Lora { rank: usize },
    Ia3,
}

impl Variant {
    pub fn is_peft(self) -> bool {
        !matches!(self, Variant::Fft)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fft => "fft",
            Variant::Lora { .. } => "lora",
            Variant::Ia3 => "ia3",
        }
    }
}

/// Where one entry's displacement comes from inside the adapter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Dense { entry: usize, at: usize },
    Lora { entry: usize, rank: usize, b: usize, a: usize },
    Ia3 { entry: usize, l: usize },
}

impl Segment {
    pub fn entry(&self) -> usize {
        match *self {
            Segment::Dense { entry, .. } | Segment::Lora { entry, .. } | Segment::Ia3 { entry, .. } => {
                entry
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    variant: Variant,
    layout: Arc<ParamLayout>,
    segments: Vec<Segment>,
    params: Vec<f64>,
}

fn plan(variant: Variant, layout: &ParamLayout) -> Result<(Vec<Segment>, usize)> {
    let mut segments = Vec::new();
    let mut at = 0usize;
    for (i, e) in layout.entries().iter().enumerate() {
        let adapted = e.kind == EntryKind::BackboneWeight && e.shape.len() == 2;
        match variant {
            Variant::Fft => {
                segments.push(Segment::Dense { entry: i, at });
                at += e.numel();
            }
            Variant::Lora { rank } => {
                if rank == 0 {
                    return Err(Error::validation("LoRA rank must be at least 1"));
                }
                if adapted {
                    let (out, inp) = e.matrix_dims();
                    segments.push(Segment::Lora {
                        entry: i,
                        rank,
                        b: at,
                        a: at + out * rank,
                    });
                    at += out * rank + rank * inp;
                } else if e.kind.is_head() {
                    segments.push(Segment::Dense { entry: i, at });
                    at += e.numel();
                }
            }
            Variant::Ia3 => {
                if adapted {
                    segments.push(Segment::Ia3 { entry: i, l: at });
                    at += e.matrix_dims().0;
                } else if e.kind.is_head() {
                    segments.push(Segment::Dense { entry: i, at });
                    at += e.numel();
                }
            }
        }
    }
    Ok((segments, at))
}

impl TaskVector {
    /// A task vector whose displacement is exactly zero: zeros for dense
    /// parts, `B = 0` with Gaussian `A` for LoRA, `l = 1` for (IA)³.
    pub fn new<R: Rng + ?Sized>(variant: Variant, layout: Arc<ParamLayout>, rng: &mut R) -> Result<Self> {
        let (segments, n) = plan(variant, &layout)?;
        let mut params = vec![0.0; n];
        for s in &segments {
            match *s {
                Segment::Dense { .. } => {}
                Segment::Lora { entry, rank, a, .. } => {
                    let (_, inp) = layout.entries()[entry].matrix_dims();
                    let normal = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("valid std");
                    for p in &mut params[a..a + rank * inp] {
                        *p = normal.sample(rng);
                    }
                }
                Segment::Ia3 { entry, l } => {
                    let (out, _) = layout.entries()[entry].matrix_dims();
                    params[l..l + out].iter_mut().for_each(|p| *p = 1.0);
                }
            }
        }
        Ok(Self {
            variant,
            layout,
            segments,
            params,
        })
    }

    /// Rebuilds a task vector from stored adapter parameters.
    pub fn from_params(variant: Variant, layout: Arc<ParamLayout>, params: Vec<f64>) -> Result<Self> {
        let (segments, n) = plan(variant, &layout)?;
        if params.len() != n {
            return Err(Error::layout(format!(
                "{} task vector expects {n} adapter parameters, got {}",
                variant.name(),
                params.len()
            )));
        }
        Ok(Self {
            variant,
            layout,
            segments,
            params,
        })
    }

    /// Dense task vector with the given displacement.
    pub fn dense(displacement: &ParamVector) -> Self {
        Self::from_params(Variant::Fft, displacement.layout().clone(), displacement.values().to_vec())
            .expect("dense plan matches its own layout")
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Names of the layout entries this vector displaces.
    pub fn scope(&self) -> Vec<&str> {
        self.segments
            .iter()
            .map(|s| self.layout.entries()[s.entry()].name.as_str())
            .collect()
    }

    fn check_base(&self, theta0: &ParamVector) -> Result<()> {
        if !self.layout.is_prefix_of(theta0.layout()) {
            return Err(Error::layout(
                "task vector layout is not a prefix of the base parameter layout",
            ));
        }
        Ok(())
    }

    /// Dense displacement laid out like `theta0` (entries beyond the vector's
    /// own layout are zero).
    pub fn materialize(&self, theta0: &ParamVector) -> Result<ParamVector> {
        self.check_base(theta0)?;
        let mut out = vec![0.0; theta0.len()];
        self.materialize_into(theta0.values(), &mut out);
        Ok(ParamVector::from_raw(theta0.layout().clone(), out))
    }

    /// Writes the displacement into `out`, which must be zeroed on entry and
    /// at least as long as this vector's layout.
    pub(crate) fn materialize_into(&self, theta0: &[f64], out: &mut [f64]) {
        for s in &self.segments {
            let r = self.layout.range(s.entry());
            match *s {
                Segment::Dense { at, .. } => {
                    out[r.clone()].copy_from_slice(&self.params[at..at + r.len()]);
                }
                Segment::Lora { entry, rank, b, a } => {
                    let (rows, cols) = self.layout.entries()[entry].matrix_dims();
                    let bm = &self.params[b..b + rows * rank];
                    let am = &self.params[a..a + rank * cols];
                    let dst = &mut out[r];
                    for i in 0..rows {
                        let row = &mut dst[i * cols..(i + 1) * cols];
                        for k in 0..rank {
                            let bik = bm[i * rank + k];
                            if bik == 0.0 {
                                continue;
                            }
                            let arow = &am[k * cols..(k + 1) * cols];
                            for (d, &av) in row.iter_mut().zip(arow) {
                                *d += bik * av;
                            }
                        }
                    }
                }
                Segment::Ia3 { entry, l } => {
                    let (rows, cols) = self.layout.entries()[entry].matrix_dims();
                    let base = &theta0[r.clone()];
                    let dst = &mut out[r];
                    for i in 0..rows {
                        let scale = self.params[l + i] - 1.0;
                        for j in 0..cols {
                            dst[i * cols + j] = base[i * cols + j] * scale;
                        }
                    }
                }
            }
        }
    }

    /// Chain rule from a gradient w.r.t. the dense displacement to a gradient
    /// w.r.t. the adapter parameters. `dense_grad` may be longer than this
    /// vector's layout; trailing entries are ignored.
    pub fn pullback(&self, dense_grad: &[f64], theta0: &ParamVector) -> Result<Vec<f64>> {
        self.check_base(theta0)?;
        if dense_grad.len() < self.layout.total_len() {
            return Err(Error::layout("dense gradient shorter than the task vector layout"));
        }
        let mut g = vec![0.0; self.params.len()];
        self.pullback_into(dense_grad, theta0.values(), &mut g);
        Ok(g)
    }

    pub(crate) fn pullback_into(&self, dense_grad: &[f64], theta0: &[f64], g: &mut [f64]) {
        for s in &self.segments {
            let r = self.layout.range(s.entry());
            let gw = &dense_grad[r.clone()];
            match *s {
                Segment::Dense { at, .. } => {
                    g[at..at + r.len()].copy_from_slice(gw);
                }
                Segment::Lora { entry, rank, b, a } => {
                    let (rows, cols) = self.layout.entries()[entry].matrix_dims();
                    // dB = G Aᵀ, dA = Bᵀ G
                    for i in 0..rows {
                        let grow = &gw[i * cols..(i + 1) * cols];
                        for k in 0..rank {
                            let arow = &self.params[a + k * cols..a + (k + 1) * cols];
                            g[b + i * rank + k] = crate::linalg::dot(grow, arow);
                        }
                    }
                    for k in 0..rank {
                        for j in 0..cols {
                            let mut acc = 0.0;
                            for i in 0..rows {
                                acc += self.params[b + i * rank + k] * gw[i * cols + j];
                            }
                            g[a + k * cols + j] = acc;
                        }
                    }
                }
                Segment::Ia3 { entry, l } => {
                    let (rows, cols) = self.layout.entries()[entry].matrix_dims();
                    let base = &theta0[r];
                    for i in 0..rows {
                        g[l + i] = (0..cols).map(|j| gw[i * cols + j] * base[i * cols + j]).sum();
                    }
                }
            }
        }
    }
}
