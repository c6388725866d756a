use autograd::{softmax_nll, Graph, StreamKey, Tensor};
use enresnet::{EnResNetModel, Mode};

use crate::error::{param, Result};

/// What an attack needs from a model: logits and input-space
/// vector-Jacobian products, both under an explicit noise key.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Whether different keys can give different logits.
    fn is_stochastic(&self) -> bool;

    fn logits(&self, x: &Tensor, key: StreamKey) -> Result<Tensor>;

    /// Logits `z` at `x` together with `∂⟨c, z⟩/∂x`, where `c = cotangent(z)`.
    fn logits_vjp(
        &self,
        x: &Tensor,
        key: StreamKey,
        cotangent: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)>;
}

/// An [`EnResNetModel`] evaluated in a fixed mode. Training mode uses batch
/// statistics and discards them, so attacking it never touches the model.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub model: &'a EnResNetModel,
    pub mode: Mode,
}

impl<'a> ModelView<'a> {
    pub fn eval(model: &'a EnResNetModel) -> Self {
        Self {
            model,
            mode: Mode::Eval,
        }
    }

    pub fn train(model: &'a EnResNetModel) -> Self {
        Self {
            model,
            mode: Mode::Train,
        }
    }
}

impl Classifier for ModelView<'_> {
    fn num_classes(&self) -> usize {
        self.model.classes()
    }

    fn is_stochastic(&self) -> bool {
        self.model.is_stochastic(self.mode)
    }

    fn logits(&self, x: &Tensor, key: StreamKey) -> Result<Tensor> {
        Ok(self.model.logits(x, self.mode, key)?)
    }

    fn logits_vjp(
        &self,
        x: &Tensor,
        key: StreamKey,
        cotangent: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let t = self.model.forward(&mut g, xv, self.mode, key, false)?;
        let z = g.value(t.logits).clone();
        let c = cotangent(&z)?;
        let mut grads = g.vjp(t.logits, &c)?;
        let dx = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((z, dx))
    }
}

impl Classifier for EnResNetModel {
    fn num_classes(&self) -> usize {
        ModelView::eval(self).num_classes()
    }

    fn is_stochastic(&self) -> bool {
        ModelView::eval(self).is_stochastic()
    }

    fn logits(&self, x: &Tensor, key: StreamKey) -> Result<Tensor> {
        ModelView::eval(self).logits(x, key)
    }

    fn logits_vjp(
        &self,
        x: &Tensor,
        key: StreamKey,
        cotangent: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        ModelView::eval(self).logits_vjp(x, key, cotangent)
    }
}

fn rows(z: &Tensor) -> Result<(usize, usize)> {
    match *z.shape() {
        [n, k] => Ok((n, k)),
        _ => param(format!("logits must be [N,K], got {:?}", z.shape())),
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predict(z: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = rows(z)?;
    Ok(z.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > r[best] { j } else { best })
        })
        .collect())
}

/// Row-wise argmin, the least-likely class.
pub fn least_likely(z: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = rows(z)?;
    Ok(z.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v < r[best] { j } else { best })
        })
        .collect())
}

/// Cotangent of the summed cross-entropy: `softmax(z) − onehot(y)` per row.
pub(crate) fn cross_entropy_cotangent(z: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = rows(z)?;
    if labels.len() != n {
        return param(format!("{n} logit rows but {} labels", labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return param(format!("label {l} outside 0..{k}"));
    }
    let mut out = Vec::with_capacity(n * k);
    for (row, &t) in z.data().chunks(k).zip(labels) {
        let (_, mut p) = softmax_nll(row, t);
        p[t] -= 1.0;
        out.extend(p);
    }
    Ok(Tensor::new(&[n, k], out)?)
}

/// Gradient of the summed cross-entropy with respect to the input.
pub fn loss_gradient(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    key: StreamKey,
) -> Result<Tensor> {
    let (_, dx) = model.logits_vjp(x, key, &mut |z| cross_entropy_cotangent(z, labels))?;
    Ok(dx)
}
