//! Softmax-contrast (InfoNCE) loss between projected global and local
//! vectors. Scores are raw dot products scaled by a temperature; for each
//! positive pair the contrast set is the positive itself plus every local
//! vector originating from a different source image.

use ndarray::{Array2, ArrayView2};
use num_traits::Float;

use crate::{Error, Result};

/// Positive-pair index map for one batch.
#[derive(Debug, Clone)]
pub struct Pairing {
    /// (global index, local index) positive pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Source image of each local vector; locals from a different source
    /// than the positive act as its negatives.
    pub local_source: Vec<usize>,
}

impl Pairing {
    /// All-positions pairing: one global per image, `grid` locals per image
    /// laid out image-major.
    pub fn dense(n_images: usize, grid: usize) -> Self {
        let mut pairs = Vec::with_capacity(n_images * grid);
        let mut local_source = Vec::with_capacity(n_images * grid);
        for img in 0..n_images {
            for p in 0..grid {
                pairs.push((img, img * grid + p));
                local_source.push(img);
            }
        }
        Pairing { pairs, local_source }
    }

    fn validate(&self, n_globals: usize, n_locals: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Encoder("infonce pairing has no positive pairs".into()));
        }
        if self.local_source.len() != n_locals {
            return Err(Error::Encoder(format!(
                "pairing source list covers {} locals but {} were given",
                self.local_source.len(),
                n_locals
            )));
        }
        for &(g, l) in &self.pairs {
            if g >= n_globals || l >= n_locals {
                return Err(Error::Encoder(format!(
                    "positive pair ({g}, {l}) outside {n_globals} globals / {n_locals} locals"
                )));
            }
        }
        Ok(())
    }
}

/// Mean over positive pairs of -log softmax(s_pos / tau) against each
/// pair's contrast set. Non-negative; zero when every pair has no negatives.
pub fn infonce_loss<F: Float>(
    globals: ArrayView2<'_, F>,
    locals: ArrayView2<'_, F>,
    pairing: &Pairing,
    tau: F,
) -> Result<F> {
    let (loss, _, _) = infonce_impl(globals, locals, pairing, tau, false)?;
    Ok(loss)
}

/// Loss plus analytic gradients with respect to every global and local.
pub fn infonce_loss_grad<F: Float>(
    globals: ArrayView2<'_, F>,
    locals: ArrayView2<'_, F>,
    pairing: &Pairing,
    tau: F,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let (loss, dg, dl) = infonce_impl(globals, locals, pairing, tau, true)?;
    Ok((loss, dg.expect("grads requested"), dl.expect("grads requested")))
}

#[allow(clippy::type_complexity)]
fn infonce_impl<F: Float>(
    globals: ArrayView2<'_, F>,
    locals: ArrayView2<'_, F>,
    pairing: &Pairing,
    tau: F,
    with_grad: bool,
) -> Result<(F, Option<Array2<F>>, Option<Array2<F>>)> {
    if tau <= F::zero() {
        return Err(Error::Encoder("infonce temperature must be > 0".into()));
    }
    if globals.ncols() != locals.ncols() {
        return Err(Error::Encoder(format!(
            "global dim {} does not match local dim {}",
            globals.ncols(),
            locals.ncols()
        )));
    }
    pairing.validate(globals.nrows(), locals.nrows())?;

    let n_pairs = F::from(pairing.pairs.len()).expect("pair count fits in float");
    let mut dg = with_grad.then(|| Array2::<F>::zeros(globals.raw_dim()));
    let mut dl = with_grad.then(|| Array2::<F>::zeros(locals.raw_dim()));

    let mut total = F::zero();
    let mut cand: Vec<usize> = Vec::new();
    let mut scores: Vec<F> = Vec::new();
    for &(g, pos) in &pairing.pairs {
        let src = pairing.local_source[pos];
        cand.clear();
        cand.push(pos);
        cand.extend((0..locals.nrows()).filter(|&j| pairing.local_source[j] != src));

        let gvec = globals.row(g);
        scores.clear();
        scores.extend(cand.iter().map(|&j| gvec.dot(&locals.row(j)) / tau));

        // Stable log-sum-exp.
        let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
        let sum_exp = scores.iter().fold(F::zero(), |acc, &s| acc + (s - max).exp());
        let lse = max + sum_exp.ln();
        total = total + (lse - scores[0]);

        if let (Some(dg), Some(dl)) = (dg.as_mut(), dl.as_mut()) {
            for (ci, &j) in cand.iter().enumerate() {
                let w = (scores[ci] - lse).exp();
                let indicator = if ci == 0 { F::one() } else { F::zero() };
                // d loss_p / d score_j (raw dot), averaged over pairs.
                let coef = (w - indicator) / (tau * n_pairs);
                for d in 0..globals.ncols() {
                    dg[[g, d]] = dg[[g, d]] + coef * locals[[j, d]];
                    dl[[j, d]] = dl[[j, d]] + coef * globals[[g, d]];
                }
            }
        }
    }
    Ok((total / n_pairs, dg, dl))
}
