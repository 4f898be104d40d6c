//! Pseudo-label region sampling and multi-positive contrastive pretraining.
//!
//! Each iteration samples one p x p region per domain; the region's pixels
//! form one pseudo-group, pixels of different domains form different groups,
//! and the pooled embeddings are pulled together / pushed apart by a
//! multi-positive variant of the InfoNCE loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cdnet::{
    backward, forward_embedding, init_params, ArchConfig, CdcnnParams, DomainSpec, EmbeddingBatch,
};
use crate::error::{Error, Result};
use crate::hsdata::{dihedral_apply_window, normalize_cube, window_channel_major, HyperCube};
use crate::rng::{rng_from, subseed};
use crate::tensorops::{lr_at, sgd_step, Scalar, SgdConfig, Tensor4};

/// Contrastive pretraining hyperparameters.
#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    /// Region side p; a region contributes p*p same-group samples.
    pub p: usize,
    /// Softmax temperature.
    pub tau: f64,
    pub iterations: usize,
    /// Apply one shared dihedral transform per sampled region.
    pub augment: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            p: 6,
            tau: 0.7,
            iterations: 200,
            augment: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidArg("ContrastiveConfig: p must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArg(format!(
                "ContrastiveConfig: tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// One sampled region: the p x p pixel group plus its context window.
#[derive(Debug, Clone)]
pub struct Region {
    pub domain_id: String,
    /// Top-left of the p x p region in cube coordinates.
    pub row: usize,
    pub col: usize,
    pub p: usize,
    /// Context margin on each side of the region.
    pub margin: usize,
    pub bands: usize,
    /// (p + 2*margin)^2 x bands window in (row, col, band) order.
    pub window: Vec<f64>,
    pub group: usize,
}

impl Region {
    pub fn window_side(&self) -> usize {
        self.p + 2 * self.margin
    }
}

/// One contrastive iteration's samples: exactly one region per domain.
#[derive(Debug, Clone)]
pub struct RegionBatch {
    pub regions: Vec<Region>,
}

/// Sample one region per domain, uniform over positions whose context
/// window lies fully inside the image. With `augment`, one dihedral
/// transform drawn per region is applied to the whole window, keeping the
/// neighbor structure intact. Group ids are the domain positions, so groups
/// always differ across domains.
pub fn sample_regions(
    domains: &[HyperCube],
    p: usize,
    margin: usize,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<RegionBatch> {
    if domains.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if p == 0 {
        return Err(Error::InvalidArg("sample_regions: p must be >= 1".into()));
    }
    let side = p + 2 * margin;
    let mut regions = Vec::with_capacity(domains.len());
    for (group, cube) in domains.iter().enumerate() {
        if cube.height < side || cube.width < side {
            return Err(Error::InsufficientData(format!(
                "cube `{}` ({}x{}) too small for region size {p} with margin {margin}",
                cube.domain_id, cube.height, cube.width
            )));
        }
        let wr = rng.random_range(0..=cube.height - side);
        let wc = rng.random_range(0..=cube.width - side);
        let bands = cube.bands;
        let mut window = Vec::with_capacity(side * side * bands);
        for r in wr..wr + side {
            for c in wc..wc + side {
                window.extend_from_slice(cube.pixel(r, c));
            }
        }
        if augment {
            let k = rng.random_range(0..8usize);
            window = dihedral_apply_window(&window, side, bands, k)?;
        }
        regions.push(Region {
            domain_id: cube.domain_id.clone(),
            row: wr + margin,
            col: wc + margin,
            p,
            margin,
            bands,
            window,
            group,
        });
    }
    Ok(RegionBatch { regions })
}

/// Loss value plus exact gradients w.r.t. the (normalized) embeddings.
#[derive(Debug, Clone)]
pub struct InfoNceOutput<S> {
    /// Mean of the per-query losses.
    pub loss: S,
    pub per_query: Vec<S>,
    /// count x dim gradient of the mean loss.
    pub grad: Vec<S>,
}

/// Multi-positive InfoNCE over a pooled batch.
///
/// Every sample serves as a query; its key set is all other samples, and
/// its positive set R(q) holds the same-group samples excluding the query
/// itself. The per-query loss is the sum over positives of the
/// single-positive InfoNCE term, and the batch loss is the mean over
/// queries. Requires at least two groups so negatives exist.
pub fn infonce_multi<S: Scalar>(batch: &EmbeddingBatch<S>, tau: S) -> Result<InfoNceOutput<S>> {
    let count = batch.count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    if !(tau > S::zero()) {
        return Err(Error::InvalidArg(format!(
            "infonce_multi: tau must be positive, got {tau}"
        )));
    }
    let distinct = {
        let mut g = batch.groups.clone();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    if distinct < 2 {
        return Err(Error::SingleGroup);
    }
    let dim = batch.dim;

    // similarity matrix s[q][i] = (z_q . z_i) / tau
    let mut sims = vec![S::zero(); count * count];
    for q in 0..count {
        let zq = batch.vector(q);
        for i in (q + 1)..count {
            let dot = zq
                .iter()
                .zip(batch.vector(i).iter())
                .map(|(a, b)| *a * *b)
                .sum::<S>()
                / tau;
            sims[q * count + i] = dot;
            sims[i * count + q] = dot;
        }
    }

    let inv_count = S::from_f64(1.0 / count as f64);
    let mut per_query = vec![S::zero(); count];
    let mut grad = vec![S::zero(); count * dim];
    let mut weights = vec![S::zero(); count]; // dL/ds_{q,i} for the current q

    for q in 0..count {
        let row = &sims[q * count..(q + 1) * count];
        let mut max = S::neg_infinity();
        for (i, &s) in row.iter().enumerate() {
            if i != q && s > max {
                max = s;
            }
        }
        let mut denom = S::zero();
        for (i, &s) in row.iter().enumerate() {
            if i != q {
                denom += (s - max).exp();
            }
        }
        let lse = denom.ln() + max;

        let positives: Vec<usize> = (0..count)
            .filter(|&i| i != q && batch.groups[i] == batch.groups[q])
            .collect();
        let m = S::from_f64(positives.len() as f64);

        let mut loss_q = S::zero();
        for &kp in &positives {
            loss_q += lse - row[kp];
        }
        per_query[q] = loss_q;

        // dL/ds_{q,i} = (m * softmax_i - [i in R(q)]) / count
        for i in 0..count {
            weights[i] = if i == q {
                S::zero()
            } else {
                m * (row[i] - lse).exp() * inv_count
            };
        }
        for &kp in &positives {
            weights[kp] -= inv_count;
        }

        // chain into embedding gradients through s_{q,i} = z_q . z_i / tau
        let zq: Vec<S> = batch.vector(q).to_vec();
        for i in 0..count {
            let w = weights[i];
            if w == S::zero() {
                continue;
            }
            let wt = w / tau;
            let zi = batch.vector(i);
            let gq = &mut grad[q * dim..(q + 1) * dim];
            for (g, z) in gq.iter_mut().zip(zi.iter()) {
                *g += wt * *z;
            }
            let gi = &mut grad[i * dim..(i + 1) * dim];
            for (g, z) in gi.iter_mut().zip(zq.iter()) {
                *g += wt * *z;
            }
        }
    }

    let loss = per_query.iter().copied().sum::<S>() * inv_count;
    Ok(InfoNceOutput {
        loss,
        per_query,
        grad,
    })
}

/// One row of the pretraining loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Contrastive pretraining over multiple unlabeled domains.
///
/// Per iteration: sample one region per domain, embed every region pixel,
/// pool the embeddings with pseudo-group ids, take the multi-positive
/// InfoNCE loss, backpropagate, and step SGD with all learning-rate groups
/// at 1x. Inputs are z-scored per band internally.
pub fn pretrain<S: Scalar>(
    domains: &[HyperCube],
    arch: &ArchConfig,
    ccfg: &ContrastiveConfig,
    scfg: &SgdConfig,
    seed: u64,
) -> Result<(CdcnnParams<S>, Vec<IterRecord>)> {
    if domains.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "pretraining needs at least two domains, got {}",
            domains.len()
        )));
    }
    ccfg.validate()?;
    scfg.validate()?;
    arch.validate()?;

    let normed: Vec<HyperCube> = domains.iter().map(normalize_cube).collect();
    // Encoders only; heads are not used in this phase.
    let specs: Vec<DomainSpec> = normed
        .iter()
        .map(|c| DomainSpec::new(c.domain_id.clone(), c.bands, 0))
        .collect();
    let mut params: CdcnnParams<S> =
        init_params(arch, &specs, subseed(seed, "pretrain.init", 0))?;

    let margin = arch.context_margin();
    let tau = S::from_f64(ccfg.tau);
    let mut history = Vec::with_capacity(ccfg.iterations);

    for iter in 0..ccfg.iterations {
        let mut rng = rng_from(seed, "pretrain.regions", iter as u64);
        let batch = sample_regions(&normed, ccfg.p, margin, ccfg.augment, &mut rng)?;

        params.zero_grads();
        let mut pooled = EmbeddingBatch::<S>::empty(arch.channels);
        let mut caches = Vec::with_capacity(batch.regions.len());
        for region in &batch.regions {
            let side = region.window_side();
            let chw = window_channel_major(&region.window, side, region.bands);
            let scale = arch.input_scale;
            let x = Tensor4::from_vec(
                1,
                region.bands,
                side,
                side,
                chw.into_iter().map(|v| S::from_f64(v * scale)).collect(),
            )?;
            let start = pooled.count();
            let (emb, cache) = forward_embedding(&params, &region.domain_id, &x)?;
            pooled.append_group(&emb, region.group);
            caches.push((cache, start, pooled.count() - start));
        }

        let out = infonce_multi(&pooled, tau)?;
        if !out.loss.is_finite() {
            return Err(Error::NumericAbort {
                iteration: iter,
                what: "contrastive loss".to_string(),
            });
        }
        let dim = pooled.dim;
        for (cache, start, len) in &caches {
            let slice = &out.grad[start * dim..(start + len) * dim];
            backward(&mut params, cache, slice)?;
        }
        sgd_step(params.params_mut(), scfg, iter, 1.0)?;

        history.push(IterRecord {
            iteration: iter,
            lr: lr_at(iter, scfg),
            loss: out.loss.to_f64(),
        });
    }
    Ok((params, history))
}
