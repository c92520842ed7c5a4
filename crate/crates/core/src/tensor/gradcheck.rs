use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Real, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub eps: f64,
    /// Number of coordinates to sample; all are checked when fewer exist.
    pub coords: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            coords: 20,
            seed: 0,
            floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
}

/// Compares backprop against central differences on sampled coordinates of
/// the trainable parameters. Frozen parameters are never perturbed.
pub fn check_gradients<F, L>(loss: L, params: &ParamStore<F>, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Real,
    L: Fn(&ParamStore<F>) -> Result<(Tape<F>, Var)>,
{
    let (tape, out) = loss(params)?;
    let grads = tape.backprop(out)?;

    let mut space: Vec<(String, usize)> = Vec::new();
    for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
        space.extend((0..p.tensor.len()).map(|i| (name.to_string(), i)));
    }
    let picks: Vec<usize> = if space.len() <= cfg.coords {
        (0..space.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = sample(&mut rng, space.len(), cfg.coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut checks = Vec::with_capacity(picks.len());
    let mut max_rel = 0.0f64;
    for pick in picks {
        let (name, index) = &space[pick];
        let analytic = grads
            .get(name)
            .map(|g| g.data()[*index].to_f64().unwrap_or(f64::NAN))
            .unwrap_or(0.0);
        let base = params.tensor(name)?.data()[*index];
        let eps = F::lit(cfg.eps);
        let mut plus = params.clone();
        plus.get_mut(name)?.tensor.data_mut()[*index] = base + eps;
        let mut minus = params.clone();
        minus.get_mut(name)?.tensor.data_mut()[*index] = base - eps;
        let step = ((base + eps) - (base - eps)).to_f64().unwrap_or(f64::NAN);
        let (tp, vp) = loss(&plus)?;
        let (tm, vm) = loss(&minus)?;
        let fp = tp.scalar(vp)?.to_f64().unwrap_or(f64::NAN);
        let fm = tm.scalar(vm)?.to_f64().unwrap_or(f64::NAN);
        let numeric = (fp - fm) / step;
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (analytic - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
        checks.push(CoordinateCheck {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        checks,
        max_rel_error: max_rel,
    })
}
