//! Dense-matrix low-rank adapter algebra: LoRA, rank-stabilized LoRA, and
//! weight-decomposed (DoRA) updates, with analytic gradients and a
//! rank-stability probe.
//!
//! For a base matrix `W0` (n x k), adapter factors `B` (n x r) and `A`
//! (r x k), and scale `s`:
//!
//! * lora / rslora: `W' = W0 + s * B A`, with `s = alpha / r` for LoRA and
//!   `alpha / sqrt(r)` for rsLoRA.
//! * dora: `V = W0 + s * B A`, then each column is renormalized to a learned
//!   magnitude, `W'_j = m_j * V_j / ||V_j||`.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column norms below this are treated as singular directions.
pub const SINGULAR_NORM_TOLERANCE: f64 = 1e-12;

/// Adapter flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterVariant {
    Lora,
    RsLora,
    Dora,
}

impl AdapterVariant {
    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::Lora => "lora",
            AdapterVariant::RsLora => "rslora",
            AdapterVariant::Dora => "dora",
        }
    }
}

/// Rank, scale numerator, and variant of one adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub variant: AdapterVariant,
}

impl AdapterConfig {
    pub fn new(rank: usize, alpha: f64, variant: AdapterVariant) -> Result<Self> {
        let config = Self { rank, alpha, variant };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::InvalidConfig("adapter rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("adapter alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Base matrix and trainable factors. The magnitude vector is present for
/// DoRA only and holds one positive entry per column.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub base: Array2<f64>,
    /// r x k factor.
    pub down: Array2<f64>,
    /// n x r factor.
    pub up: Array2<f64>,
    /// Per-column magnitudes, length k (DoRA only).
    pub magnitude: Option<Array1<f64>>,
}

impl AdapterState {
    pub fn new(
        base: Array2<f64>,
        down: Array2<f64>,
        up: Array2<f64>,
        magnitude: Option<Array1<f64>>,
    ) -> Result<Self> {
        let (n, k) = base.dim();
        let (r_down, k_down) = down.dim();
        let (n_up, r_up) = up.dim();
        if k_down != k || n_up != n || r_down != r_up {
            return Err(Error::ShapeMismatch(format!(
                "base {n}x{k}, down {r_down}x{k_down}, up {n_up}x{r_up}"
            )));
        }
        if let Some(m) = &magnitude {
            if m.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "magnitude length {} does not match {k} columns",
                    m.len()
                )));
            }
            if m.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidParameter("magnitude entries must be positive".into()));
            }
        }
        Ok(Self { base, down, up, magnitude })
    }

    fn rank(&self) -> usize {
        self.down.dim().0
    }
}

/// `alpha / r` for LoRA and DoRA, `alpha / sqrt(r)` for rsLoRA.
pub fn scaling_factor(config: &AdapterConfig) -> f64 {
    match config.variant {
        AdapterVariant::Lora | AdapterVariant::Dora => config.alpha / config.rank as f64,
        AdapterVariant::RsLora => config.alpha / (config.rank as f64).sqrt(),
    }
}

/// Euclidean norm of each column.
pub fn column_norms(matrix: &Array2<f64>) -> Array1<f64> {
    let (_, k) = matrix.dim();
    Array1::from_iter((0..k).map(|j| matrix.column(j).dot(&matrix.column(j)).sqrt()))
}

/// Effective weight matrix under the configured variant.
pub fn effective_weight(state: &AdapterState, config: &AdapterConfig) -> Result<Array2<f64>> {
    check_rank(state, config)?;
    let scale = scaling_factor(config);
    let update = state.up.dot(&state.down) * scale;
    let composed = &state.base + &update;
    match config.variant {
        AdapterVariant::Lora | AdapterVariant::RsLora => Ok(composed),
        AdapterVariant::Dora => {
            let magnitude = state
                .magnitude
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("DoRA needs a magnitude vector".into()))?;
            let mut result = composed.clone();
            for (j, &m_j) in magnitude.iter().enumerate() {
                let norm = composed.column(j).dot(&composed.column(j)).sqrt();
                if norm < SINGULAR_NORM_TOLERANCE {
                    return Err(Error::SingularColumn { column: j, norm });
                }
                let factor = m_j / norm;
                result.column_mut(j).mapv_inplace(|v| v * factor);
            }
            Ok(result)
        }
    }
}

/// Gradients of `<upstream, effective_weight>` with respect to each
/// trainable factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    /// Same shape as `down` (r x k).
    pub down: Array2<f64>,
    /// Same shape as `up` (n x r).
    pub up: Array2<f64>,
    /// Same length as `magnitude` (DoRA only).
    pub magnitude: Option<Array1<f64>>,
}

/// Analytic chain-rule gradients of the scalar `<upstream, W'(state)>`.
///
/// For DoRA the per-column normalization contributes the projector Jacobian
/// `(I - v v^T) / ||V||` applied to the upstream column, which makes the
/// direction gradient orthogonal to the normalized column.
pub fn adapter_grad(
    state: &AdapterState,
    config: &AdapterConfig,
    upstream: &Array2<f64>,
) -> Result<AdapterGrads> {
    check_rank(state, config)?;
    if upstream.dim() != state.base.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} does not match base {:?}",
            upstream.dim(),
            state.base.dim()
        )));
    }
    let scale = scaling_factor(config);
    match config.variant {
        AdapterVariant::Lora | AdapterVariant::RsLora => Ok(AdapterGrads {
            down: state.up.t().dot(upstream) * scale,
            up: upstream.dot(&state.down.t()) * scale,
            magnitude: None,
        }),
        AdapterVariant::Dora => {
            let magnitude = state
                .magnitude
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("DoRA needs a magnitude vector".into()))?;
            let composed = &state.base + &(state.up.dot(&state.down) * scale);
            let (_, k) = composed.dim();
            let mut through_direction = Array2::zeros(composed.raw_dim());
            let mut magnitude_grad = Array1::zeros(k);
            for j in 0..k {
                let column = composed.column(j);
                let norm = column.dot(&column).sqrt();
                if norm < SINGULAR_NORM_TOLERANCE {
                    return Err(Error::SingularColumn { column: j, norm });
                }
                let unit = column.mapv(|v| v / norm);
                let g_col = upstream.column(j);
                let along = g_col.dot(&unit);
                magnitude_grad[j] = along;
                let coefficient = magnitude[j] / norm;
                let projected = g_col.to_owned() - &unit * along;
                through_direction.column_mut(j).assign(&(projected * coefficient));
            }
            Ok(AdapterGrads {
                down: state.up.t().dot(&through_direction) * scale,
                up: through_direction.dot(&state.down.t()) * scale,
                magnitude: Some(magnitude_grad),
            })
        }
    }
}

fn check_rank(state: &AdapterState, config: &AdapterConfig) -> Result<()> {
    config.validate()?;
    if state.rank() != config.rank {
        return Err(Error::ShapeMismatch(format!(
            "state rank {} does not match config rank {}",
            state.rank(),
            config.rank
        )));
    }
    Ok(())
}

/// One row of the rank-stability table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub rank: usize,
    pub variant: AdapterVariant,
    pub mean_grad_norm: f64,
}

/// Measures the expected adapter-gradient norm per rank and variant on
/// random unit-variance Gaussian factors and upstream gradients.
///
/// Trials are paired: every variant sees the same draws at a given rank and
/// trial, so the rslora/lora norm ratio is the scale ratio `sqrt(r)` exactly
/// while lora's norm decays like `1/sqrt(r)`.
pub fn rank_stability_probe(
    n: usize,
    k: usize,
    ranks: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    if n == 0 || k == 0 || trials == 0 {
        return Err(Error::InvalidParameter("probe needs n, k, trials >= 1".into()));
    }
    for &rank in ranks {
        if rank == 0 || rank > n.min(k) {
            return Err(Error::InvalidParameter(format!(
                "probe rank {rank} must lie in 1..=min(n, k) = {}",
                n.min(k)
            )));
        }
    }
    let variants = [AdapterVariant::Lora, AdapterVariant::RsLora, AdapterVariant::Dora];
    let mut rows = Vec::with_capacity(ranks.len() * variants.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let draw = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
    };
    for &rank in ranks {
        let mut sums = [0.0f64; 3];
        for _ in 0..trials {
            let down = draw(rank, k, &mut rng);
            let up = draw(n, rank, &mut rng);
            let base = draw(n, k, &mut rng);
            let upstream = draw(n, k, &mut rng);
            for (slot, variant) in variants.iter().enumerate() {
                let config = AdapterConfig::new(rank, 1.0, *variant)?;
                let magnitude = match variant {
                    AdapterVariant::Dora => {
                        let composed =
                            &base + &(up.dot(&down) * scaling_factor(&config));
                        Some(column_norms(&composed))
                    }
                    _ => None,
                };
                let state =
                    AdapterState::new(base.clone(), down.clone(), up.clone(), magnitude)?;
                let grads = adapter_grad(&state, &config, &upstream)?;
                let mut squared = grads.down.iter().map(|g| g * g).sum::<f64>()
                    + grads.up.iter().map(|g| g * g).sum::<f64>();
                if let Some(m) = &grads.magnitude {
                    squared += m.iter().map(|g| g * g).sum::<f64>();
                }
                sums[slot] += squared.sqrt();
            }
        }
        for (slot, variant) in variants.iter().enumerate() {
            rows.push(ProbeRow {
                rank,
                variant: *variant,
                mean_grad_norm: sums[slot] / trials as f64,
            });
        }
    }
    Ok(rows)
}
