//! The full forecaster: hierarchical feature extractor plus Gaussian head.

pub mod checkpoint;
pub mod extractor;
pub mod grouping;
pub mod hierarchy;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
pub use extractor::{self_att_c, self_att_sc, self_att_t, time_encoding, FeatureExtractor, HierLayer, ModelConfig, Variant};
pub use grouping::{group_and_pad, ClassAssignment, ClassLayout, GroupedSeriesTensor};
pub use hierarchy::{aggregate_features, HierarchyTree};

use crate::dist::{CovarianceVars, DistributionHead, GaussianForecast};
use crate::numerics::rng::seeded;
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::Result;

/// Tape outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[S, T_out, d_model]`
    pub features: Var,
    /// `[S, T_out, D_out]`
    pub mean: Var,
    pub covariance: CovarianceVars,
}

#[derive(Debug, Clone)]
pub struct HiPerformer<F: Real = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub extractor: FeatureExtractor,
    pub head: DistributionHead,
    /// Adds `fault · (i + 1)` to every feature of series `i`, a deliberate
    /// order dependence used to exercise the equivariance checker.
    pub fault: Option<f64>,
}

impl<F: Real> HiPerformer<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::build(config, seed)
    }

    /// Like [`HiPerformer::new`] but allows `n_layers = 0`.
    pub fn new_unchecked_depth(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed)
    }

    fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let extractor = FeatureExtractor::new(&mut store, config, &mut rng)?;
        let head = DistributionHead::new(&mut store, config.d_model, config.d_out, config.kernel_dim, &mut rng);
        Ok(HiPerformer {
            config,
            store,
            extractor,
            head,
            fault: None,
        })
    }

    fn apply_fault(&self, tape: &mut Tape<'_, F>, z: Var) -> Result<Var> {
        match self.fault {
            None => Ok(z),
            Some(k) => {
                let s = tape.shape(z).to_vec();
                let per = s[1] * s[2];
                let bias = Tensor::from_fn(&s, |i| F::c(k * (i / per + 1) as f64));
                let b = tape.constant(bias);
                tape.add(z, b)
            }
        }
    }

    fn heads(&self, tape: &mut Tape<'_, F>, z: Var) -> Result<ForwardVars> {
        let mean = self.head.mean.forward(tape, z)?;
        let covariance = self.head.kernels.forward(tape, z)?;
        Ok(ForwardVars {
            features: z,
            mean,
            covariance,
        })
    }

    /// Features of `x: [S, T_in, D_in]` with class labels `c`.
    pub fn features_var(&self, tape: &mut Tape<'_, F>, x: &Tensor<F>, c: &ClassAssignment) -> Result<Var> {
        let z = self.extractor.forward(tape, x, c)?;
        self.apply_fault(tape, z)
    }

    pub fn forward(&self, tape: &mut Tape<'_, F>, x: &Tensor<F>, c: &ClassAssignment) -> Result<ForwardVars> {
        let z = self.features_var(tape, x, c)?;
        self.heads(tape, z)
    }

    /// Forecast for every node of `tree`, where `x` holds the bottom series
    /// and aggregate features are sums of leaf features.
    pub fn forward_hier(
        &self,
        tape: &mut Tape<'_, F>,
        x: &Tensor<F>,
        c: &ClassAssignment,
        tree: &HierarchyTree,
    ) -> Result<ForwardVars> {
        let z = self.features_var(tape, x, c)?;
        let all = aggregate_features(tape, z, tree)?;
        self.heads(tape, all)
    }

    pub fn features(&self, x: &Tensor<F>, c: &ClassAssignment) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.store);
        let z = self.features_var(&mut tape, x, c)?;
        Ok(tape.value(z).clone())
    }

    pub fn predict(&self, x: &Tensor<F>, c: &ClassAssignment) -> Result<GaussianForecast> {
        let mut tape = Tape::new(&self.store);
        let v = self.forward(&mut tape, x, c)?;
        GaussianForecast::from_tape(&tape, v.mean, &v.covariance.sigma)
    }

    pub fn predict_hier(&self, x: &Tensor<F>, c: &ClassAssignment, tree: &HierarchyTree) -> Result<GaussianForecast> {
        let mut tape = Tape::new(&self.store);
        let v = self.forward_hier(&mut tape, x, c, tree)?;
        GaussianForecast::from_tape(&tape, v.mean, &v.covariance.sigma)
    }
}
