//! Layer graphs with hand-derived forward and backward passes.

mod batchnorm;
mod loss;
mod params;
mod propagate;
mod spec;

pub use batchnorm::{
    batchnorm_backward, batchnorm_forward_test, batchnorm_forward_train, inv_std, normalize_test, update_running,
    BatchNormCache,
};
pub use loss::hinge_loss;
pub use params::{BatchNormParams, LayerParams, ParamRole, Parameters, BN_EPSILON, BN_MOMENTUM};
pub use propagate::{
    activate, activation_grad, backward, backward_with_input, dense_forward, forward, htanh, predict, relu, sign,
    ForwardTrace, Mode,
};
pub use spec::{ActivationKind, LayerSpec, NetworkSpec, PRESETS};

#[cfg(test)]
mod tests;
