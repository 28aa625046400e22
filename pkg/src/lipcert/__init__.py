"""Certified l2 robustness radii for feedforward classifiers.

Computes provable per-sample lower bounds on the perturbation size needed to
change a prediction, from per-layer operator-norm certificates folded through
the network, and trains networks to enlarge those radii by pushing margins
past a differentiable Lipschitz estimate.
"""

from .autodiff import Tape, Tensor
from .bounds import (
    NormCertificate,
    PowerIterState,
    activation_bound,
    batchnorm_bound,
    certified_operator_norm,
    conv_norm_bound,
    exact_spectral_norm,
    network_layer_bounds,
    pool_bound,
    power_step,
    repetition_count,
)
from .certify import (
    CertificationResult,
    certify_batch,
    certify_prop1,
    certify_prop2,
    prediction_margin,
)
from .data import DatasetHandle, load_idx
from .evaluate import (
    global_lipschitz_lower,
    local_lipschitz_lower,
    min_l2_attack,
    tightness_report,
)
from .graph import (
    LipschitzBound,
    NetworkGraph,
    add_bound,
    aggregate_lipschitz,
    compose_bound,
    concat_bound,
    forward_eval,
    grad,
)
from .model_io import (
    init_params,
    load_weights,
    parse_model,
    save_weights,
    serialize_model,
)
from .training import (
    TrainConfig,
    TrainState,
    init_train_state,
    lmt_logit_adjust,
    lmt_logit_adjust_prop2,
    stabilization_alpha,
    train,
    training_lipschitz_estimate,
    warmup_c,
)

__version__ = "0.1.0"
