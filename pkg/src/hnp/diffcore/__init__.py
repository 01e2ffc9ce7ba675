"""Minimal differentiable-computation kernel used by every model in :mod:`hnp`."""
from .dist import (
    LOG_2PI,
    SIGMA_FLOOR,
    GaussianDiag,
    gaussian_log_density,
    kl_diag_gaussian,
    positive_scale,
    reparam_sample,
)
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import (
    MLP,
    ConfigError,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    TransformerBlock,
    layer_norm,
    linear,
    multi_head_self_attention,
)
from .optim import Adam, AdamState, NonFiniteGradient, adam_step, clip_grad_norm
from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    concat,
    exp,
    gather_last,
    gelu,
    log,
    log_softmax,
    logsumexp,
    matmul,
    relu,
    softmax,
    softplus,
    sqrt,
    stack,
    tanh,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
