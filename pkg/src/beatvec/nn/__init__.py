from .gradcheck import grad_check, relative_error
from .layers import (
    DTYPE,
    ELU,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Layer,
    Linear,
    LinearTied,
    Parameter,
    Reshape,
    Sequential,
    ShapeMismatch,
    conv2d,
    conv2d_grad_input,
    conv2d_grad_weight,
    elu,
)
from .losses import (
    cosine_similarity,
    negsample_batch_loss,
    negsample_softmax_loss,
    sample_negatives,
    softmax,
    softmax_cross_entropy,
)
from .optim import SGD, DivergedTraining, sgd_step
