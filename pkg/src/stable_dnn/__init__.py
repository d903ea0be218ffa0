"""Stable forward propagation for ODE-inspired deep networks.

Forward Euler, antisymmetric, leapfrog and Verlet propagation with exact
adjoint derivatives, smoothness regularization, a multi-level block
coordinate descent trainer and spectral stability diagnostics.
"""

__version__ = "0.1.0"

from .activations import Identity, ReLU, TanH, get_activation
from .classifier import (ClassifierParams, Logistic, Softmax, cross_entropy, default_hypothesis,
                         error_rate, logistic_hyp, newton_pcg_classify, softmax_hyp)
from .datasets import (LabeledSet, gen_ellipses, gen_peaks, gen_swiss_roll, generate, load_mnist_idx,
                       read_idx, write_idx)
from .model_io import load_model, save_model
from .numerics import (AntisymmetricView, ContractError, Conv3x3, Dense, LinearOperator, NegDef,
                       NumericalBreakdown, PcgConfig, pcg_solve)
from .propagation import (SCHEMES, DivergenceError, NetworkWeights, PropagationTrace, WeightGradient, forward,
                          gauss_newton_matvec, jvp, vjp)
from .regularization import RegConfig, neumann_laplacian, spatial_smooth, time_smooth, weight_decay
from .stability import StabilityReport, assess, jacobian_at, phase_trace
from .training import (LevelSchedule, NetworkSpec, TrainConfig, TrainReport, bcd_train, multilevel_train,
                       prolongate)
