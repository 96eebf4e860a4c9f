"""rnnt_kit: an RNN transducer toolkit built from scratch on numpy.

Encoder (CNN front-end + BLSTM stack with max-pool / pyramid subsampling),
LSTM prediction network, joint network, exact lattice loss with analytic
gradients, Adam training with a sharpened learning-rate decay, greedy and
beam-search decoding with softmax temperature and n-gram shallow fusion.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
from .errors import ConfigError, DataError, NumericalError  # noqa: F401
