"""Vision-language pretraining with a jointly learned visual codebook."""
from .codebook import Codebook, QuantizationResult, gumbel_assign, nearest_codeword, quantize_sequence, vq_losses
from .errors import ConfigError, ContractError, InputError, NumericalError
from .model import CodebookVLP, build_model
from .training.config import TrainConfig, load_config

__version__ = "0.1.0"
