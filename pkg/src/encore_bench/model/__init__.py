from .bundle import Batch, ModalityBundle, build_bundle, make_batch
from .config import ABLATIONS, ModelConfig
from .encore import Encore, gaussian_kld
from .train import TrainResult, predict, total_loss, train

__all__ = [
    "ABLATIONS",
    "Batch",
    "Encore",
    "ModalityBundle",
    "ModelConfig",
    "TrainResult",
    "build_bundle",
    "gaussian_kld",
    "make_batch",
    "predict",
    "total_loss",
    "train",
]
