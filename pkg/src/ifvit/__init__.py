"""Text-conditioned pixel diffusion on a U-shaped ViT with early or intermediate
fusion, plus FLOP accounting and attention-rank analysis."""
from .backbone import EARLY, INTERMEDIATE, CONCAT, CROSSATTN, ModelConfig, build_model, forward, param_count
from .diffusion import make_schedule, sample, training_loss, train_loop
from .analysis import count_flops
from .config import RunConfig, preset
from .estimator import TextToImageDiffusion

__all__ = [
    "EARLY", "INTERMEDIATE", "CONCAT", "CROSSATTN", "ModelConfig", "build_model", "forward", "param_count",
    "make_schedule", "sample", "training_loss", "train_loop", "count_flops", "RunConfig", "preset",
    "TextToImageDiffusion",
]

__version__ = "0.1.0"
