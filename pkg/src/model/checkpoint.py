"""
Checkpoint archive: model config, named parameters and the vocabulary the
model was trained against, in one torch.save file.
"""

import logging
import os
from typing import Dict, Optional, Tuple

import torch

from src.model.config import ModelConfig
from src.model.network import PartParser, build_model
from src.model.text import Vocabulary

logger = logging.getLogger(__name__)


def save_checkpoint(
    path: str, model: PartParser, vocabulary: Vocabulary, iteration: int = 0, extra: Optional[dict] = None
):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "model_config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "vocabulary": vocabulary.to_dict(),
        "iteration": iteration,
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.info("Wrote checkpoint %s (iteration %d)", path, iteration)


def load_checkpoint(path: str, device: str = "cpu") -> Tuple[PartParser, Vocabulary, Dict]:
    """Rebuild the model and vocabulary from a checkpoint.

    Returns:
        tuple: (model in eval mode, Vocabulary, info dict with "iteration" and any extras)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location=device, weights_only=False)
    model = build_model(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.to(device).eval()
    info = dict(payload.get("extra", {}))
    info["iteration"] = int(payload.get("iteration", 0))
    return model, Vocabulary.from_dict(payload["vocabulary"]), info
