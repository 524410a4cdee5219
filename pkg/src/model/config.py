"""
Network hyperparameters.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

# Full-scale routing: 300 object queries, top 50 parsed by 10 parsing queries
# through 6 Q-Former blocks, giving 500 part queries.
FULL_SCALE = {
    "num_object_queries": 300,
    "num_parsing_queries": 10,
    "qformer_blocks": 6,
    "top_k": 50,
}


@dataclass
class ModelConfig:
    channels: int = 64
    num_object_queries: int = 20
    num_parsing_queries: int = 5
    qformer_blocks: int = 2
    top_k: int = 10
    text_dim: int = 64
    decoder_layers: int = 3
    num_heads: int = 4
    ffn_dim: int = 128
    scales: Tuple[int, ...] = (2, 3, 4, 5)
    early_fusion: bool = True
    use_qformer: bool = True
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        problems = []
        if not self.num_object_queries >= self.top_k >= 1:
            problems.append(
                f"need num_object_queries >= top_k >= 1, got N={self.num_object_queries}, K_top={self.top_k}"
            )
        for name in ("channels", "num_parsing_queries", "qformer_blocks", "text_dim",
                     "decoder_layers", "num_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels % self.num_heads:
            problems.append(f"channels ({self.channels}) must be divisible by num_heads ({self.num_heads})")
        if self.scales != (2, 3, 4, 5):
            problems.append(f"backbone scales must be (2, 3, 4, 5), got {self.scales}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def num_part_queries(self) -> int:
        return self.top_k * self.num_parsing_queries

    @property
    def stride(self) -> int:
        """Largest backbone stride; image sides must be multiples of it."""
        return 2 ** max(self.scales)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["scales"] = list(self.scales)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        return cls(**data)
