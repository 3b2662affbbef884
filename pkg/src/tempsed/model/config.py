"""Model configuration and the shape arithmetic derived from it.

The network is 7 conv blocks followed by a BiGRU and a linear head. The first
``temporal_pool_layers`` blocks (called x throughout) pool time by 2, every
block pools frequency by 2 until that axis reaches 1, so the output frame rate
is the input rate divided by 2^x while the parameter count does not depend
on x at all.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    temporal_pool_layers: int = 2
    conv_channels: tuple[int, ...] = (16, 32, 64, 128, 128, 128, 128)
    dropout_rate: float = 0.33
    gru_hidden: int = 128
    gru_layers: int = 2
    num_classes: int = 10
    num_mel_bins: int = 128

    def __post_init__(self) -> None:
        if not 1 <= self.temporal_pool_layers <= 6:
            raise ValueError(
                f"temporal_pool_layers must be in [1, 6], got {self.temporal_pool_layers}"
            )
        if self.temporal_pool_layers > len(self.conv_channels):
            raise ValueError("more temporal pooling layers than conv blocks")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValueError(f"invalid conv_channels {self.conv_channels}")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        bins = self.num_mel_bins
        if bins < 1 or bins & (bins - 1):
            raise ValueError(f"num_mel_bins must be a power of two, got {bins}")
        if bins > 2 ** len(self.conv_channels):
            raise ValueError(
                f"{bins} mel bins cannot collapse to 1 within "
                f"{len(self.conv_channels)} blocks"
            )
        if self.gru_hidden < 1 or self.gru_layers < 1 or self.num_classes < 1:
            raise ValueError("gru_hidden, gru_layers, num_classes must be >= 1")

    @property
    def num_blocks(self) -> int:
        return len(self.conv_channels)

    @property
    def temporal_factor(self) -> int:
        return 2 ** self.temporal_pool_layers

    def pool_factors(self) -> tuple[tuple[int, int], ...]:
        """(time, frequency) pooling factor per block.

        Time halves in the first x blocks. Frequency halves until it reaches 1,
        which for 128 bins means every one of the 7 blocks.
        """
        factors = []
        freq = self.num_mel_bins
        for b in range(self.num_blocks):
            tp = 2 if b < self.temporal_pool_layers else 1
            fp = 2 if freq > 1 else 1
            freq //= fp
            factors.append((tp, fp))
        return tuple(factors)

    def output_frames(self, num_frames: int) -> int:
        """Output length T' = ceil(T / 2^x); inputs are edge-padded so the
        division is exact."""
        return -(-num_frames // self.temporal_factor)

    def with_overrides(self, **overrides) -> "ModelConfig":
        return replace(self, **overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Scaled-down config for gradient checks: same block structure, small
    enough for exhaustive finite differences."""
    base = dict(
        temporal_pool_layers=2,
        conv_channels=(2, 3, 4, 5, 5, 5, 5),
        dropout_rate=0.33,
        gru_hidden=4,
        gru_layers=2,
        num_classes=2,
        num_mel_bins=8,
    )
    base.update(overrides)
    return ModelConfig(**base)
