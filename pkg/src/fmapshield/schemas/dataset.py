from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Images (N, C, H, W) as float32 in [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    digest: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, image_ids) -> "Dataset":
        ids = np.asarray(image_ids, dtype=np.int64)
        return Dataset(self.images[ids], self.labels[ids], self.name, self.digest)
