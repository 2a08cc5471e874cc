"""Write-once cache of unperturbed (golden) inferences, one entry per image."""

import logging
import threading
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from fmapshield.config import settings
from fmapshield.schemas.dataset import Dataset
from fmapshield.services.engine import Network, forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GoldenEntry:
    image_id: int
    label: int
    conv_outputs: dict[int, np.ndarray]  # conv layer index -> (C, H, W)
    loss: float
    top1: int


class GoldenCache:
    """Golden traces keyed by image id.

    Entries are computed in chunks on first request and never replaced. Beyond
    `limit` images, entries are recomputed on demand instead of stored.
    """

    def __init__(
        self,
        net: Network,
        dataset: Dataset,
        quant=None,
        limit: int | None = None,
    ):
        self._net = net
        self._dataset = dataset
        self._quant = quant
        self._limit = settings.golden_cache_limit if limit is None else limit
        self._entries: dict[int, GoldenEntry] = {}
        self._lock = threading.Lock()
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def _compute(self, image_ids: list[int]) -> list[GoldenEntry]:
        ids = np.asarray(image_ids, dtype=np.int64)
        trace = forward(
            self._net, self._dataset.images[ids], self._dataset.labels[ids], quant=self._quant
        )
        return [
            GoldenEntry(
                image_id=int(image_id),
                label=int(trace.labels[row]),
                conv_outputs={
                    layer: trace.layer_outputs[layer][row] for layer in self._net.conv_layers
                },
                loss=float(trace.losses[row]),
                top1=int(trace.predicted[row]),
            )
            for row, image_id in enumerate(image_ids)
        ]

    def warm(self, image_ids: Iterable[int]) -> None:
        """Compute every missing entry up front, in chunks."""
        with self._lock:
            pending = sorted({int(i) for i in image_ids} - set(self._entries))
            room = max(self._limit - len(self._entries), 0)
            if len(pending) > room:
                logger.warning(
                    f"Golden cache limit {self._limit} reached; "
                    f"{len(pending) - room} images will be recomputed on demand"
                )
                pending = pending[:room]
            chunk = settings.chunk_size
            for start in range(0, len(pending), chunk):
                for entry in self._compute(pending[start : start + chunk]):
                    self._entries[entry.image_id] = entry
        logger.debug("Golden cache warmed", extra={"entries": len(self._entries)})

    def get(self, image_id: int) -> GoldenEntry:
        entry = self._entries.get(image_id)
        if entry is not None:
            return entry
        (entry,) = self._compute([image_id])
        with self._lock:
            self.misses += 1
            if len(self._entries) < self._limit:
                entry = self._entries.setdefault(image_id, entry)
        return entry
