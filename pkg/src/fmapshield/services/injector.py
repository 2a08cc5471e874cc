"""Statistical single-neuron error-injection campaigns."""

import logging
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from fmapshield.config import settings
from fmapshield.core.errors import InvalidRequestError
from fmapshield.core.seeding import injection_rng
from fmapshield.schemas.campaign import (
    CampaignConfig,
    ErrorModel,
    InjectionRecord,
    InjectionSite,
    Outcome,
)
from fmapshield.schemas.dataset import Dataset
from fmapshield.schemas.network import FmapId
from fmapshield.schemas.quant import RangeProfile
from fmapshield.services.engine import Network, forward_from
from fmapshield.services.golden_cache import GoldenCache
from fmapshield.services.quantizer import (
    QMAX,
    QMIN,
    QuantScheme,
    dequantize,
    quantize,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FmapContext:
    """What an error model needs to know about the fmap it corrupts."""

    fmap: FmapId
    abs_max: float | None = None  # FP_RAND bound
    scale: float | None = None  # FXP_* step


Corruptor = Callable[..., float]


def flip_bit(code: int, bit: int) -> int:
    """XOR one bit of the 8-bit two's-complement code."""
    raw = (code & 0xFF) ^ (1 << bit)
    return raw - 256 if raw >= 128 else raw


def corrupt_value(
    original: float,
    model: ErrorModel,
    context: FmapContext,
    rng: np.random.Generator,
    bit: int | None = None,
    code: int | None = None,
) -> float:
    """Faulty replacement for one neuron value.

    `bit` (FXP_FLIP) and `code` (FXP_RAND) are drawn from `rng` when not given.
    """
    if model == ErrorModel.FP_RAND:
        if context.abs_max is None:
            raise InvalidRequestError(f"fp-rand needs a calibrated range for {context.fmap}")
        return float(np.float32(rng.uniform(-context.abs_max, context.abs_max)))
    if context.scale is None:
        raise InvalidRequestError(f"{model} needs a quantization scale for {context.fmap}")
    if model == ErrorModel.FXP_RAND:
        if code is None:
            code = int(rng.integers(QMIN, QMAX + 1))
        return dequantize(code, context.scale)
    if bit is None:
        bit = int(rng.integers(8))
    return dequantize(flip_bit(quantize(original, context.scale), bit), context.scale)


def enumerate_all_sites(
    net: Network,
    fmap: FmapId,
    image_ids: Sequence[int],
    model: ErrorModel,
    limit: int | None = None,
) -> list[InjectionSite]:
    """Every (image, h, w[, bit | code]) site of one fmap, image-major."""
    if model == ErrorModel.FP_RAND:
        raise InvalidRequestError("fp-rand has a continuous value space; sites are not enumerable")
    height, width = net.fmap_shape(fmap)
    values = 8 if model == ErrorModel.FXP_FLIP else QMAX - QMIN + 1
    total = len(image_ids) * height * width * values
    limit = settings.exhaustive_site_limit if limit is None else limit
    if total > limit:
        raise InvalidRequestError(f"{fmap} has {total} sites, above the limit of {limit}")
    sites = []
    for image_id in image_ids:
        for h in range(height):
            for w in range(width):
                for value in range(values):
                    sites.append(
                        InjectionSite(
                            image_id=image_id,
                            layer=fmap.layer,
                            channel=fmap.channel,
                            h=h,
                            w=w,
                            bit=value if model == ErrorModel.FXP_FLIP else None,
                            code=QMIN + value if model == ErrorModel.FXP_RAND else None,
                        )
                    )
    return sites


@dataclass(frozen=True)
class _Planned:
    site: InjectionSite
    original: float
    corrupted: float


class CampaignRunner:
    """Runs one campaign; per-fmap work is independent and may run on any thread."""

    def __init__(
        self,
        net: Network,
        dataset: Dataset,
        image_ids: Sequence[int],
        config: CampaignConfig,
        profile: RangeProfile | None = None,
        corruptor: Corruptor | None = None,
    ):
        if len(image_ids) == 0:
            raise InvalidRequestError("campaign split is empty")
        if profile is None:
            raise InvalidRequestError(f"{config.error_model} needs a calibration profile")
        self.net = net
        self.dataset = dataset
        self.image_ids = [int(i) for i in image_ids]
        self.config = config
        self.ranges = profile.by_fmap()
        self.quant = (
            QuantScheme.from_profile(net, profile) if config.error_model.quantized else None
        )
        self.corruptor = corruptor or corrupt_value
        self.cache = GoldenCache(net, dataset, quant=self.quant)
        fmaps = list(net.fmap_index) if config.fmaps is None else [FmapId(*f) for f in config.fmaps]
        for fmap in fmaps:
            net.check_fmap(fmap)
        self.fmaps = sorted(set(fmaps))

    def context(self, fmap: FmapId) -> FmapContext:
        scale = self.quant.scale(fmap) if self.quant is not None else None
        return FmapContext(fmap=fmap, abs_max=self.ranges[fmap].abs_max, scale=scale)

    def _check_golden(self) -> None:
        for image_id in self.image_ids:
            golden = self.cache.get(image_id)
            if golden.top1 != golden.label:
                raise InvalidRequestError(
                    f"image {image_id} is misclassified (predicted {golden.top1}, "
                    f"label {golden.label}); campaigns need correctly classified images"
                )

    def _sample(self, fmap: FmapId) -> list[_Planned]:
        model = self.config.error_model
        height, width = self.net.fmap_shape(fmap)
        context = self.context(fmap)
        planned = []
        for ordinal in range(self.config.injections_per_fmap):
            rng = injection_rng(self.config.master_seed, fmap.layer, fmap.channel, ordinal)
            image_id = self.image_ids[int(rng.integers(len(self.image_ids)))]
            h, w = int(rng.integers(height)), int(rng.integers(width))
            bit = int(rng.integers(8)) if model == ErrorModel.FXP_FLIP else None
            original = float(self.cache.get(image_id).conv_outputs[fmap.layer][fmap.channel, h, w])
            corrupted = self.corruptor(original, model, context, rng, bit=bit)
            site = InjectionSite(
                image_id=image_id, layer=fmap.layer, channel=fmap.channel, h=h, w=w, bit=bit
            )
            planned.append(_Planned(site, original, corrupted))
        return planned

    def _enumerate(self, fmap: FmapId) -> list[_Planned]:
        model = self.config.error_model
        context = self.context(fmap)
        planned = []
        for site in enumerate_all_sites(self.net, fmap, self.image_ids, model):
            golden = self.cache.get(site.image_id)
            original = float(golden.conv_outputs[fmap.layer][fmap.channel, site.h, site.w])
            corrupted = self.corruptor(
                original, model, context, None, bit=site.bit, code=site.code
            )
            planned.append(_Planned(site, original, corrupted))
        return planned

    def _evaluate(self, fmap: FmapId, planned: list[_Planned]) -> list[InjectionRecord]:
        records = []
        layer = fmap.layer
        for start in range(0, len(planned), settings.chunk_size):
            chunk = planned[start : start + settings.chunk_size]
            goldens = [self.cache.get(p.site.image_id) for p in chunk]
            activations = np.stack([g.conv_outputs[layer] for g in goldens])
            rows = np.arange(len(chunk))
            hs = np.array([p.site.h for p in chunk])
            ws = np.array([p.site.w for p in chunk])
            activations[rows, fmap.channel, hs, ws] = [p.corrupted for p in chunk]
            labels = np.array([g.label for g in goldens])
            stored = activations[rows, fmap.channel, hs, ws]
            result = forward_from(self.net, layer, activations, labels, quant=self.quant)
            for offset, (p, golden) in enumerate(zip(chunk, goldens, strict=True)):
                injected_top1 = int(result.predicted[offset])
                mismatch = injected_top1 != golden.top1
                records.append(
                    InjectionRecord(
                        ordinal=start + offset,
                        image_id=p.site.image_id,
                        layer=layer,
                        channel=fmap.channel,
                        h=p.site.h,
                        w=p.site.w,
                        bit=p.site.bit,
                        error_model=self.config.error_model,
                        original_value=p.original,
                        corrupted_value=float(stored[offset]),
                        golden_loss=golden.loss,
                        injected_loss=float(result.losses[offset]),
                        golden_top1=golden.top1,
                        injected_top1=injected_top1,
                        outcome=Outcome.MISMATCH if mismatch else Outcome.MASKED,
                    )
                )
            logger.debug(
                "Chunk evaluated", extra={"fmap": str(fmap), "done": start + len(chunk)}
            )
        return records

    def run_fmap(self, fmap: FmapId) -> list[InjectionRecord]:
        planned = self._enumerate(fmap) if self.config.exhaustive else self._sample(fmap)
        return self._evaluate(fmap, planned)

    def run(self, threads: int | None = None) -> list[InjectionRecord]:
        started = time.perf_counter()
        self.cache.warm(self.image_ids)
        self._check_golden()
        workers = max(1, min(threads or settings.threads, len(self.fmaps)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_fmap = list(pool.map(self.run_fmap, self.fmaps))
        records = sorted(
            (record for batch in per_fmap for record in batch),
            key=lambda r: (r.layer, r.channel, r.ordinal),
        )
        logger.info(
            "Campaign finished",
            extra={
                "error_model": str(self.config.error_model),
                "fmaps": len(self.fmaps),
                "injections": len(records),
                "mismatches": sum(r.outcome == Outcome.MISMATCH for r in records),
                "seconds": round(time.perf_counter() - started, 3),
            },
        )
        return records


def run_campaign(
    net: Network,
    dataset: Dataset,
    image_ids: Sequence[int],
    config: CampaignConfig,
    profile: RangeProfile | None = None,
    corruptor: Corruptor | None = None,
    threads: int | None = None,
) -> list[InjectionRecord]:
    """Inject `injections_per_fmap` single-neuron errors into every selected fmap.

    FP_RAND runs the float network; FXP_* run it fake-quantized. Exhaustive mode
    evaluates every enumerable site instead of sampling.
    """
    runner = CampaignRunner(net, dataset, image_ids, config, profile, corruptor)
    return runner.run(threads)
