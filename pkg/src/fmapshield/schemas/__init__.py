from fmapshield.schemas.campaign import CampaignConfig, ErrorModel, InjectionRecord, Outcome
from fmapshield.schemas.network import FmapId, LayerConfig, LayerKind

__all__ = [
    "CampaignConfig",
    "ErrorModel",
    "FmapId",
    "InjectionRecord",
    "LayerConfig",
    "LayerKind",
    "Outcome",
]
