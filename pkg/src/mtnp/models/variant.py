"""Model variant records and architecture sizes."""

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence, Tuple

from mtnp.errors import ConfigError

FAMILIES = ("stnp", "jtnp", "mtnp")
LATENT_STRUCTURES = ("hierarchical", "global_only", "task_only")
POOLINGS = ("mean", "pma")
SHARINGS = ("shared", "task_specific")
ENCODER_PATHS = ("both", "latent_only", "deterministic_only")
EMBEDDINGS = ("learnable", "onehot")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str = "continuous"
    n_classes: int = 0

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ConfigError(f"task {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and self.n_classes < 2:
            raise ConfigError(f"task {self.name!r}: categorical tasks need n_classes >= 2")

    @property
    def input_width(self) -> int:
        return self.n_classes if self.kind == "categorical" else 1

    @property
    def output_width(self) -> int:
        return self.n_classes if self.kind == "categorical" else 2


def continuous_tasks(names: Sequence[str]) -> Tuple[TaskSpec, ...]:
    return tuple(TaskSpec(n) for n in names)


@dataclass(frozen=True)
class ModelDims:
    """Hidden width, head count and per-module layer counts."""

    width: int = 128
    heads: int = 4
    x_dim: int = 1
    psi_s_layers: int = 3
    psi_d_layers: int = 3
    psi_w_layers: int = 1
    psi_y_layers: int = 5
    per_task_attn: int = 3
    global_attn: int = 3
    across_task_attn: int = 2
    latent_head_layers: int = 2

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class ModelVariant:
    """Which model family to build plus the ablation switches.

    ``sharing`` and ``task_embedding`` apply to the per-task branches of
    STNP and MTNP; ``latent_structure`` other than hierarchical is only
    meaningful for MTNP.
    """

    family: str = "mtnp"
    latent_structure: str = "hierarchical"
    pooling: str = "pma"
    self_attention: bool = True
    sharing: str = "shared"
    encoder_paths: str = "both"
    task_embedding: str = "learnable"

    def __post_init__(self):
        for value, allowed, label in (
            (self.family, FAMILIES, "family"),
            (self.latent_structure, LATENT_STRUCTURES, "latent_structure"),
            (self.pooling, POOLINGS, "pooling"),
            (self.sharing, SHARINGS, "sharing"),
            (self.encoder_paths, ENCODER_PATHS, "encoder_paths"),
            (self.task_embedding, EMBEDDINGS, "task_embedding"),
        ):
            if value not in allowed:
                raise ConfigError(f"{label} must be one of {allowed}, got {value!r}")
        if self.family != "mtnp" and self.latent_structure != "hierarchical":
            raise ConfigError(f"{self.family} has no {self.latent_structure} latent structure")
        if self.family == "jtnp" and self.sharing != "shared":
            raise ConfigError("jtnp has no per-task branches to separate")

    @property
    def has_global_latent(self) -> bool:
        if self.encoder_paths == "deterministic_only":
            return False
        return self.family == "jtnp" or (
            self.family == "mtnp" and self.latent_structure in ("hierarchical", "global_only"))

    @property
    def has_task_latent(self) -> bool:
        if self.encoder_paths == "deterministic_only":
            return False
        return self.family == "stnp" or (
            self.family == "mtnp" and self.latent_structure in ("hierarchical", "task_only"))

    @property
    def uses_latent(self) -> bool:
        return self.encoder_paths != "deterministic_only"

    @property
    def uses_deterministic(self) -> bool:
        return self.encoder_paths != "latent_only"

    @property
    def uses_task_embedding(self) -> bool:
        return self.family != "jtnp" and self.sharing == "shared"

    @property
    def requires_complete_context(self) -> bool:
        return self.family == "jtnp"

    def fingerprint(self, dims: ModelDims, tasks: Sequence[TaskSpec]) -> str:
        payload = {"variant": asdict(self), "dims": asdict(dims), "tasks": [asdict(t) for t in tasks]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)


_PRESETS = {
    "mtnp": ModelVariant(),
    "stnp": ModelVariant(family="stnp", sharing="task_specific"),
    "jtnp": ModelVariant(family="jtnp"),
    "mtnp_g": ModelVariant(latent_structure="global_only"),
    "mtnp_t": ModelVariant(latent_structure="task_only"),
    "mtnp_a": ModelVariant(self_attention=False, pooling="mean"),
    "mtnp_p": ModelVariant(self_attention=False, pooling="pma"),
    "mtnp_sa": ModelVariant(self_attention=True, pooling="mean"),
    "mtnp_sp": ModelVariant(self_attention=True, pooling="pma"),
    "mtnp_s": ModelVariant(sharing="shared"),
    "mtnp_ts": ModelVariant(sharing="task_specific"),
    "stnp_s": ModelVariant(family="stnp", sharing="shared"),
    "stnp_ts": ModelVariant(family="stnp", sharing="task_specific"),
    "mtnp_l": ModelVariant(encoder_paths="latent_only"),
    "stnp_l": ModelVariant(family="stnp", sharing="task_specific", encoder_paths="latent_only"),
    "jtnp_l": ModelVariant(family="jtnp", encoder_paths="latent_only"),
    "mtnp_d": ModelVariant(encoder_paths="deterministic_only"),
    "mtnp_onehot": ModelVariant(task_embedding="onehot"),
}

# variants studied as ablations of the architecture
ABLATION_PRESETS = tuple(k for k in _PRESETS if k not in ("mtnp", "stnp", "jtnp"))


def preset_names() -> Tuple[str, ...]:
    return tuple(_PRESETS)


def variant_from_name(name: str, **overrides) -> ModelVariant:
    key = name.lower().replace("-", "_")
    if key not in _PRESETS:
        raise ConfigError(f"unknown variant {name!r}; known: {sorted(_PRESETS)}")
    return replace(_PRESETS[key], **overrides) if overrides else _PRESETS[key]
