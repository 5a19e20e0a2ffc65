"""Training loop, checkpoints and the end-to-end generator bundle."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .data import FeatureScaler, apply_scaler, fit_feature_scaler
from .denoiser import Condition, Denoiser, DenoiserConfig, make_condition
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cosine_schedule,
    generate_od,
    log_transform,
    training_step,
)
from .graph import AreaSpatialCharacteristics, ODMatrix

log = logging.getLogger(__name__)

PARAMS_FILE = "params.pt"
MANIFEST_FILE = "manifest.json"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}
# headroom above the largest training log-flow allowed for predicted x0
CLIP_HEADROOM = math.log(10.0)


@dataclass
class DiffusionTrainConfig:
    T: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    n_layers: int = 4
    hidden_dim: int = 32
    n_heads: int = 4
    edge_fusion: str = "additive"
    distance_encoding: str = "log"
    log_features: bool = False
    steps: int = 2000
    grad_accum: int = 1
    lr_schedule: str = "constant"  # or "cosine"
    ema_decay: float = 0.0  # 0 disables the weight average
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 0

    def __post_init__(self):
        for name in ("T", "steps", "grad_accum", "n_layers", "hidden_dim", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionTrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"split"}
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            n_layers=self.n_layers,
            hidden_dim=self.hidden_dim,
            n_heads=self.n_heads,
            edge_fusion=self.edge_fusion,
            distance_encoding=self.distance_encoding,
            T=self.T,
        )


def corpus_hash(data: Iterable[tuple[AreaSpatialCharacteristics, ODMatrix]]) -> str:
    h = hashlib.sha256()
    for area, od in data:
        h.update(area.area_id.encode())
        h.update(area.feature_matrix.tobytes())
        h.update(area.distances.tobytes())
        h.update(od.flows.tobytes())
    return h.hexdigest()


@dataclass
class WeDAN:
    """Trained denoiser plus everything needed to generate for new areas."""

    model: Denoiser
    schedule: NoiseSchedule
    scaler: FeatureScaler
    config: DiffusionTrainConfig
    history: list[float] = field(default_factory=list)
    manifest_extra: dict = field(default_factory=dict)

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    def condition(self, area: AreaSpatialCharacteristics) -> Condition:
        return make_condition(apply_scaler(self.scaler, area), self.config.hidden_dim, self.dtype)

    @property
    def clip_range(self) -> Optional[tuple[float, float]]:
        hi = self.manifest_extra.get("max_log_flow")
        return None if hi is None else (0.0, float(hi) + CLIP_HEADROOM)

    def generate(self, area: AreaSpatialCharacteristics, sampler: SamplerConfig = SamplerConfig(), seed: int = 0) -> ODMatrix:
        """Without an explicit ``sampler.clip_x0``, DDIM updates clamp x0 to
        [0, largest training log-flow + log 10]."""
        self.model.eval()
        if sampler.update == "ddim" and sampler.clip_x0 is None and self.clip_range is not None:
            sampler = replace(sampler, clip_x0=self.clip_range)
        return generate_od(self.model, self.condition(area), self.schedule, sampler, seed, self.dtype)

    # ---- checkpoints

    def save(self, out_dir, extra: Optional[dict] = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), out / PARAMS_FILE)
        manifest = {
            "schedule": {"kind": "cosine", "s": self.schedule.s, "max_beta": 0.999},
            "T": self.schedule.T,
            "layer_config": self.model.config.to_dict(),
            "train_config": asdict(self.config),
            "scaler": self.scaler.to_dict(),
            "seed": self.config.seed,
            "parameters": {k: list(v.shape) for k, v in self.model.state_dict().items()},
            **self.manifest_extra,
            **(extra or {}),
        }
        (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return out

    @classmethod
    def load(cls, ckpt_dir) -> "WeDAN":
        root = Path(ckpt_dir)
        manifest = json.loads((root / MANIFEST_FILE).read_text(encoding="utf-8"))
        config = DiffusionTrainConfig.from_dict(manifest["train_config"])
        model = Denoiser(DenoiserConfig(**manifest["layer_config"])).to(_DTYPES[config.dtype])
        model.load_state_dict(torch.load(root / PARAMS_FILE, weights_only=True))
        model.eval()
        schedule = cosine_schedule(manifest["T"], manifest["schedule"]["s"])
        known = {"schedule", "T", "layer_config", "train_config", "scaler", "seed", "parameters"}
        extra = {k: v for k, v in manifest.items() if k not in known}
        return cls(model, schedule, FeatureScaler.from_dict(manifest["scaler"]), config, [], extra)


def prepare_batch(data, scaler: FeatureScaler, hidden_dim: int, dtype) -> list[tuple[Condition, torch.Tensor]]:
    out = []
    for area, od in data:
        cond = make_condition(apply_scaler(scaler, area), hidden_dim, dtype)
        out.append((cond, torch.as_tensor(log_transform(od.flows), dtype=dtype)))
    return out


def train_wedan(
    data: Sequence[tuple[AreaSpatialCharacteristics, ODMatrix]],
    config: DiffusionTrainConfig = DiffusionTrainConfig(),
    callback: Optional[Callable[[int, WeDAN], None]] = None,
) -> WeDAN:
    """Fit the denoiser on training areas with AdamW.

    Each optimizer update accumulates gradients over ``grad_accum`` areas
    drawn without replacement from a reshuffled pass over the corpus.
    ``callback(step, bundle)`` runs after every update with the live model.
    """
    data = list(data)
    if not data:
        raise ValueError("no training areas")
    torch.manual_seed(config.seed)
    dtype = _DTYPES[config.dtype]
    scaler = fit_feature_scaler((a for a, _ in data), log1p=config.log_features)
    prepared = prepare_batch(data, scaler, config.hidden_dim, dtype)
    model = Denoiser(config.denoiser_config()).to(dtype)
    schedule = cosine_schedule(config.T)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = None
    if config.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.steps)
    ema = None
    if config.ema_decay > 0:
        ema = torch.optim.swa_utils.AveragedModel(
            model, multi_avg_fn=torch.optim.swa_utils.get_ema_multi_avg_fn(config.ema_decay)
        )
    gen = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)

    extra = {
        "training_corpus_hash": corpus_hash(data),
        "train_area_ids": [a.area_id for a, _ in data],
        "max_log_flow": max(float(log_transform(od.flows).max()) for _, od in data),
    }
    history = []
    bundle = WeDAN(model, schedule, scaler, config, history, extra)
    queue: list[int] = []
    model.train()
    for step in range(config.steps):
        batch = []
        while len(batch) < min(config.grad_accum, len(prepared)):
            if not queue:
                queue = list(order_rng.permutation(len(prepared)))
            batch.append(prepared[queue.pop()])
        loss = training_step(model, optimizer, batch, schedule, gen)
        history.append(loss)
        if scheduler is not None:
            scheduler.step()
        if ema is not None:
            ema.update_parameters(model)
        if callback is not None:
            callback(step + 1, bundle)
            model.train()
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("step %d loss %.4f", step + 1, float(np.mean(history[-config.log_every:])))
    if ema is not None:
        model.load_state_dict(ema.module.state_dict())
    model.eval()
    return bundle
