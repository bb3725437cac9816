"""Experiment orchestration: config, run modes, metrics emission.

A full run wires the stages together: score-guided noise optimization
(with pruned diagnostics), catalog construction, then guided sampling with
the same catalog. The ablation matrix drops one stage at a time: v1 skips
the optimizer, v2 skips pruning, baseline skips both.

Reports are reproducible by construction: everything except wall-clock time
lives in a canonical payload, floats are quantized to 9 significant digits
before serialization, and identical configs yield byte-identical canonical
JSON.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .latent_mapper import (
    MapperConfig,
    NoiseDistribution,
    OptimizeResult,
    optimize_noise,
    score_noise,
)
from .sim_prune import PruneCatalog, build_catalog
from .toy_pipeline import PipelineHandle, build_pipeline, sample, self_attention_input

log = logging.getLogger("latentprune")

MODES = ("full", "v1_no_mapper", "v2_no_prune", "baseline")

CSV_HEADER = (
    "mode", "seed", "s_cross", "s_self", "valid", "kl",
    "mac_ratio", "wall_ms", "z0_checksum",
)


class ConfigError(ValueError):
    """Invalid configuration; carries the dotted field path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass
class PipelineSettings:
    height: int = 16
    width: int = 16
    latent_channels: int = 8
    text_channels: int = 16
    attn_dim: int = 16
    hidden_dim: int = 32
    num_steps: int = 50
    guidance_scale: float = 7.5
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    token_ids: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    subject_indices: list[int] = field(default_factory=lambda: [1, 3])


@dataclass
class PruneSettings:
    gamma: float = 0.4
    patch_size: int = 2
    noise_sigma: float | None = None  # None = scale-relative default
    seed: int = 99


@dataclass
class RunSettings:
    mode: str = "full"
    repetitions: int = 1
    seed: int = 7
    out: str = "reports.json"
    format: str = "json"


@dataclass
class ExperimentConfig:
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    prune: PruneSettings = field(default_factory=PruneSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> None:
        p = self.pipeline
        for name in ("height", "width", "latent_channels", "text_channels",
                     "attn_dim", "hidden_dim", "num_steps"):
            if getattr(p, name) < 1:
                raise ConfigError(f"pipeline.{name}", "must be >= 1")
        if not 0 < p.beta_start <= p.beta_end < 1:
            raise ConfigError(
                "pipeline.beta_start", "need 0 < beta_start <= beta_end < 1"
            )
        m = len(p.token_ids)
        for idx in p.subject_indices:
            if not 0 <= idx < m:
                raise ConfigError(
                    "prompt.subject_indices",
                    f"index {idx} outside prompt of length {m}",
                )
        pr = self.prune
        if not 0.0 <= pr.gamma <= 1.0:
            raise ConfigError("prune.gamma", f"must be in [0, 1], got {pr.gamma}")
        if pr.patch_size < 1:
            raise ConfigError("prune.patch_size", "must be >= 1")
        if pr.gamma > 0 and (p.height % pr.patch_size or p.width % pr.patch_size):
            raise ConfigError(
                "prune.patch_size",
                f"{pr.patch_size} does not tile a {p.height}x{p.width} grid",
            )
        if pr.noise_sigma is not None and pr.noise_sigma < 0:
            raise ConfigError("prune.noise_sigma", "must be >= 0 or auto")
        r = self.run
        if r.mode not in MODES:
            raise ConfigError("run.mode", f"must be one of {MODES}, got {r.mode!r}")
        if r.repetitions < 1:
            raise ConfigError("run.repetitions", "must be >= 1")
        if r.format not in ("json", "csv"):
            raise ConfigError("run.format", f"must be json or csv, got {r.format!r}")


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat `section.key = value` config format.

    Blank lines and `#` comments are ignored; later keys override earlier
    ones.
    """
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {value!r}") from None


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {value!r}") from None


def _parse_int_list(key: str, value: str) -> list[int]:
    if not value:
        return []
    return [_parse_int(key, item.strip()) for item in value.split(",")]


def config_from_mapping(entries: dict[str, str]) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from parsed key/value pairs."""
    cfg = ExperimentConfig()
    int_fields = {
        "pipeline.height": ("pipeline", "height"),
        "pipeline.width": ("pipeline", "width"),
        "pipeline.latent_channels": ("pipeline", "latent_channels"),
        "pipeline.text_channels": ("pipeline", "text_channels"),
        "pipeline.attn_dim": ("pipeline", "attn_dim"),
        "pipeline.hidden_dim": ("pipeline", "hidden_dim"),
        "pipeline.num_steps": ("pipeline", "num_steps"),
        "pipeline.seed": ("pipeline", "seed"),
        "mapper.inner_steps": ("mapper", "inner_steps"),
        "mapper.outer_rounds": ("mapper", "outer_rounds"),
        "prune.patch_size": ("prune", "patch_size"),
        "prune.seed": ("prune", "seed"),
        "run.repetitions": ("run", "repetitions"),
        "run.seed": ("run", "seed"),
    }
    float_fields = {
        "pipeline.guidance_scale": ("pipeline", "guidance_scale"),
        "pipeline.beta_start": ("pipeline", "beta_start"),
        "pipeline.beta_end": ("pipeline", "beta_end"),
        "mapper.tau_cross": ("mapper", "tau_cross"),
        "mapper.tau_self": ("mapper", "tau_self"),
        "mapper.lambda_kl": ("mapper", "lambda_kl"),
        "mapper.learning_rate": ("mapper", "learning_rate"),
        "mapper.fd_epsilon": ("mapper", "fd_epsilon"),
        "prune.gamma": ("prune", "gamma"),
    }
    str_fields = {
        "mapper.gradient_mode": ("mapper", "gradient_mode"),
        "run.mode": ("run", "mode"),
        "run.out": ("run", "out"),
        "run.format": ("run", "format"),
    }
    for key, value in entries.items():
        if key in int_fields:
            section, name = int_fields[key]
            setattr(getattr(cfg, section), name, _parse_int(key, value))
        elif key in float_fields:
            section, name = float_fields[key]
            setattr(getattr(cfg, section), name, _parse_float(key, value))
        elif key in str_fields:
            section, name = str_fields[key]
            setattr(getattr(cfg, section), name, value)
        elif key == "prompt.token_ids":
            cfg.pipeline.token_ids = _parse_int_list(key, value)
        elif key == "prompt.subject_indices":
            cfg.pipeline.subject_indices = _parse_int_list(key, value)
        elif key == "prune.noise_sigma":
            cfg.prune.noise_sigma = (
                None if value.lower() == "auto" else _parse_float(key, value)
            )
        else:
            raise ConfigError(key, "unknown configuration key")
    try:
        # Re-run MapperConfig's own checks against the overridden values.
        MapperConfig(**asdict(cfg.mapper))
    except ValueError as exc:
        raise ConfigError("mapper", str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config file: {exc}") from None
    return config_from_mapping(parse_config_text(text))


@dataclass
class RunReport:
    """Everything one repetition produced, ready for serialization."""

    mode: str
    repetition: int
    pipeline_seed: int
    noise_seed: int
    prune_seed: int | None
    s_cross: float
    s_self: float
    valid: bool
    kl: float
    s_cross_trajectory: list[float]
    s_self_trajectory: list[float]
    loss_trace: list[float]
    mac_baseline: int
    mac_pruned: int
    mac_ratio: float
    wall_ms: float
    catalog: dict | None
    z0_checksum: str

    def to_payload(self) -> dict:
        payload = {
            "mode": self.mode,
            "repetition": self.repetition,
            "pipeline_seed": self.pipeline_seed,
            "noise_seed": self.noise_seed,
            "prune_seed": self.prune_seed,
            "s_cross": _q(self.s_cross),
            "s_self": _q(self.s_self),
            "valid": self.valid,
            "kl": _q(self.kl),
            "s_cross_trajectory": [_q(v) for v in self.s_cross_trajectory],
            "s_self_trajectory": [_q(v) for v in self.s_self_trajectory],
            "loss_trace": [_q(v) for v in self.loss_trace],
            "mac_baseline": self.mac_baseline,
            "mac_pruned": self.mac_pruned,
            "mac_ratio": _q(self.mac_ratio),
            "wall_ms": _q(self.wall_ms),
            "catalog": _quantize_catalog(self.catalog),
            "z0_checksum": self.z0_checksum,
        }
        return payload

    def canonical_payload(self) -> dict:
        payload = self.to_payload()
        del payload["wall_ms"]
        return payload


def _q(x: float) -> float:
    """Quantize to 9 significant digits; repr then round-trips bytewise."""
    return float(f"{float(x):.9g}")


def _quantize_catalog(summary: dict | None) -> dict | None:
    if summary is None:
        return None
    out = dict(summary)
    for key in ("gamma", "noise_sigma"):
        out[key] = _q(out[key])
    return out


def _checksum_array(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def run_single(
    config: ExperimentConfig,
    pipeline: PipelineHandle,
    repetition: int,
) -> RunReport:
    """Execute one repetition of the configured mode."""
    mode = config.run.mode
    noise_seed = config.run.seed + repetition
    mapper_cfg = config.mapper
    started = time.perf_counter()

    init = NoiseDistribution.standard(pipeline.latent_dim, noise_seed, stream=0)
    raw_noise = init.transform()

    catalog: PruneCatalog | None = None
    prune_seed: int | None = None
    if mode in ("full", "v1_no_mapper") and config.prune.gamma > 0:
        tokens = self_attention_input(pipeline, raw_noise, pipeline.num_steps)
        catalog = build_catalog(
            tokens,
            gamma=config.prune.gamma,
            patch_size=config.prune.patch_size,
            noise_sigma=config.prune.noise_sigma,
            seed=config.prune.seed,
        )
        prune_seed = config.prune.seed

    result: OptimizeResult | None = None
    if mode in ("full", "v2_no_prune"):
        result = optimize_noise(mapper_cfg, pipeline, noise_seed, prune=catalog)
        initial = result.distribution.transform()
        scores = result.scores
        kl = result.kl
        trace = result.trace
        score_trace = result.rounds[result.best_round].score_trace
        s_cross_traj = [s.s_cross for s in score_trace]
        s_self_traj = [s.s_self for s in score_trace]
    else:
        initial = raw_noise
        scores = score_noise(
            init, pipeline, prune=catalog,
            tau_cross=mapper_cfg.tau_cross, tau_self=mapper_cfg.tau_self,
        )
        kl = 0.0
        trace = []
        s_cross_traj = [scores.s_cross]
        s_self_traj = [scores.s_self]

    sample_result = sample(pipeline, initial, prune=catalog)
    wall_ms = (time.perf_counter() - started) * 1e3

    return RunReport(
        mode=mode,
        repetition=repetition,
        pipeline_seed=config.pipeline.seed,
        noise_seed=noise_seed,
        prune_seed=prune_seed,
        s_cross=scores.s_cross,
        s_self=scores.s_self,
        valid=scores.valid,
        kl=kl,
        s_cross_trajectory=s_cross_traj,
        s_self_trajectory=s_self_traj,
        loss_trace=list(trace),
        mac_baseline=sample_result.mac_baseline,
        mac_pruned=sample_result.mac_pruned,
        mac_ratio=sample_result.mac_ratio,
        wall_ms=wall_ms,
        catalog=catalog.summary() if catalog is not None else None,
        z0_checksum=_checksum_array(sample_result.z0),
    )


def build_pipeline_from(config: ExperimentConfig) -> PipelineHandle:
    p = config.pipeline
    return build_pipeline(
        height=p.height,
        width=p.width,
        latent_channels=p.latent_channels,
        text_channels=p.text_channels,
        attn_dim=p.attn_dim,
        hidden_dim=p.hidden_dim,
        num_steps=p.num_steps,
        guidance_scale=p.guidance_scale,
        beta_start=p.beta_start,
        beta_end=p.beta_end,
        seed=p.seed,
        token_ids=p.token_ids,
        subject_indices=p.subject_indices,
    )


def run_experiment(config: ExperimentConfig) -> list[RunReport]:
    """Run every repetition and write reports to the configured output.

    Report order follows the repetition index. The main report file lands at
    run.out in run.format; a canonical JSON twin (wall-clock stripped) lands
    next to it for determinism audits.
    """
    config.validate()
    pipeline = build_pipeline_from(config)
    reports = []
    for rep in range(config.run.repetitions):
        log.info("repetition %d/%d (mode=%s)", rep + 1,
                 config.run.repetitions, config.run.mode)
        reports.append(run_single(config, pipeline, rep))
    out = Path(config.run.out)
    emit_metrics(reports, out, config.run.format)
    write_canonical(reports, canonical_path(out))
    return reports


def canonical_path(out: Path) -> Path:
    return out.with_suffix(".canonical.json")


def reports_to_json(reports: list[RunReport]) -> str:
    return json.dumps(
        [r.to_payload() for r in reports], sort_keys=True, indent=2
    ) + "\n"


def reports_to_canonical_json(reports: list[RunReport]) -> str:
    return json.dumps(
        [r.canonical_payload() for r in reports], sort_keys=True, indent=2
    ) + "\n"


def reports_to_csv(reports: list[RunReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow([
            r.mode,
            r.noise_seed,
            f"{r.s_cross:.9g}",
            f"{r.s_self:.9g}",
            str(r.valid).lower(),
            f"{r.kl:.9g}",
            f"{r.mac_ratio:.9g}",
            f"{r.wall_ms:.9g}",
            r.z0_checksum,
        ])
    return buf.getvalue()


def emit_metrics(reports: list[RunReport], path: str | Path, format: str) -> Path:
    """Write the report list as JSON or CSV; empty lists are rejected."""
    if not reports:
        raise ValueError("cannot emit metrics for an empty report list")
    if format == "json":
        text = reports_to_json(reports)
    elif format == "csv":
        text = reports_to_csv(reports)
    else:
        raise ValueError(f"unknown format {format!r}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def write_canonical(reports: list[RunReport], path: str | Path) -> Path:
    if not reports:
        raise ValueError("cannot emit metrics for an empty report list")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(reports_to_canonical_json(reports))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path
