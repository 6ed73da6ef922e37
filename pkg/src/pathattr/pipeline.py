"""End-to-end run: train, evaluate, attribute, rank regions, project embeddings.

Everything written under the output directory is a pure function of the
config, except ``timing.json``.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .attribution import METHODS, AttributionConfig, attribute
from .data import Dataset
from .embedding import cluster_spread, extract_embeddings, pca_project, unit_rms, write_projection_csv
from .io import (
    ensure_dir,
    load_dataset,
    read_manifest,
    render_heatmap,
    render_overlay,
    save_rank_map,
    save_saliency,
)
from .model import CnnOracle, forward, init_params, save_checkpoint
from .regions import DEFAULT_SCALES, top_fraction_mask, xrai
from .synth import SynthSpec, synthesize
from .trainer import EpisodicConfig, TrainingConfig, train

log = logging.getLogger(__name__)

FAILED_MARKER = "FAILED"


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class PipelineConfig:
    output_dir: str = "run"
    seed: int | None = None
    manifest: str | None = None
    synth: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    episodic: dict | None = None
    attribution: dict = field(default_factory=dict)
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    samples: int = 3
    scales: list[float] = field(default_factory=lambda: list(DEFAULT_SCALES))
    fraction: float = 0.1
    base_method: str = "ig"
    projection_dims: int = 2

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.base_method not in METHODS:
            raise ValueError(f"unknown base_method {self.base_method!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if self.samples < 0:
            raise ValueError("samples must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline options: {sorted(unknown)}")
        return cls(**copy.deepcopy(dict(d)))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def training_config(self) -> TrainingConfig:
        opts = dict(self.training)
        if self.seed is not None:
            opts["seed"] = self.seed
        return TrainingConfig.from_dict(opts)

    def attribution_config(self, method: str) -> AttributionConfig:
        opts = dict(self.attribution)
        if self.seed is not None:
            opts["seed"] = self.seed
        return AttributionConfig(method=method, **opts)


def load_data(config: PipelineConfig, input_shape=None) -> Dataset:
    if config.manifest:
        shape = tuple(input_shape[-2:]) if input_shape is not None else None
        return load_dataset(read_manifest(config.manifest), shape)
    return synthesize(SynthSpec(**config.synth))


class _Stages:
    """Runs named stages, timing each and tagging failures with the stage name."""

    def __init__(self, out: Path):
        self.out = out
        self.timing: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        started = time.perf_counter()
        log.info("stage %s", name)
        try:
            result = fn(*args, **kwargs)
        except Exception as exc:
            (self.out / FAILED_MARKER).write_text(f"stage: {name}\nerror: {type(exc).__name__}: {exc}\n")
            raise PipelineError(name, exc) from exc
        self.timing[name] = self.timing.get(name, 0.0) + time.perf_counter() - started
        return result


def run_pipeline(config: PipelineConfig | Mapping | str | Path) -> dict[str, Any]:
    """Execute every stage and return a summary (paths and headline numbers)."""
    if isinstance(config, (str, Path)):
        config = PipelineConfig.load(config)
    elif not isinstance(config, PipelineConfig):
        config = PipelineConfig.from_dict(config)

    out = ensure_dir(config.output_dir)
    (out / FAILED_MARKER).unlink(missing_ok=True)
    stages = _Stages(out)
    summary: dict[str, Any] = {"output_dir": str(out), "saliency": [], "rank_maps": []}

    tcfg = stages.run("config", config.training_config)
    episodic = stages.run("config", lambda: EpisodicConfig(**config.episodic) if config.episodic else None)
    (out / "config.json").write_text(json.dumps(asdict(config), indent=1, sort_keys=True) + "\n")

    dataset = stages.run("data", load_data, config, tcfg.input_shape)
    params, metrics = stages.run("train", train, dataset, tcfg, episodic)

    def write_evaluation():
        save_checkpoint(params, out / "model.ckpt")
        metrics.to_json(out / "metrics.json")
        metrics.to_csv(out / "metrics.csv")

    stages.run("evaluate", write_evaluation)
    summary["accuracy"] = metrics.accuracy
    test_idx = np.asarray(metrics.test_indices, dtype=np.int64)

    if config.methods:
        picks = test_idx[: config.samples]
        maps = stages.run("attribute", _attribute_samples, config, params, dataset, picks, out, summary)
        stages.run("xrai", _rank_samples, config, params, dataset, picks, maps, out, summary)

    if config.projection_dims > 0:
        stages.run("project", _project, config, tcfg, params, dataset.subset(test_idx), out, summary)

    (out / "timing.json").write_text(json.dumps(stages.timing, indent=1, sort_keys=True) + "\n")
    return summary


def _attribute_samples(config, params, dataset, picks, out, summary):
    oracle = CnnOracle(params)
    ensure_dir(out / "saliency")
    ensure_dir(out / "renders")
    maps: dict[tuple[str, int], Any] = {}
    for method in config.methods:
        acfg = config.attribution_config(method)
        for idx in picks:
            x = dataset.images[idx]
            target = forward(params, x).predicted_class
            smap = attribute(oracle, x, target, acfg)
            stem = f"{method}_{idx:05d}"
            save_saliency(out / "saliency" / f"{stem}.sal", smap)
            render_heatmap(smap.values, out / "renders" / f"{stem}.png")
            summary["saliency"].append(f"saliency/{stem}.sal")
            maps[method, int(idx)] = smap
    return maps


def _rank_samples(config, params, dataset, picks, maps, out, summary):
    oracle = CnnOracle(params)
    ensure_dir(out / "regions")
    overlap = []
    for idx in picks:
        x = dataset.images[idx]
        smap = maps.get((config.base_method, int(idx)))
        if smap is None:
            target = forward(params, x).predicted_class
            smap = attribute(oracle, x, target, config.attribution_config(config.base_method))
        image = x.reshape(x.shape[-2:])
        rank_map, _ = xrai(smap.values.reshape(image.shape), image, config.scales)
        stem = f"xrai_{idx:05d}"
        save_rank_map(out / "regions" / f"{stem}.rank", rank_map)
        mask = top_fraction_mask(rank_map, config.fraction)
        render_overlay(image, mask, out / "renders" / f"{stem}_top.png")
        summary["rank_maps"].append(f"regions/{stem}.rank")
        if dataset.masks is not None:
            truth = dataset.masks[idx]
            render_overlay(image, truth, out / "renders" / f"truth_{idx:05d}.png")
            overlap.append(float((mask & truth).sum() / mask.sum()))
    if overlap:
        summary["localization"] = float(np.mean(overlap))


def _project(config, tcfg, params, test_set, out, summary):
    k = config.projection_dims
    untrained = init_params(tcfg.layer_spec(test_set.num_classes), tcfg.seed)
    spreads = {}
    for name, p in (("untrained", untrained), ("trained", params)):
        emb = extract_embeddings(p, test_set)
        result = pca_project(emb, k)
        coords = unit_rms(result.coordinates)
        per_class, overall = cluster_spread(coords, emb.labels)
        spreads[name] = {
            "per_class": {test_set.class_names[c]: v for c, v in per_class.items()},
            "mean": overall,
            "explained_variance": result.explained_variance.tolist(),
        }
        if name == "trained":
            write_projection_csv(out / "projection.csv", coords, emb.labels, test_set.class_names)
    (out / "embedding.json").write_text(json.dumps(spreads, indent=1, sort_keys=True) + "\n")
    summary["spread"] = {name: s["mean"] for name, s in spreads.items()}


__all__ = ["FAILED_MARKER", "PipelineConfig", "PipelineError", "load_data", "run_pipeline"]
