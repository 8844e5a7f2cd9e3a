"""TOML ingestion for model and topology descriptions, plus bundled presets.

``INFERSIM_FIXTURES`` points the preset lookup at another directory with the
same ``models/`` and ``topologies/`` layout.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .hardware import DeviceSpec, LinkKind, LinkSpec, MemoryTier, Topology, build_topology
from .model import ModelConfig, MoEConfig

FIXTURES_ENV = "INFERSIM_FIXTURES"


class ConfigError(ValueError):
    """A config file is missing, unparsable or violates a field constraint."""


@dataclass(frozen=True)
class ParallelLayout:
    """The parallelism columns recorded next to a model preset."""

    mp_degree: int = 1
    ep_degree: int = 1
    expert_slicing: int = 1
    num_gpus: int = 1


@dataclass(frozen=True)
class ModelPreset:
    config: ModelConfig
    reference_params: Optional[float] = None
    parallel: Optional[ParallelLayout] = None


def fixtures_dir() -> Path:
    override = os.environ.get(FIXTURES_ENV)
    if override:
        return Path(override)
    return Path(__file__).parent / "fixtures"


def _read_toml(path: Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _resolve(path_or_name: str | os.PathLike, kind: str) -> Path:
    p = Path(path_or_name)
    if p.suffix == ".toml" or p.exists():
        return p
    return fixtures_dir() / kind / f"{path_or_name}.toml"


def model_from_dict(raw: dict[str, Any]) -> ModelPreset:
    raw = dict(raw)
    moe_raw = raw.pop("moe", None)
    par_raw = raw.pop("parallel", None)
    ref = raw.pop("reference_params", None)
    try:
        moe = MoEConfig(**moe_raw) if moe_raw else None
        cfg = ModelConfig(moe=moe, **raw)
        parallel = ParallelLayout(**par_raw) if par_raw else None
    except TypeError as exc:
        raise ConfigError(f"bad model config field: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ModelPreset(cfg, ref, parallel)


def load_model(path_or_name: str | os.PathLike) -> ModelPreset:
    """Load a model preset by bundled name (e.g. ``"gpt2"``) or TOML path."""
    return model_from_dict(_read_toml(_resolve(path_or_name, "models")))


def topology_from_dict(raw: dict[str, Any], num_nodes: Optional[int] = None) -> Topology:
    try:
        dev = dict(raw["device"])
        device = DeviceSpec(peak_flops_by_dtype=dict(dev.pop("peak_flops")), **dev)
        links = {
            key: LinkSpec(kind=kind, **raw[key])
            for key, kind in (
                ("intra", LinkKind.INTRA_NODE),
                ("inter", LinkKind.INTER_NODE),
                ("pcie", LinkKind.PCIE),
            )
        }
        tiers = {name: MemoryTier(**t) for name, t in raw.get("tiers", {}).items()}
        pairs = raw.get("pcie_share_pairs")
        return build_topology(
            num_nodes or raw.get("num_nodes", 1),
            raw["gpus_per_node"],
            device,
            pcie_share_pairs=[tuple(p) for p in pairs] if pairs is not None else None,
            tiers=tiers,
            name=raw.get("name", ""),
            **links,
        )
    except KeyError as exc:
        raise ConfigError(f"topology config missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad topology config: {exc}") from exc


def load_topology(path_or_name: str | os.PathLike, num_nodes: Optional[int] = None) -> Topology:
    """Load a topology preset by name (e.g. ``"dgx_a100_8x"``) or TOML path."""
    return topology_from_dict(_read_toml(_resolve(path_or_name, "topologies")), num_nodes)


def list_presets(kind: str) -> list[str]:
    return sorted(p.stem for p in (fixtures_dir() / kind).glob("*.toml"))
